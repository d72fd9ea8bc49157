"""Quick end-to-end check of the Python bindings.

Build and install first:  pip install --no-build-isolation ./crates/python
"""

import json
import math
import random

import pvawb


def main():
    cells, diffs = pvawb.verify()
    assert diffs == [], diffs
    print(f"verify: {cells} cells, no mismatches")

    g = pvawb.Graph.build("pvanet")
    shapes = g.infer_shapes()
    assert shapes["convf"] == (66, 40, 512)
    cost = g.cost()
    rows = {r[0]: r for r in cost["rows"]}
    assert rows["conv5_4"][1] == (33, 20, 384) and rows["conv2_2"][4] == "9.8K"
    assert cost["table_totals"] == ("3282K", "7942M")
    assert pvawb.Graph.from_json(g.to_json()).to_json() == g.to_json()
    assert json.loads(g.to_json())["name"] == g.name
    print(f"{g!r}: totals {cost['table_totals']}")

    full = list(pvawb.detection_gmac(200))
    small = list(pvawb.detection_gmac(200, compressed=True))
    assert full == [7.9, 1.4, 18.5, 27.8] and small[2:] == [3.2, 12.5]
    print(f"GMAC full {full}, compressed {small}")

    dist = g.rf_distribution("convf")
    assert dist[0][0] == pvawb.path_rf([(7, 2), (3, 2)])[0] == 11
    assert sum(n for _, n in dist) == 449301654
    try:
        g.rf_distribution("convf", path_cap=10**6)
    except ValueError as e:
        print(f"rf cap enforced: {e}")
    else:
        raise AssertionError("expected a path explosion")

    rng = random.Random(0)
    boxes, scores = [], []
    for _ in range(150):
        x, y = rng.uniform(0, 100), rng.uniform(0, 100)
        boxes.append((x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30)))
        scores.append(rng.random())
    kept = pvawb.nms(boxes, scores, 0.4)
    for i in kept:
        for j in kept:
            assert i == j or pvawb.iou(boxes[i], boxes[j]) <= 0.4
    voted = pvawb.bbox_vote([boxes[i] for i in kept], [scores[i] for i in kept], boxes, scores)
    assert len(voted) == len(kept)
    anchors = pvawb.gen_anchors(2, 3)
    assert len(anchors) == 42 * 6
    print(f"nms kept {len(kept)} of {len(boxes)}, {len(anchors)} anchors")

    w = [[rng.uniform(-1, 1) for _ in range(7)] for _ in range(9)]
    u, sigma, v = pvawb.svd(w)
    assert all(a >= b for a, b in zip(sigma, sigma[1:]))
    first, second = pvawb.compress_fc(w, [0.0] * 9, 3)
    approx = [[sum(second[i][r] * first[r][j] for r in range(3)) for j in range(7)] for i in range(9)]
    err = math.sqrt(sum((approx[i][j] - w[i][j]) ** 2 for i in range(9) for j in range(7)))
    assert abs(err - pvawb.tail_error(sigma, 3)) < 1e-9
    print(f"rank-3 error {err:.6f}")

    s = pvawb.PlateauScheduler(patience=5, window=2)
    decays = 0
    for t in range(100):
        lr, _, decayed, stop = s.step(1.0)
        decays += decayed
        if stop:
            break
    assert decays == 7 and t == 35 and lr < 1e-4
    print(f"scheduler stopped at step {t} with lr {lr:.3e}")
    print("ok")


if __name__ == "__main__":
    main()
