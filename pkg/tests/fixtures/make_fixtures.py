"""Regenerate the table fixtures: python tests/fixtures/make_fixtures.py"""
import json
from pathlib import Path

HERE = Path(__file__).parent


def road(k):
    return [[10, 20 + 100 * k], [1200, 45 + 100 * k]]


def roads(n):
    return [road(k) for k in range(n)]


def caption(rs):
    if not rs:
        return "No roads found"
    noun = "road" if len(rs) == 1 else "roads"
    body = ", ".join("[" + ", ".join(f"({x}, {y})" for x, y in r) + "]" for r in rs)
    return f"Found {len(rs)} {noun}. Image coordinates are as follows: [{body}]"


def write(name, cells):
    """cells: list of (count, gt_roads, pred_roads)."""
    gts, preds = [], []
    i = 0
    for count, n_gt, n_pred in cells:
        for _ in range(count):
            x, y = 34000 + 2 * i, 22000
            image_id = f"{x}_{y}"
            gts.append({"image_id": image_id, "zoom": 16, "x": x, "y": y, "roads": roads(n_gt)})
            preds.append({"image_id": image_id, "caption": caption(roads(n_pred))})
            i += 1
    out = HERE / name
    out.mkdir(exist_ok=True)
    (out / "ground_truth.json").write_text(json.dumps(gts, indent=2) + "\n")
    (out / "pred.json").write_text(json.dumps(preds, indent=2) + "\n")


# presence cells: (GT found, pred found), (GT found, pred not), (GT not, pred found), (GT not, pred not)
write("table1", [(61, 1, 1), (13, 1, 0), (18, 0, 1), (8, 0, 0)])
# count cells: (GT 1, pred 1), (GT 1, pred 2+), (GT 2+, pred 1), (GT 2+, pred 2+)
write("table2", [(12, 1, 1), (3, 1, 2), (19, 2, 1), (1, 2, 3)])
