import hashlib
import json
import socket
import subprocess
import sys
import time
from pathlib import Path

import httpx
import pytest

from roadnet.cli import main, read_tile_list
from roadnet.dataset import read_dataset, roads_to_geojson
from roadnet.geo import TileId, pixel_to_geo
from roadnet.tiles import serve_tiles

FIXTURES = Path(__file__).parent / "fixtures"


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def synth10(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "ds"
    assert main(["synth", "--seed", "7", "--n-tiles", "10", "--out", str(out)]) == 0
    return out


def test_synth_writes_images_and_dataset(synth10):
    pngs = sorted((synth10 / "images").glob("*.png"))
    assert len(pngs) == 10
    gts = json.loads((synth10 / "ground_truth.json").read_text())
    assert sum(1 for g in gts if not g["roads"]) == 4
    manifest = json.loads((synth10 / "manifest.json").read_text())
    assert manifest["counts"] == {"total": 10, "positive": 6, "negative": 4}
    # test split clamped to a tenth of a tiny corpus
    assert manifest["split"] == {"train": 9, "test": 1}
    assert main(["validate", "--dataset", str(synth10)]) == 0


def test_synth_same_seed_is_byte_identical(synth10, tmp_path):
    again = tmp_path / "again"
    assert main(["synth", "--seed", "7", "--n-tiles", "10", "--out", str(again)]) == 0
    assert tree_digest(again) == tree_digest(synth10)


def test_synth_no_images_large(tmp_path):
    out = tmp_path / "big"
    assert main(["synth", "--seed", "1", "--n-tiles", "10000", "--no-images", "--out", str(out)]) == 0
    pairs, gts, m = read_dataset(out)
    assert (m.total, m.negative, m.train, m.test) == (10000, 4000, 9900, 100)
    assert not (out / "images").exists()


def test_baseline_then_eval_with_report(synth10, tmp_path, capsys):
    pred = tmp_path / "pred.json"
    assert main(["baseline", "--images", str(synth10 / "images"), "--out", str(pred)]) == 0
    report = tmp_path / "report.json"
    capsys.readouterr()
    assert main(["eval", "--gt", str(synth10), "--pred", str(pred), "--report", str(report)]) == 0
    out = capsys.readouterr().out
    assert "accuracy: 1.00" in out
    doc = json.loads(report.read_text())
    assert doc["presence"]["accuracy"] == 1.0
    for suffix in ("presence", "count", "chamfer"):
        f = tmp_path / f"report_{suffix}.png"
        assert f.is_file() and f.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_eval_table1_text(capsys):
    code = main(["eval", "--gt", str(FIXTURES / "table1"),
                 "--pred", str(FIXTURES / "table1" / "pred.json")])
    assert code == 0
    out = capsys.readouterr().out
    assert "accuracy: 0.69  (0.6900)" in out
    assert "Ground Truth Road Found" in out and "Roads with 2+ Roads" in out


def test_eval_table2_json(capsys):
    main(["eval", "--gt", str(FIXTURES / "table2"), "--pred", str(FIXTURES / "table2" / "pred.json"),
          "--format", "json"])
    doc = json.loads(capsys.readouterr().out)
    assert doc["count"]["counts"] == [[12, 3], [19, 1]]
    assert doc["count"]["accuracy"] == 0.3714
    assert doc["count"]["accuracy_2dp"] == 0.37


def test_eval_no_figures(tmp_path):
    report = tmp_path / "r.json"
    main(["eval", "--gt", str(FIXTURES / "table1"), "--pred", str(FIXTURES / "table1" / "pred.json"),
          "--report", str(report), "--no-figures"])
    assert report.is_file()
    assert not list(tmp_path.glob("*.png"))


def test_build_from_geojson(tmp_path):
    tiles = [TileId(16, 34000 + 2 * i, 22000) for i in range(20)]
    roads = []
    for t in tiles[:12]:
        roads.append([pixel_to_geo(x, y, t) for x, y in [(-30, 200), (600, 640), (1320, 900)]])
    geo = tmp_path / "roads.geojson"
    geo.write_text(json.dumps(roads_to_geojson(roads)))
    img_dir = tmp_path / "tiles"
    img_dir.mkdir()
    for t in tiles:
        (img_dir / f"{t.image_id}.png").write_bytes(b"")
    out = tmp_path / "ds"
    assert main(["build", "--roads", str(geo), "--tiles-from", str(img_dir), "--out", str(out),
                 "--no-balance"]) == 0
    pairs, gts, m = read_dataset(out)
    assert (m.total, m.positive, m.negative) == (20, 12, 8)
    assert pairs[0].caption.startswith("Found 1 road. Image coordinates are as follows: [[(0, ")
    assert main(["validate", "--dataset", str(out)]) == 0


def test_validate_reports_corruption(synth10, tmp_path, capsys):
    bad = tmp_path / "bad"
    import shutil

    shutil.copytree(synth10, bad)
    pairs = json.loads((bad / "pairs.json").read_text())
    pairs[3]["caption"] = "Found two roads"
    (bad / "pairs.json").write_text(json.dumps(pairs, indent=2))
    capsys.readouterr()
    assert main(["validate", "--dataset", str(bad)]) == 1
    assert "pairs.json[3] grammar" in capsys.readouterr().out


def test_config_file_and_errors(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 7\n[dataset]\ntest_size = 100\n")
    out = tmp_path / "viaconfig"
    assert main(["--config", str(cfg), "synth", "--n-tiles", "10", "--no-images", "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 7

    cfg.write_text("[dataset]\nbogus = 1\n")
    assert main(["--config", str(cfg), "validate", "--dataset", str(out)]) == 2
    assert "bogus" in capsys.readouterr().err
    cfg.write_text("seed = \n")
    assert main(["--config", str(cfg), "validate", "--dataset", str(out)]) == 2
    assert main(["--config", str(tmp_path / "missing.toml"), "validate", "--dataset", str(out)]) == 2
    assert main(["validate", "--dataset", str(tmp_path / "nope")]) == 2
    assert main(["synth", "--n-tiles", "0", "--out", str(out)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", str(out)])
    assert exc.value.code == 2


def test_eval_missing_file_is_exit_1(tmp_path):
    assert main(["eval", "--gt", str(tmp_path / "none.json"), "--pred", str(tmp_path / "p.json")]) == 1


def test_read_tile_list_formats(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("16/10/20\n# comment\n16 12 20\n")
    assert read_tile_list(p) == [TileId(16, 10, 20), TileId(16, 12, 20)]
    p.write_text(json.dumps([[16, 10, 20], {"zoom": 16, "x": 12, "y": 20}]))
    assert read_tile_list(p) == [TileId(16, 10, 20), TileId(16, 12, 20)]


def test_fetch_against_mock_server(synth10, tmp_path):
    images = synth10 / "images"
    names = sorted(p.stem for p in images.glob("*.png"))
    tiles = [TileId.from_image_id(n, 16) for n in names]
    lst = tmp_path / "tiles.txt"
    lst.write_text("\n".join(f"16/{t.x}/{t.y}" for t in tiles) + "\n16/1/1\n")
    out = tmp_path / "cache"
    with serve_tiles(images) as srv:
        assert main(["fetch", "--source", srv.url, "--tiles", str(lst), "--out", str(out)]) == 0
    for n in names:
        assert (out / f"{n}.png").read_bytes() == (images / f"{n}.png").read_bytes()
    assert not (out / "1_1.png").exists()


def test_fetch_failure_exit_code(tmp_path):
    with serve_tiles(world_seed=1) as srv:
        url = srv.url
    lst = tmp_path / "tiles.txt"
    lst.write_text("16/0/0\n")
    assert main(["fetch", "--source", url, "--tiles", str(lst), "--out", str(tmp_path / "o"),
                 "--attempts", "1"]) == 1


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_subprocess(synth10):
    port = _free_port()
    proc = subprocess.Popen([sys.executable, "-m", "roadnet.cli", "serve", "--dir",
                             str(synth10 / "images"), "--port", str(port)],
                            stdout=subprocess.PIPE, text=True)
    try:
        assert proc.stdout.readline().startswith("serving on")
        name = next((synth10 / "images").glob("*.png")).stem
        x, y = name.split("_")
        r = httpx.get(f"http://127.0.0.1:{port}/tiles/16/{x}/{y}.png")
        assert r.status_code == 200
        assert httpx.get(f"http://127.0.0.1:{port}/healthz").text == "ok"
    finally:
        proc.terminate()
        assert proc.wait(timeout=10) == 0
