import json

import numpy as np
import pytest

from bevloc.cli import TARGET_COLOR, _box_pixels, main
from bevloc.dataset import BevDataset, read_ppm

TINY = {
    "camera": {"width_px": 64, "height_px": 48},
    "protocol": {"maps": 1, "egos_per_map": 2, "frames_per_ego": 5, "weathers": 2},
    "train": {"image_pool": 1},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


def _json(path):
    return json.loads(path.read_text())


def test_gen_prints_counts_and_echoes_config(workspace, capsys):
    root, cfg = workspace
    assert main(["gen", "--config", str(cfg), "--out", str(root / "again"), "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "frames 20" in out and "records" in out and "vertical dominant" in out
    echoed = _json(root / "again" / "config.json")
    assert echoed["command"] == "gen" and echoed["camera"]["width_px"] == 64
    assert (root / "again" / "manifest.json").read_bytes() == (root / "data" / "manifest.json").read_bytes()


def test_gen_refuses_overwrite(workspace, capsys):
    root, cfg = workspace
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data")]) != 0
    assert "--force" in capsys.readouterr().err


def test_gen_force_reproduces_checksum(workspace):
    root, cfg = workspace
    before = _json(root / "data" / "manifest.json")["checksum"]
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data"), "--force"]) == 0
    assert _json(root / "data" / "manifest.json")["checksum"] == before


def test_bad_config_is_an_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "x")]) != 0
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "x")]) != 0
    assert "unknown sections" in capsys.readouterr().err


def test_train_zero_epochs_writes_initialized_checkpoint(workspace):
    root, cfg = workspace
    out = root / "init"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out), "--epochs", "0"]) == 0
    assert (out / "model.ckpt").exists()
    assert (out / "history.jsonl").read_text() == ""
    assert _json(out / "config.json")["train"]["epochs"] == 0


def test_train_twice_gives_identical_history(workspace):
    root, cfg = workspace
    args = ["train", "--config", str(cfg), "--data", str(root / "data"), "--epochs", "3", "--lr", "0.002"]
    assert main(args + ["--out", str(root / "t1")]) == 0
    assert main(args + ["--out", str(root / "t2")]) == 0
    h1 = (root / "t1" / "history.jsonl").read_bytes()
    assert h1 == (root / "t2" / "history.jsonl").read_bytes()
    assert len(h1.splitlines()) == 3
    assert (root / "t1" / "model.ckpt").read_bytes() == (root / "t2" / "model.ckpt").read_bytes()
    assert _json(root / "t1" / "config.json")["train"]["learning_rate"] == 0.002


def test_eval_oracle_is_perfect(workspace):
    root, _ = workspace
    assert main(["eval", "--data", str(root / "data"), "--predictor", "oracle", "--out", str(root / "ev")]) == 0
    s = _json(root / "ev" / "summary.json")
    assert s["mIoU"] == 1.0 and s["mCD"] == 0.0


def test_eval_model_with_baseline_and_meters(workspace, capsys):
    root, _ = workspace
    ck = root / "t1" / "model.ckpt"
    args = ["eval", "--data", str(root / "data"), "--checkpoint", str(ck), "--baseline", "ipm"]
    assert main(args + ["--out", str(root / "px")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("model:") and "\nipm:" in out
    assert main(args + ["--out", str(root / "m"), "--grid-meters"]) == 0
    px, m = _json(root / "px" / "summary.json"), _json(root / "m" / "summary.json")
    assert m["mCD"] == pytest.approx(px["mCD"] / 4) and m["cd_unit"] == "m"
    b = _json(root / "px" / "baseline_ipm" / "summary.json")
    assert b["n"] > 0
    assert (root / "px" / "per_record.csv").exists()


def test_eval_missing_checkpoint(workspace, capsys):
    root, _ = workspace
    assert main(["eval", "--data", str(root / "data"), "--checkpoint", str(root / "nope.ckpt"), "--out", str(root / "x")]) != 0
    assert "checkpoint" in capsys.readouterr().err


def test_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) != 0


def test_inspect_writes_overlays(workspace):
    root, _ = workspace
    out = root / "ins"
    ck = root / "t1" / "model.ckpt"
    assert main(["inspect", "--data", str(root / "data"), "--id", "0", "--out", str(out), "--predict", str(ck)]) == 0
    pv, bev = read_ppm(out / "pv_000000.ppm"), read_ppm(out / "bev_000000.ppm")
    assert pv.shape == (48, 64, 3) and bev.shape == (200, 200, 3)
    rec = BevDataset(root / "data").read_record(0, with_images=False)
    for img, box in ((bev, rec.bbox_bev), (pv, rec.bbox_rgb)):
        x0, y0, x1, y1 = _box_pixels(box, img.shape[1], img.shape[0])
        green = np.all(img == TARGET_COLOR, axis=-1)
        ys, xs = np.nonzero(green)
        assert (xs.min(), ys.min(), xs.max(), ys.max()) == (x0, y0, x1, y1)


def test_inspect_unknown_id(workspace, capsys):
    root, _ = workspace
    assert main(["inspect", "--data", str(root / "data"), "--id", "99999", "--out", str(root / "bad")]) != 0
    assert "unknown record id" in capsys.readouterr().err


def test_box_pixels_oracle():
    assert _box_pixels((10.2, 3.0, 20.0, 7.5), 200, 200) == (10, 3, 19, 7)
    assert _box_pixels((195.0, 0.0, 200.0, 4.0), 200, 200) == (195, 0, 199, 3)
    assert _box_pixels((5.0, 5.0, 5.0, 9.0), 200, 200) is None
