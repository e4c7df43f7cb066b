"""Acceptance gate: one PASS/FAIL line per criterion (see the terminal summary).

Tolerances here are fixed targets; do not loosen them to make a run pass.
"""

import json
import math
import time

import numpy as np
import pytest

from bevloc import nn
from bevloc.bevnet import BevRegressor, ipm_predict
from bevloc.cli import PRESETS, main
from bevloc.dataset import BevDataset
from bevloc.evalkit import aspect_ratio_error, centroid_distance, iou
from bevloc.geometry import BevGrid, Box3, CameraModel, _apply_h, homography_matrix, project_box_pv, project_point
from bevloc.scenegen import ANNOTATION_RADIUS_M, AcquisitionProtocol, SceneConfig, run_acquisition

from test_evalkit import _supersampled_iou
from test_nn import _random_net

TINY = {
    "camera": {"width_px": 64, "height_px": 48},
    "protocol": {"maps": 1, "egos_per_map": 2, "frames_per_ego": 4, "weathers": 2},
    "train": {"image_pool": 1},
}


def _json(path):
    return json.loads(path.read_text())


def _run(args):
    code = main([str(a) for a in args])
    assert code == 0, f"bevloc {args[0]} exited with {code}"


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    _run(["gen", "--preset", "desk", "--out", root / "data"])
    return root, time.perf_counter() - t0


def _train(root, name, *extra):
    out = root / name
    if not (out / "model.ckpt").exists():
        _run(["train", "--data", root / "data", "--out", out, "--epochs", 100, *extra])
    return out


@pytest.fixture(scope="session")
def coords_run(desk):
    root, _ = desk
    t0 = time.perf_counter()
    out = _train(root, "coords", "--ablation", "coords-only")
    return out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def full_run(desk):
    return _train(desk[0], "full")


# ---------------------------------------------------------------------------


def test_criterion_1_geometry_oracles(criterion):
    t0 = time.perf_counter()
    cam, grid = CameraModel(), BevGrid()
    H = homography_matrix(cam, grid)
    rng = np.random.default_rng(1)
    worst, n = 0.0, 0
    while n < 1000:
        x, y = rng.uniform(-25, 25), rng.uniform(0.5, 50)
        uv = project_point(cam, (x, y, 0.0))
        if uv is None or not (0 <= uv[0] <= cam.width_px and 0 <= uv[1] <= cam.height_px):
            continue
        worst = max(worst, float(np.abs(_apply_h(H, np.array(uv)) - grid.to_pixels([x, y])).max()))
        n += 1
    exact = True
    for _ in range(300):
        box = Box3((rng.uniform(-15, 15), rng.uniform(3, 60), 0.8), rng.uniform(-math.pi, math.pi), 4.5, 1.9, 1.6)
        corners = box.corners()
        if cam.to_camera(corners)[:, 2].min() <= 0.1:
            continue
        uv = np.array([project_point(cam, c) for c in corners])
        lo = np.maximum(uv.min(axis=0), 0.0)
        hi = np.minimum(uv.max(axis=0), [cam.width_px, cam.height_px])
        want = None if hi[0] <= lo[0] or hi[1] <= lo[1] else (lo[0], lo[1], hi[0], hi[1])
        got = project_box_pv(cam, box)
        exact &= (got is None and want is None) or (got is not None and tuple(got) == want)
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and exact and dt < 1.0
    criterion(1, ok, f"round-trip max err {worst:.2e} px, brute-force hull exact={exact}, {dt:.2f} s")
    assert ok


def test_criterion_2_metric_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        boxes = []
        for _ in range(2):
            lo, size = rng.uniform(0, 40, 2), rng.uniform(2, 20, 2)
            boxes.append((lo[0], lo[1], lo[0] + size[0], lo[1] + size[1]))
        worst = max(worst, abs(iou(*boxes) - _supersampled_iou(*boxes)))
    hand = (
        iou((0, 0, 10, 10), (5, 0, 15, 10)) == 1 / 3
        and centroid_distance((0, 0, 2, 2), (3, 4, 5, 6)) == 5.0
        and aspect_ratio_error((0, 0, 20, 10), (0, 0, 10, 10)) == 1.0
    )
    dt = time.perf_counter() - t0
    ok = worst < 5e-3 and hand and dt < 5.0
    criterion(2, ok, f"IoU vs supersampled max diff {worst:.2e}, hand examples exact={hand}, {dt:.2f} s")
    assert ok


def test_criterion_3_gradient_checks(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, checked, kinds = 0.0, 0, set()
    while checked < 20:
        net = _random_net(rng)
        batch, side = int(rng.integers(1, 4)), int(rng.integers(7, 12))
        boxes = rng.uniform(0, 1, (batch, 4))
        images = rng.normal(size=(batch, 3, side, side))
        target = rng.uniform(0, 1, (batch, 4))
        net.forward(boxes, images)
        if nn.relu_margin(net) < 1e-3:
            continue
        worst = max(worst, nn.grad_check(net, (boxes, images), target))
        kinds |= {layer.kind for layer in net.leaves()} | {"concat"}
        checked += 1
    dt = time.perf_counter() - t0
    covered = {"dense", "relu", "conv", "gap", "concat"} <= kinds
    ok = worst < 1e-4 and covered and dt < 60
    criterion(3, ok, f"max rel err {worst:.2e} over {checked} float64 nets, layers {sorted(kinds)}, {dt:.1f} s")
    assert ok


def test_criterion_4_protocol_counts(criterion, desk):
    root, desk_seconds = desk
    t0 = time.perf_counter()
    paper = PRESETS["paper-protocol"]
    cfg = SceneConfig(camera=CameraModel(8, 6))
    n_paper = sum(1 for _ in run_acquisition(cfg, AcquisitionProtocol(**paper["protocol"])))
    dt = time.perf_counter() - t0 + desk_seconds
    n_desk = _json(root / "data" / "manifest.json")["frame_count"]
    ok = n_paper == 12000 and n_desk == 500 and dt < 120
    criterion(4, ok, f"paper-protocol frames {n_paper} (stub 8x6), desk frames {n_desk}, {dt:.1f} s")
    assert ok


def test_criterion_5_dataset_invariants(criterion, desk):
    t0 = time.perf_counter()
    ds = BevDataset(desk[0] / "data")
    n, W, H, G = len(ds), ds.camera.width_px, ds.camera.height_px, ds.grid.size_px
    metas = [ds.record_json(i) for i in range(n)]
    dist_ok = sum(m["distance"] <= ANNOTATION_RADIUS_M for m in metas)
    pv = np.array([m["bbox_rgb"] for m in metas])
    bev = np.array([m["bbox_bev"] for m in metas])
    pv_ok = int(np.sum((pv[:, 0] >= 0) & (pv[:, 0] <= pv[:, 2]) & (pv[:, 2] <= W) & (pv[:, 1] >= 0) & (pv[:, 1] <= pv[:, 3]) & (pv[:, 3] <= H)))
    bev_ok = int(np.sum((bev[:, 0] >= 0) & (bev[:, 0] <= bev[:, 2]) & (bev[:, 2] <= G) & (bev[:, 1] >= 0) & (bev[:, 1] <= bev[:, 3]) & (bev[:, 3] <= G)))
    std_v, std_u = np.std(bev[:, 3] - bev[:, 1]), np.std(bev[:, 2] - bev[:, 0])
    dt = time.perf_counter() - t0
    ok = n > 0 and dist_ok == pv_ok == bev_ok == n and std_v > std_u and dt < 60
    criterion(5, ok, f"{n} records: distance {dist_ok}/{n}, PV in image {pv_ok}/{n}, BEV in grid {bev_ok}/{n}; "
                     f"std v-extent {std_v:.2f} > u-extent {std_u:.2f} px")
    assert ok


def test_criterion_6_coords_only_learns(criterion, desk, coords_run, capsys):
    root, _ = desk
    out, seconds = coords_run
    _run(["eval", "--data", root / "data", "--checkpoint", out / "model.ckpt", "--out", root / "eval_coords"])
    _run(["eval", "--data", root / "data", "--predictor", "constant", "--out", root / "eval_const"])
    s, c = _json(root / "eval_coords" / "summary.json"), _json(root / "eval_const" / "summary.json")
    n_records = _json(root / "data" / "manifest.json")["record_count"]
    ratio = c["mCD"] / s["mCD"]
    losses = [json.loads(line)["loss"] for line in (out / "history.jsonl").read_text().splitlines()]
    smooth = [losses[0]]
    for value in losses[1:]:
        smooth.append(0.9 * smooth[-1] + 0.1 * value)  # span-10 exponential smoothing
    ok = (s["mCD"] <= 10 and s["mIoU"] >= 0.19 and ratio >= 5 and seconds < 15 * 60 and n_records >= 2000
          and len(losses) == 100 and smooth[-1] < smooth[0])
    criterion(6, ok, f"{n_records} records; coords-only test mCD {s['mCD']:.2f} px ({s['mCD'] / 4:.2f} m), "
                     f"mIoU {s['mIoU']:.3f}; constant mCD {c['mCD']:.2f} px ({ratio:.1f}x); "
                     f"smoothed loss {smooth[0]:.2e} -> {smooth[-1]:.2e}; trained in {seconds:.0f} s")
    assert ok


def test_criterion_7_full_model_and_overfit(criterion, desk, coords_run, full_run):
    root, _ = desk
    _run(["eval", "--data", root / "data", "--checkpoint", full_run / "model.ckpt", "--out", root / "eval_full"])
    if not (root / "eval_coords" / "summary.json").exists():
        _run(["eval", "--data", root / "data", "--checkpoint", coords_run[0] / "model.ckpt", "--out", root / "eval_coords"])
    full = _json(root / "eval_full" / "summary.json")
    coords = _json(root / "eval_coords" / "summary.json")

    ds = BevDataset(root / "data")
    train, _ = ds.split()
    _, first = np.unique(ds.frame_of(train), return_index=True)
    X, y, fi, images = ds.arrays(train[first[:8]], pool=4)
    m = BevRegressor(epochs=500, keep_best=False).fit(X, y, images=images, frame_index=fi)
    overfit = min(m.history_.loss)

    beats = full["mIoU"] >= coords["mIoU"]
    ok = beats and overfit < 1e-4
    criterion(7, ok, f"full mIoU {full['mIoU']:.3f} vs coords-only {coords['mIoU']:.3f} "
                     f"(full mCD {full['mCD']:.2f}, coords-only {coords['mCD']:.2f} px); "
                     f"8-record overfit min loss {overfit:.1e}")
    assert ok


def test_criterion_8_ipm_baseline(criterion, desk, coords_run, capsys):
    root, _ = desk
    ds = BevDataset(root / "data")
    W, H = ds.camera.width_px, ds.camera.height_px
    worst, used = 0.0, 0
    for i in range(len(ds)):
        m = ds.record_json(i)
        u0, v0, u1, v1 = m["bbox_rgb"]
        # geometric truth is defined only where the bottom edge is not cut by the image border
        if u0 <= 0 or u1 >= W or v1 >= H:
            continue
        pred = ipm_predict(ds.camera, ds.grid, m["bbox_rgb"])
        worst = max(worst, abs(pred.v_max - m["bbox_bev"][3]))
        used += 1
    capsys.readouterr()
    _run(["eval", "--data", root / "data", "--checkpoint", coords_run[0] / "model.ckpt", "--baseline", "ipm",
          "--out", root / "eval_ipm"])
    text = capsys.readouterr().out
    lines = {line.split(":")[0]: line for line in text.splitlines() if ":" in line}
    b = _json(root / "eval_ipm" / "baseline_ipm" / "summary.json")
    s = _json(root / "eval_ipm" / "summary.json")
    n_test = s["n"] + s["skipped"]
    reported = "model" in lines and "ipm" in lines and "mCD" in lines["model"] and "mCD" in lines["ipm"]
    ok = used > 0 and worst < 2.0 and reported and b["n"] > 0.9 * n_test
    criterion(8, ok, f"near-edge max err {worst:.2e} px over {used} records; eval prints model mCD {s['mCD']:.2f} "
                     f"and ipm mCD {b['mCD']:.2f} px (ipm non-skipped {b['n']}/{n_test})")
    assert ok


def test_criterion_9_determinism(criterion, tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    same = {}
    for k in (1, 2):
        d = tmp_path / f"run{k}"
        _run(["gen", "--config", cfg, "--out", d / "data", "--seed", 3])
        _run(["train", "--config", cfg, "--data", d / "data", "--out", d / "train", "--epochs", 4, "--seed", 3])
        _run(["eval", "--data", d / "data", "--checkpoint", d / "train" / "model.ckpt", "--baseline", "ipm",
              "--out", d / "eval"])
    for name in ("data/manifest.json", "train/history.jsonl", "train/model.ckpt", "eval/summary.json",
                 "eval/per_record.csv", "eval/baseline_ipm/summary.json"):
        same[name] = (tmp_path / "run1" / name).read_bytes() == (tmp_path / "run2" / name).read_bytes()
    ok = all(same.values())
    criterion(9, ok, "byte-identical: " + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok
