"""Command-line entry point: ``bevloc {gen,train,eval,inspect}``.

Every command resolves its settings from a preset, an optional JSON config
file and command-line flags (flags win), and echoes the resolved config to
its output directory as ``config.json``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bevnet import BevRegressor, IPMRegressor, TrainingDivergedError
from .dataset import BevDataset, write_dataset, write_ppm
from .evalkit import evaluate, write_reports
from .geometry import BevGrid, CameraModel
from .scenegen import AcquisitionProtocol, SceneConfig, run_acquisition

log = logging.getLogger("bevloc")

PRESETS = {
    "paper-protocol": {
        "camera": {"width_px": 1024, "height_px": 768},
        "protocol": {"maps": 6, "egos_per_map": 20, "frames_per_ego": 20, "weathers": 5, "skip": 5},
    },
    "desk": {
        "camera": {"width_px": 256, "height_px": 192},
        "protocol": {"maps": 2, "egos_per_map": 5, "frames_per_ego": 10, "weathers": 5, "skip": 5},
    },
}

DEFAULTS = {
    "seed": 0,
    "camera": {"width_px": 256, "height_px": 192, "hfov_deg": 110.0, "cam_height_m": 1.6, "pitch_deg": 0.0},
    "grid": {"size_px": 200, "px_per_m": 4.0},
    "scene": {"num_background_vehicles": 100, "num_lanes": 4, "lane_width_m": 3.5, "road_length_m": 1000.0},
    "protocol": dict(PRESETS["desk"]["protocol"]),
    "split": {"seed": 0, "train_fraction": 0.9},
    "train": {
        "ablation": "none",
        "epochs": 100,
        "batch_size": 32,
        "learning_rate": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "one_box_per_frame": True,
        "image_pool": 4,
        "keep_best": True,
    },
}


class CliError(Exception):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args):
    cfg = copy.deepcopy(DEFAULTS)
    preset = getattr(args, "preset", None)
    if preset:
        cfg = _merge(cfg, PRESETS[preset])
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(user, dict):
            raise CliError(f"{args.config}: top level must be an object")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise CliError(f"{args.config}: unknown sections {sorted(unknown)}")
        cfg = _merge(cfg, user)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    t = cfg["train"]
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("lr", "learning_rate"), ("ablation", "ablation")):
        val = getattr(args, flag, None)
        if val is not None:
            t[key] = val
    return cfg


def _echo(cfg, out, command):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump({"command": command, **cfg}, f, sort_keys=True, indent=2)
        f.write("\n")


def _camera(cfg):
    return CameraModel(**cfg["camera"])


def _grid(cfg):
    return BevGrid(int(cfg["grid"]["size_px"]), float(cfg["grid"]["px_per_m"]))


def _open_dataset(path):
    if path is None:
        raise CliError("--data is required")
    if not (Path(path) / "manifest.json").exists():
        raise CliError(f"no dataset at {path}")
    return BevDataset(path)


# ---------------------------------------------------------------- commands


def cmd_gen(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    cam, grid = _camera(cfg), _grid(cfg)
    scene_cfg = SceneConfig(camera=cam, grid=grid, seed=int(cfg["seed"]), **cfg["scene"])
    protocol = AcquisitionProtocol(**cfg["protocol"])
    try:
        manifest = write_dataset(
            run_acquisition(scene_cfg, protocol),
            out,
            camera=cam,
            grid=grid,
            config=cfg,
            split_seed=int(cfg["split"]["seed"]),
            train_fraction=float(cfg["split"]["train_fraction"]),
            force=args.force,
        )
    except FileExistsError:
        raise CliError(f"{out} already holds a dataset; pass --force to overwrite") from None
    _echo(cfg, out, "gen")
    ds = BevDataset(out)
    t = ds.targets(np.arange(len(ds)))
    std_v = float(np.std(t[:, 3] - t[:, 1])) if len(t) else float("nan")
    std_u = float(np.std(t[:, 2] - t[:, 0])) if len(t) else float("nan")
    print(f"frames {manifest['frame_count']}")
    print(f"records {manifest['record_count']}")
    print(f"unique vehicles {manifest['unique_vehicle_count']}")
    print(f"bev extent std: v {std_v:.3f} px, u {std_u:.3f} px, vertical dominant {std_v > std_u}")
    print(f"checksum {manifest['checksum']}")
    return 0


def _estimator(cfg):
    t = cfg["train"]
    return BevRegressor(
        ablation=t["ablation"],
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        learning_rate=float(t["learning_rate"]),
        beta1=float(t["beta1"]),
        beta2=float(t["beta2"]),
        epsilon=float(t["epsilon"]),
        one_box_per_frame=bool(t["one_box_per_frame"]),
        image_pool=int(t["image_pool"]),
        keep_best=bool(t["keep_best"]),
        grid_size=int(cfg["grid"]["size_px"]),
        random_state=int(cfg["seed"]),
    )


def _model_inputs(ds, ids, model):
    X, y, frame_index, images = ds.arrays(ids, with_images=model.uses_images, pool=model.image_pool)
    return X, y, frame_index, images


def cmd_train(args):
    cfg = resolve_config(args)
    ds = _open_dataset(args.data)
    cfg["grid"] = {"size_px": ds.grid.size_px, "px_per_m": ds.grid.px_per_m}
    out = Path(args.out)
    model = _estimator(cfg)
    if model.epochs < 0 or model.batch_size < 1 or model.learning_rate < 0:
        raise CliError("epochs must be >= 0, batch >= 1 and lr >= 0")
    train_ids, test_ids = ds.split()
    if len(train_ids) == 0:
        raise CliError("training split is empty")
    X, y, fi, im = _model_inputs(ds, train_ids, model)
    eval_set = None
    if len(test_ids):
        Xt, yt, fit, imt = _model_inputs(ds, test_ids, model)
        eval_set = (Xt, yt, imt, fit)
    model.fit(X, y, images=im, frame_index=fi, eval_set=eval_set)
    _echo(cfg, out, "train")
    model.save(out / "model.ckpt")
    model.history_.write_jsonl(out / "history.jsonl")
    if model.history_.loss:
        print(f"epochs {len(model.history_.loss)} final loss {model.history_.loss[-1]:.6g}")
        if getattr(model, "best_epoch_", None):
            m = model.history_.metrics[model.best_epoch_ - 1]
            print(f"best epoch {model.best_epoch_} test mIoU {m.mIoU:.4f} mCD {m.mCD:.3f} px")
    else:
        print("epochs 0: wrote initialized checkpoint")
    print(f"checkpoint {out / 'model.ckpt'}")
    return 0


def _load_model(path):
    if path is None:
        raise CliError("--checkpoint is required for the model predictor")
    if not Path(path).exists():
        raise CliError(f"checkpoint not found: {path}")
    try:
        return BevRegressor.load(path)
    except (ValueError, KeyError, OSError) as e:
        raise CliError(f"cannot load checkpoint {path}: {e}") from e


def _predict_model(model, ds, ids):
    X, _, fi, im = _model_inputs(ds, ids, model)
    return model.predict(X, images=im, frame_index=fi)


def cmd_eval(args):
    cfg = resolve_config(args)
    ds = _open_dataset(args.data)
    out = Path(args.out)
    train_ids, test_ids = ds.split()
    if len(test_ids) == 0:
        raise CliError("test split is empty")
    y = ds.targets(test_ids)
    if args.predictor == "oracle":
        pred = y.copy()
    elif args.predictor == "constant":
        pred = np.repeat(ds.targets(train_ids).mean(axis=0, keepdims=True), len(test_ids), axis=0)
    else:
        pred = _predict_model(_load_model(args.checkpoint), ds, test_ids)
    px = ds.grid.px_per_m
    summary, rows = evaluate(pred, y, test_ids, px)
    s = write_reports(out, summary, rows, args.grid_meters, px)
    unit = s.cd_unit
    print(f"{args.predictor}: n {s.n} skipped {s.skipped} mIoU {s.mIoU:.4f} mCD {s.mCD:.4f} {unit} "
          f"mhE {s.mhE:.4f} mwE {s.mwE:.4f} marE {s.marE:.4f}")
    cfg["eval"] = {"predictor": args.predictor, "checkpoint": args.checkpoint, "baseline": args.baseline,
                   "grid_meters": args.grid_meters, "data": str(args.data)}
    if args.baseline == "ipm":
        ipm = IPMRegressor.from_camera(ds.camera, ds.grid).fit()
        b_summary, b_rows = evaluate(ipm.predict(ds.pv_boxes(test_ids)), y, test_ids, px)
        b = write_reports(out / "baseline_ipm", b_summary, b_rows, args.grid_meters, px)
        print(f"ipm: n {b.n} skipped {b.skipped} mIoU {b.mIoU:.4f} mCD {b.mCD:.4f} {unit} "
              f"mhE {b.mhE:.4f} mwE {b.mwE:.4f} marE {b.marE:.4f}")
    _echo(cfg, out, "eval")
    return 0


# ----------------------------------------------------------------- overlays


def _box_pixels(box, width, height):
    """Integer pixel rectangle covered by a continuous box, or None if empty."""
    x0 = int(np.floor(box[0]))
    y0 = int(np.floor(box[1]))
    x1 = min(int(np.ceil(box[2])) - 1, width - 1)
    y1 = min(int(np.ceil(box[3])) - 1, height - 1)
    x0, y0 = max(x0, 0), max(y0, 0)
    if x1 < x0 or y1 < y0:
        return None
    return x0, y0, x1, y1


def draw_box(img, box, color):
    """Draw a 1-px outline of ``box`` on an (H, W, 3) uint8 image in place."""
    h, w = img.shape[:2]
    r = _box_pixels(box, w, h)
    if r is None:
        return img
    x0, y0, x1, y1 = r
    img[y0, x0 : x1 + 1] = color
    img[y1, x0 : x1 + 1] = color
    img[y0 : y1 + 1, x0] = color
    img[y0 : y1 + 1, x1] = color
    return img


TARGET_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)
BASELINE_COLOR = (0, 128, 255)


def cmd_inspect(args):
    cfg = resolve_config(args)
    ds = _open_dataset(args.data)
    if args.id is None or not 0 <= args.id < len(ds):
        raise CliError(f"unknown record id {args.id} (dataset has {len(ds)} records)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec = ds.read_record(args.id)
    pv = draw_box(rec.rgb.copy(), rec.bbox_rgb, TARGET_COLOR)
    n = ds.grid.size_px
    bev = np.zeros((n, n, 3), dtype=np.uint8)
    au, av = ds.grid.ego_anchor
    bev[int(av), int(au)] = (255, 255, 255)
    draw_box(bev, rec.bbox_bev, TARGET_COLOR)
    if args.baseline == "ipm":
        ipm = IPMRegressor.from_camera(ds.camera, ds.grid).fit()
        b = ipm.predict(ds.pv_boxes([args.id]))[0]
        if not np.isnan(b).any():
            draw_box(bev, b, BASELINE_COLOR)
    if args.predict:
        p = _predict_model(_load_model(args.predict), ds, np.array([args.id]))[0]
        draw_box(bev, p, PRED_COLOR)
        print(f"predicted {[round(float(c), 3) for c in p]}")
    pv_path, bev_path = out / f"pv_{args.id:06d}.ppm", out / f"bev_{args.id:06d}.ppm"
    write_ppm(pv_path, pv)
    write_ppm(bev_path, bev)
    cfg["inspect"] = {"id": args.id, "predict": args.predict, "baseline": args.baseline, "data": str(args.data)}
    _echo(cfg, out, "inspect")
    print(f"target {list(rec.bbox_bev)}")
    print(pv_path)
    print(bev_path)
    return 0


# -------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="bevloc", description="Synthetic PV-to-BEV vehicle localization.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")

    g = sub.add_parser("gen", help="generate a dataset")
    common(g)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    t = sub.add_parser("train", help="train the regressor")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--ablation", choices=("none", "coords-only"))

    e = sub.add_parser("eval", help="evaluate on the test split")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--predictor", choices=("model", "oracle", "constant"), default="model")
    e.add_argument("--baseline", choices=("ipm",))
    e.add_argument("--grid-meters", action="store_true", help="report mCD in meters")

    i = sub.add_parser("inspect", help="render PV and BEV overlays for one record")
    common(i)
    i.add_argument("--data", required=True)
    i.add_argument("--id", type=int, required=True)
    i.add_argument("--predict", metavar="CHECKPOINT")
    i.add_argument("--baseline", choices=("ipm",))
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"bevloc {args.command}: {e}", file=sys.stderr)
        return 2
    except TrainingDivergedError as e:
        print(f"bevloc {args.command}: training diverged: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError, TypeError) as e:
        print(f"bevloc {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
