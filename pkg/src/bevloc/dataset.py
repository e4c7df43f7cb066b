"""On-disk dataset container, train/test splitting, normalization and batching.

Layout under ``root``::

    manifest.json                 UTF-8, sorted keys
    frames/<frame_id>/rgb.ppm     binary P6, 8-bit
    frames/<frame_id>/depth.f32   little-endian float32, row-major H*W
    frames/<frame_id>/records.json

``records.json`` holds one JSON object per line inside an array, so each
record can be located by byte offset from the manifest index.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
import warnings
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional

import numpy as np

from .geometry import BevBox, BevGrid, CameraModel, PvBox
from .scenegen import FAR_PLANE_M, SceneRecord

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
STD_FLOOR = 1e-6
MARKER = "INCOMPLETE"


# ------------------------------------------------------------------- codecs


def write_ppm(path, rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace after maxval
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)


def write_depth(path, depth):
    np.ascontiguousarray(depth, dtype="<f4").tofile(path)


def read_depth(path, height, width):
    return np.fromfile(path, dtype="<f4").reshape(height, width)


def _record_to_json(rec: SceneRecord):
    return {
        "id": int(rec.id),
        "name": rec.name,
        "distance": float(rec.distance_m),
        "timestamp": float(rec.timestamp),
        "bbox_rgb": [float(c) for c in rec.bbox_rgb],
        "bbox_bev": [float(c) for c in rec.bbox_bev],
        "speed": float(rec.ego_speed),
    }


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


# --------------------------------------------------------------- statistics


def channel_sums(rgb):
    """Exact per-channel (count, sum, sum of squares) of an 8-bit image."""
    px = np.asarray(rgb, dtype=np.int64).reshape(-1, 3)
    return px.shape[0], px.sum(axis=0), (px * px).sum(axis=0)


def stats_from_sums(sums):
    n = sum(s[0] for s in sums)
    if n == 0:
        raise ValueError("cannot compute normalization statistics of an empty set")
    total = sum(s[1] for s in sums)
    sq = sum(s[2] for s in sums)
    # integer sums are exact; scale to [0, 1] only at the end
    mean = total / n
    var = np.maximum(sq / n - mean * mean, 0.0)
    mean01 = mean / 255.0
    std01 = np.maximum(np.sqrt(var) / 255.0, STD_FLOOR)
    return [float(x) for x in mean01], [float(x) for x in std01]


def compute_norm_stats(images) -> tuple:
    """Per-channel mean/std in [0, 1] units over all pixels of ``images`` (uint8, HxWx3)."""
    return stats_from_sums([channel_sums(im) for im in images])


def normalize_image(rgb, mean, std, pool=1):
    """uint8 HxWx3 -> float32 CxHxW; ``pool`` > 1 averages pool x pool blocks first."""
    x = np.asarray(rgb, dtype=np.float64) / 255.0
    if pool > 1:
        h, w = (x.shape[0] // pool) * pool, (x.shape[1] // pool) * pool
        x = x[:h, :w].reshape(h // pool, pool, w // pool, pool, 3).mean(axis=(1, 3))
    x = (x - np.asarray(mean)) / np.asarray(std)
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


# ------------------------------------------------------------------ writing


def _frame_id(k):
    return f"{k:06d}"


def split_frames(n_frames, train_fraction=0.9, seed=0):
    """Deterministic frame-level partition; returns sorted (train, test) frame indices."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(n_frames)
    n_train = int(math.floor(train_fraction * n_frames + 0.5))
    train = np.sort(order[:n_train])
    test = np.sort(order[n_train:])
    if n_frames and test.size == 0:
        warnings.warn("test split is empty", stacklevel=2)
    return train, test


def write_dataset(
    frames: Iterable,
    root,
    *,
    camera: CameraModel,
    grid: BevGrid,
    config: Optional[dict] = None,
    split_seed: int = 0,
    train_fraction: float = 0.9,
    force: bool = False,
) -> dict:
    """Serialize a frame stream (``scenegen.Frame``-like objects) and return the manifest.

    An ``INCOMPLETE`` marker stays in ``root`` if writing fails part-way.
    """
    root = Path(root)
    if (root / "manifest.json").exists() or (root / MARKER).exists():
        if not force:
            raise FileExistsError(f"{root} already holds a dataset; pass force=True to overwrite")
        shutil.rmtree(root / "frames", ignore_errors=True)
        for name in ("manifest.json", MARKER):
            (root / name).unlink(missing_ok=True)
    root.mkdir(parents=True, exist_ok=True)
    (root / MARKER).write_text("writing\n")

    digest = hashlib.sha256()
    frame_rows, record_rows, sums = [], [], []
    unique = set()
    for k, fr in enumerate(frames):
        fid = _frame_id(k)
        fdir = root / "frames" / fid
        fdir.mkdir(parents=True, exist_ok=True)
        if fr.rgb.shape != (camera.height_px, camera.width_px, 3):
            raise ValueError(f"frame {fid}: image shape {fr.rgb.shape} does not match camera")
        write_ppm(fdir / "rgb.ppm", fr.rgb)
        write_depth(fdir / "depth.f32", fr.depth)
        lines = [_dumps(_record_to_json(r)).encode("utf-8") for r in fr.records]
        body = b"[\n" + b",\n".join(lines) + b"\n]\n" if lines else b"[]\n"
        (fdir / "records.json").write_bytes(body)

        offset = 2
        rel = f"frames/{fid}/records.json"
        first = len(record_rows)
        for line, rec in zip(lines, fr.records):
            record_rows.append({"frame": k, "path": rel, "offset": offset, "length": len(line)})
            offset += len(line) + 2
            unique.add((fr.map_idx, fr.ego_idx, int(rec.id)))
        frame_rows.append(
            {
                "frame_id": fid,
                "map": fr.map_idx,
                "ego": fr.ego_idx,
                "weather": fr.weather_idx,
                "frame": fr.frame_idx,
                "first_record": first,
                "n_records": len(lines),
            }
        )
        sums.append(channel_sums(fr.rgb))
        for name in ("rgb.ppm", "depth.f32", "records.json"):
            digest.update((fdir / name).read_bytes())

    train, _ = split_frames(len(frame_rows), train_fraction, split_seed) if frame_rows else ([], [])
    if len(train):
        mean, std = stats_from_sums([sums[i] for i in train])
    else:
        mean, std = [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]

    manifest = {
        "format_version": FORMAT_VERSION,
        "generator": config or {},
        "record_count": len(record_rows),
        "frame_count": len(frame_rows),
        "unique_vehicle_count": len(unique),
        "image": {"width": camera.width_px, "height": camera.height_px, "channels": 3},
        "camera": {
            "width_px": camera.width_px,
            "height_px": camera.height_px,
            "hfov_deg": camera.hfov_deg,
            "cam_height_m": camera.cam_height_m,
            "pitch_deg": camera.pitch_deg,
        },
        "depth": {"dtype": "<f4", "far_plane_m": FAR_PLANE_M},
        "grid": {"size_px": grid.size_px, "px_per_m": grid.px_per_m, "ego_anchor": list(grid.ego_anchor)},
        "split": {"seed": split_seed, "train_fraction": train_fraction},
        "norm_stats": {"mean": mean, "std": std},
        "frames": frame_rows,
        "records": record_rows,
    }
    digest.update(_dumps(manifest).encode("utf-8"))
    manifest["checksum"] = digest.hexdigest()
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1, ensure_ascii=False)
        f.write("\n")
    (root / MARKER).unlink()
    log.info("wrote %d frames / %d records to %s", len(frame_rows), len(record_rows), root)
    return manifest


# ------------------------------------------------------------------ reading


class Batch(NamedTuple):
    images: Optional[np.ndarray]  # (B, C, H, W) normalized, or None
    pv_boxes: np.ndarray  # (B, 4) PV corners / image dims
    targets: np.ndarray  # (B, 4) BEV corners in grid pixels
    ids: np.ndarray  # (B,) record ids
    ids: np.ndarray


def split(manifest: dict, train_fraction=0.9, seed=0):
    """Record ids of the (train, test) sides; whole frames land on one side."""
    train_f, test_f = split_frames(manifest["frame_count"], train_fraction, seed)
    frames = manifest["frames"]

    def ids(sel):
        out = []
        for k in sel:
            fr = frames[k]
            out.extend(range(fr["first_record"], fr["first_record"] + fr["n_records"]))
        return np.array(out, dtype=np.int64)

    return ids(train_f), ids(test_f)


def epoch_order(groups, seed, epoch, one_per_group=True):
    """Positions to visit in one epoch.

    With ``one_per_group`` a single member of every group is drawn uniformly
    and the draws are shuffled; otherwise every position is visited once.
    """
    groups = np.asarray(groups)
    rng = np.random.default_rng([seed, epoch])
    if not one_per_group:
        return rng.permutation(len(groups))
    uniq, inverse = np.unique(groups, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=len(uniq))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    picks = order[starts + (rng.random(len(uniq)) * counts).astype(np.int64)]
    return picks[rng.permutation(len(picks))]


class BevDataset:
    """Read access to a dataset directory written by ``write_dataset``."""

    def __init__(self, root):
        self.root = Path(root)
        if (self.root / MARKER).exists():
            raise ValueError(f"{self.root} holds a partially written dataset")
        with open(self.root / "manifest.json", encoding="utf-8") as f:
            self.manifest = json.load(f)
        if self.manifest["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported format version {self.manifest['format_version']}")
        if self.manifest["record_count"] != len(self.manifest["records"]):
            raise ValueError("manifest record count does not match its index")
        c = self.manifest["camera"]
        self.camera = CameraModel(c["width_px"], c["height_px"], c["hfov_deg"], c["cam_height_m"], c["pitch_deg"])
        g = self.manifest["grid"]
        self.grid = BevGrid(g["size_px"], g["px_per_m"])
        self._frame_of = np.zeros(len(self), dtype=np.int64)
        for k, fr in enumerate(self.manifest["frames"]):
            self._frame_of[fr["first_record"] : fr["first_record"] + fr["n_records"]] = k
        self._meta_cache = None

    def __len__(self):
        return self.manifest["record_count"]

    @property
    def n_frames(self):
        return self.manifest["frame_count"]

    @property
    def norm_stats(self):
        s = self.manifest["norm_stats"]
        return s["mean"], s["std"]

    def frame_of(self, ids):
        return self._frame_of[np.asarray(ids, dtype=np.int64)]

    def _frame_dir(self, k):
        return self.root / "frames" / self.manifest["frames"][k]["frame_id"]

    def rgb(self, frame):
        return read_ppm(self._frame_dir(frame) / "rgb.ppm")

    def depth(self, frame):
        im = self.manifest["image"]
        return read_depth(self._frame_dir(frame) / "depth.f32", im["height"], im["width"])

    def record_json(self, i):
        entry = self.manifest["records"][i]
        with open(self.root / entry["path"], "rb") as f:
            f.seek(entry["offset"])
            return json.loads(f.read(entry["length"]).decode("utf-8"))

    def _all_meta(self):
        if self._meta_cache is None:
            metas = []
            for k in range(self.n_frames):
                with open(self._frame_dir(k) / "records.json", encoding="utf-8") as f:
                    metas.extend(json.load(f))
            self._meta_cache = metas
        return self._meta_cache

    def read_record(self, i, with_images=True) -> SceneRecord:
        d = self.record_json(i)
        k = int(self._frame_of[i])
        return SceneRecord(
            id=d["id"],
            name=d["name"],
            distance_m=d["distance"],
            timestamp=d["timestamp"],
            rgb=self.rgb(k) if with_images else None,
            depth=self.depth(k) if with_images else None,
            bbox_rgb=PvBox(*d["bbox_rgb"]),
            bbox_bev=BevBox(*d["bbox_bev"]),
            ego_speed=d["speed"],
        )

    def split(self, train_fraction=None, seed=None):
        s = self.manifest["split"]
        return split(
            self.manifest,
            s["train_fraction"] if train_fraction is None else train_fraction,
            s["seed"] if seed is None else seed,
        )

    def compute_norm_stats(self, ids):
        frames = np.unique(self.frame_of(ids))
        if frames.size == 0:
            raise ValueError("cannot compute normalization statistics of an empty set")
        return compute_norm_stats(self.rgb(k) for k in frames)

    def pv_boxes(self, ids):
        """PV boxes of ``ids`` normalized by image width/height, shape (n, 4)."""
        meta = self._all_meta()
        im = self.manifest["image"]
        scale = np.array([im["width"], im["height"], im["width"], im["height"]], float)
        return np.array([meta[i]["bbox_rgb"] for i in ids], float).reshape(-1, 4) / scale

    def pv_boxes_px(self, ids):
        meta = self._all_meta()
        return np.array([meta[i]["bbox_rgb"] for i in ids], float).reshape(-1, 4)

    def targets(self, ids):
        meta = self._all_meta()
        return np.array([meta[i]["bbox_bev"] for i in ids], float).reshape(-1, 4)

    def image_tensors(self, frames, pool=1, stats=None):
        mean, std = stats or self.norm_stats
        return np.stack([normalize_image(self.rgb(k), mean, std, pool) for k in frames]) if len(frames) else None

    def arrays(self, ids, with_images=True, pool=1):
        """Model-ready arrays for ``ids``.

        Returns ``(X, y, frame_index, images)``: normalized PV boxes, BEV
        targets in pixels, per-row index into ``images``, and the stacked
        normalized images of the distinct frames (None without images).
        """
        ids = np.asarray(ids, dtype=np.int64)
        frames, frame_index = np.unique(self.frame_of(ids), return_inverse=True)
        images = self.image_tensors(frames, pool) if with_images else None
        return self.pv_boxes(ids), self.targets(ids), frame_index, images

    def batches(self, ids, batch_size=32, epoch_seed=0, epoch=0, one_box_per_frame=True,
                with_images=True, pool=1) -> Iterator[Batch]:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        ids = np.asarray(ids, dtype=np.int64)
        order = epoch_order(self.frame_of(ids), epoch_seed, epoch, one_box_per_frame)
        X, y = self.pv_boxes(ids), self.targets(ids)
        frames = self.frame_of(ids)
        mean, std = self.norm_stats
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            imgs = None
            if with_images:
                imgs = np.stack([normalize_image(self.rgb(k), mean, std, pool) for k in frames[sel]])
            yield Batch(imgs, X[sel], y[sel], ids[sel])
