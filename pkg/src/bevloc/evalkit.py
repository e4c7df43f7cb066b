"""Box-regression metrics on the BEV grid: IoU, centroid distance, hE/wE, arE.

Boxes are ``(u_min, v_min, u_max, v_max)`` in continuous grid pixels; width
is the ``u`` extent and height the ``v`` extent. Relative errors are
fractions, not percentages.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

PX_PER_M = 4.0


def _wh(box):
    return box[2] - box[0], box[3] - box[1]


def iou_with_flag(pred, target):
    """IoU and a flag set when the union has zero area (IoU then reported as 0)."""
    iw = min(pred[2], target[2]) - max(pred[0], target[0])
    ih = min(pred[3], target[3]) - max(pred[1], target[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    wp, hp = _wh(pred)
    wt, ht = _wh(target)
    union = wp * hp + wt * ht - inter
    if union <= 0.0:
        return 0.0, True
    return inter / union, False


def iou(pred, target):
    return iou_with_flag(pred, target)[0]


def centroid_distance(pred, target):
    """Euclidean distance between box centers, in pixels."""
    # pair the differences so identical boxes give exactly zero
    return math.hypot(
        ((pred[0] - target[0]) + (pred[2] - target[2])) / 2.0,
        ((pred[1] - target[1]) + (pred[3] - target[3])) / 2.0,
    )


def px_to_m(px, px_per_m=PX_PER_M):
    return px / px_per_m


def height_width_error(pred, target):
    """(hE, wE) as fractions of the target size; None where the target size is zero."""
    wp, hp = _wh(pred)
    wt, ht = _wh(target)
    he = abs(hp - ht) / ht if ht > 0 else None
    we = abs(wp - wt) / wt if wt > 0 else None
    return he, we


def aspect_ratio_error(pred, target) -> Optional[float]:
    """|w_p/h_p - w_t/h_t|, or None when either height is zero."""
    wp, hp = _wh(pred)
    wt, ht = _wh(target)
    if hp <= 0 or ht <= 0:
        return None
    return abs(wp / hp - wt / ht)


@dataclass
class MetricsSummary:
    mIoU: float
    mCD: float
    mhE: float
    mwE: float
    marE: float
    n: int
    skipped: int
    cd_unit: str = "px"

    def to_dict(self):
        return asdict(self)

    def in_meters(self, px_per_m=PX_PER_M):
        if self.cd_unit == "m":
            return self
        d = self.to_dict()
        d["mCD"] = px_to_m(self.mCD, px_per_m)
        d["cd_unit"] = "m"
        return MetricsSummary(**d)


def _mean(values):
    # fsum is exactly rounded, so the mean does not depend on record order
    return math.fsum(values) / len(values) if values else float("nan")


def _as_box(row):
    if row is None:
        return None
    row = tuple(float(c) for c in row)
    if any(math.isnan(c) for c in row):
        return None
    return row


def evaluate(predictions, targets, ids=None, px_per_m=PX_PER_M):
    """Aggregate metrics over paired boxes.

    ``predictions`` rows may be None or NaN (no prediction). Each metric is
    averaged over the records where it is defined; ``skipped`` counts
    records where any metric is undefined.

    Returns ``(MetricsSummary, rows)`` with one dict per record.
    """
    if len(predictions) != len(targets):
        raise ValueError("predictions and targets differ in length")
    if len(targets) == 0:
        raise ValueError("cannot evaluate an empty set")
    ids = range(len(targets)) if ids is None else ids
    cols = {k: [] for k in ("iou", "cd", "he", "we", "are")}
    rows = []
    skipped = 0
    for rid, p, t in zip(ids, predictions, targets):
        p, t = _as_box(p), _as_box(t)
        row = {"id": int(rid) if isinstance(rid, (int, np.integer)) else rid}
        if p is None:
            row.update(iou=None, cd_px=None, cd_m=None, he=None, we=None, are=None, missing=True)
            skipped += 1
            rows.append(row)
            continue
        v_iou, _ = iou_with_flag(p, t)
        cd = centroid_distance(p, t)
        he, we = height_width_error(p, t)
        are = aspect_ratio_error(p, t)
        row.update(iou=v_iou, cd_px=cd, cd_m=px_to_m(cd, px_per_m), he=he, we=we, are=are, missing=False)
        rows.append(row)
        cols["iou"].append(v_iou)
        cols["cd"].append(cd)
        for key, val in (("he", he), ("we", we), ("are", are)):
            if val is not None:
                cols[key].append(val)
        if he is None or we is None or are is None:
            skipped += 1
    summary = MetricsSummary(
        mIoU=_mean(cols["iou"]),
        mCD=_mean(cols["cd"]),
        mhE=_mean(cols["he"]),
        mwE=_mean(cols["we"]),
        marE=_mean(cols["are"]),
        n=len(rows) - skipped,
        skipped=skipped,
    )
    return summary, rows


def evaluate_predictor(predictor, dataset, ids):
    """Run ``predictor(dataset, ids) -> (n, 4)`` and evaluate against stored targets."""
    ids = np.asarray(ids, dtype=np.int64)
    return evaluate(predictor(dataset, ids), dataset.targets(ids), ids, dataset.grid.px_per_m)


CSV_FIELDS = ("id", "iou", "cd_px", "cd_m", "he", "we", "are", "missing", "skip_he", "skip_we", "skip_are")


def write_reports(out_dir, summary: MetricsSummary, rows, grid_meters=False, px_per_m=PX_PER_M):
    """Write ``summary.json`` and ``per_record.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = summary.in_meters(px_per_m) if grid_meters else summary
    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump(s.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    with open(out / "per_record.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow(
                [
                    r["id"],
                    *("" if r[k] is None else repr(float(r[k])) for k in ("iou", "cd_px", "cd_m", "he", "we", "are")),
                    int(r["missing"]),
                    int(r["he"] is None),
                    int(r["we"] is None),
                    int(r["are"] is None),
                ]
            )
    return s
