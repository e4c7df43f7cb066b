"""Two-branch PV-to-BEV box regressor and the homography baseline.

The network encodes the PV image (small CNN) and the normalized PV box (MLP),
concatenates both feature vectors, passes them through a fused dense layer
and splits into two linear heads: one for the horizontal corners
``(u_min, u_max)`` and a deeper one for the vertical corners
``(v_min, v_max)``.

Both estimators follow the scikit-learn API. ``X`` is always the (n, 4)
array of PV boxes divided by image width/height; images, when used, are
passed as a stacked array plus a per-row ``frame_index`` so frames shared by
several boxes are stored once.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .dataset import epoch_order
from .evalkit import MetricsSummary, evaluate
from .geometry import BevBox, BevGrid, CameraModel, homography_matrix, ipm_ground_unclipped

log = logging.getLogger(__name__)

ABLATIONS = ("none", "coords-only")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, batch, max_activation):
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} (max |activation| = {max_activation:.3g})"
        )
        self.epoch, self.batch, self.max_activation = epoch, batch, max_activation


@dataclass(frozen=True)
class ArchConfig:
    conv_channels: tuple = (8, 16, 32)
    image_features: int = 128
    box_widths: tuple = (64, 128)
    fusion_width: int = 256
    head_h: tuple = (128, 64)
    head_v: tuple = (256, 128, 64)
    coords_only: bool = False
    in_channels: int = 3
    asymmetric: bool = True

    def __post_init__(self):
        widths = [*self.conv_channels, self.image_features, *self.box_widths, self.fusion_width,
                  *self.head_h, *self.head_v]
        if any(int(w) < 1 for w in widths):
            raise ValueError("layer widths must be positive")
        if not self.box_widths:
            raise ValueError("the box encoder needs at least one layer")
        if self.asymmetric and len(self.head_v) <= len(self.head_h):
            raise ValueError("vertical head must have more hidden layers than the horizontal head")


class BevNetwork:
    """Forward/backward over the two-branch model; outputs normalized (u_min, v_min, u_max, v_max)."""

    def __init__(self, arch: ArchConfig, seed=0, dtype=np.float32):
        self.arch = arch
        self.seed = seed
        self.dtype = dtype
        # independent init streams per block, so the coords-only variant shares
        # its box branch and head initialization with the full model
        def rng(block):
            return np.random.default_rng([seed, block])

        self.image_branch = None
        fused_in = arch.box_widths[-1]
        if not arch.coords_only:
            layers = []
            r_img = rng(0)
            c_in = arch.in_channels
            for c in arch.conv_channels:
                layers += [nn.Conv2D(c_in, c, 3, 2, r_img, dtype), nn.ReLU()]
                c_in = c
            layers += [nn.GlobalAvgPool(), nn.Dense(c_in, arch.image_features, "he", r_img, dtype), nn.ReLU()]
            self.image_branch = nn.Sequential(layers)
            fused_in += arch.image_features
        self.box_branch = nn.mlp([4, *arch.box_widths], rng(1), dtype)
        self.concat = nn.Concat()
        self.fusion = nn.mlp([fused_in, arch.fusion_width], rng(2), dtype)
        if self.image_branch is not None:
            # box rows get the same draw as the coords-only model; image rows
            # start at zero so the untrained full model computes the same
            # function as the ablation and training opens the image path
            box_only = nn.Dense(arch.box_widths[-1], arch.fusion_width, "he", rng(2), dtype)
            W = self.fusion.layers[0].params["W"]
            W[: arch.image_features] = 0
            W[arch.image_features :] = box_only.params["W"]
        self.head_h = nn.mlp([arch.fusion_width, *arch.head_h, 2], rng(3), dtype, linear_output=True)
        self.head_v = nn.mlp([arch.fusion_width, *arch.head_v, 2], rng(4), dtype, linear_output=True)

    def blocks(self):
        out = [self.image_branch] if self.image_branch is not None else []
        return out + [self.box_branch, self.fusion, self.head_h, self.head_v]

    def leaves(self):
        for block in self.blocks():
            yield from block.leaves()

    def parameters(self):
        for block in self.blocks():
            yield from block.parameters()

    def spec(self):
        return {
            "image_branch": None if self.image_branch is None else self.image_branch.spec(),
            "box_branch": self.box_branch.spec(),
            "fusion": self.fusion.spec(),
            "head_h": self.head_h.spec(),
            "head_v": self.head_v.spec(),
        }

    def forward(self, boxes, images=None):
        boxes = np.asarray(boxes, dtype=self.dtype)
        feats = [self.box_branch.forward(boxes)]
        if self.image_branch is not None:
            if images is None:
                raise nn.ShapeError("image branch present but no images given")
            feats.insert(0, self.image_branch.forward(np.asarray(images, dtype=self.dtype)))
        fused = self.fusion.forward(self.concat.forward(*feats))
        h = self.head_h.forward(fused)
        v = self.head_v.forward(fused)
        # aggregator: interleave horizontal and vertical corners into a box
        return np.stack([h[:, 0], v[:, 0], h[:, 1], v[:, 1]], axis=1)

    def backward(self, grad):
        gh = grad[:, [0, 2]]
        gv = grad[:, [1, 3]]
        g_fused = self.head_h.backward(gh) + self.head_v.backward(gv)
        parts = self.concat.backward(self.fusion.backward(g_fused))
        if self.image_branch is not None:
            self.image_branch.backward(parts[0])
            self.box_branch.backward(parts[1])
        else:
            self.box_branch.backward(parts[0])

    def max_activation(self):
        vals = [np.abs(l._cache).max() for l in self.leaves() if isinstance(l, nn.Dense) and l._cache is not None]
        return float(max(vals)) if vals else 0.0


@dataclass
class TrainHistory:
    loss: List[float] = field(default_factory=list)
    metrics: List[Optional[MetricsSummary]] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def rows(self):
        out = []
        for k, (loss, m) in enumerate(zip(self.loss, self.metrics)):
            row = {"epoch": k + 1, "loss": loss}
            for key in ("mIoU", "mCD", "mhE", "mwE", "marE"):
                row[key] = None if m is None else _finite_or_none(getattr(m, key))
            out.append(row)
        return out

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for row in self.rows():
                f.write(json.dumps(row, sort_keys=True) + "\n")


def _finite_or_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def _sort_and_clip(boxes, size):
    u = np.sort(boxes[:, [0, 2]], axis=1)
    v = np.sort(boxes[:, [1, 3]], axis=1)
    out = np.stack([u[:, 0], v[:, 0], u[:, 1], v[:, 1]], axis=1)
    return np.clip(out, 0.0, float(size))


class BevRegressor(RegressorMixin, BaseEstimator):
    """PV box (+ PV image) -> BEV box regressor trained with Adam on MSE.

    Parameters
    ----------
    ablation : {"none", "coords-only"}
        ``"coords-only"`` drops the image branch.
    epochs, batch_size, learning_rate, beta1, beta2, epsilon
        Optimization settings; ``beta1`` is Adam's momentum term.
    one_box_per_frame : bool
        Draw a single box per frame (group) each epoch instead of visiting
        every box.
    grid_size : int
        BEV grid side in pixels; targets are divided by it for training.
    image_pool : int
        Average-pooling factor the caller applies to PV images before
        passing them in. Not used by the network itself; stored with the
        checkpoint so inference can rebuild matching inputs.
    keep_best : bool
        With an ``eval_set``, restore the parameters of the epoch with the
        best test mIoU after training.
    """

    def __init__(
        self,
        ablation="none",
        conv_channels=(8, 16, 32),
        image_features=128,
        box_widths=(64, 128),
        fusion_width=256,
        head_h=(128, 64),
        head_v=(256, 128, 64),
        epochs=100,
        batch_size=32,
        learning_rate=0.001,
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        one_box_per_frame=True,
        grid_size=200,
        image_pool=4,
        keep_best=True,
        random_state=0,
    ):
        self.ablation = ablation
        self.conv_channels = conv_channels
        self.image_features = image_features
        self.box_widths = box_widths
        self.fusion_width = fusion_width
        self.head_h = head_h
        self.head_v = head_v
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.one_box_per_frame = one_box_per_frame
        self.grid_size = grid_size
        self.image_pool = image_pool
        self.keep_best = keep_best
        self.random_state = random_state

    def arch(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        return ArchConfig(
            conv_channels=tuple(self.conv_channels),
            image_features=self.image_features,
            box_widths=tuple(self.box_widths),
            fusion_width=self.fusion_width,
            head_h=tuple(self.head_h),
            head_v=tuple(self.head_v),
            coords_only=self.ablation == "coords-only",
        )

    @property
    def uses_images(self):
        return self.ablation != "coords-only"

    def _check_images(self, X, images, frame_index):
        if not self.uses_images:
            return None, None
        if images is None:
            raise ValueError("this model needs images; pass images= and frame_index=")
        images = np.asarray(images)
        if images.ndim != 4:
            raise ValueError(f"images must be (n_frames, C, H, W), got {images.shape}")
        if frame_index is None:
            if len(images) != len(X):
                raise ValueError("frame_index is required when images are shared between rows")
            frame_index = np.arange(len(X))
        frame_index = np.asarray(frame_index, dtype=np.int64)
        if frame_index.shape != (len(X),) or frame_index.min(initial=0) < 0 or frame_index.max(initial=0) >= len(images):
            raise ValueError("frame_index must map each row to an image")
        return images, frame_index

    def _forward(self, X, images, frame_index, sel):
        imgs = images[frame_index[sel]] if images is not None else None
        return self.network_.forward(X[sel], imgs)

    def fit(self, X, y, images=None, frame_index=None, groups=None, eval_set=None):
        """Train from scratch.

        ``groups`` defaults to ``frame_index`` (one box per frame per epoch);
        ``eval_set`` is ``(X, y[, images, frame_index])`` evaluated after every epoch.
        """
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        if X.shape[1] != 4 or y.shape[1] != 4:
            raise ValueError("X and y must both have 4 columns")
        images, frame_index = self._check_images(X, images, frame_index)
        if groups is None:
            groups = frame_index if frame_index is not None else np.arange(len(X))
        groups = np.asarray(groups)
        self.n_features_in_ = 4

        self.network_ = BevNetwork(self.arch(), seed=self.random_state)
        self.optimizer_ = nn.Adam(self.learning_rate, self.beta1, self.beta2, self.epsilon)
        self.history_ = TrainHistory()
        params = nn.param_arrays(self.network_)
        target = (y / self.grid_size).astype(np.float32)
        best, best_iou = None, -np.inf

        for epoch in range(self.epochs):
            t0 = time.perf_counter()
            order = epoch_order(groups, self.random_state, epoch, self.one_box_per_frame)
            sq_sum, count = 0.0, 0
            for b, start in enumerate(range(0, len(order), self.batch_size)):
                sel = order[start : start + self.batch_size]
                pred = self._forward(X, images, frame_index, sel)
                loss, grad = nn.mse_loss(pred, target[sel])
                if not math.isfinite(loss):
                    raise TrainingDivergedError(epoch + 1, b, self.network_.max_activation())
                self.network_.backward(grad)
                self.optimizer_.step(params, nn.grad_arrays(self.network_))
                sq_sum += loss * len(sel)
                count += len(sel)
            self.history_.loss.append(sq_sum / max(count, 1))
            summary = None
            if eval_set is not None:
                summary = self._evaluate(*eval_set)
                if self.keep_best and summary.mIoU > best_iou:
                    best_iou = summary.mIoU
                    best = [p.copy() for p in params]
            self.history_.metrics.append(summary)
            self.history_.seconds.append(time.perf_counter() - t0)
            log.info("epoch %d loss %.6f%s", epoch + 1, self.history_.loss[-1],
                     "" if summary is None else f" mIoU {summary.mIoU:.4f} mCD {summary.mCD:.3f}")
        if best is not None:
            for p, q in zip(params, best):
                p[...] = q
            self.best_epoch_ = int(np.argmax([m.mIoU for m in self.history_.metrics])) + 1
        return self

    def _evaluate(self, X, y, images=None, frame_index=None):
        pred = self.predict(X, images, frame_index)
        summary, _ = evaluate(pred, y)
        return summary

    def decision_raw(self, X, images=None, frame_index=None, chunk=256):
        """Raw network outputs in normalized grid units, without sorting or clipping."""
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 4:
            raise ValueError(f"expected 4 features, got {X.shape[1]}")
        images, frame_index = self._check_images(X, images, frame_index)
        out = np.empty((len(X), 4))
        for start in range(0, len(X), chunk):
            sel = np.arange(start, min(start + chunk, len(X)))
            out[sel] = self._forward(X, images, frame_index, sel)
        return out

    def predict(self, X, images=None, frame_index=None):
        """BEV boxes in grid pixels with corners sorted and clipped to the grid."""
        raw = self.decision_raw(X, images, frame_index)
        return _sort_and_clip(raw * self.grid_size, self.grid_size)

    def predict_box(self, image, pv_box_norm) -> BevBox:
        images = None if image is None else np.asarray(image)[None]
        return BevBox(*self.predict(np.asarray(pv_box_norm, float)[None], images)[0])

    def score(self, X, y, images=None, frame_index=None):
        """Mean IoU against ``y``."""
        return self._evaluate(X, y, images, frame_index).mIoU

    # ---------------------------------------------------------- persistence

    def save(self, path, step=None):
        check_is_fitted(self, "network_")
        params = self.get_params()
        header = {
            "estimator": {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()},
            "arch": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.network_.arch).items()},
            "layers": self.network_.spec(),
            "seed": self.random_state,
            "step": self.optimizer_.t if step is None else step,
        }
        nn.save_checkpoint(path, header, nn.param_arrays(self.network_))

    @classmethod
    def load(cls, path):
        header, arrays = nn.load_checkpoint(path)
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in header["estimator"].items()}
        est = cls(**kwargs)
        est.network_ = BevNetwork(est.arch(), seed=est.random_state)
        params = nn.param_arrays(est.network_)
        if [p.shape for p in params] != [a.shape for a in arrays]:
            raise ValueError(f"{path}: parameter shapes do not match the architecture")
        for p, a in zip(params, arrays):
            p[...] = a
        est.optimizer_ = nn.Adam(est.learning_rate, est.beta1, est.beta2, est.epsilon)
        est.optimizer_.t = header["step"]
        est.n_features_in_ = 4
        return est


# ------------------------------------------------------------ IPM baseline


def ipm_predict(cam: CameraModel, grid: BevGrid, pv_box, length_prior_m=4.5) -> Optional[BevBox]:
    """Homography baseline: map the PV box's bottom edge to the ground, extend it away from the ego.

    Returns None when the bottom edge is at or above the horizon or the box
    lands outside the grid.
    """
    u_min, _, u_max, v_max = (float(c) for c in pv_box)
    left = ipm_ground_unclipped(cam, grid, (u_min, v_max))
    right = ipm_ground_unclipped(cam, grid, (u_max, v_max))
    if left is None or right is None:
        return None
    near = max(left[1], right[1])
    lo_u, hi_u = min(left[0], right[0]), max(left[0], right[0])
    far = near - length_prior_m * grid.px_per_m
    n = float(grid.size_px)
    if hi_u < 0 or lo_u > n or near < 0 or far > n:
        return None
    return BevBox(*(float(np.clip(c, 0.0, n)) for c in (lo_u, far, hi_u, near)))


class IPMRegressor(RegressorMixin, BaseEstimator):
    """Analytic flat-ground baseline with the same ``X`` convention as ``BevRegressor``.

    ``predict`` returns NaN rows where the homography gives no answer.
    """

    def __init__(self, width_px=256, height_px=192, hfov_deg=110.0, cam_height_m=1.6,
                 pitch_deg=0.0, grid_size=200, px_per_m=4.0, length_prior_m=4.5):
        self.width_px = width_px
        self.height_px = height_px
        self.hfov_deg = hfov_deg
        self.cam_height_m = cam_height_m
        self.pitch_deg = pitch_deg
        self.grid_size = grid_size
        self.px_per_m = px_per_m
        self.length_prior_m = length_prior_m

    @classmethod
    def from_camera(cls, cam: CameraModel, grid: BevGrid, **kwargs):
        return cls(cam.width_px, cam.height_px, cam.hfov_deg, cam.cam_height_m, cam.pitch_deg,
                   grid.size_px, grid.px_per_m, **kwargs)

    def fit(self, X=None, y=None):
        self.camera_ = CameraModel(self.width_px, self.height_px, self.hfov_deg, self.cam_height_m, self.pitch_deg)
        self.grid_ = BevGrid(self.grid_size, self.px_per_m)
        self.homography_ = homography_matrix(self.camera_, self.grid_)
        self.n_features_in_ = 4
        return self

    def predict(self, X):
        check_is_fitted(self, "homography_")
        X = check_array(X, dtype=np.float64)
        scale = np.array([self.width_px, self.height_px, self.width_px, self.height_px], float)
        out = np.full((len(X), 4), np.nan)
        for k, row in enumerate(X * scale):
            box = ipm_predict(self.camera_, self.grid_, row, self.length_prior_m)
            if box is not None:
                out[k] = box
        return out

    def score(self, X, y):
        summary, _ = evaluate(self.predict(X), y, px_per_m=self.px_per_m)
        return summary.mIoU
