"""Cluster center estimation: depth and semantic scoring, center selection,
and the keypoint-heatmap focal loss used to supervise the semantic scorer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import weights as weightsio
from .fmcore import CameraIntrinsics, FeatureMap, ShapeError, TokenSet


@dataclass(frozen=True)
class ScoreMap:
    """Per-pixel scalar scores over a W x H grid; values stored as (H, W)."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if values.size != self.width * self.height:
            raise ShapeError("score map size mismatch")
        values = values.reshape(self.height, self.width)
        if not np.all(np.isfinite(values)):
            raise ValueError("score map contains non-finite values")
        object.__setattr__(self, "values", values)

    def flat(self) -> np.ndarray:
        """Scores in flat pixel-index order."""
        return self.values.reshape(-1)


class SemanticScorer:
    """Small convolutional stack mapping a C-channel map to one score channel.

    Layers are (weight (out, in, kh, kw), bias (out,)) pairs applied with
    stride 1 and zero padding, ReLU between layers but not after the last.
    """

    def __init__(self, layers: list[tuple[np.ndarray, np.ndarray]]):
        if not layers:
            raise ValueError("scorer needs at least one layer")
        checked = []
        prev_out = None
        for weight, bias in layers:
            weight = np.asarray(weight, dtype=np.float64)
            bias = np.asarray(bias, dtype=np.float64)
            if weight.ndim != 4:
                raise ShapeError("conv weights must have shape (out, in, kh, kw)")
            out, cin, kh, kw = weight.shape
            if bias.shape != (out,):
                raise ShapeError("bias length mismatch")
            if kh % 2 == 0 or kw % 2 == 0:
                raise ValueError("kernel sizes must be odd")
            if prev_out is not None and cin != prev_out:
                raise ShapeError("layer input channels do not chain")
            prev_out = out
            checked.append((weight, bias))
        if prev_out != 1:
            raise ShapeError("scorer must end with a single output channel")
        self.layers = checked

    @property
    def input_channels(self) -> int:
        return self.layers[0][0].shape[1]

    @classmethod
    def seeded(cls, channels: int, seed: int, hidden: int = 16) -> "SemanticScorer":
        """Default architecture: 3x3 conv C->hidden, ReLU, 3x3 conv hidden->1."""
        rng = np.random.default_rng(seed)
        scale1 = 1.0 / np.sqrt(channels * 9)
        scale2 = 1.0 / np.sqrt(hidden * 9)
        return cls(
            [
                (
                    rng.normal(0.0, scale1, size=(hidden, channels, 3, 3)),
                    rng.normal(0.0, 0.1, size=(hidden,)),
                ),
                (
                    rng.normal(0.0, scale2, size=(1, hidden, 3, 3)),
                    rng.normal(0.0, 0.1, size=(1,)),
                ),
            ]
        )

    def save(self, path) -> None:
        weightsio.save_layers(path, self.layers)

    @classmethod
    def load(cls, path) -> "SemanticScorer":
        return cls(weightsio.load_layers(path))


@dataclass(frozen=True)
class KeypointSet:
    """Ground-truth keypoints (u, v) with a shared Gaussian splat radius."""

    points: np.ndarray
    gaussian_sigma: float = 2.0

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.gaussian_sigma <= 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "points", points)

    @property
    def count(self) -> int:
        return self.points.shape[0]


def back_project(
    u: float, v: float, z_hat: float, k: CameraIntrinsics
) -> tuple[float, float, float]:
    """Pinhole back-projection of pixel (u, v) at assumed depth z_hat."""
    if z_hat <= 0:
        raise ValueError("depth must be positive")
    x_3d = (u - k.c_x) / k.f_x * z_hat
    y_3d = (v - k.c_y) / k.f_y * z_hat
    return x_3d, y_3d, z_hat


def ground_depth(v: float, k: CameraIntrinsics) -> float:
    """Depth of the ground-plane point imaged at row v."""
    if v <= k.c_y:
        raise ValueError("row is above or at the vanishing point")
    return k.f_y * k.cam_height / (v - k.c_y)


def depth_score(k: CameraIntrinsics, width: int, height: int) -> ScoreMap:
    """Row-wise depth prior: 0 at and above the horizon, decreasing below."""
    if width < 1 or height < 1:
        raise ShapeError("score map dimensions must be >= 1")
    v = np.arange(height, dtype=np.float64)
    rows = -np.maximum(
        k.score_gain * (v - k.c_y) / (k.f_y * k.cam_height), 0.0
    )
    return ScoreMap(width=width, height=height, values=np.tile(rows[:, None], (1, width)))


def _conv2d_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Naive stride-1 zero-padded 2-D convolution; x is (H, W, Cin)."""
    h, w, cin = x.shape
    out, cin_w, kh, kw = weight.shape
    if cin_w != cin:
        raise ShapeError(f"scorer expects {cin_w} channels, map has {cin}")
    ph, pw = kh // 2, kw // 2
    padded = np.zeros((h + 2 * ph, w + 2 * pw, cin), dtype=np.float64)
    padded[ph : ph + h, pw : pw + w] = x
    result = np.empty((h, w, out), dtype=np.float64)
    # Accumulate one kernel tap at a time; cheap at desk scale.
    flat_w = weight.reshape(out, cin, kh, kw)
    acc = np.broadcast_to(bias, (h, w, out)).copy()
    for dy in range(kh):
        for dx in range(kw):
            window = padded[dy : dy + h, dx : dx + w]  # (H, W, Cin)
            acc += window @ flat_w[:, :, dy, dx].T
    result[...] = acc
    return result


def semantic_score(fm: FeatureMap, scorer: SemanticScorer) -> ScoreMap:
    """Run the convolutional scoring stack over the feature map."""
    x = fm.data
    for i, (weight, bias) in enumerate(scorer.layers):
        x = _conv2d_same(x, weight, bias)
        if i < len(scorer.layers) - 1:
            x = np.maximum(x, 0.0)
    return ScoreMap(width=fm.width, height=fm.height, values=x[:, :, 0])


def combine_scores(sd: ScoreMap, ss: ScoreMap, alpha: float) -> ScoreMap:
    """S = S_d + alpha * S_s, element-wise."""
    if (sd.width, sd.height) != (ss.width, ss.height):
        raise ShapeError("score map dimensions differ")
    return ScoreMap(width=sd.width, height=sd.height, values=sd.values + alpha * ss.values)


def token_scores(ts: TokenSet, s: ScoreMap) -> np.ndarray:
    """Mean pixel score within each token's region."""
    if (s.width, s.height) != (ts.width, ts.height):
        raise ShapeError("score map does not match the token grid")
    flat = s.flat()
    return np.array([flat[r].mean() for r in ts.regions], dtype=np.float64)


def select_centers(ts: TokenSet, n_l: int, scores: np.ndarray) -> np.ndarray:
    """Indices of the n_l highest-scoring tokens.

    Ties break toward the lower token index; the result is ordered by
    descending score, then ascending index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (ts.count,):
        raise ShapeError("score vector length mismatch")
    if not 1 <= n_l <= ts.count:
        raise ValueError(f"cannot select {n_l} centers from {ts.count} tokens")
    order = np.lexsort((np.arange(ts.count), -scores))
    return order[:n_l].astype(np.int64)


def keypoint_heatmap(kps: KeypointSet, width: int, height: int) -> ScoreMap:
    """Max-combined Gaussian splat of the keypoints, 1 at each keypoint."""
    if kps.count and (
        np.any(kps.points[:, 0] < 0)
        or np.any(kps.points[:, 0] > width - 1)
        or np.any(kps.points[:, 1] < 0)
        or np.any(kps.points[:, 1] > height - 1)
    ):
        raise ValueError("keypoint outside map bounds")
    heat = np.zeros((height, width), dtype=np.float64)
    if kps.count == 0:
        return ScoreMap(width=width, height=height, values=heat)
    u = np.arange(width, dtype=np.float64)[None, :]
    v = np.arange(height, dtype=np.float64)[:, None]
    two_sigma_sq = 2.0 * kps.gaussian_sigma**2
    for ut, vt in kps.points:
        g = np.exp(-((u - ut) ** 2 + (v - vt) ** 2) / two_sigma_sq)
        np.maximum(heat, g, out=heat)
    return ScoreMap(width=width, height=height, values=heat)


def focal_loss(pred: ScoreMap, gt_heatmap: ScoreMap) -> float:
    """Penalty-reduced focal loss between sigmoid(pred) and the gt heatmap.

    Positives are pixels with gt exactly 1; the sum is normalized by
    max(1, number of positives).
    """
    if (pred.width, pred.height) != (gt_heatmap.width, gt_heatmap.height):
        raise ShapeError("prediction and ground truth dimensions differ")
    p = _sigmoid(pred.values)
    gt = gt_heatmap.values
    pos = gt == 1.0
    eps = 1e-300  # guards log at the extreme sigmoid saturation
    pos_term = -((1.0 - p) ** 2) * np.log(np.maximum(p, eps))
    neg_term = -((1.0 - gt) ** 4) * p**2 * np.log(np.maximum(1.0 - p, eps))
    total = float(np.sum(np.where(pos, pos_term, neg_term)))
    return total / max(1, int(np.count_nonzero(pos)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    ez = np.exp(z[~positive])
    out[~positive] = ez / (1.0 + ez)
    return out
