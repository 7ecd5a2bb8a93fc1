"""Core value types: feature maps, token sets, stage traces, and configuration.

Pixel indexing convention used everywhere: the grid is W x H with u = column,
v = row, origin at the top-left, and flat pixel index i = v * W + u (row-major).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC_FEATURE_MAP = b"ATFM"


class ShapeError(ValueError):
    """Raised when array shapes or dimensions are inconsistent."""


@dataclass(frozen=True)
class FeatureMap:
    """Dense width x height x channels feature map.

    ``data`` is stored as a float64 array of shape (height, width, channels),
    i.e. row-major with the channel axis fastest.
    """

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.channels < 1:
            raise ShapeError("feature map dimensions must be >= 1")
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if data.size != self.width * self.height * self.channels:
            raise ShapeError(
                f"data size {data.size} != {self.width}*{self.height}*{self.channels}"
            )
        data = data.reshape(self.height, self.width, self.channels)
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    def pixel_features(self) -> np.ndarray:
        """(W*H, C) view of the per-pixel feature vectors, pixel-index order."""
        return self.data.reshape(self.num_pixels, self.channels)

    def to_bytes(self) -> bytes:
        header = MAGIC_FEATURE_MAP + struct.pack(
            "<III", self.width, self.height, self.channels
        )
        return header + self.data.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureMap":
        if len(blob) < 16 or blob[:4] != MAGIC_FEATURE_MAP:
            raise ValueError("not an ATFM feature map blob")
        w, h, c = struct.unpack("<III", blob[4:16])
        expected = 16 + w * h * c * 8
        if len(blob) != expected:
            raise ValueError(f"truncated ATFM blob: {len(blob)} bytes, want {expected}")
        data = np.frombuffer(blob, dtype="<f8", offset=16).astype(np.float64)
        return cls(width=w, height=h, channels=c, data=data)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureMap":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters plus camera elevation and depth-score gain."""

    f_x: float
    f_y: float
    c_x: float
    c_y: float
    cam_height: float
    score_gain: float = 1.0

    def __post_init__(self):
        if self.f_x <= 0 or self.f_y <= 0:
            raise ValueError("focal lengths must be positive")
        if self.cam_height <= 0:
            raise ValueError("camera height must be positive")
        if self.score_gain <= 0:
            raise ValueError("score gain must be positive")


def pixel_positions(width: int, height: int) -> np.ndarray:
    """(W*H, 2) array of (u, v) coordinates in flat pixel-index order."""
    v, u = np.divmod(np.arange(width * height), width)
    return np.stack([u, v], axis=1).astype(np.float64)


@dataclass(frozen=True)
class TokenSet:
    """A set of n tokens partitioning a W x H pixel grid.

    features:  (n, C') float64 matrix.
    regions:   per token, a sorted int64 array of flat pixel indices.
    positions: (n, 2) centroids in (u, v) pixel units.
    """

    width: int
    height: int
    features: np.ndarray
    regions: list[np.ndarray]
    positions: np.ndarray

    def __post_init__(self):
        features = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        positions = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        regions = [np.asarray(r, dtype=np.int64) for r in self.regions]
        n = features.shape[0]
        if len(regions) != n or positions.shape != (n, 2):
            raise ShapeError("features/regions/positions lengths disagree")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "regions", regions)
        self._check_partition()
        self._check_positions()

    def _check_partition(self):
        total = self.width * self.height
        seen = np.zeros(total, dtype=bool)
        count = 0
        for r in self.regions:
            if r.size == 0:
                raise ValueError("empty token region")
            if np.any(np.diff(r) <= 0):
                raise ValueError("region indices must be sorted and unique")
            if r[0] < 0 or r[-1] >= total:
                raise ValueError("region index out of grid bounds")
            if np.any(seen[r]):
                raise ValueError("token regions overlap")
            seen[r] = True
            count += r.size
        if count != total:
            raise ValueError("token regions do not cover the full pixel grid")

    def _check_positions(self):
        grid = pixel_positions(self.width, self.height)
        for i, r in enumerate(self.regions):
            centroid = grid[r].mean(axis=0)
            if np.max(np.abs(centroid - self.positions[i])) > 1e-9:
                raise ValueError(f"position of token {i} is not its region centroid")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class StageTrace:
    """Record of one clustering stage, consumed by the reconstruction pass.

    assignment maps each of the stage's n_in input tokens to a cluster in
    [0, n_out); center_token_indices[j] is the input token anchoring cluster j.
    """

    stage_index: int
    assignment: np.ndarray
    center_token_indices: np.ndarray
    attention_scores: np.ndarray
    input_features: np.ndarray

    def __post_init__(self):
        assignment = np.asarray(self.assignment, dtype=np.int64)
        centers = np.asarray(self.center_token_indices, dtype=np.int64)
        scores = np.asarray(self.attention_scores, dtype=np.float64)
        feats = np.asarray(self.input_features, dtype=np.float64)
        n_in = assignment.shape[0]
        n_out = centers.shape[0]
        if scores.shape != (n_in,) or feats.shape[0] != n_in:
            raise ShapeError("trace field lengths disagree")
        counts = np.bincount(assignment, minlength=n_out)
        if assignment.size and (assignment.min() < 0 or assignment.max() >= n_out):
            raise ValueError("assignment index out of cluster range")
        if np.any(counts == 0):
            raise ValueError("empty cluster in stage trace")
        if not np.array_equal(assignment[centers], np.arange(n_out)):
            raise ValueError("center tokens must belong to their own clusters")
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "center_token_indices", centers)
        object.__setattr__(self, "attention_scores", scores)
        object.__setattr__(self, "input_features", feats)

    @property
    def num_input_tokens(self) -> int:
        return self.assignment.shape[0]

    @property
    def num_clusters(self) -> int:
        return self.center_token_indices.shape[0]


@dataclass(frozen=True)
class PipelineConfig:
    """Stage schedule and hyperparameters for the token pipeline."""

    token_schedule: tuple[int, ...]
    alpha: float = 1.0
    beta: float = 0.05
    d_k: int = 16
    rng_seed: int = 0
    mlp_hidden: int = 0  # 0 means "2 * feature dim", resolved at build time
    normalize_positions: bool = True

    def __post_init__(self):
        schedule = tuple(int(n) for n in self.token_schedule)
        if not schedule:
            raise ValueError("token schedule must be non-empty")
        if any(n < 1 for n in schedule):
            raise ValueError("all stage token counts must be >= 1")
        if any(a <= b for a, b in zip(schedule, schedule[1:])):
            raise ValueError("token schedule must be strictly decreasing")
        object.__setattr__(self, "token_schedule", schedule)

    @property
    def num_stages(self) -> int:
        return len(self.token_schedule)

    def validate_for(self, width: int, height: int) -> None:
        if self.token_schedule[0] > width * height:
            raise ValueError(
                f"first stage count {self.token_schedule[0]} exceeds "
                f"{width}x{height} pixel grid"
            )


def slice_to_tokens(fm: FeatureMap) -> TokenSet:
    """Turn every pixel of the feature map into its own single-pixel token."""
    n = fm.num_pixels
    regions = [np.array([i], dtype=np.int64) for i in range(n)]
    return TokenSet(
        width=fm.width,
        height=fm.height,
        features=fm.pixel_features().copy(),
        regions=regions,
        positions=pixel_positions(fm.width, fm.height),
    )


def token_centroids(ts: TokenSet) -> np.ndarray:
    """(n, 2) mean (u, v) position of each token's pixel region."""
    grid = pixel_positions(ts.width, ts.height)
    return np.stack([grid[r].mean(axis=0) for r in ts.regions], axis=0)


def tokens_to_feature_map(ts: TokenSet) -> FeatureMap:
    """Scatter token features back onto the pixel grid (copy semantics)."""
    out = np.empty((ts.width * ts.height, ts.feature_dim), dtype=np.float64)
    for i, r in enumerate(ts.regions):
        out[r] = ts.features[i]
    return FeatureMap(
        width=ts.width, height=ts.height, channels=ts.feature_dim, data=out
    )
