"""Multi-stage feature reconstruction: unwind recorded stage traces to turn
the final irregular tokens back into a dense pixel-level feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fmcore import FeatureMap, ShapeError, StageTrace, TokenSet


@dataclass(frozen=True)
class MlpBlock:
    """Two-layer MLP with a ReLU between, applied with a residual connection
    around the whole block. One unshared block per reconstruction stage.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        b1 = np.asarray(self.b1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64)
        b2 = np.asarray(self.b2, dtype=np.float64)
        dim, hidden = w1.shape
        if w2.shape != (hidden, dim) or b1.shape != (hidden,) or b2.shape != (dim,):
            raise ShapeError("MLP block shapes do not chain")
        for name, arr in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            object.__setattr__(self, name, arr)

    @classmethod
    def seeded(cls, dim: int, hidden: int, seed: int) -> "MlpBlock":
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, dim)),
            b2=np.zeros(dim),
        )

    @classmethod
    def zeros(cls, dim: int, hidden: int) -> "MlpBlock":
        return cls(
            w1=np.zeros((dim, hidden)),
            b1=np.zeros(hidden),
            w2=np.zeros((hidden, dim)),
            b2=np.zeros(dim),
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x + np.maximum(x @ self.w1 + self.b1, 0.0) @ self.w2 + self.b2


def upsample_stage(merged_feats: np.ndarray, trace: StageTrace) -> np.ndarray:
    """Copy each merged token's feature row to all of its member tokens."""
    merged_feats = np.asarray(merged_feats, dtype=np.float64)
    if merged_feats.shape[0] != trace.num_clusters:
        raise ShapeError(
            f"{merged_feats.shape[0]} merged rows for {trace.num_clusters} clusters"
        )
    return merged_feats[trace.assignment]


def aggregate_stage(upsampled: np.ndarray, trace: StageTrace) -> np.ndarray:
    """Add the stage's recorded input features to the upsampled tokens."""
    upsampled = np.asarray(upsampled, dtype=np.float64)
    if upsampled.shape != trace.input_features.shape:
        raise ShapeError("upsampled features do not match the recorded stage input")
    return upsampled + trace.input_features


def build_mlps(num_stages: int, dim: int, hidden: int, seed: int) -> list[MlpBlock]:
    return [MlpBlock.seeded(dim, hidden, seed * 1000 + 500 + l) for l in range(num_stages)]


def reconstruct(
    final: TokenSet, traces: list[StageTrace], mlps: list[MlpBlock]
) -> FeatureMap:
    """Unwind traces from the last stage to the first and rebuild the dense map.

    Stage N's upsample expands the final tokens; each earlier stage adds the
    recorded skip features and passes through its MLP block. The resulting
    per-pixel tokens are scattered to their grid positions.
    """
    if len(traces) != len(mlps):
        raise ShapeError("need one MLP block per recorded stage")
    if not traces:
        raise ValueError("no stage traces to reconstruct from")
    if traces[-1].num_clusters != final.count:
        raise ShapeError("final token count does not match the last trace")
    feats = final.features
    for trace, mlp in zip(reversed(traces), reversed(mlps)):
        if trace.num_clusters != feats.shape[0]:
            raise ShapeError(
                f"stage {trace.stage_index}: {feats.shape[0]} tokens for "
                f"{trace.num_clusters} clusters"
            )
        feats = upsample_stage(feats, trace)
        feats = aggregate_stage(feats, trace)
        feats = mlp.apply(feats)
    if feats.shape[0] != final.width * final.height:
        raise ShapeError("reconstruction did not terminate at one token per pixel")
    # Stage-1 inputs are the per-pixel tokens in flat pixel-index order, so
    # the rows already line up with the grid.
    return FeatureMap(
        width=final.width,
        height=final.height,
        channels=feats.shape[1],
        data=feats,
    )
