"""Adaptive token transformer: outline-preferred grouping, attention-weighted
merging, score-biased attention, and the multi-stage orchestration loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import weights as weightsio
from .cce import ScoreMap, select_centers, token_scores
from .fmcore import (
    FeatureMap,
    PipelineConfig,
    ShapeError,
    StageTrace,
    TokenSet,
    pixel_positions,
    slice_to_tokens,
)

_LN_EPS = 1e-6


@dataclass(frozen=True)
class AttentionScoreHead:
    """Linear map from a token feature to its scalar attention score p."""

    weight: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", float(self.bias))

    @classmethod
    def seeded(cls, dim: int, seed: int) -> "AttentionScoreHead":
        rng = np.random.default_rng(seed)
        return cls(weight=rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim), bias=0.0)

    def save(self, path) -> None:
        weightsio.save_layers(
            path, [(self.weight.reshape(1, -1, 1, 1), np.array([self.bias]))]
        )

    @classmethod
    def load(cls, path) -> "AttentionScoreHead":
        layers = weightsio.load_layers(path)
        if len(layers) != 1:
            raise ValueError("attention score head file must hold one layer")
        weight, bias = layers[0]
        return cls(weight=weight.reshape(-1), bias=float(bias[0]))


@dataclass(frozen=True)
class TransformerBlock:
    """Single-head pre-norm block: biased attention plus a two-layer MLP,
    each wrapped in a residual connection.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ff_w1: np.ndarray
    ff_b1: np.ndarray
    ff_w2: np.ndarray
    ff_b2: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray

    def __post_init__(self):
        arrs = {
            name: np.asarray(getattr(self, name), dtype=np.float64)
            for name in (
                "w_q", "w_k", "w_v", "w_o",
                "ff_w1", "ff_b1", "ff_w2", "ff_b2",
                "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
            )
        }
        dim, d_k = arrs["w_q"].shape
        hidden = arrs["ff_w1"].shape[1]
        if arrs["w_k"].shape != (dim, d_k) or arrs["w_v"].shape != (dim, d_k):
            raise ShapeError("key/value projections must match the query shape")
        if arrs["w_o"].shape != (d_k, dim):
            raise ShapeError("output projection must map d_k back to the feature dim")
        if arrs["ff_w1"].shape != (dim, hidden) or arrs["ff_w2"].shape != (hidden, dim):
            raise ShapeError("feed-forward shapes do not chain")
        if arrs["ff_b1"].shape != (hidden,) or arrs["ff_b2"].shape != (dim,):
            raise ShapeError("feed-forward bias shapes do not chain")
        for name in ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
            if arrs[name].shape != (dim,):
                raise ShapeError("normalization parameters must match the feature dim")
        for name, arr in arrs.items():
            object.__setattr__(self, name, arr)

    @property
    def feature_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def seeded(cls, dim: int, d_k: int, hidden: int, seed: int) -> "TransformerBlock":
        rng = np.random.default_rng(seed)
        s_in = 1.0 / np.sqrt(dim)
        s_dk = 1.0 / np.sqrt(d_k)
        s_h = 1.0 / np.sqrt(hidden)
        return cls(
            w_q=rng.normal(0.0, s_in, size=(dim, d_k)),
            w_k=rng.normal(0.0, s_in, size=(dim, d_k)),
            w_v=rng.normal(0.0, s_in, size=(dim, d_k)),
            w_o=rng.normal(0.0, s_dk, size=(d_k, dim)),
            ff_w1=rng.normal(0.0, s_in, size=(dim, hidden)),
            ff_b1=np.zeros(hidden),
            ff_w2=rng.normal(0.0, s_h, size=(hidden, dim)),
            ff_b2=np.zeros(dim),
            ln1_gamma=np.ones(dim),
            ln1_beta=np.zeros(dim),
            ln2_gamma=np.ones(dim),
            ln2_beta=np.zeros(dim),
        )

    @classmethod
    def zeros(cls, dim: int, d_k: int, hidden: int) -> "TransformerBlock":
        return cls(
            w_q=np.zeros((dim, d_k)),
            w_k=np.zeros((dim, d_k)),
            w_v=np.zeros((dim, d_k)),
            w_o=np.zeros((d_k, dim)),
            ff_w1=np.zeros((dim, hidden)),
            ff_b1=np.zeros(hidden),
            ff_w2=np.zeros((hidden, dim)),
            ff_b2=np.zeros(dim),
            ln1_gamma=np.ones(dim),
            ln1_beta=np.zeros(dim),
            ln2_gamma=np.ones(dim),
            ln2_beta=np.zeros(dim),
        )

    def save(self, path) -> None:
        def mat(m):
            return m.T.reshape(m.shape[1], m.shape[0], 1, 1)

        layers = [
            (mat(self.w_q), np.zeros(self.d_k)),
            (mat(self.w_k), np.zeros(self.d_k)),
            (mat(self.w_v), np.zeros(self.d_k)),
            (mat(self.w_o), np.zeros(self.feature_dim)),
            (mat(self.ff_w1), self.ff_b1),
            (mat(self.ff_w2), self.ff_b2),
            (self.ln1_gamma.reshape(-1, 1, 1, 1), self.ln1_beta),
            (self.ln2_gamma.reshape(-1, 1, 1, 1), self.ln2_beta),
        ]
        weightsio.save_layers(path, layers)

    @classmethod
    def load(cls, path) -> "TransformerBlock":
        layers = weightsio.load_layers(path)
        if len(layers) != 8:
            raise ValueError("transformer block file must hold eight layers")

        def unmat(layer):
            weight, _ = layer
            return weight.reshape(weight.shape[0], weight.shape[1]).T

        return cls(
            w_q=unmat(layers[0]),
            w_k=unmat(layers[1]),
            w_v=unmat(layers[2]),
            w_o=unmat(layers[3]),
            ff_w1=unmat(layers[4]),
            ff_b1=layers[4][1],
            ff_w2=unmat(layers[5]),
            ff_b2=layers[5][1],
            ln1_gamma=layers[6][0].reshape(-1),
            ln1_beta=layers[6][1],
            ln2_gamma=layers[7][0].reshape(-1),
            ln2_beta=layers[7][1],
        )


def assign_clusters(
    ts: TokenSet,
    centers: np.ndarray,
    beta: float,
    normalize_positions: bool = True,
) -> np.ndarray:
    """Assign every token to the center minimizing
    ||x_i - x_c||^2 - beta * ||pos_i - pos_c||^2.

    Centers are force-assigned to their own clusters; ties break toward the
    lower cluster index. Position distances are computed on coordinates
    divided by max(W, H) unless normalize_positions is False.
    """
    centers = np.asarray(centers, dtype=np.int64)
    if centers.size == 0:
        raise ValueError("need at least one center")
    if np.unique(centers).size != centers.size:
        raise ValueError("duplicate center indices")
    if centers.min() < 0 or centers.max() >= ts.count:
        raise ValueError("center index out of range")
    pos = ts.positions
    if normalize_positions:
        pos = pos / max(ts.width, ts.height)
    feats = ts.features
    d_feat = ((feats[:, None, :] - feats[None, centers, :]) ** 2).sum(axis=-1)
    d_pos = ((pos[:, None, :] - pos[None, centers, :]) ** 2).sum(axis=-1)
    cost = d_feat - beta * d_pos
    assignment = np.argmin(cost, axis=1).astype(np.int64)
    assignment[centers] = np.arange(centers.size)
    return assignment


def attention_scores(ts: TokenSet, head: AttentionScoreHead) -> np.ndarray:
    """Per-token scalar attention score p = w . x + b."""
    if head.weight.shape[0] != ts.feature_dim:
        raise ShapeError("score head width does not match the feature dim")
    return ts.features @ head.weight + head.bias


def merge_clusters(
    ts: TokenSet,
    assignment: np.ndarray,
    p: np.ndarray,
    centers: np.ndarray,
    stage_index: int = 0,
) -> tuple[TokenSet, StageTrace]:
    """Merge each cluster into one token via an exp(p)-weighted feature mean.

    The merged region is the union of member regions and the merged position
    is the centroid of that union. Members are reduced in ascending token
    index order so results are independent of any outer parallelism.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    p = np.asarray(p, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.int64)
    n_out = centers.size
    if assignment.shape != (ts.count,) or p.shape != (ts.count,):
        raise ShapeError("assignment/score lengths must match the token count")
    grid = pixel_positions(ts.width, ts.height)
    features = np.empty((n_out, ts.feature_dim), dtype=np.float64)
    regions: list[np.ndarray] = []
    positions = np.empty((n_out, 2), dtype=np.float64)
    for j in range(n_out):
        members = np.flatnonzero(assignment == j)
        w = np.exp(p[members] - p[members].max())
        w /= w.sum()
        features[j] = w @ ts.features[members]
        region = np.sort(np.concatenate([ts.regions[m] for m in members]))
        regions.append(region)
        positions[j] = grid[region].mean(axis=0)
    merged = TokenSet(
        width=ts.width,
        height=ts.height,
        features=features,
        regions=regions,
        positions=positions,
    )
    trace = StageTrace(
        stage_index=stage_index,
        assignment=assignment,
        center_token_indices=centers,
        attention_scores=p,
        input_features=ts.features.copy(),
    )
    return merged, trace


def biased_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, p: np.ndarray
) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_k) + p) V with p broadcast across query rows."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if q.shape[1] != k.shape[1]:
        raise ShapeError("query and key dims differ")
    if k.shape[0] != v.shape[0] or p.shape[0] != k.shape[0]:
        raise ShapeError("key, value, and bias counts differ")
    logits = q @ k.T / np.sqrt(q.shape[1]) + p[None, :]
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


def _layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS) * gamma + beta


def transformer_stage(
    merged: TokenSet,
    original: TokenSet,
    p: np.ndarray,
    blk: TransformerBlock,
) -> TokenSet:
    """Refine merged token features by attending back to the stage's inputs.

    Merged tokens provide queries; the original tokens provide keys and
    values, with p biasing the attention logits. Regions and positions are
    untouched.
    """
    if blk.feature_dim != merged.feature_dim:
        raise ShapeError("block width does not match the feature dim")
    x = merged.features
    nq = _layernorm(x, blk.ln1_gamma, blk.ln1_beta)
    nkv = _layernorm(original.features, blk.ln1_gamma, blk.ln1_beta)
    attn = biased_attention(nq @ blk.w_q, nkv @ blk.w_k, nkv @ blk.w_v, p)
    x = x + attn @ blk.w_o
    h = _layernorm(x, blk.ln2_gamma, blk.ln2_beta)
    x = x + np.maximum(h @ blk.ff_w1 + blk.ff_b1, 0.0) @ blk.ff_w2 + blk.ff_b2
    return TokenSet(
        width=merged.width,
        height=merged.height,
        features=x,
        regions=merged.regions,
        positions=merged.positions,
    )


def build_stage_params(
    cfg: PipelineConfig, channels: int
) -> tuple[list[AttentionScoreHead], list[TransformerBlock]]:
    """Deterministically seed one score head and one block per stage."""
    hidden = cfg.mlp_hidden if cfg.mlp_hidden > 0 else 2 * channels
    heads = [
        AttentionScoreHead.seeded(channels, cfg.rng_seed * 1000 + 2 * l)
        for l in range(cfg.num_stages)
    ]
    blocks = [
        TransformerBlock.seeded(channels, cfg.d_k, hidden, cfg.rng_seed * 1000 + 2 * l + 1)
        for l in range(cfg.num_stages)
    ]
    return heads, blocks


def run_att(
    fm: FeatureMap,
    s: ScoreMap,
    cfg: PipelineConfig,
    heads: list[AttentionScoreHead],
    blocks: list[TransformerBlock],
) -> tuple[TokenSet, list[StageTrace]]:
    """Run the full N-stage cluster/merge/attend loop on the feature map.

    Pixel scores are computed once and re-averaged over the evolving token
    regions at the start of each stage.
    """
    cfg.validate_for(fm.width, fm.height)
    if len(heads) != cfg.num_stages or len(blocks) != cfg.num_stages:
        raise ShapeError("need one score head and one block per stage")
    ts = slice_to_tokens(fm)
    traces: list[StageTrace] = []
    for l, n_l in enumerate(cfg.token_schedule, start=1):
        if n_l > ts.count:
            raise ValueError(f"stage {l} requests {n_l} tokens from {ts.count}")
        scores = token_scores(ts, s)
        centers = select_centers(ts, n_l, scores)
        assignment = assign_clusters(
            ts, centers, cfg.beta, normalize_positions=cfg.normalize_positions
        )
        p = attention_scores(ts, heads[l - 1])
        merged, trace = merge_clusters(ts, assignment, p, centers, stage_index=l)
        ts = transformer_stage(merged, ts, p, blocks[l - 1])
        traces.append(trace)
    return ts, traces
