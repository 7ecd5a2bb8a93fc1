"""Verification kit: analytic gradients for the differentiable operations,
a central finite-difference checker, and brute-force reference oracles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .fmcore import ShapeError, TokenSet

REL_ERR_FLOOR = 1e-8


@dataclass(frozen=True)
class GradCheckReport:
    operation: str
    max_rel_error: float
    element_count: int
    epsilon: float
    passed: bool

    def to_json(self) -> str:
        return json.dumps(
            {
                "operation": self.operation,
                "max_rel_error": self.max_rel_error,
                "element_count": self.element_count,
                "epsilon": self.epsilon,
                "passed": self.passed,
            }
        )


def merge_backward(
    x: np.ndarray, p: np.ndarray, g_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of y = sum_j softmax(p)_j x_j w.r.t. x and p.

    With w = softmax(p): dy/dx_j = w_j I and dy/dp_j = w_j (x_j - y).
    """
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    g_y = np.asarray(g_y, dtype=np.float64).reshape(-1)
    if x.shape[0] != p.shape[0] or x.shape[1] != g_y.shape[0]:
        raise ShapeError("merge_backward shapes disagree")
    w = np.exp(p - p.max())
    w /= w.sum()
    y = w @ x
    g_x = w[:, None] * g_y[None, :]
    g_p = (x - y) @ g_y * w
    return g_x, g_p


def biased_attention_backward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    p: np.ndarray,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of softmax(Q K^T / sqrt(d_k) + p) V."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    upstream = np.asarray(upstream, dtype=np.float64)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0] or p.shape[0] != k.shape[0]:
        raise ShapeError("biased_attention_backward shapes disagree")
    if upstream.shape != (q.shape[0], v.shape[1]):
        raise ShapeError("upstream gradient shape mismatch")
    scale = 1.0 / np.sqrt(q.shape[1])
    logits = q @ k.T * scale + p[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=1, keepdims=True)
    g_a = upstream @ v.T
    g_v = a.T @ upstream
    g_logits = a * (g_a - (g_a * a).sum(axis=1, keepdims=True))
    g_q = g_logits @ k * scale
    g_k = g_logits.T @ q * scale
    g_p = g_logits.sum(axis=0)
    return g_q, g_k, g_v, g_p


def focal_loss_backward(pred_logits: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Gradient of the penalty-reduced focal loss w.r.t. the pre-sigmoid logits."""
    z = np.asarray(pred_logits, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if z.shape != gt.shape:
        raise ShapeError("prediction and ground truth shapes differ")
    prob = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
    pos = gt == 1.0
    eps = 1e-300
    log_p = np.log(np.maximum(prob, eps))
    log_1mp = np.log(np.maximum(1.0 - prob, eps))
    # d/dz already includes the sigmoid factor p(1-p).
    pos_grad = 2.0 * prob * (1.0 - prob) ** 2 * log_p - (1.0 - prob) ** 3
    neg_grad = -((1.0 - gt) ** 4) * (
        2.0 * prob**2 * (1.0 - prob) * log_1mp - prob**3
    )
    grad = np.where(pos, pos_grad, neg_grad)
    return grad / max(1, int(np.count_nonzero(pos)))


def fd_check(
    f,
    analytic_grad: np.ndarray,
    x0: np.ndarray,
    epsilon: float = 1e-5,
    operation: str = "",
    threshold: float = 1e-6,
) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences of f.

    Relative error per coordinate is |a - fd| / max(|a|, |fd|, 1e-8); the
    report carries the maximum over all coordinates.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    analytic = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    if analytic.shape != x0.shape:
        raise ShapeError("analytic gradient length does not match x0")
    fd = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += epsilon
        xm[i] -= epsilon
        fp = float(f(xp))
        fm = float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError("function not finite near x0")
        fd[i] = (fp - fm) / (2.0 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), REL_ERR_FLOOR)
    rel = np.abs(analytic - fd) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(
        operation=operation,
        max_rel_error=max_rel,
        element_count=int(x0.size),
        epsilon=epsilon,
        passed=max_rel < threshold,
    )


def brute_force_assign(
    ts: TokenSet,
    centers: np.ndarray,
    beta: float,
    normalize_positions: bool = True,
) -> np.ndarray:
    """Unvectorized O(n*k) reference for the cluster assignment rule.

    Squared distances accumulate left to right over the channels, matching
    the vectorized path bit for bit for feature dims below numpy's pairwise
    reduction threshold (8).
    """
    centers = [int(c) for c in np.asarray(centers, dtype=np.int64)]
    pos = ts.positions
    if normalize_positions:
        pos = pos / max(ts.width, ts.height)
    feats = ts.features.tolist()
    pos_list = pos.tolist()
    beta = float(beta)
    assignment = np.empty(ts.count, dtype=np.int64)
    for i in range(ts.count):
        xi = feats[i]
        pi = pos_list[i]
        best_j = -1
        best_cost = math.inf
        for j, c in enumerate(centers):
            xc = feats[c]
            d_feat = 0.0
            for a, b in zip(xi, xc):
                d_feat += (a - b) ** 2
            pc = pos_list[c]
            d_pos = (pi[0] - pc[0]) ** 2
            d_pos += (pi[1] - pc[1]) ** 2
            cost = d_feat - beta * d_pos
            if cost < best_cost:
                best_cost = cost
                best_j = j
        assignment[i] = best_j
    for j, c in enumerate(centers):
        assignment[c] = j
    return assignment


def reference_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """Plain scaled dot-product attention written as explicit scalar loops.

    Independent of the vectorized biased path; used as the p = 0 oracle.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n_q, d_k = q.shape
    n_k, d_v = v.shape[0], v.shape[1]
    scale = 1.0 / math.sqrt(d_k)
    out = np.zeros((n_q, d_v), dtype=np.float64)
    for i in range(n_q):
        logits = [scale * sum(q[i, t] * k[j, t] for t in range(d_k)) for j in range(n_k)]
        m = max(logits)
        expw = [math.exp(val - m) for val in logits]
        total = sum(expw)
        for j in range(n_k):
            wj = expw[j] / total
            for c in range(d_v):
                out[i, c] += wj * v[j, c]
    return out
