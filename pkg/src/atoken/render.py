"""Dependency-free rendering of token maps and score maps to PPM and SVG."""

from __future__ import annotations

import numpy as np

from .cce import ScoreMap
from .fmcore import TokenSet

_HASH_MULT = 2654435761  # odd => injective modulo 2^24


def token_color(index: int) -> tuple[int, int, int]:
    """Deterministic palette: distinct RGB for every token index < 2^24."""
    h = (index * _HASH_MULT) % (1 << 24)
    return (h >> 16) & 0xFF, (h >> 8) & 0xFF, h & 0xFF


def token_label_image(ts: TokenSet) -> np.ndarray:
    """(H, W) int array mapping each pixel to its token index."""
    labels = np.empty(ts.width * ts.height, dtype=np.int64)
    for i, r in enumerate(ts.regions):
        labels[r] = i
    return labels.reshape(ts.height, ts.width)


def _scale_up(img: np.ndarray, scale: int) -> np.ndarray:
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary P6."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM file")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def token_map_rgb(
    ts: TokenSet, scale: int = 1, outline: bool = True
) -> np.ndarray:
    """Raster of the token partition: one flat color per token, with black
    outlines along region boundaries when scale >= 3.
    """
    labels = token_label_image(ts)
    rgb = np.empty((ts.height, ts.width, 3), dtype=np.uint8)
    for i in range(ts.count):
        rgb[labels == i] = token_color(i)
    rgb = _scale_up(rgb, scale)
    if outline and scale >= 3:
        big = _scale_up(labels, scale)
        edge = np.zeros(big.shape, dtype=bool)
        edge[:, 1:] |= big[:, 1:] != big[:, :-1]
        edge[1:, :] |= big[1:, :] != big[:-1, :]
        rgb[edge] = 0
    return rgb


def score_map_rgb(s: ScoreMap, scale: int = 1) -> np.ndarray:
    """Blue-to-red heat rendering of a score map, min-max normalized."""
    vals = s.values
    lo, hi = float(vals.min()), float(vals.max())
    t = (vals - lo) / (hi - lo) if hi > lo else np.zeros_like(vals)
    rgb = np.stack(
        [
            np.round(255 * t),
            np.round(64 * (1.0 - np.abs(2.0 * t - 1.0))),
            np.round(255 * (1.0 - t)),
        ],
        axis=-1,
    ).astype(np.uint8)
    return _scale_up(rgb, scale)


def render_token_map(
    ts: TokenSet,
    path,
    scores: ScoreMap | None = None,
    scale: int = 1,
    outline: bool = True,
) -> None:
    """Write the token partition as PPM; if scores are given, the heatmap is
    rendered alongside, separated by a one-cell white gap.
    """
    left = token_map_rgb(ts, scale=scale, outline=outline)
    if scores is None:
        write_ppm(path, left)
        return
    right = score_map_rgb(scores, scale=scale)
    gap = np.full((left.shape[0], scale, 3), 255, dtype=np.uint8)
    write_ppm(path, np.concatenate([left, gap, right], axis=1))


def render_token_svg(ts: TokenSet, path, cell: int = 10) -> None:
    """SVG with one filled rect per pixel, grouped per token with an outline
    stroke on the group.
    """
    labels = token_label_image(ts)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{ts.width * cell}" height="{ts.height * cell}">'
    ]
    for i, r in enumerate(ts.regions):
        cr, cg, cb = token_color(i)
        lines.append(f'<g fill="rgb({cr},{cg},{cb})" stroke="black" stroke-width="0.5">')
        for idx in r:
            u = int(idx % ts.width)
            v = int(idx // ts.width)
            # Stroke only edges facing a different token.
            lines.append(
                f'<rect x="{u * cell}" y="{v * cell}" width="{cell}" height="{cell}" '
                f'stroke-opacity="{_edge_opacity(labels, u, v, i)}"/>'
            )
        lines.append("</g>")
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _edge_opacity(labels: np.ndarray, u: int, v: int, token: int) -> float:
    h, w = labels.shape
    for du, dv in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        uu, vv = u + du, v + dv
        if not (0 <= uu < w and 0 <= vv < h) or labels[vv, uu] != token:
            return 1.0
    return 0.0
