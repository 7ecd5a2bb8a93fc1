"""ATSW weight container: a flat binary format shared by all learned blocks.

Layout: magic "ATSW", u32 layer count, then per layer four u32 dims
(out, in, kh, kw), followed by out*in*kh*kw little-endian f64 weights and
out little-endian f64 biases. Vector/matrix parameters are stored with
kh = kw = 1.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC_WEIGHTS = b"ATSW"


def save_layers(path, layers: list[tuple[np.ndarray, np.ndarray]]) -> None:
    """Write a list of (weight, bias) pairs; weight must be 4-D (out,in,kh,kw)."""
    chunks = [MAGIC_WEIGHTS, struct.pack("<I", len(layers))]
    for weight, bias in layers:
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 4:
            raise ValueError("ATSW layer weights must have shape (out, in, kh, kw)")
        out, cin, kh, kw = weight.shape
        if bias.shape != (out,):
            raise ValueError("bias length must equal the layer's output count")
        chunks.append(struct.pack("<IIII", out, cin, kh, kw))
        chunks.append(weight.astype("<f8").tobytes())
        chunks.append(bias.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_layers(path) -> list[tuple[np.ndarray, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MAGIC_WEIGHTS:
        raise ValueError("not an ATSW weight file")
    (count,) = struct.unpack("<I", blob[4:8])
    offset = 8
    layers = []
    for _ in range(count):
        if offset + 16 > len(blob):
            raise ValueError("truncated ATSW file")
        out, cin, kh, kw = struct.unpack("<IIII", blob[offset : offset + 16])
        offset += 16
        wn = out * cin * kh * kw
        need = (wn + out) * 8
        if offset + need > len(blob):
            raise ValueError("truncated ATSW file")
        weight = np.frombuffer(blob, dtype="<f8", count=wn, offset=offset)
        weight = weight.reshape(out, cin, kh, kw).astype(np.float64)
        offset += wn * 8
        bias = np.frombuffer(blob, dtype="<f8", count=out, offset=offset).astype(
            np.float64
        )
        offset += out * 8
        layers.append((weight, bias))
    if offset != len(blob):
        raise ValueError("trailing bytes in ATSW file")
    return layers
