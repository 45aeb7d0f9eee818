"""Triplane hash encoding of positions and the audio / expression condition encoders."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import MLP, ParamStore, Tensor

PRIME_Y = np.uint64(2654435761)
# (a, b) coordinate pairs of the XY, YZ and XZ planes
PLANES = ((0, 1), (1, 2), (0, 2))

AUDIO_WINDOW = 16
AUDIO_DIM = 29
EXPR_DIM = 8
AUDIO_TOKENS = 8
D_MODEL = 32


@dataclass
class TriplaneHashConfig:
    levels: int = 8
    table_size: int = 2 ** 14
    features_per_level: int = 2
    base_resolution: int = 16
    growth: float = 1.5
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        t = self.table_size
        if t <= 0 or t & (t - 1):
            raise ValueError("table_size must be a power of two")
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be >= 1")
        if self.growth <= 1:
            raise ValueError("growth factor must exceed 1")

    @property
    def out_dim(self) -> int:
        return 3 * self.levels * self.features_per_level

    def resolutions(self) -> np.ndarray:
        return np.floor(self.base_resolution * self.growth ** np.arange(self.levels)).astype(np.int64)


class TriplaneEncoder:
    """Three 2-D multiresolution hash grids; bilinear lookups concatenated per plane and level."""

    def __init__(self, params: ParamStore, name: str, config: TriplaneHashConfig, rng: np.random.Generator,
                 group: str = "hash"):
        self.config = config
        c = config
        init = rng.uniform(-1e-4, 1e-4, size=(3, c.levels, c.table_size, c.features_per_level))
        self.table = params.add(f"{name}.table", init, group)
        self.out_of_bounds = 0

    def corners(self, positions: np.ndarray):
        """Flat table row indices (3, L, 4, N) and bilinear weights for ``positions``."""
        c = self.config
        lo = np.asarray(c.bbox_min, dtype=np.float64)
        hi = np.asarray(c.bbox_max, dtype=np.float64)
        u = (np.asarray(positions, dtype=np.float64) - lo) / (hi - lo)
        outside = np.any((u < 0) | (u > 1), axis=1)
        self.out_of_bounds += int(outside.sum())
        u = np.clip(u, 0.0, 1.0)
        res = c.resolutions().astype(np.float64)
        n = u.shape[0]
        rows = np.empty((3, c.levels, 4, n), dtype=np.int64)
        weights = np.empty((3, c.levels, 4, n), dtype=np.float64)
        mask = np.uint64(c.table_size - 1)
        for p, (ia, ib) in enumerate(PLANES):
            sa = u[None, :, ia] * res[:, None]  # (L, N)
            sb = u[None, :, ib] * res[:, None]
            a0 = np.floor(sa)
            b0 = np.floor(sb)
            fa, fb = sa - a0, sb - b0
            a0 = a0.astype(np.uint64)
            b0 = b0.astype(np.uint64)
            for k, (da, db) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
                h = (a0 + np.uint64(da)) ^ ((b0 + np.uint64(db)) * PRIME_Y)
                idx = (h & mask).astype(np.int64)
                rows[p, :, k] = (p * c.levels + np.arange(c.levels)[:, None]) * c.table_size + idx
                wa = fa if da else 1.0 - fa
                wb = fb if db else 1.0 - fb
                weights[p, :, k] = wa * wb
        return rows, weights

    def __call__(self, positions) -> Tensor:
        pos = positions.data if isinstance(positions, Tensor) else np.asarray(positions)
        return triplane_encode(pos, self)


def triplane_encode(positions: np.ndarray, encoder: TriplaneEncoder) -> Tensor:
    """(N, 3) positions -> (N, 3*L*F) features; gradients reach only the table."""
    c = encoder.config
    table = encoder.table
    f = c.features_per_level
    rows, weights = encoder.corners(positions)
    w = weights.astype(table.dtype)
    flat = table.data.reshape(-1, f)
    gathered = flat[rows]  # (3, L, 4, N, F)
    feats = (gathered * w[..., None]).sum(axis=2)  # (3, L, N, F)
    n = rows.shape[-1]
    out = np.ascontiguousarray(feats.transpose(2, 0, 1, 3).reshape(n, -1))
    size = table.data.size

    def bw(g):
        g = g.reshape(n, 3, c.levels, f).transpose(1, 2, 0, 3)  # (3, L, N, F)
        contrib = w[..., None] * g[:, :, None, :, :]  # (3, L, 4, N, F)
        idx = rows[..., None] * f + np.arange(f)
        full = np.bincount(idx.reshape(-1), weights=contrib.reshape(-1).astype(np.float64), minlength=size)
        return (full.astype(table.dtype).reshape(table.shape),)
    return dc.tensor._make(out, (table,), bw, "triplane_encode")


class AudioEncoder:
    """Per-token MLP over a (T_w, 29) window, then stride-2 mean pooling to T_w/2 tokens."""

    def __init__(self, params: ParamStore, name: str, rng: np.random.Generator, group: str = "mlp",
                 window: int = AUDIO_WINDOW, d_raw: int = AUDIO_DIM, d_model: int = D_MODEL, hidden: int = 64):
        self.window, self.d_raw, self.d_model = window, d_raw, d_model
        self.mlp = MLP(params, name, [d_raw, hidden, d_model], rng, group, act="tanh", out_act="tanh")

    def __call__(self, window) -> Tensor:
        window = dc.as_tensor(window)
        if window.shape[-2:] != (self.window, self.d_raw):
            raise dc.ShapeError("encode_audio", window.shape, (self.window, self.d_raw))
        tok = self.mlp(window)
        lead = tok.shape[:-2]
        pooled = tok.reshape(*lead, self.window // 2, 2, self.d_model).mean(axis=-2)
        return pooled


class ExpressionEncoder:
    def __init__(self, params: ParamStore, name: str, rng: np.random.Generator, group: str = "mlp",
                 d_raw: int = EXPR_DIM, d_model: int = D_MODEL, hidden: int = 64):
        self.d_raw, self.d_model = d_raw, d_model
        self.mlp = MLP(params, name, [d_raw, hidden, d_model], rng, group, act="tanh", out_act="tanh")

    def __call__(self, expr) -> Tensor:
        expr = dc.as_tensor(expr)
        if expr.shape[-1] != self.d_raw:
            raise dc.ShapeError("encode_expression", expr.shape, (self.d_raw,))
        return self.mlp(expr.reshape(-1, self.d_raw))


def encode_audio(window, encoder: AudioEncoder) -> Tensor:
    return encoder(window)


def encode_expression(expr, encoder: ExpressionEncoder) -> Tensor:
    return encoder(expr)


def audio_windows(tokens: np.ndarray, window: int = AUDIO_WINDOW) -> np.ndarray:
    """Per-frame windows of ``window`` raw tokens centred on each frame, edge padded.

    Frame i covers source indices i - window//2 .. i + window//2 - 1.
    """
    n = tokens.shape[0]
    offs = np.arange(window) - window // 2
    idx = np.clip(np.arange(n)[:, None] + offs[None, :], 0, n - 1)
    return tokens[idx]
