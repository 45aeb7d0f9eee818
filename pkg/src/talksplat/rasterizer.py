"""Differentiable tile-based Gaussian splatting.

Projection (EWA) is composed from diffcore ops so its gradients come for
free.  Per-pixel compositing is one fused op with a hand-written backward
that works tile by tile on dense (pixels x splats) blocks.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .gaussians import GaussianCloud, covariance, sh_color

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
COV2D_FLOOR = 0.3
DET_MIN = 1e-12
# power = -d^2/2, so a 3-sigma ellipse is power >= -4.5
POWER_CUTOFF = -4.5


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("camera focal lengths must be positive")
        r = self.world_to_camera[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation block is not orthonormal")

    @property
    def R(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass
class Splats:
    mean2d: Tensor        # (M, 2)
    cov2d: Tensor         # (M, 2, 2)
    conic: Tensor         # (M, 3): inverse covariance (a, b, c) with b off-diagonal
    color: Tensor         # (M, 3)
    opacity: Tensor       # (M,)
    depth: np.ndarray     # (M,)
    index: np.ndarray     # (M,) source primitive of each splat
    culled: np.ndarray    # (N,) per input primitive: behind the near plane
    n_singular: int = 0

    def __len__(self):
        return len(self.depth)


@dataclass
class RegionalRender:
    out: Tensor            # (H, W, 4): rgb then alpha
    region: str | None
    splats: Splats | None = None
    active_signature: int | None = None

    @property
    def color(self) -> Tensor:
        return self.out[:, :, :3]

    @property
    def alpha(self) -> Tensor:
        return self.out[:, :, 3]

    @property
    def shape(self):
        return self.out.shape[:2]


def project(cloud: GaussianCloud, cam: Camera, z_near: float = 0.01) -> Splats:
    rc = cam.R
    tc = cam.t
    n = len(cloud)
    z_all = cloud.mu.data.astype(np.float64) @ rc[2] + tc[2]
    culled = z_all <= z_near
    keep = np.flatnonzero(~culled)
    sub = cloud if keep.size == n else cloud.subset(keep)
    dtype = cloud.mu.dtype

    p = sub.mu @ Tensor(rc.T.astype(dtype)) + Tensor(tc.astype(dtype))
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    iz = 1.0 / z
    u = x * iz * cam.fx + cam.cx
    v = y * iz * cam.fy + cam.cy
    mean2d = dc.stack([u, v], axis=1)

    j00 = (iz * cam.fx).reshape(-1, 1)
    j02 = (x * iz * iz * (-cam.fx)).reshape(-1, 1)
    j11 = (iz * cam.fy).reshape(-1, 1)
    j12 = (y * iz * iz * (-cam.fy)).reshape(-1, 1)
    r0, r1, r2 = (Tensor(rc[i].astype(dtype)) for i in range(3))
    jw = dc.stack([j00 * r0 + j02 * r2, j11 * r1 + j12 * r2], axis=1)  # (M, 2, 3)
    sigma = covariance(sub.rot, sub.s_log)
    cov2d = jw @ sigma @ jw.transpose(0, 2, 1) + Tensor((COV2D_FLOOR * np.eye(2)).astype(dtype))

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = dc.stack([c / det, -b / det, a / det], axis=1)

    dirs = dc.l2_normalize(sub.mu - Tensor(cam.center.astype(dtype)), axis=1)
    color = sh_color(sub.sh, dirs, sub.sh_degree)
    opacity = dc.sigmoid(sub.alpha_logit)

    depth = z.data.astype(np.float64)
    index = keep
    singular = det.data <= DET_MIN
    n_singular = int(singular.sum())
    if n_singular:
        ok = np.flatnonzero(~singular)
        mean2d, cov2d, conic = dc.gather(mean2d, ok), dc.gather(cov2d, ok), dc.gather(conic, ok)
        color, opacity = dc.gather(color, ok), dc.gather(opacity, ok)
        depth, index = depth[ok], index[ok]
    return Splats(mean2d, cov2d, conic, color, opacity, depth, index, culled, n_singular)


def splat_radius(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    # small pad keeps the tile bound conservative under rounding
    return np.ceil(3.0 * np.sqrt(lam) + 1e-3)


def _tile_grid(width: int, height: int):
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    tiles = []
    for ty in range(nty):
        for tx in range(ntx):
            x0, y0 = tx * TILE, ty * TILE
            x1, y1 = min(x0 + TILE, width), min(y0 + TILE, height)
            ys, xs = np.mgrid[y0:y1, x0:x1]
            tiles.append((tx, ty, (y0, y1, x0, x1), xs.reshape(-1), ys.reshape(-1)))
    return tiles


def _bin_splats(mx, my, radius, width, height):
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    tx0 = np.floor((mx - radius) / TILE)
    tx1 = np.floor((mx + radius) / TILE)
    ty0 = np.floor((my - radius) / TILE)
    ty1 = np.floor((my + radius) / TILE)
    visible = (tx1 >= 0) & (tx0 <= ntx - 1) & (ty1 >= 0) & (ty0 <= nty - 1) & np.isfinite(mx) & np.isfinite(my)
    return tx0, tx1, ty0, ty1, visible


class _Composite:
    """State shared by the forward and backward of one compositing call."""

    def __init__(self, mean2d, conic, color, opacity, depth, cov2d, width, height, background, threads):
        self.order = np.argsort(depth, kind="stable")
        o = self.order
        self.mx = mean2d[o, 0]
        self.my = mean2d[o, 1]
        self.ca, self.cb, self.cc = conic[o, 0], conic[o, 1], conic[o, 2]
        self.col = color[o]
        self.op = opacity[o]
        self.width, self.height = width, height
        self.bg = np.asarray(background, dtype=mean2d.dtype)
        self.dtype = mean2d.dtype
        self.threads = threads
        radius = splat_radius(cov2d[o].astype(np.float64))
        tx0, tx1, ty0, ty1, vis = _bin_splats(self.mx.astype(np.float64), self.my.astype(np.float64),
                                              radius, width, height)
        self.tiles = []
        for tx, ty, box, xs, ys in _tile_grid(width, height):
            ids = np.flatnonzero(vis & (tx0 <= tx) & (tx1 >= tx) & (ty0 <= ty) & (ty1 >= ty))
            self.tiles.append((box, xs.astype(self.dtype), ys.astype(self.dtype), ids))
        self.cache = [None] * len(self.tiles)

    def _map(self, fn):
        if self.threads > 1 and len(self.tiles) > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                return list(ex.map(fn, range(len(self.tiles))))
        return [fn(i) for i in range(len(self.tiles))]

    def _tile_forward(self, i):
        box, xs, ys, ids = self.tiles[i]
        p = xs.shape[0]
        if ids.size == 0:
            t_final = np.ones(p, dtype=self.dtype)
            return np.zeros((p, 3), dtype=self.dtype), t_final, None
        dx = xs[:, None] - self.mx[ids][None, :]
        dy = ys[:, None] - self.my[ids][None, :]
        power = -0.5 * (self.ca[ids] * dx * dx + self.cc[ids] * dy * dy) - self.cb[ids] * dx * dy
        g = np.exp(power)
        raw = self.op[ids] * g
        a = np.minimum(ALPHA_MAX, raw)
        active = (power >= POWER_CUTOFF) & (a >= ALPHA_MIN)
        a = np.where(active, a, 0).astype(self.dtype)
        t_incl = np.cumprod(1 - a, axis=1)
        t_excl = np.concatenate([np.ones((p, 1), dtype=self.dtype), t_incl[:, :-1]], axis=1)
        w = a * t_excl
        csum = np.cumsum(w[:, :, None] * self.col[ids][None, :, :], axis=1)[:, -1]
        t_final = t_incl[:, -1]
        grad_ok = active & (raw < ALPHA_MAX)
        return csum, t_final, (dx, dy, g, a, grad_ok, t_excl, w)

    def forward(self, track_active: bool = False):
        h, w = self.height, self.width
        out = np.zeros((h, w, 4), dtype=self.dtype)
        results = self._map(self._tile_forward)
        sig = 0
        for i, (csum, t_final, cache) in enumerate(results):
            (y0, y1, x0, x1) = self.tiles[i][0]
            rgb = csum + self.bg[None, :] * t_final[:, None]
            out[y0:y1, x0:x1, :3] = rgb.reshape(y1 - y0, x1 - x0, 3)
            out[y0:y1, x0:x1, 3] = (1 - t_final).reshape(y1 - y0, x1 - x0)
            self.cache[i] = (cache, t_final)
            if track_active and cache is not None:
                sig = hash((sig, np.packbits(cache[3] > 0).tobytes()))
        self.signature = sig
        return out

    def _tile_backward(self, i, gout):
        box, xs, ys, ids = self.tiles[i]
        cache, t_final = self.cache[i]
        if cache is None:
            return None
        dx, dy, g, a, grad_ok, t_excl, w = cache
        y0, y1, x0, x1 = box
        gc = gout[y0:y1, x0:x1, :3].reshape(-1, 3)
        ga = gout[y0:y1, x0:x1, 3].reshape(-1)
        col = self.col[ids]
        g_col = w.T @ gc
        cdot = gc @ col.T
        e = w * cdot
        suffix = e.sum(axis=1, keepdims=True) - np.cumsum(e, axis=1)
        tail = (gc @ self.bg) * t_final
        inv = 1.0 / (1.0 - a)
        d_a = t_excl * cdot - (suffix + tail[:, None]) * inv + (ga * t_final)[:, None] * inv
        d_a = np.where(grad_ok, d_a, 0)
        d_op = (d_a * g).sum(axis=0)
        d_pow = d_a * a
        ca, cb, cc = self.ca[ids], self.cb[ids], self.cc[ids]
        d_mx = (d_pow * (ca * dx + cb * dy)).sum(axis=0)
        d_my = (d_pow * (cc * dy + cb * dx)).sum(axis=0)
        d_ca = (d_pow * (-0.5 * dx * dx)).sum(axis=0)
        d_cb = (d_pow * (-dx * dy)).sum(axis=0)
        d_cc = (d_pow * (-0.5 * dy * dy)).sum(axis=0)
        return ids, g_col, d_op, np.stack([d_mx, d_my], axis=1), np.stack([d_ca, d_cb, d_cc], axis=1)

    def backward(self, gout):
        m = len(self.order)
        g_mean = np.zeros((m, 2), dtype=self.dtype)
        g_conic = np.zeros((m, 3), dtype=self.dtype)
        g_col = np.zeros((m, 3), dtype=self.dtype)
        g_op = np.zeros(m, dtype=self.dtype)
        results = self._map(lambda i: self._tile_backward(i, gout))
        # fixed tile order keeps the reduction bit-stable
        for res in results:
            if res is None:
                continue
            ids, gc, go, gm, gk = res
            g_col[ids] += gc
            g_op[ids] += go
            g_mean[ids] += gm
            g_conic[ids] += gk
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(m)
        return g_mean[inv], g_conic[inv], g_col[inv], g_op[inv]


def composite(splats: Splats, width: int, height: int, background=(0.0, 0.0, 0.0),
              threads: int = 1, track_active: bool = False) -> tuple[Tensor, int | None]:
    """Front-to-back alpha compositing of depth-sorted splats into (H, W, 4)."""
    state = _Composite(splats.mean2d.data, splats.conic.data, splats.color.data, splats.opacity.data,
                       splats.depth, splats.cov2d.data, width, height, background, threads)
    out = state.forward(track_active)
    parents = (splats.mean2d, splats.conic, splats.color, splats.opacity)
    return dc.tensor._make(out, parents, state.backward, "composite"), (state.signature if track_active else None)


def render(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0), region: str | None = None,
           threads: int = 1, track_active: bool = False) -> RegionalRender:
    if len(cloud) == 0:
        out = np.zeros((cam.height, cam.width, 4), dtype=cloud.mu.dtype)
        out[..., :3] = np.asarray(background, dtype=out.dtype)
        return RegionalRender(Tensor(out), region, None, 0 if track_active else None)
    splats = project(cloud, cam)
    out, sig = composite(splats, cam.width, cam.height, background, threads, track_active)
    return RegionalRender(out, region, splats, sig)


def render_backward(result: RegionalRender, grad_color: np.ndarray, grad_alpha: np.ndarray) -> None:
    """Push image-space gradients into the grad buffers of the rendered cloud."""
    h, w = result.shape
    grad_color = np.asarray(grad_color)
    grad_alpha = np.asarray(grad_alpha)
    if grad_color.shape != (h, w, 3) or grad_alpha.shape != (h, w):
        raise ValueError(f"render_backward: expected ({h}, {w}, 3) and ({h}, {w}) gradients, "
                         f"got {grad_color.shape} and {grad_alpha.shape}")
    g = np.concatenate([grad_color, grad_alpha[..., None]], axis=-1)
    result.out.backward(g)


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
