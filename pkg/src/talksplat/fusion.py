"""Regional alpha-blend fusion.

fused = [(1 - a_m)(C_e + dC_e) + a_m (C_m + dC_m)] (1 - a_f) + (C_f + dC_f) a_f,
clamped to [0, 1].  The eye alpha map is deliberately unused.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import diffcore as dc
from .diffcore import Tensor
from .rasterizer import RegionalRender


@dataclass
class FusedFrame:
    color: Tensor
    face: RegionalRender | None = None
    eyes: RegionalRender | None = None
    mouth: RegionalRender | None = None


def fuse_maps(c_f: Tensor, a_f: Tensor, c_e: Tensor, c_m: Tensor, a_m: Tensor,
              dc_f=None, dc_e=None, dc_m=None, clamp: bool = True) -> Tensor:
    """Fusion on raw maps: colors (H, W, 3), alphas (H, W)."""
    shape = c_f.shape
    for t in (c_e, c_m):
        if t.shape != shape:
            raise dc.ShapeError("fuse", shape, t.shape)
    for t in (a_f, a_m):
        if t.shape != shape[:-1]:
            raise dc.ShapeError("fuse", shape[:-1], t.shape)
    if dc_f is not None:
        c_f = c_f + dc_f
    if dc_e is not None:
        c_e = c_e + dc_e
    if dc_m is not None:
        c_m = c_m + dc_m
    am = a_m.reshape(*a_m.shape, 1)
    af = a_f.reshape(*a_f.shape, 1)
    inner = (1.0 - am) * c_e + am * c_m
    out = inner * (1.0 - af) + c_f * af
    return dc.clip(out, 0.0, 1.0) if clamp else out


def fuse(face: RegionalRender, eyes: RegionalRender, mouth: RegionalRender,
         dc_face=None, dc_eyes=None, dc_mouth=None) -> FusedFrame:
    if not (face.shape == eyes.shape == mouth.shape):
        raise dc.ShapeError("fuse", tuple(face.shape), tuple(mouth.shape if face.shape == eyes.shape else eyes.shape))
    color = fuse_maps(face.color, face.alpha, eyes.color, mouth.color, mouth.alpha, dc_face, dc_eyes, dc_mouth)
    return FusedFrame(color, face, eyes, mouth)
