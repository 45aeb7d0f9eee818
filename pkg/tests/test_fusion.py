import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from talksplat import diffcore as dc
from talksplat.diffcore import Tensor, grad_check
from talksplat.fusion import fuse, fuse_maps
from talksplat.rasterizer import RegionalRender, render

from .scenes import camera, random_cloud

unit = st.floats(0.0, 1.0)


def maps(rng, h=4, w=5):
    return (Tensor(rng.uniform(size=(h, w, 3))), Tensor(rng.uniform(size=(h, w))), Tensor(rng.uniform(size=(h, w, 3))),
            Tensor(rng.uniform(size=(h, w, 3))), Tensor(rng.uniform(size=(h, w))))


def pixel(c_f, a_f, c_e, c_m, a_m):
    one = lambda v: Tensor(np.full((1, 1, 3), v))  # noqa: E731
    a = lambda v: Tensor(np.full((1, 1), v))  # noqa: E731
    return fuse_maps(one(c_f), a(a_f), one(c_e), one(c_m), a(a_m)).data[0, 0, 0]


def test_hand_computed_pixel(double):
    # [(1 - 0.25) * 0.2 + 0.25 * 0.8] * (1 - 0.5) + 1.0 * 0.5
    expected = (0.75 * 0.2 + 0.25 * 0.8) * 0.5 + 1.0 * 0.5
    assert expected == pytest.approx(0.675, abs=1e-15)
    assert abs(pixel(1.0, 0.5, 0.2, 0.8, 0.25) - 0.675) <= 1e-12


def test_opaque_face_limit(double):
    c_f, _, c_e, c_m, a_m = maps(np.random.default_rng(0))
    out = fuse_maps(c_f, Tensor(np.ones((4, 5))), c_e, c_m, a_m).data
    assert np.abs(out - c_f.data).max() <= 1e-12


def test_opaque_mouth_limit(double):
    rng = np.random.default_rng(1)
    c_f, _, c_e, c_m, _ = maps(rng)
    d_m = Tensor(rng.uniform(-0.1, 0.1, size=(4, 5, 3)))
    out = fuse_maps(c_f, Tensor(np.zeros((4, 5))), c_e, c_m, Tensor(np.ones((4, 5))), dc_m=d_m, clamp=False).data
    assert np.abs(out - (c_m.data + d_m.data)).max() <= 1e-12


def test_mouth_gradient_is_product_of_alphas(double):
    c_f, a_f, c_e, c_m, a_m = maps(np.random.default_rng(2))
    c_m.requires_grad = True
    fuse_maps(c_f, a_f, c_e, c_m, a_m, clamp=False).sum().backward()
    expected = (a_m.data * (1 - a_f.data))[..., None] * np.ones(3)
    assert np.abs(c_m.grad - expected).max() <= 1e-12


def test_fusion_gradients(double):
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(4, 5, 3)))
    rep = grad_check(lambda *t: (fuse_maps(*t, clamp=False) * w).sum(), list(maps(rng)))
    assert rep.max < 1e-6


@given(arrays(np.float64, (2, 2, 3), elements=unit), arrays(np.float64, (2, 2), elements=unit),
       arrays(np.float64, (2, 2, 3), elements=unit), arrays(np.float64, (2, 2, 3), elements=unit),
       arrays(np.float64, (2, 2), elements=unit))
def test_output_stays_in_unit_range(c_f, a_f, c_e, c_m, a_m):
    with dc.precision("double"):
        out = fuse_maps(*(Tensor(v) for v in (c_f, a_f, c_e, c_m, a_m)), clamp=False).data
    assert out.min() >= -1e-15 and out.max() <= 1 + 1e-15


def test_empty_mouth_and_eyes_reduce_to_face_over_black(double):
    rng = np.random.default_rng(4)
    cam = camera(16)
    face = render(random_cloud(rng, 8), cam, region="face")
    empty = render(random_cloud(rng, 0), cam)
    out = fuse(face, empty, empty).color.data
    expected = face.color.data * face.alpha.data[..., None]
    # face colour is premultiplied on black; the face alpha scales it once more
    assert np.allclose(out, np.clip(expected, 0, 1), atol=1e-15)


def test_mismatched_shapes_are_rejected(double):
    rng = np.random.default_rng(5)
    a = RegionalRender(Tensor(rng.uniform(size=(4, 4, 4))), "face")
    b = RegionalRender(Tensor(rng.uniform(size=(4, 5, 4))), "mouth")
    with pytest.raises(dc.ShapeError):
        fuse(a, a, b)
