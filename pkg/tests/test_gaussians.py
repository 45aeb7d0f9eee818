import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from talksplat import diffcore as dc
from talksplat.diffcore import Tensor, grad_check
from talksplat.gaussians import (SH_C0, DegenerateRotationError, DeformationDelta, GaussianCloud, apply_deformation,
                                 concat_clouds, covariance, rotation_matrix, sh_color)
from talksplat.rasterizer import render

from .oracles import quat_to_matrix
from .scenes import camera, random_cloud


def test_identity_covariance(double):
    sigma = covariance(Tensor(np.array([1.0, 0, 0, 0])), Tensor(np.zeros(3))).data
    assert np.allclose(sigma, np.eye(3), atol=1e-15)


def test_axis_aligned_covariance(double):
    sigma = covariance(Tensor(np.array([1.0, 0, 0, 0])), Tensor(np.log([2.0, 1.0, 1.0]))).data
    assert np.allclose(sigma, np.diag([4.0, 1.0, 1.0]), atol=1e-14)


def test_covariance_eigenvalues_are_squared_scales(double):
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.normal(size=4)
        s = rng.uniform(-1, 1, 3)
        sigma = covariance(Tensor(q), Tensor(s)).data
        assert np.allclose(np.sort(np.linalg.eigvalsh(sigma)), np.sort(np.exp(2 * s)), atol=1e-10)


@settings(max_examples=1000)
@given(arrays(np.float64, 4, elements=st.floats(-10, 10)).filter(lambda q: np.linalg.norm(q) > 1e-3),
       arrays(np.float64, 3, elements=st.floats(-4, 2)))
def test_covariance_is_symmetric_positive_definite(q, s):
    with dc.precision("double"):
        sigma = covariance(Tensor(q), Tensor(s)).data
    assert np.allclose(sigma, sigma.T, atol=1e-12)
    assert np.linalg.eigvalsh(sigma).min() > 0


def test_rotation_matches_quaternion_oracle(double):
    rng = np.random.default_rng(1)
    q = rng.normal(size=(10, 4))
    r = rotation_matrix(Tensor(q)).data
    for i in range(10):
        assert np.allclose(r[i], quat_to_matrix(q[i]), atol=1e-12)


def test_degenerate_rotation_is_rejected(double):
    with pytest.raises(DegenerateRotationError):
        covariance(Tensor(np.zeros(4)), Tensor(np.zeros(3)))


def test_sh_zero_coefficients_give_grey(double):
    rgb = sh_color(Tensor(np.zeros((2, 4, 3))), Tensor(np.array([[0, 0, 1.0], [1.0, 0, 0]])), 1).data
    assert np.array_equal(rgb, np.full((2, 3), 0.5))


def test_sh_degree0_saturates(double):
    rgb = sh_color(Tensor(np.full((1, 1, 3), 1 / 0.28209479177)), Tensor(np.array([[0, 0, 1.0]])), 0).data
    assert np.array_equal(rgb, np.ones((1, 3)))


def test_sh_degree1_matches_hand_basis(double):
    rng = np.random.default_rng(2)
    c = rng.normal(0, 0.2, size=(1, 4, 3))
    rgb = sh_color(Tensor(c), Tensor(np.array([[0, 0, 1.0]])), 1).data[0]
    # real SH at (0, 0, 1): Y00 = 0.2820948, Y1-1 = -c1*y = 0, Y10 = c1*z, Y11 = -c1*x = 0
    c1 = 0.4886025119029199
    expected = np.clip(0.28209479177 * c[0, 0] + c1 * c[0, 2] + 0.5, 0, 1)
    assert np.allclose(rgb, expected, atol=1e-12)


def test_sh_rejects_non_unit_directions(double):
    with pytest.raises(ValueError, match="unit"):
        sh_color(Tensor(np.zeros((1, 1, 3))), Tensor(np.array([[0, 0, 2.0]])), 0)


def test_covariance_and_sh_gradients(double):
    rng = np.random.default_rng(3)
    q, s = Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(0, 0.3, size=(4, 3)))
    w = Tensor(rng.normal(size=(4, 3, 3)))
    assert grad_check(lambda q, s: (covariance(q, s) * w).sum(), [q, s]).max < 1e-4
    sh = Tensor(rng.normal(0, 0.1, size=(4, 9, 3)))
    d = Tensor(rng.normal(size=(4, 3)))
    wc = Tensor(rng.normal(size=(4, 3)))
    rep = grad_check(lambda sh, d: (sh_color(sh, dc.l2_normalize(d, axis=1), 2) * wc).sum(), [sh, d])
    assert rep.max < 1e-4


def test_zero_deltas_are_identity(double):
    cloud = random_cloud(np.random.default_rng(4), 12, degree=1)
    n = len(cloud)
    zero = DeformationDelta(Tensor(np.zeros((n, 3))), Tensor(np.zeros((n, 3))), Tensor(np.zeros((n, 4))),
                            Tensor(np.zeros((n, 3))))
    out = apply_deformation(cloud, zero)
    for k, v in cloud.tensors().items():
        assert np.array_equal(v.data, out.tensors()[k].data), k
    assert np.array_equal(out.region, cloud.region)
    cam = camera()
    assert np.array_equal(render(cloud, cam).out.data, render(out, cam).out.data)


def test_translation_only_delta(double):
    cloud = random_cloud(np.random.default_rng(5), 3)
    dmu = np.zeros((3, 3))
    dmu[:, 0] = 0.1
    out = apply_deformation(cloud, DeformationDelta(Tensor(dmu)))
    assert np.allclose(out.mu.data, cloud.mu.data + dmu)
    assert np.array_equal(covariance(out.rot, out.s_log).data, covariance(cloud.rot, cloud.s_log).data)


def test_small_rotation_delta_matches_oracle(double):
    base = GaussianCloud.from_arrays(np.zeros((1, 3)), [[1.0, 0, 0, 0]], np.zeros((1, 3)), np.zeros((1, 1, 3)),
                                     [0.0], [0])
    eps = 1e-3
    out = apply_deformation(base, DeformationDelta(Tensor(np.zeros((1, 3))), dr=Tensor(np.array([[0, 0, 0, eps]]))))
    assert np.allclose(rotation_matrix(out.rot).data[0], quat_to_matrix([1.0, 0, 0, eps]), atol=1e-14)


def test_delta_count_mismatch(double):
    cloud = random_cloud(np.random.default_rng(6), 3)
    with pytest.raises(ValueError, match="deltas"):
        apply_deformation(cloud, DeformationDelta.zeros(2))


def test_cloud_save_load_round_trip(tmp_path, double):
    cloud = random_cloud(np.random.default_rng(7), 5, degree=1, region=[0, 1, 2, 1, 0])
    cloud.save(tmp_path / "c")
    back = GaussianCloud.load(tmp_path / "c")
    for k, v in cloud.tensors().items():
        assert np.array_equal(v.data, back.tensors()[k].data)
    assert np.array_equal(back.region, cloud.region)
    back.save(tmp_path / "d")
    for f in (tmp_path / "c").iterdir():
        assert f.read_bytes() == (tmp_path / "d" / f.name).read_bytes()


def test_concat_and_subset_keep_regions(double):
    rng = np.random.default_rng(8)
    a = random_cloud(rng, 3, region=[0, 0, 0])
    b = random_cloud(rng, 2, region=[1, 1])
    c = concat_clouds([a, b])
    assert len(c) == 5 and list(c.region) == [0, 0, 0, 1, 1]
    m = c.subset(c.region_indices("mouth"))
    assert np.array_equal(m.mu.data, b.mu.data)


def test_sh_c0_value():
    assert abs(SH_C0 - 0.28209479177387814) < 1e-15
