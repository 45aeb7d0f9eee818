import numpy as np
import pytest

from talksplat import diffcore as dc
from talksplat.diffcore import ParamStore, Tensor, grad_check
from talksplat.deformnet import (ConcatNet, DeformationModel, HighFreqNet, LowFreqNet, highfreq_forward,
                                 lowfreq_forward, routing)
from talksplat.encoders import TriplaneHashConfig
from talksplat.gaussians import apply_deformation
from talksplat.rasterizer import render

from .scenes import camera, random_cloud

IN_DIM = 12


def randomize(params, rng, prefix="", scale=0.3):
    for n in params.names(prefix):
        params[n].data = rng.normal(0, scale, size=params[n].shape)


def inputs(rng, n=7, tokens=8):
    return Tensor(rng.normal(size=(n, IN_DIM))), Tensor(rng.normal(size=(tokens, 32))), Tensor(rng.normal(size=(1, 32)))


def test_fresh_branches_predict_zero(double):
    rng = np.random.default_rng(0)
    p = ParamStore()
    low = LowFreqNet(p, "low", IN_DIM, rng)
    high = HighFreqNet(p, "high", IN_DIM, rng)
    h, fa, fe = inputs(rng)
    d = lowfreq_forward(h, fa, fe, low)
    for t in (d.dmu, d.ds, d.dr):
        assert np.array_equal(t.data, np.zeros_like(t.data))
    assert np.array_equal(highfreq_forward(h, fa, high).dmu.data, np.zeros((7, 3)))


def test_closed_audio_gate_ignores_audio(double):
    rng = np.random.default_rng(1)
    p = ParamStore()
    low = LowFreqNet(p, "low", IN_DIM, rng)
    randomize(p, rng)
    for n in p.names("low.gate_a."):
        p[n].data[...] = 0.0
    h, fa, fe = inputs(rng)
    a = lowfreq_forward(h, fa, fe, low)
    b = lowfreq_forward(h, Tensor(rng.normal(size=(8, 32))), fe, low)
    assert np.array_equal(a.dmu.data, b.dmu.data) and np.array_equal(a.dr.data, b.dr.data)
    c = lowfreq_forward(h, fa, Tensor(rng.normal(size=(1, 32))), low)
    assert not np.array_equal(a.dmu.data, c.dmu.data)


def test_single_token_attention_returns_its_value(double):
    rng = np.random.default_rng(2)
    p = ParamStore()
    net = HighFreqNet(p, "high", IN_DIM, rng)
    h = Tensor(rng.normal(size=(5, IN_DIM)))
    tok = rng.normal(size=(1, 32))
    att = net.attention(h, Tensor(tok)).data
    assert np.allclose(att, np.tile(tok @ p["high.w_v.w"].data, (5, 1)), atol=1e-14)


def test_closed_gate_leaves_the_pooled_path(double):
    rng = np.random.default_rng(3)
    p = ParamStore()
    net = HighFreqNet(p, "high", IN_DIM, rng)
    randomize(p, rng, "high.head.")
    h, fa, _ = inputs(rng)
    last = net.gate.last
    last.w.data[...] = 0.0
    norms = []
    for logit in (-2.0, -5.0, -10.0, -20.0):
        last.b.data[...] = logit
        d, parts = highfreq_forward(h, fa, net, return_parts=True)
        # largest per-Gaussian norm
        norms.append(np.linalg.norm(parts["z"].data, axis=1).max())
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-8
    f_bar = fa.mean(axis=0, keepdims=True)
    oracle = net.head(net.ff2(net.ff1(f_bar))).data
    assert np.allclose(d.dmu.data, np.broadcast_to(oracle, d.dmu.shape), atol=1e-7)


def test_branch_gradients(double):
    rng = np.random.default_rng(4)
    p = ParamStore()
    low = LowFreqNet(p, "low", IN_DIM, rng)
    high = HighFreqNet(p, "high", IN_DIM, rng)
    randomize(p, rng)
    h, fa, fe = inputs(rng, n=4, tokens=3)
    w = Tensor(rng.normal(size=(4, 10)))
    wh = Tensor(rng.normal(size=(4, 3)))

    def f(h, fa, fe):
        d = lowfreq_forward(h, fa, fe, low)
        return (dc.concat([d.dmu, d.ds, d.dr], axis=1) * w).sum() + (highfreq_forward(h, fa, high).dmu * wh).sum()
    rep = grad_check(f, [h, fa, fe])
    assert rep.max < 1e-4


def test_empty_token_set_is_rejected(double):
    rng = np.random.default_rng(5)
    net = HighFreqNet(ParamStore(), "high", IN_DIM, rng)
    with pytest.raises(ValueError, match="empty"):
        highfreq_forward(Tensor(np.zeros((2, IN_DIM))), Tensor(np.zeros((0, 32))), net)


def model(mode="full", seed=0):
    cfg = TriplaneHashConfig(levels=2, table_size=2 ** 8, bbox_min=(-3, -3, 2), bbox_max=(3, 3, 6))
    p = ParamStore()
    return DeformationModel(p, cfg, np.random.default_rng(seed), mode), p


def region_cloud(rng, n=30):
    return random_cloud(rng, n, region=np.arange(n) % 3, requires_grad=False)


def conditions(rng):
    return rng.normal(size=(16, 29)), rng.normal(size=8)


def test_zero_init_render_identity(double):
    rng = np.random.default_rng(6)
    m, _ = model()
    cloud = region_cloud(rng)
    fa, fe = m.encode_conditions(*conditions(rng))
    out = apply_deformation(cloud, routing(cloud, fa, fe, m))
    cam = camera(24)
    assert np.array_equal(render(out, cam).out.data, render(cloud, cam).out.data)


def test_routing_isolation_and_audio_only_moves_mouth(double):
    rng = np.random.default_rng(7)
    m, p = model()
    randomize(p, rng, "net.")
    cloud = region_cloud(rng)
    win, ex = conditions(rng)
    fa, fe = m.encode_conditions(win, ex)
    base = routing(cloud, fa, fe, m).dmu.data
    fa2, fe2 = m.encode_conditions(win + rng.normal(size=win.shape), ex)
    moved = routing(cloud, fa2, fe2, m).dmu.data
    mouth, eyes = cloud.region_indices("mouth"), cloud.region_indices("eyes")
    assert not np.array_equal(base[mouth], moved[mouth])
    assert np.array_equal(base[eyes], moved[eyes])
    for n in p.names("net.eyes."):
        p[n].data[...] = 0.0
    zeroed = routing(cloud, fa, fe, m).dmu.data
    keep = np.setdiff1d(np.arange(len(cloud)), eyes)
    assert np.array_equal(zeroed[keep], base[keep])


def test_region_losses_do_not_leak_gradients(double):
    rng = np.random.default_rng(8)
    m, p = model()
    randomize(p, rng, "net.")
    cloud = region_cloud(rng)
    fa, fe = m.encode_conditions(*conditions(rng))
    d = m.region_delta("mouth", cloud.subset(cloud.region_indices("mouth")), fa, fe)
    p.zero_grad()
    d.dmu.sum().backward()
    for n in p.names("net.face.") + p.names("net.eyes."):
        assert p[n].grad is None or not np.any(p[n].grad), n
    assert any(np.any(p[n].grad) for n in p.names("net.mouth."))


def test_routing_is_permutation_equivariant(double):
    rng = np.random.default_rng(9)
    m, p = model()
    randomize(p, rng, "net.")
    cloud = region_cloud(rng)
    fa, fe = m.encode_conditions(*conditions(rng))
    perm = np.concatenate([rng.permutation(cloud.region_indices(r)) for r in ("face", "mouth", "eyes")])
    base = routing(cloud, fa, fe, m).dmu.data
    # reorder primitives: the gathered cloud keeps regions contiguous in a new order
    other = routing(cloud.subset(perm), fa, fe, m).dmu.data
    assert np.allclose(other, base[perm], atol=1e-14)


def test_full_pipeline_gradients_on_thirty_gaussians(double):
    rng = np.random.default_rng(10)
    m, p = model()
    randomize(p, rng, "net.", scale=0.2)
    cloud = region_cloud(rng)
    win, ex = conditions(rng)
    w = Tensor(rng.normal(size=(30, 3)))
    names = p.names("net.") + p.names("tau_a.")
    coords = [rng.choice(p[n].size, size=min(3, p[n].size), replace=False) for n in names]

    def f(*ts):
        fa, fe = m.encode_conditions(win, ex)
        return (routing(cloud, fa, fe, m).dmu * w).sum()
    rep = grad_check(f, [p[n] for n in names], coords=coords)
    assert rep.median < 1e-5 and rep.max < 1e-3


def test_ablation_variants():
    no_fad, p = model("no_fad")
    assert list(no_fad.nets) == ["all"] and isinstance(no_fad.nets["all"], LowFreqNet)
    no_fam, _ = model("no_fam")
    assert isinstance(no_fam.nets["mouth"], ConcatNet) and isinstance(no_fam.nets["face"], LowFreqNet)
    with pytest.raises(ValueError, match="ablation"):
        model("bogus")


def test_routing_rejects_unlabelled_primitives(double):
    rng = np.random.default_rng(11)
    m, _ = model()
    cloud = random_cloud(rng, 3, region=[0, 1, 7])
    fa, fe = m.encode_conditions(*conditions(rng))
    with pytest.raises(ValueError, match="region"):
        routing(cloud, fa, fe, m)
