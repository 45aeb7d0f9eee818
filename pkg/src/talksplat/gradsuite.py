"""Finite-difference checks of every differentiable building block, in double precision."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .deformnet import HighFreqNet, LowFreqNet
from .diffcore import GradCheckReport, ParamStore, Tensor, grad_check
from .encoders import AudioEncoder, ExpressionEncoder, TriplaneEncoder, TriplaneHashConfig
from .fusion import fuse_maps
from .gaussians import GaussianCloud, covariance, sh_color
from .losses import dssim, l1, loss_fusion, LossWeights, perceptual_patch_loss, ssim
from .rasterizer import ALPHA_MAX, ALPHA_MIN, POWER_CUTOFF, Camera, project, render
from .syncnet import CROP, SyncScorer, loss_lip

MEDIAN_TOL = 1e-5
MAX_TOL = 1e-3
PEAK_WEIGHT_MIN = 1e-3


@dataclass
class CaseResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed(MEDIAN_TOL, MAX_TOL)


def _weighted_sum(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.normal(size=shape))
    return lambda y: (y * r).sum()


def _subset(rng, size: int, k: int) -> np.ndarray:
    return np.sort(rng.choice(size, size=min(k, size), replace=False))


def _away(rng, shape, lo=0.1, hi=1.0):
    """Random values with magnitude in [lo, hi], keeping clear of kinks at zero."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# -- tensor ops ------------------------------------------------------------------

def _unary(rng, op, data):
    x = Tensor(data)
    with dc.no_grad():
        shape = op(x).shape
    proj = _weighted_sum(rng, shape)
    return grad_check(lambda a: proj(op(a)), x)


def _binary(rng, op, da, db, out_shape):
    proj = _weighted_sum(rng, out_shape)
    return grad_check(lambda a, b: proj(op(a, b)), [Tensor(da), Tensor(db)])


def case_elementwise(rng) -> GradCheckReport:
    reports = [
        _binary(rng, dc.add, rng.normal(size=(3, 4)), rng.normal(size=(4,)), (3, 4)),
        _binary(rng, dc.sub, rng.normal(size=(3, 1)), rng.normal(size=(3, 4)), (3, 4)),
        _binary(rng, dc.mul, rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1)), (2, 3, 4)),
        _binary(rng, dc.div, rng.normal(size=(3, 4)), _away(rng, (3, 4), 0.5, 2.0), (3, 4)),
        _unary(rng, lambda a: dc.maximum(a, 0.0), _away(rng, (3, 4))),
        _unary(rng, lambda a: dc.minimum(a, 0.0), _away(rng, (3, 4))),
        _unary(rng, lambda a: dc.power(a, 3.0), rng.normal(size=(3, 4))),
        _unary(rng, lambda a: dc.power(a, 0.5), rng.uniform(0.5, 2.0, size=(3, 4))),
        _unary(rng, dc.exp, rng.normal(size=(3, 4))),
        _unary(rng, dc.log, rng.uniform(0.3, 3.0, size=(3, 4))),
        _unary(rng, dc.sqrt, rng.uniform(0.3, 3.0, size=(3, 4))),
        _unary(rng, dc.sigmoid, rng.normal(size=(3, 4)) * 3),
        _unary(rng, dc.log_sigmoid, rng.normal(size=(3, 4)) * 3),
        _unary(rng, dc.tanh, rng.normal(size=(3, 4))),
        _unary(rng, dc.relu, _away(rng, (3, 4))),
        _unary(rng, dc.tabs, _away(rng, (3, 4))),
        _unary(rng, lambda a: dc.clip(a, -0.5, 0.5), _away(rng, (4, 4), 0.05, 1.0) + 0.003),
        _unary(rng, lambda a: dc.where(np.arange(12).reshape(3, 4) % 2 == 0, a, a * a), rng.normal(size=(3, 4))),
    ]
    return _merge(reports)


def case_structural(rng) -> GradCheckReport:
    idx = np.array([0, 2, 2, 1])
    reports = [
        _binary(rng, dc.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), (2, 3, 5)),
        _unary(rng, lambda a: dc.tsum(a, axis=1, keepdims=True), rng.normal(size=(3, 4))),
        _unary(rng, lambda a: dc.mean(a, axis=0), rng.normal(size=(3, 4))),
        _unary(rng, lambda a: dc.reshape(a, (4, 3)), rng.normal(size=(3, 4))),
        _unary(rng, lambda a: dc.transpose(a, (1, 0, 2)), rng.normal(size=(2, 3, 4))),
        _unary(rng, lambda a: a[1:, ::2], rng.normal(size=(3, 4))),
        _unary(rng, lambda a: a[idx], rng.normal(size=(3, 4))),
        _unary(rng, lambda a: dc.gather(a, idx), rng.normal(size=(3, 4))),
        _unary(rng, lambda a: dc.broadcast_to(a, (3, 4)), rng.normal(size=(1, 4))),
        _unary(rng, lambda a: dc.softmax(a, axis=1), rng.normal(size=(3, 4))),
        _unary(rng, lambda a: dc.l2_normalize(a, axis=1), rng.normal(size=(3, 4))),
    ]
    a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
    proj = _weighted_sum(rng, (4, 3))
    reports.append(grad_check(lambda a, b: proj(dc.scatter_rows([a, b], [np.array([0, 3]), np.array([2, 1])], 4)),
                              [a, b]))
    proj2 = _weighted_sum(rng, (2, 2, 3))
    reports.append(grad_check(lambda a, b: proj2(dc.stack([a, b], axis=1)), [a, b]))
    proj3 = _weighted_sum(rng, (4, 3))
    reports.append(grad_check(lambda a, b: proj3(dc.concat([a, b], axis=0)), [a, b]))
    return _merge(reports)


def case_conv(rng) -> GradCheckReport:
    x, w, b = Tensor(rng.normal(size=(2, 3, 6, 6))), Tensor(rng.normal(size=(4, 3, 3, 3))), Tensor(rng.normal(size=4))
    proj = _weighted_sum(rng, (2, 4, 3, 3))
    r1 = grad_check(lambda x, w, b: proj(dc.conv2d(x, w, b, stride=2, padding=1)), [x, w, b])
    proj2 = _weighted_sum(rng, (2, 3, 3, 3))
    r2 = grad_check(lambda x: proj2(dc.avg_pool2d(x, 2)), Tensor(rng.normal(size=(2, 3, 6, 6))))
    return _merge([r1, r2])


# -- Gaussian attributes -------------------------------------------------------------

def case_covariance(rng) -> GradCheckReport:
    rot = Tensor(rng.normal(size=(5, 4)))
    s = Tensor(rng.normal(scale=0.5, size=(5, 3)))
    proj = _weighted_sum(rng, (5, 3, 3))
    return grad_check(lambda r, s: proj(covariance(r, s)), [rot, s])


def case_sh(rng) -> GradCheckReport:
    sh = Tensor(rng.normal(scale=0.1, size=(6, 16, 3)))
    d = Tensor(rng.normal(size=(6, 3)))
    proj = _weighted_sum(rng, (6, 3))
    return grad_check(lambda sh, d: proj(sh_color(sh, dc.l2_normalize(d, axis=1), 3)), [sh, d])


def case_triplane(rng) -> GradCheckReport:
    cfg = TriplaneHashConfig(levels=3, table_size=2 ** 6, features_per_level=2)
    enc = TriplaneEncoder(ParamStore(), "h", cfg, rng)
    enc.table.data = rng.normal(size=enc.table.shape)
    pos = rng.uniform(-0.9, 0.9, size=(7, 3))
    proj = _weighted_sum(rng, (7, cfg.out_dim))
    return grad_check(lambda t: proj(enc(pos)), enc.table)


def case_condition_encoders(rng) -> GradCheckReport:
    p = ParamStore()
    ta = AudioEncoder(p, "ta", rng)
    te = ExpressionEncoder(p, "te", rng)
    win = rng.normal(size=(16, 29))
    ex = rng.normal(size=(8,))
    pa, pe = _weighted_sum(rng, (8, 32)), _weighted_sum(rng, (1, 32))
    names = p.names()
    ts = [p[n] for n in names]
    coords = [_subset(rng, t.size, 12) for t in ts]
    return grad_check(lambda *_: pa(ta(win)) + pe(te(ex)), ts, coords=coords)


def _randomize_heads(p: ParamStore, rng) -> None:
    for n in p:
        if not np.any(p[n].data):
            p[n].data = rng.normal(scale=0.3, size=p[n].shape)


def case_lowfreq(rng) -> GradCheckReport:
    p = ParamStore()
    net = LowFreqNet(p, "lf", 12, rng)
    _randomize_heads(p, rng)
    h = Tensor(rng.normal(size=(5, 12)))
    fa = Tensor(rng.normal(size=(8, 32)))
    fe = Tensor(rng.normal(size=(1, 32)))
    proj = _weighted_sum(rng, (5, 10))

    def f(h, fa, fe, *_):
        d = net(h, fa, fe)
        return proj(dc.concat([d.dmu, d.ds, d.dr], axis=1))
    ts = [h, fa, fe] + [p[n] for n in p.names()]
    coords = [_subset(rng, t.size, 12) for t in ts]
    return grad_check(f, ts, coords=coords)


def case_highfreq(rng) -> GradCheckReport:
    p = ParamStore()
    net = HighFreqNet(p, "hf", 12, rng)
    _randomize_heads(p, rng)
    h = Tensor(rng.normal(size=(5, 12)))
    fr = Tensor(rng.normal(size=(8, 32)))
    proj = _weighted_sum(rng, (5, 3))
    ts = [h, fr] + [p[n] for n in p.names()]
    coords = [_subset(rng, t.size, 12) for t in ts]
    return grad_check(lambda h, fr, *_: proj(net(h, fr).dmu), ts, coords=coords)


def case_fusion(rng) -> GradCheckReport:
    hw = (5, 6)
    ins = [Tensor(rng.uniform(0.1, 0.6, size=hw + (3,))), Tensor(rng.uniform(0.05, 0.95, size=hw)),
           Tensor(rng.uniform(0.1, 0.6, size=hw + (3,))), Tensor(rng.uniform(0.1, 0.6, size=hw + (3,))),
           Tensor(rng.uniform(0.05, 0.95, size=hw)), Tensor(rng.uniform(-0.1, 0.1, size=hw + (3,))),
           Tensor(rng.uniform(-0.1, 0.1, size=hw + (3,))), Tensor(rng.uniform(-0.1, 0.1, size=hw + (3,)))]
    proj = _weighted_sum(rng, hw + (3,))
    return grad_check(lambda *a: proj(fuse_maps(*a[:5], dc_f=a[5], dc_e=a[6], dc_m=a[7])), ins)


# -- losses ------------------------------------------------------------------------

def case_losses(rng) -> GradCheckReport:
    x = rng.uniform(0.1, 0.9, size=(16, 16, 3))
    y = x + _away(rng, x.shape, 0.01, 0.1)
    r1 = grad_check(lambda a: l1(Tensor(y), a), Tensor(x.copy()))
    r2 = grad_check(lambda a: dssim(Tensor(y), a), Tensor(x.copy()))
    r3 = grad_check(lambda a: ssim(a, Tensor(y)), Tensor(x.copy()))
    return _merge([r1, r2, r3])


def case_perceptual(rng) -> GradCheckReport:
    x = rng.uniform(0.1, 0.9, size=(40, 40, 3))
    y = np.clip(x + rng.normal(scale=0.1, size=x.shape), 0, 1)
    coords = [_subset(rng, x.size, 60)]
    r1 = grad_check(lambda a: perceptual_patch_loss(Tensor(y), a, seed=3, step=1), Tensor(x.copy()), coords=coords)
    w = LossWeights()
    r2 = grad_check(lambda a: loss_fusion(Tensor(y), a, w, seed=3, step=2), Tensor(x.copy()),
                    coords=[_subset(rng, x.size, 60)])
    return _merge([r1, r2])


def case_lip(rng) -> GradCheckReport:
    scorer = SyncScorer(seed=5)
    scorer.freeze()
    frames = [Tensor(rng.uniform(0.1, 0.9, size=(28, 28, 3))) for _ in range(5)]
    boxes = rng.integers(0, 28 - CROP + 1, size=(5, 2))
    audio = rng.normal(size=(5, 16, 29))
    coords = []
    for (y, x) in boxes:
        inside = np.zeros((28, 28, 3), dtype=bool)
        inside[y:y + CROP, x:x + CROP] = True
        coords.append(np.sort(rng.choice(np.flatnonzero(inside.reshape(-1)), size=8, replace=False)))
    return grad_check(lambda *fs: loss_lip(list(fs), audio, boxes, scorer), frames, coords=coords)


# -- rasterizer -------------------------------------------------------------------------

def random_scene(rng, n: int = 12, size: int = 32, sh_degree: int = 1) -> tuple[GaussianCloud, Camera]:
    k = (sh_degree + 1) ** 2
    mu = np.column_stack([rng.uniform(-0.6, 0.6, n), rng.uniform(-0.6, 0.6, n), rng.uniform(-0.3, 0.3, n)])
    cloud = GaussianCloud.from_arrays(
        mu, rng.normal(size=(n, 4)), np.log(rng.uniform(0.06, 0.2, size=(n, 3))),
        np.concatenate([rng.uniform(-0.6, 0.6, size=(n, 1, 3)), rng.normal(scale=0.05, size=(n, k - 1, 3))], 1),
        rng.uniform(-1.5, 1.5, size=n), np.zeros(n), dtype=np.float64)
    m = np.eye(4)
    m[2, 3] = 3.0
    cam = Camera(size * 1.2, size * 1.2, (size - 1) / 2, (size - 1) / 2, size, size, m)
    return cloud, cam


def peak_weights(cloud: GaussianCloud, cam: Camera) -> np.ndarray:
    """Per-primitive maximum compositing weight over all pixels, by a direct per-pixel loop."""
    with dc.no_grad():
        sp = project(cloud, cam)
    peak = np.zeros(len(cloud))
    order = np.argsort(sp.depth, kind="stable")
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    t = np.ones(ys.shape)
    for j in order:
        dx = xs - sp.mean2d.data[j, 0]
        dy = ys - sp.mean2d.data[j, 1]
        a_, b_, c_ = sp.conic.data[j]
        power = -0.5 * (a_ * dx * dx + c_ * dy * dy) - b_ * dx * dy
        a = np.minimum(ALPHA_MAX, sp.opacity.data[j] * np.exp(power))
        a = np.where((power >= POWER_CUTOFF) & (a >= ALPHA_MIN), a, 0.0)
        peak[sp.index[j]] = (a * t).max()
        t = t * (1 - a)
    return peak


def case_rasterizer(rng, n: int = 12, size: int = 32) -> GradCheckReport:
    cloud, cam = random_scene(rng, n, size)
    proj_c = _weighted_sum(rng, (size, size, 3))
    proj_a = _weighted_sum(rng, (size, size))
    sigs: list = []

    def f(mu, rot, s_log, sh_dc, sh_rest, alpha_logit):
        c = GaussianCloud(mu, rot, s_log, sh_dc, sh_rest, alpha_logit, cloud.region)
        out = render(c, cam, track_active=True)
        sigs.append(out.active_signature)
        return proj_c(out.color) + proj_a(out.alpha)

    ts = [cloud.mu, cloud.rot, cloud.s_log, cloud.sh_dc, cloud.sh_rest, cloud.alpha_logit]
    f(*ts)
    base = sigs[-1]
    peak = peak_weights(cloud, cam)
    coords = []
    for t in ts:
        per = t.size // n
        rows = np.flatnonzero(peak > PEAK_WEIGHT_MIN)
        coords.append((rows[:, None] * per + np.arange(per)[None]).reshape(-1))

    def crossed(i, k):
        # both probes must keep the exact set of contributing (pixel, splat) pairs
        return sigs[-1] != base or sigs[-2] != base
    return grad_check(f, ts, coords=coords, skip=crossed)


# -- driver ----------------------------------------------------------------------------

def _merge(reports: list[GradCheckReport]) -> GradCheckReport:
    return GradCheckReport(np.concatenate([r.analytic for r in reports]),
                           np.concatenate([r.numeric for r in reports]),
                           np.concatenate([r.rel_err for r in reports]),
                           np.concatenate([r.checked for r in reports]))


CASES: dict[str, Callable] = {
    "elementwise_ops": case_elementwise,
    "structural_ops": case_structural,
    "conv_pool": case_conv,
    "covariance": case_covariance,
    "sh_color": case_sh,
    "triplane": case_triplane,
    "condition_encoders": case_condition_encoders,
    "lowfreq_branch": case_lowfreq,
    "highfreq_branch": case_highfreq,
    "fusion": case_fusion,
    "image_losses": case_losses,
    "perceptual_fusion_loss": case_perceptual,
    "lip_sync_loss": case_lip,
    "rasterizer": case_rasterizer,
}


def run_suite(names=None, seed: int = 0) -> list[CaseResult]:
    out = []
    with dc.precision("double"):
        for i, name in enumerate(names or CASES):
            rng = np.random.default_rng([seed, i])
            t0 = time.perf_counter()
            rep = CASES[name](rng)
            out.append(CaseResult(name, rep, time.perf_counter() - t0))
    return out
