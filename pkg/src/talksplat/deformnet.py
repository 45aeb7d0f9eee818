"""Motion-prediction branches: spatially gated MLP for the face, gated cross-attention for mouth and eyes."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import MLP, Linear, ParamStore, Tensor
from .encoders import (D_MODEL, AudioEncoder, ExpressionEncoder, TriplaneEncoder,
                       TriplaneHashConfig)
from .gaussians import REGION_ID, REGIONS, DeformationDelta, GaussianCloud

# lr groups: "fusion" = condition-fusion blocks, "mlp" = every other network
FUSION, OTHER = "fusion", "mlp"


class LowFreqNet:
    def __init__(self, params: ParamStore, name: str, in_dim: int, rng: np.random.Generator,
                 d_model: int = D_MODEL):
        self.d_model = d_model
        self.gate_a = MLP(params, f"{name}.gate_a", [in_dim, 64, 64, d_model], rng, FUSION)
        self.gate_e = MLP(params, f"{name}.gate_e", [in_dim, 64, 64, d_model], rng, FUSION)
        self.deform = MLP(params, f"{name}.deform", [in_dim + 2 * d_model, 128, 128, 128, 10], rng, OTHER,
                          zero_last=True)

    def __call__(self, h: Tensor, f_a: Tensor, f_e: Tensor) -> DeformationDelta:
        return lowfreq_forward(h, f_a, f_e, self)


def lowfreq_forward(h: Tensor, f_a: Tensor, f_e: Tensor, net: LowFreqNet) -> DeformationDelta:
    for f in (f_a, f_e):
        if f.shape[-1] != net.d_model:
            raise dc.ShapeError("lowfreq_forward", f.shape, (net.d_model,))
    s_a = net.gate_a(h)
    s_e = net.gate_e(h)
    fa_bar = f_a.mean(axis=0, keepdims=True)
    z = dc.concat([h, s_a * fa_bar, s_e * f_e.reshape(1, -1)], axis=1)
    out = net.deform(z)
    return DeformationDelta(dmu=out[:, 0:3], ds=out[:, 3:6], dr=out[:, 6:10])


class HighFreqNet:
    def __init__(self, params: ParamStore, name: str, in_dim: int, rng: np.random.Generator,
                 d_model: int = D_MODEL):
        self.d_model = d_model
        self.proj = Linear(params, f"{name}.proj", in_dim, d_model, rng, FUSION)
        self.w_q = Linear(params, f"{name}.w_q", d_model, d_model, rng, FUSION, bias=False)
        self.w_k = Linear(params, f"{name}.w_k", d_model, d_model, rng, FUSION, bias=False)
        self.w_v = Linear(params, f"{name}.w_v", d_model, d_model, rng, FUSION, bias=False)
        self.gate = MLP(params, f"{name}.gate", [d_model, 32, 1], rng, OTHER)
        self.ff1 = MLP(params, f"{name}.ff1", [d_model, 4 * d_model, d_model], rng, OTHER)
        self.ff2 = MLP(params, f"{name}.ff2", [d_model, 4 * d_model, d_model], rng, OTHER)
        self.head = Linear(params, f"{name}.head", d_model, 3, rng, OTHER, zero_init=True)

    def gate_value(self, f_r: Tensor) -> Tensor:
        return dc.sigmoid(self.gate(f_r.mean(axis=0, keepdims=True)))

    def attention(self, h: Tensor, f_r: Tensor) -> Tensor:
        q = self.w_q(self.proj(h))
        k = self.w_k(f_r)
        v = self.w_v(f_r)
        scores = (q @ k.transpose()) * (1.0 / np.sqrt(self.d_model))
        return dc.softmax(scores, axis=1) @ v

    def __call__(self, h: Tensor, f_r: Tensor) -> DeformationDelta:
        return highfreq_forward(h, f_r, self)


def highfreq_forward(h: Tensor, f_r: Tensor, net: HighFreqNet, return_parts: bool = False):
    if f_r.ndim != 2 or f_r.shape[0] == 0:
        raise ValueError("highfreq_forward: condition token set is empty")
    if f_r.shape[1] != net.d_model:
        raise dc.ShapeError("highfreq_forward", f_r.shape, (net.d_model,))
    f_bar = f_r.mean(axis=0, keepdims=True)
    lam = net.gate_value(f_r)
    z = lam * net.attention(h, f_r)
    z1 = net.ff1(f_bar + z)
    z2 = net.ff2(z1 + z)
    delta = DeformationDelta(dmu=net.head(z2))
    if return_parts:
        return delta, {"gate": lam, "z": z, "z1": z1, "z2": z2}
    return delta


class ConcatNet:
    """Ablation stand-in for the high-frequency branch: concat(h, pooled condition) -> MLP."""

    def __init__(self, params: ParamStore, name: str, in_dim: int, rng: np.random.Generator,
                 d_model: int = D_MODEL):
        self.d_model = d_model
        self.body = MLP(params, f"{name}.body", [in_dim + d_model, 128, d_model], rng, FUSION)
        self.ff = MLP(params, f"{name}.ff", [d_model, 4 * d_model, d_model], rng, OTHER)
        self.head = Linear(params, f"{name}.head", d_model, 3, rng, OTHER, zero_init=True)

    def __call__(self, h: Tensor, f_r: Tensor) -> DeformationDelta:
        f_bar = f_r.mean(axis=0, keepdims=True)
        n = h.shape[0]
        z = self.body(dc.concat([h, dc.broadcast_to(f_bar, (n, self.d_model))], axis=1))
        return DeformationDelta(dmu=self.head(self.ff(dc.relu(z))))


MODES = ("full", "no_fad", "no_fam", "no_hrpa")


class DeformationModel:
    """Condition encoders, the shared triplane encoder and one motion network per region.

    ``mode='no_fad'`` replaces the three region networks by one low-frequency
    network over all Gaussians; ``mode='no_fam'`` swaps the cross-attention
    branches for :class:`ConcatNet`.
    """

    def __init__(self, params: ParamStore, hash_config: TriplaneHashConfig, rng: np.random.Generator,
                 mode: str = "full", d_model: int = D_MODEL):
        if mode not in MODES:
            raise ValueError(f"unknown ablation mode {mode!r}")
        self.mode = mode
        self.params = params
        self.encoder = TriplaneEncoder(params, "hash", hash_config, rng)
        self.tau_a = AudioEncoder(params, "tau_a", rng, d_model=d_model)
        self.tau_e = ExpressionEncoder(params, "tau_e", rng, d_model=d_model)
        in_dim = hash_config.out_dim
        self.nets: dict = {}
        if mode == "no_fad":
            self.nets["all"] = LowFreqNet(params, "net.all", in_dim, rng, d_model)
        else:
            self.nets["face"] = LowFreqNet(params, "net.face", in_dim, rng, d_model)
            high = ConcatNet if mode == "no_fam" else HighFreqNet
            self.nets["mouth"] = high(params, "net.mouth", in_dim, rng, d_model)
            self.nets["eyes"] = high(params, "net.eyes", in_dim, rng, d_model)

    def encode_conditions(self, audio_window, expr):
        return self.tau_a(audio_window), self.tau_e(expr)

    def region_delta(self, region: str, canonical: GaussianCloud, f_a: Tensor, f_e: Tensor) -> DeformationDelta:
        h = self.encoder(canonical.mu.data)
        if self.mode == "no_fad":
            return self.nets["all"](h, f_a, f_e)
        if region == "face":
            return self.nets["face"](h, f_a, f_e)
        if region == "mouth":
            return self.nets["mouth"](h, f_a)
        if region == "eyes":
            return self.nets["eyes"](h, f_e)
        raise ValueError(f"unknown region {region!r}")

    def param_names(self, region: str) -> list[str]:
        return self.params.names(f"net.{region}.")


def routing(cloud: GaussianCloud, f_a: Tensor, f_e: Tensor, model: DeformationModel) -> DeformationDelta:
    """Per-region deltas assembled in cloud order."""
    n = len(cloud)
    known = np.isin(cloud.region, list(REGION_ID.values()))
    if not known.all():
        raise ValueError(f"routing: primitive {int(np.flatnonzero(~known)[0])} has no region label")
    if model.mode == "no_fad":
        return model.region_delta("face", cloud, f_a, f_e)
    parts, idxs = [], []
    for region in REGIONS:
        idx = cloud.region_indices(region)
        if idx.size == 0:
            continue
        d = model.region_delta(region, cloud.subset(idx), f_a, f_e)
        parts.append(d)
        idxs.append(idx)
    dmu = dc.scatter_rows([d.dmu for d in parts], idxs, n)
    zeros3 = lambda k: Tensor(np.zeros((k, 3), dtype=dmu.dtype))  # noqa: E731
    zeros4 = lambda k: Tensor(np.zeros((k, 4), dtype=dmu.dtype))  # noqa: E731
    ds = dc.scatter_rows([d.ds if d.ds is not None else zeros3(len(d)) for d in parts], idxs, n)
    dr = dc.scatter_rows([d.dr if d.dr is not None else zeros4(len(d)) for d in parts], idxs, n)
    return DeformationDelta(dmu=dmu, ds=ds, dr=dr)
