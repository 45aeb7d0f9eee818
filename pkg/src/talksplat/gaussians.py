"""Gaussian primitives: storage, covariance, SH color and deformation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

REGIONS = ("face", "mouth", "eyes")
REGION_ID = {name: i for i, name in enumerate(REGIONS)}

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

CLOUD_LAYOUT_VERSION = 1


class DegenerateRotationError(ValueError):
    pass


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class GaussianCloud:
    mu: Tensor           # (N, 3)
    rot: Tensor          # (N, 4) unnormalized quaternion (w, x, y, z)
    s_log: Tensor        # (N, 3)
    sh_dc: Tensor        # (N, 1, 3)
    sh_rest: Tensor      # (N, K-1, 3)
    alpha_logit: Tensor  # (N,)
    region: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        n = self.mu.shape[0]
        for name in ("rot", "s_log", "sh_dc", "sh_rest", "alpha_logit"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"GaussianCloud: {name} has {getattr(self, name).shape[0]} rows, expected {n}")
        self.region = np.asarray(self.region, dtype=np.int64)
        if self.region.shape != (n,):
            raise ValueError("GaussianCloud: region ids must have one entry per primitive")

    def __len__(self):
        return self.mu.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_rest.shape[1] + 1))) - 1

    @property
    def sh(self) -> Tensor:
        if self.sh_rest.shape[1] == 0:
            return self.sh_dc
        return dc.concat([self.sh_dc, self.sh_rest], axis=1)

    @property
    def opacity(self) -> Tensor:
        return dc.sigmoid(self.alpha_logit)

    def region_indices(self, region: str) -> np.ndarray:
        return np.flatnonzero(self.region == REGION_ID[region])

    def subset(self, idx: np.ndarray) -> "GaussianCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return GaussianCloud(
            mu=dc.gather(self.mu, idx), rot=dc.gather(self.rot, idx), s_log=dc.gather(self.s_log, idx),
            sh_dc=dc.gather(self.sh_dc, idx), sh_rest=dc.gather(self.sh_rest, idx),
            alpha_logit=dc.gather(self.alpha_logit, idx), region=self.region[idx])

    def tensors(self) -> dict[str, Tensor]:
        return {"mu": self.mu, "rot": self.rot, "s_log": self.s_log, "sh_dc": self.sh_dc,
                "sh_rest": self.sh_rest, "alpha_logit": self.alpha_logit}

    # -- construction / persistence --------------------------------------
    @classmethod
    def from_arrays(cls, mu, rot, s_log, sh, alpha_logit, region, requires_grad: bool = False,
                    dtype=None) -> "GaussianCloud":
        dtype = dtype or dc.default_dtype()
        sh = np.asarray(sh, dtype=dtype)
        if sh.ndim != 3 or sh.shape[2] != 3 or sh.shape[1] not in (1, 4, 9, 16):
            raise ValueError(f"SH coefficients must be (N, (deg+1)^2, 3) with deg <= 3, got {sh.shape}")

        def t(a):
            return Tensor(np.array(a, dtype=dtype), requires_grad=requires_grad)
        return cls(mu=t(mu), rot=t(rot), s_log=t(s_log), sh_dc=t(sh[:, :1]), sh_rest=t(sh[:, 1:]),
                   alpha_logit=t(alpha_logit), region=np.asarray(region, dtype=np.int64))

    def register(self, params: dc.ParamStore, prefix: str = "gauss") -> None:
        """Make this cloud's attributes trainable entries of ``params``.

        Groups are named per attribute so each gets its own learning rate.
        """
        for name, t in self.tensors().items():
            params.add(f"{prefix}.{name}", t, group=f"gauss.{name}")

    def arrays(self) -> dict[str, np.ndarray]:
        sh = np.concatenate([self.sh_dc.data, self.sh_rest.data], axis=1)
        return {"mu": self.mu.data, "rot": self.rot.data, "s_log": self.s_log.data, "sh": sh,
                "alpha_logit": self.alpha_logit.data, "region_ids": self.region.astype(np.float64)}

    def save(self, directory) -> None:
        counts = {r: int((self.region == i).sum()) for i, r in enumerate(REGIONS)}
        meta = {"kind": "gaussian_cloud", "layout_version": CLOUD_LAYOUT_VERSION, "count": len(self),
                "region_counts": counts, "sh_degree": self.sh_degree}
        dc.fgt.save_archive(directory, self.arrays(), meta)

    @classmethod
    def load(cls, directory, requires_grad: bool = False) -> "GaussianCloud":
        arrays, meta = dc.fgt.load_archive(directory)
        if meta.get("kind") != "gaussian_cloud":
            raise ValueError(f"{directory}: not a Gaussian cloud checkpoint")
        dtype = arrays["mu"].dtype
        return cls.from_arrays(arrays["mu"], arrays["rot"], arrays["s_log"], arrays["sh"],
                               arrays["alpha_logit"], arrays["region_ids"].astype(np.int64),
                               requires_grad=requires_grad, dtype=dtype)

    def detached(self) -> "GaussianCloud":
        return GaussianCloud(**{k: Tensor(v.data.copy()) for k, v in self.tensors().items()},
                             region=self.region.copy())


def concat_clouds(clouds) -> GaussianCloud:
    return GaussianCloud(
        mu=dc.concat([c.mu for c in clouds]), rot=dc.concat([c.rot for c in clouds]),
        s_log=dc.concat([c.s_log for c in clouds]), sh_dc=dc.concat([c.sh_dc for c in clouds]),
        sh_rest=dc.concat([c.sh_rest for c in clouds]),
        alpha_logit=dc.concat([c.alpha_logit for c in clouds]),
        region=np.concatenate([c.region for c in clouds]))


# -- covariance ------------------------------------------------------------

def _check_rotation(rot: np.ndarray) -> None:
    norms = np.sqrt((rot.astype(np.float64) ** 2).sum(axis=-1))
    if np.any(norms < 1e-8):
        bad = np.flatnonzero(norms.reshape(-1) < 1e-8)
        raise DegenerateRotationError(f"quaternion norm below 1e-8 at index {bad[:5].tolist()}")


def rotation_matrix(rot: Tensor) -> Tensor:
    """(N, 4) quaternions (w, x, y, z), normalized internally, to (N, 3, 3)."""
    rot = dc.as_tensor(rot)
    _check_rotation(rot.data)
    q = dc.l2_normalize(rot, axis=1)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    entries = [
        1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
        2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
        2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy),
    ]
    return dc.stack(entries, axis=1).reshape(-1, 3, 3)


def covariance(rot: Tensor, s_log: Tensor) -> Tensor:
    """Sigma = R S S^T R^T with S = diag(exp(s_log)); batched over rows."""
    rot, s_log = dc.as_tensor(rot), dc.as_tensor(s_log)
    single = rot.ndim == 1
    if single:
        rot, s_log = rot.reshape(1, 4), s_log.reshape(1, 3)
    m = rotation_matrix(rot) * dc.exp(s_log).reshape(-1, 1, 3)
    sigma = m @ m.transpose(0, 2, 1)
    return sigma.reshape(3, 3) if single else sigma


# -- spherical harmonics ---------------------------------------------------

def sh_basis(dirs: Tensor, degree: int) -> Tensor:
    """Real SH basis values (N, (degree+1)^2) at unit directions (N, 3)."""
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    dirs = dc.as_tensor(dirs)
    n = dirs.shape[0]
    cols = [dc.Tensor(np.full(n, SH_C0, dtype=dirs.dtype))]
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        cols += [SH_C2[0] * xy, SH_C2[1] * yz, SH_C2[2] * (2.0 * zz - xx - yy),
                 SH_C2[3] * xz, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        cols += [SH_C3[0] * y * (3.0 * xx - yy), SH_C3[1] * xy * z,
                 SH_C3[2] * y * (4.0 * zz - xx - yy), SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                 SH_C3[4] * x * (4.0 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                 SH_C3[6] * x * (xx - 3.0 * yy)]
    return dc.stack(cols, axis=1)


def sh_color(sh: Tensor, dirs: Tensor, degree: int) -> Tensor:
    """RGB = clamp(sum_k c_k Y_k(dir) + 0.5, 0, 1) for (N, K, 3) coefficients."""
    sh, dirs = dc.as_tensor(sh), dc.as_tensor(dirs)
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    if sh.ndim != 3 or sh.shape[1] != num_sh_coeffs(degree) or sh.shape[2] != 3:
        raise ValueError(f"expected {num_sh_coeffs(degree)} SH coefficients per channel, got shape {sh.shape}")
    norms = np.sqrt((dirs.data.astype(np.float64) ** 2).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > max(1e-6, 10 * np.finfo(dirs.dtype).eps)):
        raise ValueError("sh_color: view directions must be unit length")
    basis = sh_basis(dirs, degree)
    rgb = (basis.reshape(-1, basis.shape[1], 1) * sh).sum(axis=1) + 0.5
    return dc.clip(rgb, 0.0, 1.0)


# -- deformation -----------------------------------------------------------

@dataclass
class DeformationDelta:
    """Per-primitive offsets. ``ds``/``dr``/``dc`` of None mean exact zeros."""
    dmu: Tensor
    ds: Tensor | None = None
    dr: Tensor | None = None
    dc: Tensor | None = None  # degree-0 color offset in RGB units

    def __len__(self):
        return self.dmu.shape[0]

    @classmethod
    def zeros(cls, n: int, dtype=None) -> "DeformationDelta":
        dtype = dtype or dc.default_dtype()
        return cls(dmu=Tensor(np.zeros((n, 3), dtype=dtype)))

    def take(self, idx) -> "DeformationDelta":
        def g(t):
            return None if t is None else dc.gather(t, idx)
        return DeformationDelta(g(self.dmu), g(self.ds), g(self.dr), g(self.dc))


def apply_deformation(cloud: GaussianCloud, delta: DeformationDelta) -> GaussianCloud:
    """New cloud with mu + dmu, s_log + ds, rot + dr and SH DC shifted by dc.

    The rotation is kept unnormalized: every consumer normalizes, so zero
    deltas leave all attributes bit-identical.
    """
    if len(delta) != len(cloud):
        raise ValueError(f"apply_deformation: {len(delta)} deltas for {len(cloud)} primitives")
    rot = cloud.rot
    if delta.dr is not None:
        rot = cloud.rot + delta.dr
        _check_rotation(rot.data)
    s_log = cloud.s_log + delta.ds if delta.ds is not None else cloud.s_log
    sh_dc = cloud.sh_dc
    if delta.dc is not None:
        sh_dc = cloud.sh_dc + (delta.dc * (1.0 / SH_C0)).reshape(-1, 1, 3)
    return GaussianCloud(mu=cloud.mu + delta.dmu, rot=rot, s_log=s_log, sh_dc=sh_dc,
                         sh_rest=cloud.sh_rest, alpha_logit=cloud.alpha_logit, region=cloud.region)
