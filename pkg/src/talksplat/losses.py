"""Image losses (L1, D-SSIM, random-feature perceptual) and evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0

PATCH_SIZE = 32
NUM_PATCHES = 4
PERCEPTUAL_SEED = 1729


@dataclass
class LossWeights:
    lambda1: float = 0.20  # D-SSIM
    lambda2: float = 0.50  # perceptual
    lambda3: float = 0.03  # lip sync

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


@lru_cache(maxsize=16)
def _blur_matrix(n: int, dtype_str: str) -> np.ndarray:
    # banded matrix == 1-D correlation with zero padding
    g = gaussian_window()
    r = SSIM_WINDOW // 2
    m = np.zeros((n, n))
    for i in range(n):
        for k in range(-r, r + 1):
            j = i + k
            if 0 <= j < n:
                m[i, j] = g[k + r]
    return m.astype(dtype_str)


def _blur(x: Tensor) -> Tensor:
    # x: (C, H, W)
    bh = Tensor(_blur_matrix(x.shape[1], str(x.dtype)))
    bw = Tensor(_blur_matrix(x.shape[2], str(x.dtype)).T.copy())
    return bh @ x @ bw


def _chw(img) -> Tensor:
    img = dc.as_tensor(img)
    if img.ndim == 2:
        return img.reshape(1, *img.shape)
    return img.transpose(2, 0, 1)


def ssim_map(x, y) -> Tensor:
    x, y = _chw(x), _chw(y)
    if x.shape != y.shape:
        raise dc.ShapeError("ssim", x.shape, y.shape)
    mx, my = _blur(x), _blur(y)
    mx2, my2, mxy = mx * mx, my * my, mx * my
    sxx = _blur(x * x) - mx2
    syy = _blur(y * y) - my2
    sxy = _blur(x * y) - mxy
    num = (2.0 * mxy + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx2 + my2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(x, y) -> Tensor:
    return ssim_map(x, y).mean()


def dssim(x, y) -> Tensor:
    return (1.0 - ssim(x, y)) * 0.5


def l1(x, y) -> Tensor:
    x, y = dc.as_tensor(x), dc.as_tensor(y)
    if x.shape != y.shape:
        raise dc.ShapeError("l1", x.shape, y.shape)
    return (x - y).abs().mean()


def reconstruction_loss(gt, rendered, lambda1: float = 0.2) -> Tensor:
    return l1(gt, rendered) + lambda1 * dssim(gt, rendered)


def loss_static(gt_masked, rendered, lambda1: float = 0.2) -> Tensor:
    """L1 + lambda1 * D-SSIM against the masked ground truth."""
    return reconstruction_loss(gt_masked, rendered, lambda1)


def loss_fam(gt_masked, dynamic_render, lambda1: float = 0.2) -> Tensor:
    return reconstruction_loss(gt_masked, dynamic_render, lambda1)


# -- perceptual stand-in -----------------------------------------------------

class PerceptualFeatures:
    """Fixed random 3-layer conv stack used as a stand-in for a learned perceptual network.

    Weights are drawn once from ``PERCEPTUAL_SEED`` unless a weights archive
    (tensors ``conv{0,1,2}.w`` / ``conv{0,1,2}.b``) is supplied.
    """

    CHANNELS = (3, 16, 32, 32)
    STRIDES = (1, 2, 2)

    def __init__(self, weights_path: str | Path | None = None, seed: int = PERCEPTUAL_SEED):
        if weights_path is not None:
            arrays, _ = dc.fgt.load_archive(weights_path)
            self.weights = [(arrays[f"conv{i}.w"], arrays[f"conv{i}.b"]) for i in range(3)]
        else:
            rng = np.random.default_rng(seed)
            self.weights = []
            for cin, cout in zip(self.CHANNELS[:-1], self.CHANNELS[1:]):
                w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
                self.weights.append((w, np.zeros(cout)))
        self._cache: dict = {}

    def _params(self, dtype):
        key = np.dtype(dtype).str
        if key not in self._cache:
            self._cache[key] = [(Tensor(w.astype(dtype)), Tensor(b.astype(dtype))) for w, b in self.weights]
        return self._cache[key]

    def features(self, x: Tensor) -> list[Tensor]:
        feats = []
        for (w, b), s in zip(self._params(x.dtype), self.STRIDES):
            x = dc.relu(dc.conv2d(x, w, b, stride=s, padding=1))
            feats.append(x)
        return feats

    def distance(self, x, y) -> Tensor:
        """Sum over layers of the mean squared feature difference; x, y: (B, 3, h, w)."""
        fx, fy = self.features(dc.as_tensor(x)), self.features(dc.as_tensor(y))
        total = None
        for a, b in zip(fx, fy):
            d = ((a - b) ** 2).mean()
            total = d if total is None else total + d
        return total


_default_perceptual: PerceptualFeatures | None = None


def default_perceptual() -> PerceptualFeatures:
    global _default_perceptual
    if _default_perceptual is None:
        _default_perceptual = PerceptualFeatures()
    return _default_perceptual


def sample_patches(height: int, width: int, seed: int, step: int, k: int = NUM_PATCHES,
                   size: int = PATCH_SIZE) -> np.ndarray:
    if size > height or size > width:
        raise ValueError(f"patch size {size} exceeds image {height}x{width}")
    rng = np.random.default_rng([seed, step])
    ys = rng.integers(0, height - size + 1, size=k)
    xs = rng.integers(0, width - size + 1, size=k)
    return np.stack([ys, xs], axis=1)


def _patches(img: Tensor, corners: np.ndarray, size: int) -> Tensor:
    chw = _chw(img)
    return dc.stack([chw[:, y:y + size, x:x + size] for y, x in corners], axis=0)


def perceptual_patch_loss(gt, fused, seed: int, step: int, net: PerceptualFeatures | None = None,
                          k: int = NUM_PATCHES, size: int = PATCH_SIZE) -> Tensor:
    gt, fused = dc.as_tensor(gt), dc.as_tensor(fused)
    h, w = gt.shape[:2]
    corners = sample_patches(h, w, seed, step, k, size)
    net = net or default_perceptual()
    return net.distance(_patches(fused, corners, size), _patches(gt, corners, size))


def loss_fusion(gt_full, fused, weights: LossWeights, seed: int, step: int,
                net: PerceptualFeatures | None = None) -> Tensor:
    gt_full, fused = dc.as_tensor(gt_full), dc.as_tensor(fused)
    loss = reconstruction_loss(gt_full, fused, weights.lambda1)
    if weights.lambda2 > 0:
        loss = loss + weights.lambda2 * perceptual_patch_loss(gt_full, fused, seed, step, net)
    return loss


# -- metrics -------------------------------------------------------------------

def psnr(gt: np.ndarray, gen: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(gt, dtype=np.float64) - np.asarray(gen, dtype=np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim_value(gt: np.ndarray, gen: np.ndarray) -> float:
    with dc.no_grad():
        return float(ssim(Tensor(np.asarray(gt, dtype=np.float64)), Tensor(np.asarray(gen, dtype=np.float64))).data)


def mask_centroid(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return np.array([ys.mean(), xs.mean()])


def centroid_distance(gt_mask: np.ndarray, gen_alpha: np.ndarray) -> float:
    """Pixel distance between GT mask and generated alpha>0.5 centroids.

    A missing generated mouth scores the image diagonal.
    """
    a = mask_centroid(np.asarray(gt_mask) > 0.5)
    b = mask_centroid(np.asarray(gen_alpha) > 0.5)
    if a is None and b is None:
        return 0.0
    if a is None or b is None:
        return float(np.hypot(*np.shape(gt_mask)))
    return float(np.linalg.norm(a - b))


METRIC_KEYS = ("psnr", "ssim", "mouth_centroid_dist", "sync_conf")


def metrics(gt_frames, gen_frames, gt_mouth_masks, gen_mouth_alpha, sync_conf: float) -> dict[str, float]:
    """Mean PSNR / SSIM / mouth-centroid distance over a sequence plus a precomputed sync confidence."""
    gt_frames = np.asarray(gt_frames)
    gen_frames = np.asarray(gen_frames)
    if gt_frames.shape != gen_frames.shape:
        raise ValueError(f"metrics: sequence shapes differ {gt_frames.shape} vs {gen_frames.shape}")
    p = [psnr(g, x) for g, x in zip(gt_frames, gen_frames)]
    s = [ssim_value(g, x) for g, x in zip(gt_frames, gen_frames)]
    c = [centroid_distance(m, a) for m, a in zip(gt_mouth_masks, gen_mouth_alpha)]
    return {"psnr": float(np.mean(p)), "ssim": float(np.mean(s)),
            "mouth_centroid_dist": float(np.mean(c)), "sync_conf": float(sync_conf)}
