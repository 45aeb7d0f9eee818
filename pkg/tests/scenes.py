import numpy as np

from talksplat.gaussians import GaussianCloud
from talksplat.rasterizer import Camera


def camera(size=32, focal=None):
    f = focal or 1.25 * size
    return Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size)


def random_cloud(rng, n, degree=0, dtype=np.float64, spread=0.35, requires_grad=False, region=None):
    z = rng.uniform(3.0, 5.0, n)
    mu = np.stack([rng.uniform(-spread, spread, n) * z, rng.uniform(-spread, spread, n) * z, z], axis=1)
    rot = rng.normal(size=(n, 4))
    s_log = np.log(rng.uniform(0.04, 0.2, size=(n, 3)))
    sh = rng.normal(0, 0.4, size=(n, (degree + 1) ** 2, 3))
    alpha = rng.normal(0.5, 1.0, n)
    reg = np.zeros(n, dtype=np.int64) if region is None else np.asarray(region)
    return GaussianCloud.from_arrays(mu, rot, s_log, sh, alpha, reg, requires_grad=requires_grad, dtype=dtype)
