from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

# gradients smaller than this are compared in absolute terms
REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    checked: np.ndarray  # bool mask of coordinates that entered the statistics

    @property
    def median(self) -> float:
        e = self.rel_err[self.checked]
        return float(np.median(e)) if e.size else 0.0

    @property
    def max(self) -> float:
        e = self.rel_err[self.checked]
        return float(e.max()) if e.size else 0.0

    def worst(self, k: int = 5):
        idx = np.flatnonzero(self.checked)
        order = idx[np.argsort(self.rel_err[idx])[::-1][:k]]
        return [(int(i), float(self.analytic[i]), float(self.numeric[i]), float(self.rel_err[i])) for i in order]

    def passed(self, median_tol: float, max_tol: float) -> bool:
        return self.median < median_tol and self.max < max_tol


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], step: float = 1e-5,
               coords: Sequence[np.ndarray] | None = None,
               skip: Callable[[int, int], bool] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*xs)`` with central differences.

    ``coords`` optionally restricts, per input, which flat indices are perturbed.
    ``skip(i, k)`` may veto coordinate ``k`` of input ``i`` after both probes ran
    (used to drop probes straddling a discontinuity); vetoed coordinates are
    reported but excluded from the statistics.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    if out.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    out.backward()
    analytic, numeric, checked = [], [], []
    for i, t in enumerate(xs):
        g = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).astype(np.float64)
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)  # a view, so writes perturb t in place
        sel = np.arange(t.size) if coords is None else np.asarray(coords[i], dtype=np.int64)
        num = np.zeros(t.size)
        mask = np.zeros(t.size, dtype=bool)
        with no_grad():
            for k in sel:
                orig = flat[k]
                flat[k] = orig + step
                fp = float(f(*xs).data)
                flat[k] = orig - step
                fm = float(f(*xs).data)
                flat[k] = orig
                num[k] = (fp - fm) / (2 * step)
                mask[k] = not (skip is not None and skip(i, int(k)))
        analytic.append(g)
        numeric.append(num)
        checked.append(mask)
    a = np.concatenate(analytic)
    n = np.concatenate(numeric)
    for t in xs:
        t.grad = None
    return GradCheckReport(a, n, relative_error(a, n), np.concatenate(checked))
