from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import fgt
from .tensor import Tensor, default_dtype


class ParamStore:
    """Ordered collection of named trainable tensors, each tagged with a group.

    The group name selects the learning rate in :class:`AdamState`.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, value, group: str = "default") -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=default_dtype()))
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        self._groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def items(self):
        return self._params.items()

    def group(self, name: str) -> str:
        return self._groups[name]

    def set_group(self, name: str, group: str) -> None:
        self._groups[name] = group

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self._params.items():
            if n not in arrays:
                raise KeyError(f"checkpoint missing parameter {n!r}")
            arr = arrays[n]
            if arr.shape != t.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype).copy()

    def save(self, directory, meta: dict | None = None) -> None:
        info = {"groups": dict(self._groups), **(meta or {})}
        fgt.save_archive(directory, self.state_dict(), info)

    def load(self, directory) -> dict:
        arrays, meta = fgt.load_archive(directory)
        self.load_state_dict(arrays)
        return meta


@dataclass
class AdamState:
    lr: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState, names: Iterable[str] | None = None) -> None:
    """One bias-corrected Adam update over ``names`` (default: every parameter).

    Gradients are left in place; the caller resets them.
    """
    names = list(params) if names is None else list(names)
    for n in names:
        if params[n].grad is None:
            raise ValueError(f"adam_step: parameter {n!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for n in names:
        p = params[n]
        g = p.grad
        m = state.first_moment.get(n)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.second_moment[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        state.first_moment[n] = m
        state.second_moment[n] = v
        lr = state.lr[params.group(n)]
        if lr == 0.0:
            continue
        upd = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - upd).astype(p.dtype, copy=False)
