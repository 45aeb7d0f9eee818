from __future__ import annotations

from typing import Sequence

import numpy as np

from .optim import ParamStore
from .tensor import Tensor, relu, tanh


class Linear:
    def __init__(self, params: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                 group: str = "default", bias: bool = True, zero_init: bool = False):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            bound = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.w = params.add(f"{name}.w", w, group)
        self.b = params.add(f"{name}.b", np.zeros(n_out), group) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


_ACTS = {"relu": relu, "tanh": tanh}


class MLP:
    """Stack of linear layers with a hidden activation and an optional output one."""

    def __init__(self, params: ParamStore, name: str, sizes: Sequence[int], rng: np.random.Generator,
                 group: str = "default", act: str = "relu", out_act: str | None = None,
                 zero_last: bool = False):
        self.layers = [
            Linear(params, f"{name}.{i}", sizes[i], sizes[i + 1], rng, group,
                   zero_init=zero_last and i == len(sizes) - 2)
            for i in range(len(sizes) - 1)
        ]
        self.act = _ACTS[act]
        self.out_act = _ACTS[out_act] if out_act else None

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return self.out_act(x) if self.out_act else x

    @property
    def last(self) -> Linear:
        return self.layers[-1]
