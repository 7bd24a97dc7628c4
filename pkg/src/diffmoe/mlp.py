"""Small MLP denoiser for low-dimensional point data (the "gmm2d" family).

Shares the forward/predict protocol with the U-Net but has no elastic
units, so it supports pretraining, sampling and evaluation only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Parameter, Tensor, no_tape


@dataclass(frozen=True)
class MLPConfig:
    dim: int = 2
    hidden: int = 64
    time_embed_dim: int = 32

    def validate(self):
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")


class MLPDenoiser:
    def __init__(self, config: MLPConfig, rng: Rng):
        config.validate()
        self.config = config
        d, h, ted = config.dim, config.hidden, config.time_embed_dim
        self._params = []

        def getp(name, shape, fan_in):
            if fan_in == 0:
                p = Parameter(np.zeros(shape), name=name)
            else:
                p = Parameter(rng.normal(shape) / math.sqrt(fan_in), name=name)
            self._params.append(p)
            return p

        self.w1 = getp("mlp.w1", (h, d + ted), d + ted)
        self.b1 = getp("mlp.b1", (h,), 0)
        self.w2 = getp("mlp.w2", (h, h), h)
        self.b2 = getp("mlp.b2", (h,), 0)
        self.w3 = getp("mlp.w3", (d, h), h)
        self.b3 = getp("mlp.b3", (d,), 0)

    @property
    def data_shape(self):
        return (1, self.config.dim)

    def parameters(self):
        return self._params

    def zero_grad(self):
        for p in self._params:
            p.zero_grad()

    def param_count(self):
        return sum(p.data.size for p in self._params)

    def state_arrays(self):
        return {p.name: p.data.copy() for p in self._params}

    def load_arrays(self, arrays):
        for p in self._params:
            p.data[...] = arrays[p.name]

    def _time_features(self, t):
        t = np.asarray(t, dtype=np.float64)
        half = self.config.time_embed_dim // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
        ang = t[:, None] * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def forward(self, x, t, cond=None, masks=None) -> Tensor:
        if masks is not None:
            raise ValueError("MLP denoiser has no maskable units")
        x = T.as_tensor(x)
        B = x.data.shape[0]
        t = np.asarray(t)
        if t.ndim == 0:
            t = np.full(B, int(t))
        flat = T.reshape(x, (B, self.config.dim))
        inp = T.concat([flat, Tensor(self._time_features(t))], axis=1)
        h = T.silu(T.dense(inp, self.w1, self.b1))
        h = T.silu(T.dense(h, self.w2, self.b2))
        out = T.dense(h, self.w3, self.b3)
        return T.reshape(out, (B, 1, self.config.dim))

    def predict(self, x: np.ndarray, t, cond=None) -> np.ndarray:
        with no_tape():
            return self.forward(Tensor(x), t, cond=cond).data


def count_macs(model: MLPDenoiser) -> int:
    c = model.config
    return (
        (c.dim + c.time_embed_dim) * c.hidden
        + c.hidden * c.hidden
        + c.hidden * c.dim
    )
