"""Scalar MLP heads, parameter bookkeeping and the Adam optimizer."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_weight(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    bound = gain * np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class MLP:
    """Dense layers with leaky-ReLU between them and a linear output.

    Inputs are multiplied by ``in_scale`` first; heads fed with unit-norm rows
    use ``sqrt(in_dim)`` so their entries start near unit variance.
    """

    def __init__(self, widths, rng: np.random.Generator, slope: float = 0.2, out_gain: float = 1.0,
                 in_scale: float = 1.0):
        self.widths = list(widths)
        self.slope = slope
        self.in_scale = float(in_scale)
        self.W = []
        self.b = []
        for i, (din, dout) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            last = i == len(self.widths) - 2
            self.W.append(init_weight(rng, (din, dout), din, gain=out_gain if last else np.sqrt(2.0)))
            self.b.append(Tensor(np.zeros(dout), requires_grad=True))

    def __call__(self, x) -> Tensor:
        h = T.as_tensor(x)
        if self.in_scale != 1.0:
            h = h * self.in_scale
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            h = T.matmul(h, W) + b
            if i < len(self.W) - 1:
                h = T.leaky_relu(h, self.slope)
        return h

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            out[f"{prefix}/{i}.W"] = W
            out[f"{prefix}/{i}.b"] = b
        return out


def load_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    for name, p in params.items():
        if name not in arrays:
            if strict:
                raise KeyError(f"checkpoint is missing {name}")
            continue
        if arrays[name].shape != p.shape:
            raise ValueError(f"{name}: shape {arrays[name].shape} != {p.shape}")
        p.data[...] = arrays[name]


class Adam:
    """Adam with global gradient-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip: float | None = 10.0):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        scale = 1.0
        if self.clip is not None and gnorm > self.clip:
            scale = self.clip / gnorm
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return gnorm
