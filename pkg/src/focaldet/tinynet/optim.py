"""Optimizers, the warm-up schedule and parameter averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from focaldet.tinynet.autograd import Tensor


def warmup_lr(base_lr: float, iteration: int, warmup_iters: int) -> float:
    """Linear warm-up over ``warmup_iters`` iterations, constant afterwards."""
    if warmup_iters > 0 and iteration < warmup_iters:
        return base_lr * (iteration + 1) / warmup_iters
    return base_lr


def _checked_grad(name: str, t: Tensor) -> np.ndarray:
    g = t.grad if t.grad is not None else np.zeros_like(t.value)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    return g


class SGD:
    def __init__(self, momentum: float = 0.0):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], lr: float) -> None:
        for name, t in params.items():
            g = _checked_grad(name, t)
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            t.value = t.value - lr * g

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"v.{k}": v for k, v in self.velocity.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.velocity = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v.")}


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: Mapping[str, Tensor], lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        grads = {name: _checked_grad(name, t) for name, t in params.items()}
        for name, t in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            step = self.t.get(name, 0) + 1
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name], self.t[name] = m, v, step
            mhat = m / (1.0 - b1**step)
            vhat = v / (1.0 - b2**step)
            t.value = t.value - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
            out[f"t.{name}"] = np.array([float(self.t[name])])
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.m, self.v, self.t = {}, {}, {}
        for key, arr in arrays.items():
            kind, name = key.split(".", 1)
            if kind == "m":
                self.m[name] = np.array(arr)
            elif kind == "v":
                self.v[name] = np.array(arr)
            elif kind == "t":
                self.t[name] = int(arr[0])


def make_optimizer(name: str):
    if name == "adam":
        return Adam()
    if name == "sgd":
        return SGD()
    raise ValueError(f"unknown optimizer {name!r} (expected 'adam' or 'sgd')")


@dataclass
class EmaState:
    """Exponential moving average of parameters (mean-teacher style).

    With ``ramp`` set, the effective momentum at update ``t`` is
    ``min(momentum, (1 + t) / (10 + t))`` so early averages are not
    dominated by the random initialization.
    """

    shadow: dict[str, np.ndarray]
    momentum: float = 0.999
    step: int = 0
    ramp: bool = False

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], momentum: float = 0.999, ramp: bool = False):
        return cls({k: t.value.copy() for k, t in params.items()}, momentum, 0, ramp)

    def effective_momentum(self) -> float:
        if self.ramp:
            return min(self.momentum, (1.0 + self.step) / (10.0 + self.step))
        return self.momentum


def ema_update(ema: EmaState, params: Mapping[str, Tensor]) -> EmaState:
    """shadow <- m * shadow + (1 - m) * params, in place; returns ``ema``."""
    if set(params) != set(ema.shadow):
        raise ValueError("EMA shadow and parameters have different names")
    m = ema.effective_momentum()
    for name, t in params.items():
        s = ema.shadow[name]
        if s.shape != t.value.shape:
            raise ValueError(f"EMA shape mismatch for {name!r}: {s.shape} vs {t.value.shape}")
        ema.shadow[name] = m * s + (1.0 - m) * t.value
    ema.step += 1
    return ema
