"""A small tape-based reverse-mode autodiff over float64 numpy arrays.

Only the primitives the detector needs are provided. Operations record
themselves on the innermost active :class:`Tape`; outside a tape they
just compute values.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ValueError(f"gradient shape {g.shape} != tensor shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive applications.

    Recording order is a topological order of the graph, so replaying it
    backwards visits every node exactly once after all its consumers.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.nodes.append((out, inputs, backward))

    def backward(self, out: Tensor, seed: Optional[np.ndarray] = None) -> None:
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, np.float64)
        for node_out, inputs, fn in reversed(self.nodes):
            if node_out.grad is None:
                continue
            grads = fn(node_out.grad)
            for t, g in zip(inputs, grads):
                if g is not None and t.requires_grad:
                    t.accumulate(g)
            if node_out is not out:
                # intermediate buffers are not needed after propagation
                node_out.grad = None
        self.nodes.clear()

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)


_TAPES: list[Tape] = []


@contextmanager
def no_tape():
    """Temporarily hide active tapes (values only, nothing recorded)."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].record(out, inputs, backward)
    return out


# -- primitives ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _emit(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.value)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(src),))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N, I) @ w (O, I)^T + b (O,)."""
    if x.value.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"linear: bad shapes x {x.shape}, w {w.shape}, b {b.shape}")
    xv, wv = x.value, w.value

    def backward(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return _emit(xv @ wv.T + b.value, (x, w, b), backward)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (N, Ho, Wo, C, k, k) -> (N, Ho, Wo, k, k, C): one row per output pixel
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Zero-padded ("same" for stride 1) convolution with odd square kernels.

    Channels-last: x is (N, H, W, C), w is (O, C, k, k), b is (O,). The
    output is (N, ceil(H / stride), ceil(W / stride), O).
    """
    n, hh, ww, c = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0 or b.shape != (o,):
        raise ValueError(f"conv2d: bad shapes x {x.shape}, w {w.shape}, b {b.shape}")
    pad = k // 2
    ho, wo = -(-hh // stride), -(-ww // stride)
    xp = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.value
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.value.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wmat.T + b.value).reshape(n, ho, wo, o)

    def backward(g):
        g2 = g.reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c)
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                        dcols[:, :, :, ki, kj]
                    )
            gx = gxp[:, pad : pad + hh, pad : pad + ww] if pad else gxp
        return gx, np.ascontiguousarray(gw), gb

    return _emit(out, (x, w, b), backward)


def upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) linear interpolation matrix, half-pixel centers, edge clamped."""
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def bilinear_upsample(x: Tensor) -> Tensor:
    """Double the spatial size of an (N, H, W, C) tensor bilinearly."""
    n, hh, ww, c = x.shape
    uh, uw = upsample_matrix(hh), upsample_matrix(ww)
    rows = (uw @ x.value).reshape(n, hh, 2 * ww * c)
    out = (uh @ rows).reshape(n, 2 * hh, 2 * ww, c)

    def backward(g):
        gh = (uh.T @ g.reshape(n, 2 * hh, 2 * ww * c)).reshape(n, hh, 2 * ww, c)
        return (uw.T @ gh,)

    return _emit(out, (x,), backward)


def crop(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` window of an (N, H, W, C) tensor."""
    n, hh, ww, c = x.shape
    if height > hh or width > ww:
        raise ValueError(f"crop: window {height}x{width} exceeds {hh}x{ww}")
    if (height, width) == (hh, ww):
        return x

    def backward(g):
        full = np.zeros((n, hh, ww, c))
        full[:, :height, :width] = g
        return (full,)

    return _emit(np.ascontiguousarray(x.value[:, :height, :width]), (x,), backward)


def attach_loss(inputs: Sequence[Tensor], value: float, grads: Sequence[np.ndarray]) -> Tensor:
    """Scalar loss node whose input gradients were computed in closed form."""
    inputs = tuple(inputs)
    grads = tuple(np.asarray(g, dtype=np.float64) for g in grads)
    return _emit(np.asarray(value, dtype=np.float64), inputs, lambda g: tuple(g * gi for gi in grads))
