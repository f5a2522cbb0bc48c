"""Toy stride-4 backbone with top-down bilinear fusion and the detection heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from focaldet.tinynet.autograd import (
    Tensor,
    add,
    bilinear_upsample,
    crop,
    conv2d,
    relu,
    sigmoid,
)

# (name, in, out, stride) for the bottom-up path; cumulative strides 2,4,8,8,16,16,32,32
BOTTOM_UP = (
    ("stem", 1, 8, 2),
    ("c4a", 8, 16, 2),
    ("c8a", 16, 24, 2),
    ("c8b", 24, 24, 1),
    ("c16a", 24, 32, 2),
    ("c16b", 32, 32, 1),
    ("c32a", 32, 32, 2),
    ("c32b", 32, 32, 1),
)
# convolutions applied after each x2 upsample before merging into the lateral
TOP_DOWN = (("u16", 32, 32, 3), ("u8", 32, 24, 3), ("u4", 24, 16, 1))
FEATURE_CHANNELS = 16
SUP_HIDDEN = 64
ROI_SIZE = 7
INPUT_MEAN = 0.5
CENTER_PRIOR = 0.01
LOG_HEIGHT_PRIOR = math.log(60.0)
HEAD_INIT_STD = 0.01


@dataclass
class ModelParams:
    """Named parameter tensors. Prefixes: ``backbone.``, ``fdn.``, ``sup.``."""

    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if k.startswith(prefix)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value for k, t in self.tensors.items()}

    def copy(self) -> ModelParams:
        return ModelParams(
            {k: Tensor(t.value.copy(), requires_grad=t.requires_grad, name=k) for k, t in self.items()}
        )

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> ModelParams:
        return cls({k: Tensor(np.array(v, dtype=np.float64), True, k) for k, v in arrays.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def num_parameters(self) -> int:
        return sum(t.value.size for t in self.tensors.values())


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, cin, cout, _ in BOTTOM_UP:
        arrays[f"backbone.{name}.w"] = _kaiming(rng, (cout, cin, 3, 3))
        arrays[f"backbone.{name}.b"] = np.zeros(cout)
    for name, cin, cout, k in TOP_DOWN:
        arrays[f"backbone.{name}.w"] = _kaiming(rng, (cout, cin, k, k))
        arrays[f"backbone.{name}.b"] = np.zeros(cout)
    c = FEATURE_CHANNELS
    for head, out, bias in (
        ("center", 1, math.log(CENTER_PRIOR / (1.0 - CENTER_PRIOR))),
        ("log_h", 1, LOG_HEIGHT_PRIOR),
        ("offset", 2, 0.0),
    ):
        arrays[f"fdn.{head}.w"] = rng.normal(0.0, HEAD_INIT_STD, size=(out, c, 1, 1))
        arrays[f"fdn.{head}.b"] = np.full(out, bias)
    arrays["sup.conv.w"] = _kaiming(rng, (c, c, 3, 3))
    arrays["sup.conv.b"] = np.zeros(c)
    arrays["sup.fc1.w"] = _kaiming(rng, (SUP_HIDDEN, c * ROI_SIZE * ROI_SIZE))
    arrays["sup.fc1.b"] = np.zeros(SUP_HIDDEN)
    arrays["sup.fc2.w"] = _kaiming(rng, (1, SUP_HIDDEN)) * 0.1
    arrays["sup.fc2.b"] = np.zeros(1)
    return ModelParams.from_arrays(arrays)


@dataclass
class FdnOutput:
    center: Tensor  # (N, h, w, 1), probabilities
    log_h: Tensor  # (N, h, w, 1)
    offset: Tensor  # (N, h, w, 2): dx, dy in (0, 1)
    features: Tensor  # (N, h, w, C), shared with the suppression head


def _as_batch(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W) image, got shape {img.shape}")
    h, w = img.shape[1:]
    if h % 4 or w % 4:
        raise ValueError(f"image dims must be divisible by 4, got {h}x{w}")
    return img[..., None] - INPUT_MEAN


def _conv(x: Tensor, p: ModelParams, name: str, stride: int = 1) -> Tensor:
    return conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride)


def forward_fdn(image: np.ndarray, params: ModelParams) -> FdnOutput:
    """Run the backbone and detection heads; maps come out at stride 4."""
    x = Tensor(_as_batch(image))
    lateral = {}
    for name, _, _, stride in BOTTOM_UP:
        x = relu(_conv(x, params, f"backbone.{name}", stride))
        lateral[name] = x
    top = lateral["c32b"]
    for (name, _, _, _), merge in zip(TOP_DOWN, ("c16b", "c8b", "c4a")):
        lat = lateral[merge]
        up = crop(bilinear_upsample(top), lat.shape[1], lat.shape[2])
        up = _conv(up, params, f"backbone.{name}")
        top = relu(add(up, lat))
    feats = top
    return FdnOutput(
        center=sigmoid(_conv(feats, params, "fdn.center")),
        log_h=_conv(feats, params, "fdn.log_h"),
        offset=sigmoid(_conv(feats, params, "fdn.offset")),
        features=feats,
    )
