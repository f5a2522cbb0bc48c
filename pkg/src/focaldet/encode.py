"""Ground-truth annotations to stride-level supervision maps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from focaldet.boxes import Annotation, GridShape

# sigma_y = h / SIGMA_DIVISOR puts the box's top and bottom edges at 3 sigma.
SIGMA_DIVISOR = 6.0
WIDTH_RATIO = 0.41


@dataclass
class TargetMaps:
    center: np.ndarray
    penalty: np.ndarray
    log_height: np.ndarray
    offset: np.ndarray  # (2, H, W): dx, dy
    pos_mask: np.ndarray
    shape: GridShape

    @property
    def num_positives(self) -> int:
        return int(self.pos_mask.sum())

    @property
    def norm(self) -> float:
        """K in the center loss: number of positives, clamped at one."""
        return float(max(1, self.num_positives))

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "center": self.center,
            "penalty": self.penalty,
            "log_height": self.log_height,
            "offset": self.offset,
            "pos_mask": self.pos_mask.astype(np.float64),
        }


def empty_targets(shape: GridShape) -> TargetMaps:
    mh, mw = shape.map_shape
    return TargetMaps(
        center=np.zeros((mh, mw)),
        penalty=np.zeros((mh, mw)),
        log_height=np.zeros((mh, mw)),
        offset=np.zeros((2, mh, mw)),
        pos_mask=np.zeros((mh, mw), dtype=bool),
        shape=shape,
    )


def gaussian_penalty(
    ann: Annotation,
    shape: GridShape,
    width_ratio: float = WIDTH_RATIO,
    sigma_divisor: float = SIGMA_DIVISOR,
) -> np.ndarray:
    """Anisotropic Gaussian around the true center, truncated to the box.

    Evaluated at the map location that the center lands on; the positive
    cell therefore gets exactly 1. Cells are sampled at ``(index + frac)``
    in map coordinates, ``frac`` being the center's sub-cell offset.
    """
    mh, mw = shape.map_shape
    s = shape.stride
    cx, cy = ann.box.center()
    h = ann.box.height()
    sig_x = width_ratio * h / sigma_divisor / s
    sig_y = h / sigma_divisor / s
    fx, fy = cx / s - math.floor(cx / s), cy / s - math.floor(cy / s)
    xs = np.arange(mw) + fx
    ys = np.arange(mh) + fy
    gx = np.exp(-((xs - cx / s) ** 2) / (2.0 * sig_x**2))
    gy = np.exp(-((ys - cy / s) ** 2) / (2.0 * sig_y**2))
    # truncate to the cells whose sample point lies inside the box
    b = ann.box
    gx[(xs < b.x1 / s) | (xs > b.x2 / s)] = 0.0
    gy[(ys < b.y1 / s) | (ys > b.y2 / s)] = 0.0
    return np.outer(gy, gx)


def center_cell(ann: Annotation, stride: int) -> tuple[int, int]:
    cx, cy = ann.box.center()
    return int(math.floor(cy / stride)), int(math.floor(cx / stride))


def encode_targets(
    annotations: Sequence[Annotation],
    shape: GridShape,
    width_ratio: float = WIDTH_RATIO,
    sigma_divisor: float = SIGMA_DIVISOR,
) -> TargetMaps:
    """Build center, penalty-reduction, log-height and offset maps.

    Ignore-flagged annotations are skipped entirely. When two objects
    land on the same cell the shorter one owns it (first in input order
    on exact height ties); the other still contributes to the penalty map.
    """
    maps = empty_targets(shape)
    image_ids = {a.image_id for a in annotations}
    if len(image_ids) > 1:
        raise ValueError(f"annotations span several images: {sorted(image_ids)}")
    mh, mw = shape.map_shape
    s = shape.stride

    owner: dict[tuple[int, int], Annotation] = {}
    for ann in annotations:
        if ann.ignore:
            continue
        cx, cy = ann.box.center()
        if not (0.0 <= cx < shape.width_px and 0.0 <= cy < shape.height_px):
            raise ValueError(
                f"annotation center ({cx}, {cy}) of {ann.image_id} lies outside "
                f"the {shape.width_px}x{shape.height_px} image"
            )
        if ann.box.height() < 2 * s:
            raise ValueError(
                f"annotation height {ann.box.height()} below 2*stride={2 * s}"
            )
        np.maximum(
            maps.penalty,
            gaussian_penalty(ann, shape, width_ratio, sigma_divisor),
            out=maps.penalty,
        )
        cell = center_cell(ann, s)
        prev = owner.get(cell)
        if prev is None or ann.box.height() < prev.box.height():
            owner[cell] = ann

    for (i, j), ann in owner.items():
        if not (0 <= i < mh and 0 <= j < mw):
            continue
        cx, cy = ann.box.center()
        maps.center[i, j] = 1.0
        maps.pos_mask[i, j] = True
        maps.penalty[i, j] = 1.0
        maps.log_height[i, j] = math.log(ann.box.height())
        maps.offset[0, i, j] = cx / s - j
        maps.offset[1, i, j] = cy / s - i
    return maps
