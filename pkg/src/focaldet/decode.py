"""Center/scale/offset maps to scored detections, plus NMS and score fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from focaldet.boxes import BBox, Detection, GridShape


@dataclass(frozen=True)
class DecodeConfig:
    stride: int = 4
    aspect_ratio: float = 0.41
    center_threshold: float = 0.01
    nms_iou: float = 0.5
    max_detections: int = 100
    clip_to_image: bool = True
    # False keeps every thresholded cell (raw per-cell decoding)
    apply_nms: bool = True

    def __post_init__(self):
        if self.aspect_ratio <= 0:
            raise ValueError("aspect_ratio must be positive")
        if not 0.0 <= self.center_threshold < 1.0:
            raise ValueError("center_threshold must lie in [0, 1)")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must lie in (0, 1)")


def decode_boxes(
    center: np.ndarray,
    log_h: np.ndarray,
    offset: np.ndarray,
    cfg: DecodeConfig,
    shape: GridShape,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized decoding: (N, 4) boxes and (N,) probabilities, unsorted."""
    if center.shape != log_h.shape or offset.shape != (2,) + center.shape:
        raise ValueError(
            f"map shapes disagree: center {center.shape}, log_h {log_h.shape}, "
            f"offset {offset.shape}"
        )
    if center.shape != shape.map_shape:
        raise ValueError(f"maps {center.shape} do not match grid {shape.map_shape}")
    ii, jj = np.nonzero(center >= cfg.center_threshold)
    h = np.exp(log_h[ii, jj])
    cx = (jj + offset[0, ii, jj]) * cfg.stride
    cy = (ii + offset[1, ii, jj]) * cfg.stride
    w = cfg.aspect_ratio * h
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if cfg.clip_to_image:
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, shape.width_px)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, shape.height_px)
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, ii, jj = boxes[ok], ii[ok], jj[ok]
    return boxes, center[ii, jj].astype(np.float64)


def sort_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Descending score, ties by smaller (y1, x1)."""
    return np.lexsort((boxes[:, 0], boxes[:, 1], -scores))


def pairwise_iou(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    iw = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    ih = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / (area + areas - inter)


def nms_indices(
    boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, limit: Optional[int] = None
) -> np.ndarray:
    """Greedy NMS over arrays; returns kept indices in descending score order.

    Stopping after ``limit`` kept boxes gives the same prefix as running to
    exhaustion and truncating.
    """
    order = sort_order(boxes, scores)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if limit is not None and len(keep) >= limit:
            break
        rest = order[1:]
        order = rest[pairwise_iou(boxes[i], boxes[rest]) < iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def _as_arrays(dets: Sequence[Detection]) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.array([d.box.as_list() for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return boxes, scores


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    if not detections:
        return []
    boxes, scores = _as_arrays(detections)
    return [detections[i] for i in nms_indices(boxes, scores, iou_threshold)]


def decode(
    center: np.ndarray,
    log_h: np.ndarray,
    offset: np.ndarray,
    cfg: DecodeConfig,
    shape: GridShape,
    image_id: str = "",
) -> list[Detection]:
    boxes, probs = decode_boxes(center, log_h, offset, cfg, shape)
    if cfg.apply_nms:
        idx = nms_indices(boxes, probs, cfg.nms_iou, cfg.max_detections)
    else:
        idx = sort_order(boxes, probs)[: cfg.max_detections]
    return [
        Detection(image_id, BBox(*map(float, boxes[k])), min(1.0, float(probs[k])))
        for k in idx
    ]


def fuse_scores(
    detections: Sequence[Detection], suppression_probs: Sequence[float]
) -> list[Detection]:
    """Attach suppression probabilities; boxes are never touched."""
    suppression_probs = list(suppression_probs)
    if len(suppression_probs) != len(detections):
        raise ValueError(
            f"{len(detections)} detections but {len(suppression_probs)} suppression probabilities"
        )
    return [d.with_suppression(float(s)) for d, s in zip(detections, suppression_probs)]
