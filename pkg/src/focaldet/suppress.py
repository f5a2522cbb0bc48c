"""Fast suppression head: ROI Align, a small classifier, labels and training.

The head predicts the probability that a detection should be kept; the
suppression probability is its complement. Features reach the head as
constants, so nothing it learns can leak gradient into the backbone or
the detection heads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from focaldet.boxes import Annotation, BBox, Detection, ioa, iou
from focaldet.losses import EPS, bce_loss
from focaldet.tinynet.autograd import (
    Tape,
    Tensor,
    _emit,
    attach_loss,
    conv2d,
    linear,
    relu,
    reshape,
    sigmoid,
)


@dataclass(frozen=True)
class RoiAlignConfig:
    output_size: tuple[int, int] = (7, 7)
    sampling_points: int = 2
    feature_stride: int = 4

    def __post_init__(self):
        if min(self.output_size) < 1 or self.sampling_points < 1:
            raise ValueError(f"invalid ROI Align config {self}")


@dataclass(frozen=True)
class SuppressionLabel:
    detection_index: int
    label: int  # 1 keep (true pedestrian), 0 suppress (false positive)


def _axis_taps(lo: float, hi: float, bins: int, samples: int, size: int):
    """Per-bin sample taps along one axis: (bins, samples, 2) indices and weights.

    Feature value ``k`` sits at continuous coordinate ``k + 0.5``; taps
    falling outside ``[0, size)`` get zero weight.
    """
    step = (hi - lo) / bins
    frac = (np.arange(samples) + 0.5) / samples
    pos = lo + (np.arange(bins)[:, None] + frac[None, :]) * step - 0.5
    left = np.floor(pos)
    t = pos - left
    idx = np.stack([left, left + 1], axis=-1).astype(np.int64)
    wts = np.stack([1.0 - t, t], axis=-1)
    valid = (idx >= 0) & (idx < size)
    return np.where(valid, idx, 0), np.where(valid, wts, 0.0)


def roi_align_matrix(
    boxes: Sequence[BBox], feat_hw: tuple[int, int], cfg: RoiAlignConfig = RoiAlignConfig()
) -> sp.csr_matrix:
    """Sparse (n * oh * ow, H * W) matrix mapping a feature plane to ROI bins.

    Each bin averages ``sampling_points**2`` bilinear samples. The map is
    linear in the features, so its transpose is the exact backward pass.
    """
    fh, fw = feat_hw
    oh, ow = cfg.output_size
    s = cfg.sampling_points
    rows, cols, vals = [], [], []
    for n, box in enumerate(boxes):
        if not isinstance(box, BBox):
            box = BBox(*box)
        st = cfg.feature_stride
        yi, yw = _axis_taps(box.y1 / st, box.y2 / st, oh, s, fh)  # (oh, s, 2)
        xi, xw = _axis_taps(box.x1 / st, box.x2 / st, ow, s, fw)  # (ow, s, 2)
        # (oh, ow, s, s, 2, 2) tap indices and weights
        flat = yi[:, None, :, None, :, None] * fw + xi[None, :, None, :, None, :]
        wt = yw[:, None, :, None, :, None] * xw[None, :, None, :, None, :] / (s * s)
        out_idx = n * oh * ow + np.arange(oh)[:, None] * ow + np.arange(ow)[None, :]
        out_idx = np.broadcast_to(out_idx[:, :, None, None, None, None], flat.shape)
        rows.append(out_idx.ravel())
        cols.append(flat.ravel())
        vals.append(wt.ravel())
    if not rows:
        return sp.csr_matrix((0, fh * fw))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(boxes) * oh * ow, fh * fw),
    )


def roi_align_tensor(
    features: Tensor, boxes: Sequence[BBox], cfg: RoiAlignConfig = RoiAlignConfig()
) -> Tensor:
    """ROI Align on one (H, W, C) feature map -> (n, oh, ow, C), differentiable."""
    fh, fw, c = features.shape
    oh, ow = cfg.output_size
    mat = roi_align_matrix(boxes, (fh, fw), cfg)
    n = len(boxes)
    out = np.asarray(mat @ features.value.reshape(fh * fw, c)).reshape(n, oh, ow, c)

    def backward(g):
        return (np.asarray(mat.T @ g.reshape(n * oh * ow, c)).reshape(fh, fw, c),)

    return _emit(out, (features,), backward)


def roi_align(
    features: np.ndarray, box: BBox, cfg: RoiAlignConfig = RoiAlignConfig()
) -> np.ndarray:
    """Single-box ROI Align on a (C, H, W) map; returns (C, oh, ow)."""
    hwc = np.asarray(features, dtype=np.float64).transpose(1, 2, 0)
    return roi_align_tensor(Tensor(hwc), [box], cfg).value[0].transpose(2, 0, 1)


def make_suppression_labels(
    detections: Sequence[Detection],
    annotations: Sequence[Annotation],
    iou_match: float = 0.5,
) -> list[SuppressionLabel]:
    """Greedy one-to-one matching in descending p_detect order.

    Matched detections are labelled keep. Unmatched ones covering an
    ignore annotation (ioa >= iou_match) get no label at all; every other
    unmatched detection is labelled suppress.
    """
    order = sorted(range(len(detections)), key=lambda k: -detections[k].p_detect)
    gts = [a for a in annotations if not a.ignore]
    ignored = [a for a in annotations if a.ignore]
    taken = [False] * len(gts)
    labels = {}
    for k in order:
        box = detections[k].box
        best, best_iou = -1, iou_match
        for g, ann in enumerate(gts):
            if taken[g]:
                continue
            ov = iou(box, ann.box)
            if ov >= best_iou and (best < 0 or ov > best_iou):
                best, best_iou = g, ov
        if best >= 0:
            taken[best] = True
            labels[k] = 1
        elif any(ioa(box, a.box) >= iou_match for a in ignored):
            continue
        else:
            labels[k] = 0
    return [SuppressionLabel(k, labels[k]) for k in sorted(labels)]


def head_forward(patches: Tensor, head: dict[str, Tensor]) -> Tensor:
    """(n, 7, 7, C) ROI patches -> (n, 1) keep probabilities."""
    n = patches.shape[0]
    x = relu(conv2d(patches, head["sup.conv.w"], head["sup.conv.b"]))
    x = reshape(x, (n, -1))
    x = relu(linear(x, head["sup.fc1.w"], head["sup.fc1.b"]))
    return sigmoid(linear(x, head["sup.fc2.w"], head["sup.fc2.b"]))


def _patches(features: np.ndarray, boxes: Sequence[BBox], cfg: RoiAlignConfig) -> Tensor:
    # plain array input: the head never sees a feature tensor on the tape
    return Tensor(roi_align_tensor(Tensor(np.asarray(features)), boxes, cfg).value)


def suppression_forward(
    features: np.ndarray,
    detections: Sequence[Detection],
    head: dict[str, Tensor],
    cfg: RoiAlignConfig = RoiAlignConfig(),
) -> np.ndarray:
    """Suppression probability per detection, order-aligned with the input."""
    if not detections:
        return np.zeros(0)
    keep = head_forward(_patches(features, [d.box for d in detections], cfg), head)
    return 1.0 - keep.value[:, 0]


def train_suppression_step(
    batch: Sequence[tuple[np.ndarray, Sequence[Detection], Sequence[SuppressionLabel]]],
    head: dict[str, Tensor],
    optimizer,
    lr: float,
    cfg: RoiAlignConfig = RoiAlignConfig(),
) -> Optional[float]:
    """One BCE step on the head parameters for a batch of images.

    ``batch`` holds (features, detections, labels) per image, features as
    plain (H, W, C) arrays. Returns the loss, or None when no detection
    carries a label (the step is then a no-op).
    """
    patches, targets = [], []
    for features, dets, labels in batch:
        if not labels:
            continue
        boxes = [dets[lab.detection_index].box for lab in labels]
        patches.append(_patches(features, boxes, cfg).value)
        targets.extend(lab.label for lab in labels)
    if not targets:
        return None
    for t in head.values():
        t.zero_grad()
    x = Tensor(np.concatenate(patches))
    y = np.asarray(targets, dtype=np.float64)
    with Tape() as tape:
        keep = head_forward(x, head)
        p = keep.value[:, 0]
        pc = np.clip(p, EPS, 1.0 - EPS)
        loss, grad = bce_loss(pc, y)
        grad = np.where((p > EPS) & (p < 1.0 - EPS), grad, 0.0)
        out = attach_loss([keep], loss, [grad[:, None]])
    tape.backward(out)
    optimizer.step(head, lr)
    return loss
