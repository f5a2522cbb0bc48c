"""Inference: detection heads, decoding and NMS, then suppression and score fusion."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from focaldet.boxes import Detection, GridShape
from focaldet.decode import DecodeConfig, decode, fuse_scores
from focaldet.suppress import RoiAlignConfig, suppression_forward
from focaldet.tinynet.model import ModelParams, forward_fdn


def detect_batch(
    images: Sequence[np.ndarray],
    image_ids: Sequence[str],
    params: ModelParams,
    cfg: DecodeConfig = DecodeConfig(),
    suppress: bool = True,
) -> list[list[Detection]]:
    """Detections per image, ordered by p_detect (NMS order).

    With ``suppress`` the boxes are rescored by the suppression head;
    the boxes themselves are identical either way.
    """
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    shape = GridShape(stack.shape[1], stack.shape[2], cfg.stride)
    out = forward_fdn(stack, params)
    head = params.group("sup.")
    roi_cfg = RoiAlignConfig(feature_stride=cfg.stride)
    results = []
    for k, image_id in enumerate(image_ids):
        dets = decode(
            out.center.value[k, :, :, 0],
            out.log_h.value[k, :, :, 0],
            out.offset.value[k].transpose(2, 0, 1),
            cfg,
            shape,
            image_id,
        )
        if suppress and dets:
            dets = fuse_scores(dets, suppression_forward(out.features.value[k], dets, head, roi_cfg))
        results.append(dets)
    return results


def detect_dataset(
    images: dict[str, np.ndarray],
    image_ids: Sequence[str],
    params: ModelParams,
    cfg: DecodeConfig = DecodeConfig(),
    suppress: bool = True,
    batch_size: int = 8,
) -> list[Detection]:
    out: list[Detection] = []
    for b0 in range(0, len(image_ids), batch_size):
        ids = list(image_ids[b0 : b0 + batch_size])
        for dets in detect_batch([images[i] for i in ids], ids, params, cfg, suppress):
            out.extend(dets)
    return out
