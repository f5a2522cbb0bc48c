"""Log-average miss rate (MR^-2) protocol with height/visibility settings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from focaldet.boxes import Annotation, Detection, ioa, iou

INF = math.inf
# 10^-2, 10^-1.75, ..., 10^0
REFERENCE_FPPI = tuple(10.0 ** e for e in np.linspace(-2.0, 0.0, 9))


class Convention(str, Enum):
    CP_CALTECH = "cp"
    ECP = "ecp"


@dataclass(frozen=True)
class EvalSetting:
    name: str
    visibility_range: tuple[float, float]
    height_range: tuple[float, float]
    convention: Convention

    def admits(self, ann: Annotation) -> bool:
        vlo, vhi = self.visibility_range
        hlo, hhi = self.height_range
        return vlo <= ann.visibility_ratio <= vhi and hlo <= ann.height <= hhi


_TABLE = {
    # name: ((CP/Caltech visibility, height), (ECP visibility, height))
    "Reasonable": (((0.65, INF), (50.0, INF)), ((0.6, INF), (40.0, INF))),
    "Small": (((0.65, INF), (50.0, 75.0)), ((0.6, INF), (30.0, 60.0))),
    "HeavyOcclusion": (((0.2, 0.65), (50.0, INF)), ((0.2, 0.6), (40.0, INF))),
    "All": (((0.2, INF), (20.0, INF)), ((0.2, INF), (20.0, INF))),
}
SETTING_NAMES = tuple(_TABLE)


def get_setting(name: str, convention: Convention | str = Convention.CP_CALTECH) -> EvalSetting:
    convention = Convention(convention)
    if name not in _TABLE:
        raise KeyError(f"unknown setting {name!r}; valid: {', '.join(SETTING_NAMES)}")
    cp, ecp = _TABLE[name]
    vis, height = cp if convention is Convention.CP_CALTECH else ecp
    return EvalSetting(name, vis, height, convention)


def filter_setting(
    annotations: Iterable[Annotation], setting: EvalSetting
) -> tuple[list[Annotation], list[Annotation]]:
    """Split into (evaluated, ignored). Ignore-flagged ones are always ignored."""
    evaluated, ignored = [], []
    for ann in annotations:
        (evaluated if not ann.ignore and setting.admits(ann) else ignored).append(ann)
    return evaluated, ignored


TP, FP, IGNORED = "TP", "FP", "ignored"


@dataclass
class ImageOutcome:
    scores: list[float]
    outcomes: list[str]  # per detection, in the order matched
    matched: list[bool]  # per evaluated annotation


def sort_detections(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)


def match_image(
    detections: Sequence[Detection],
    evaluated: Sequence[Annotation],
    ignored: Sequence[Annotation],
    iou_threshold: float = 0.5,
) -> ImageOutcome:
    """Greedy matching; ``detections`` must be sorted by score, descending.

    Each detection takes the highest-IoU still-unmatched evaluated
    annotation at IoU >= threshold (TP). Otherwise it is ignored if it
    covers an ignored annotation at ioa >= threshold, else it is an FP.
    """
    taken = [False] * len(evaluated)
    outcomes = []
    for det in detections:
        best, best_iou = -1, -1.0
        for g, ann in enumerate(evaluated):
            if taken[g]:
                continue
            ov = iou(det.box, ann.box)
            if ov >= iou_threshold and ov > best_iou:
                best, best_iou = g, ov
        if best >= 0:
            taken[best] = True
            outcomes.append(TP)
        elif any(ioa(det.box, ann.box) >= iou_threshold for ann in ignored):
            outcomes.append(IGNORED)
        else:
            outcomes.append(FP)
    return ImageOutcome([d.score for d in detections], outcomes, taken)


@dataclass
class EvalResult:
    mr2: float
    curve: list[tuple[float, float, float]]  # (threshold, fppi, miss_rate)
    sampled: list[float]  # miss rate at each reference FPPI
    n_images: int
    n_gt: int
    matched: int
    missed: int
    false_positives: int

    def as_dict(self) -> dict:
        return {
            "mr2": self.mr2,
            "n_images": self.n_images,
            "n_gt": self.n_gt,
            "matched": self.matched,
            "missed": self.missed,
            "false_positives": self.false_positives,
            "sampled_miss_rates": self.sampled,
            "curve": [list(p) for p in self.curve],
        }


def log_average(miss_rates: Sequence[float]) -> float:
    if any(m <= 0.0 for m in miss_rates):
        return 0.0
    return float(math.exp(sum(math.log(m) for m in miss_rates) / len(miss_rates)))


def mr2(outcomes: Sequence[ImageOutcome], n_images: int) -> EvalResult:
    """Sweep every distinct score as a threshold and sample the FPPI curve.

    At each reference FPPI the miss rate of the lowest threshold whose
    FPPI does not exceed the reference is used (1.0 if none does).
    """
    if n_images < 1:
        raise ValueError("mr2 needs at least one image")
    n_gt = sum(len(o.matched) for o in outcomes)
    if n_gt == 0:
        raise ValueError("no evaluated annotations: miss rate is undefined")
    scores = np.array([s for o in outcomes for s in o.scores], dtype=np.float64)
    kinds = [k for o in outcomes for k in o.outcomes]
    is_tp = np.array([k == TP for k in kinds], dtype=bool)
    is_fp = np.array([k == FP for k in kinds], dtype=bool)

    order = np.argsort(-scores, kind="stable")
    scores, is_tp, is_fp = scores[order], is_tp[order], is_fp[order]
    tp_cum, fp_cum = np.cumsum(is_tp), np.cumsum(is_fp)
    # last index of each run of equal scores: the threshold admits the whole run
    if scores.size:
        last = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    else:
        last = np.zeros(0, dtype=np.int64)
    thresholds = scores[last]
    fppi = fp_cum[last] / n_images
    miss = 1.0 - tp_cum[last] / n_gt
    curve = [(float(t), float(f), float(m)) for t, f, m in zip(thresholds, fppi, miss)]

    sampled = []
    for ref in REFERENCE_FPPI:
        ok = fppi <= ref
        sampled.append(float(miss[ok].min()) if ok.any() else 1.0)
    matched = int(tp_cum[-1]) if scores.size else 0
    return EvalResult(
        mr2=log_average(sampled),
        curve=curve,
        sampled=sampled,
        n_images=n_images,
        n_gt=n_gt,
        matched=matched,
        missed=n_gt - matched,
        false_positives=int(fp_cum[-1]) if scores.size else 0,
    )


def evaluate(
    detections: Iterable[Detection],
    annotations: Iterable[Annotation],
    setting: EvalSetting,
    image_ids: Sequence[str] | None = None,
    iou_threshold: float = 0.5,
) -> EvalResult:
    """MR^-2 of ``detections`` against ``annotations`` under ``setting``.

    The image set is ``image_ids`` if given, else every image that has an
    annotation or a detection.
    """
    by_det: dict[str, list[Detection]] = {}
    for d in detections:
        by_det.setdefault(d.image_id, []).append(d)
    by_ann: dict[str, list[Annotation]] = {}
    for a in annotations:
        by_ann.setdefault(a.image_id, []).append(a)
    ids = sorted(set(by_det) | set(by_ann)) if image_ids is None else list(image_ids)
    outcomes = []
    for image_id in ids:
        evaluated, ignored = filter_setting(by_ann.get(image_id, []), setting)
        dets = sort_detections(by_det.get(image_id, []))
        outcomes.append(match_image(dets, evaluated, ignored, iou_threshold))
    return mr2(outcomes, len(ids))
