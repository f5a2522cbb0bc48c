"""JSON annotation and detection files.

Annotations: ``[{"image_id", "box": [x1, y1, x2, y2], "vis_box": [...], "ignore"}]``
Detections:  ``[{"image_id", "box": [...], "p_detect", "p_suppress"?, "score"}]``
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

from focaldet.boxes import Annotation, BBox, Detection, fused_score

SCORE_CHECK_TOL = 1e-9

PathLike = Union[str, Path]


class RecordError(ValueError):
    pass


def _reject_constant(token: str):
    raise RecordError(f"non-finite number {token} is not allowed")


def _parse(text: str) -> Any:
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise RecordError(f"malformed JSON: {exc}") from None


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise RecordError(f"{path}: expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise RecordError(f"{path}: non-finite value {value!r}")
    return value


def _box(value: Any, path: str) -> BBox:
    if not isinstance(value, list) or len(value) != 4:
        raise RecordError(f"{path}: expected [x1, y1, x2, y2], got {value!r}")
    coords = [_number(v, f"{path}[{i}]") for i, v in enumerate(value)]
    try:
        return BBox(*coords)
    except ValueError as exc:
        raise RecordError(f"{path}: {exc}") from None


def _fields(rec: Any, path: str, required: set[str], optional: set[str] = frozenset()) -> None:
    if not isinstance(rec, dict):
        raise RecordError(f"{path}: expected an object, got {type(rec).__name__}")
    unknown = sorted(set(rec) - required - optional)
    if unknown:
        raise RecordError(f"{path}.{unknown[0]}: unknown field")
    missing = sorted(required - set(rec))
    if missing:
        raise RecordError(f"{path}.{missing[0]}: missing field")
    if not isinstance(rec["image_id"], str):
        raise RecordError(f"{path}.image_id: expected a string")


def _top_list(data: Any) -> list:
    if not isinstance(data, list):
        raise RecordError("$: expected a JSON array of records")
    return data


def annotations_from_json(text: str) -> list[Annotation]:
    out = []
    for i, rec in enumerate(_top_list(_parse(text))):
        path = f"$[{i}]"
        _fields(rec, path, {"image_id", "box", "vis_box", "ignore"})
        if not isinstance(rec["ignore"], bool):
            raise RecordError(f"{path}.ignore: expected true/false")
        box = _box(rec["box"], f"{path}.box")
        vis = _box(rec["vis_box"], f"{path}.vis_box")
        try:
            out.append(Annotation(rec["image_id"], box, vis, rec["ignore"]))
        except ValueError as exc:
            raise RecordError(f"{path}: {exc}") from None
    return out


def detections_from_json(text: str) -> list[Detection]:
    out = []
    for i, rec in enumerate(_top_list(_parse(text))):
        path = f"$[{i}]"
        _fields(rec, path, {"image_id", "box", "p_detect", "score"}, {"p_suppress"})
        box = _box(rec["box"], f"{path}.box")
        p_det = _number(rec["p_detect"], f"{path}.p_detect")
        p_sup = rec.get("p_suppress")
        if p_sup is not None:
            p_sup = _number(p_sup, f"{path}.p_suppress")
        score = _number(rec["score"], f"{path}.score")
        for name, v in (("p_detect", p_det), ("p_suppress", p_sup), ("score", score)):
            if v is not None and not 0.0 <= v <= 1.0:
                raise RecordError(f"{path}.{name}: {v!r} outside [0, 1]")
        expected = fused_score(p_det, p_sup)
        if abs(score - expected) > SCORE_CHECK_TOL:
            raise RecordError(
                f"{path}.score: {score!r} != p_detect * (1 - p_suppress) = {expected!r}"
            )
        out.append(Detection(rec["image_id"], box, p_det, p_sup))
    return out


def _dump_records(records: Iterable[dict]) -> str:
    lines = [json.dumps(r, allow_nan=False) for r in records]
    if not lines:
        return "[]\n"
    return "[\n" + ",\n".join(lines) + "\n]\n"


def annotations_to_json(annotations: Sequence[Annotation]) -> str:
    return _dump_records(
        {
            "image_id": a.image_id,
            "box": a.box.as_list(),
            "vis_box": a.visible_box.as_list(),
            "ignore": a.ignore,
        }
        for a in annotations
    )


def detections_to_json(detections: Sequence[Detection]) -> str:
    def rec(d: Detection) -> dict:
        r: dict[str, Any] = {"image_id": d.image_id, "box": d.box.as_list(), "p_detect": d.p_detect}
        if d.p_suppress is not None:
            r["p_suppress"] = d.p_suppress
        r["score"] = d.score
        return r

    return _dump_records(rec(d) for d in detections)


def read_annotations(path: PathLike) -> list[Annotation]:
    try:
        return annotations_from_json(Path(path).read_text())
    except RecordError as exc:
        raise RecordError(f"{path}: {exc}") from None


def write_annotations(path: PathLike, annotations: Sequence[Annotation]) -> None:
    Path(path).write_text(annotations_to_json(annotations))


def read_detections(path: PathLike) -> list[Detection]:
    try:
        return detections_from_json(Path(path).read_text())
    except RecordError as exc:
        raise RecordError(f"{path}: {exc}") from None


def write_detections(path: PathLike, detections: Sequence[Detection]) -> None:
    Path(path).write_text(detections_to_json(detections))


def group_by_image(items: Iterable) -> dict[str, list]:
    out: dict[str, list] = {}
    for item in items:
        out.setdefault(item.image_id, []).append(item)
    return out
