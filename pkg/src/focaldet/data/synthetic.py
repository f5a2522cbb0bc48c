"""Deterministic synthetic street scenes with pedestrians and occluders.

Pedestrians are bright, vertically shaded rectangles at a fixed
width/height ratio; occluders are dark striped rectangles placed over
part of a pedestrian (a "car" over the legs or a "pole/wall" from one
side). Everything is a pure function of ``(cfg.seed, index)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from focaldet.boxes import Annotation, BBox
from focaldet.data import records, tensorfile

IGNORE_BELOW_VISIBILITY = 0.2


@dataclass(frozen=True)
class SceneConfig:
    height: int = 256
    width: int = 256
    min_pedestrians: int = 1
    max_pedestrians: int = 6
    min_height: float = 24.0
    max_height: float = 120.0
    aspect_ratio: float = 0.41
    occluder_prob: float = 0.3
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.min_height <= self.max_height <= self.height:
            raise ValueError("pedestrian heights must fit the image")
        if self.aspect_ratio * self.max_height > self.width:
            raise ValueError("pedestrian widths must fit the image")
        if not 1 <= self.min_pedestrians <= self.max_pedestrians:
            raise ValueError("need 1 <= min_pedestrians <= max_pedestrians")
        if not 0.0 <= self.occluder_prob <= 1.0:
            raise ValueError("occluder_prob must lie in [0, 1]")


@dataclass(frozen=True)
class Layout:
    pedestrians: list[tuple[BBox, float]]  # box, intensity; in drawing order
    occluders: list[tuple[BBox, float]]


def image_id_for(cfg: SceneConfig, index: int) -> str:
    return f"s{cfg.seed}_{index:06d}"


def _rng(cfg: SceneConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, index])


def sample_layout(cfg: SceneConfig, rng: np.random.Generator) -> Layout:
    n = int(rng.integers(cfg.min_pedestrians, cfg.max_pedestrians + 1))
    peds = []
    for _ in range(n):
        h = rng.uniform(cfg.min_height, cfg.max_height)
        w = cfg.aspect_ratio * h
        x1 = rng.uniform(0.0, cfg.width - w)
        y1 = rng.uniform(0.0, cfg.height - h)
        peds.append((BBox(x1, y1, x1 + w, y1 + h), rng.uniform(0.65, 0.95)))
    # farther (higher up) pedestrians are drawn first
    peds.sort(key=lambda p: p[0].y2)

    occluders = []
    for box, _ in peds:
        if rng.uniform() >= cfg.occluder_prob:
            continue
        h, w = box.height(), box.width()
        frac = rng.uniform(0.2, 0.9)
        if rng.uniform() < 0.6:
            # low wide occluder over the legs
            ox1 = box.x1 - rng.uniform(0.0, 1.5) * w
            ox2 = box.x2 + rng.uniform(0.0, 1.5) * w
            oy1 = box.y2 - frac * h
            oy2 = box.y2 + rng.uniform(0.0, 0.2) * h
        else:
            # tall occluder from the left or right side
            oy1 = box.y1 - rng.uniform(0.0, 0.3) * h
            oy2 = box.y2 + rng.uniform(0.0, 0.3) * h
            if rng.uniform() < 0.5:
                ox1, ox2 = box.x1 - rng.uniform(0.0, 0.5) * w, box.x1 + frac * w
            else:
                ox1, ox2 = box.x2 - frac * w, box.x2 + rng.uniform(0.0, 0.5) * w
        occ = BBox(ox1, oy1, ox2, oy2).clip(cfg.width, cfg.height)
        if occ is not None:
            occluders.append((occ, rng.uniform(0.05, 0.25)))
    return Layout(peds, occluders)


def _overlaps(a: BBox, b: BBox) -> bool:
    return min(a.x2, b.x2) > max(a.x1, b.x1) and min(a.y2, b.y2) > max(a.y1, b.y1)


def largest_visible_rect(box: BBox, blockers: Sequence[BBox]) -> BBox | None:
    """Largest axis-aligned sub-rectangle of ``box`` free of every blocker.

    Optimal rectangles have their edges on box or blocker edges, so the
    search enumerates those coordinates. Ties keep the first candidate in
    (x1, x2, y1, y2) order.
    """
    blockers = [b for b in blockers if _overlaps(box, b)]
    if not blockers:
        return box
    xs = sorted({box.x1, box.x2} | {c for b in blockers for c in (b.x1, b.x2) if box.x1 < c < box.x2})
    ys = sorted({box.y1, box.y2} | {c for b in blockers for c in (b.y1, b.y2) if box.y1 < c < box.y2})
    xi, xj = np.triu_indices(len(xs), 1)
    yi, yj = np.triu_indices(len(ys), 1)
    xa, xb = np.asarray(xs)[xi], np.asarray(xs)[xj]
    ya, yb = np.asarray(ys)[yi], np.asarray(ys)[yj]
    free = np.ones((len(xa), len(ya)), dtype=bool)
    for b in blockers:
        ox = np.minimum(xb, b.x2) > np.maximum(xa, b.x1)
        oy = np.minimum(yb, b.y2) > np.maximum(ya, b.y1)
        free &= ~(ox[:, None] & oy[None, :])
    area = np.where(free, (xb - xa)[:, None] * (yb - ya)[None, :], 0.0)
    k = int(np.argmax(area))
    if area.flat[k] <= 0.0:
        return None
    a, c = np.unravel_index(k, area.shape)
    return BBox(float(xa[a]), float(ya[c]), float(xb[a]), float(yb[c]))


def layout_annotations(layout: Layout, image_id: str) -> list[Annotation]:
    occ_boxes = [o for o, _ in layout.occluders]
    peds = [p for p, _ in layout.pedestrians]
    out = []
    for k, box in enumerate(peds):
        # occluded by every occluder and by pedestrians drawn on top of it
        vis = largest_visible_rect(box, occ_boxes + peds[k + 1 :])
        if vis is None:
            continue
        ann = Annotation(image_id, box, vis, ignore=False)
        if ann.visibility_ratio < IGNORE_BELOW_VISIBILITY:
            ann = Annotation(image_id, box, vis, ignore=True)
        out.append(ann)
    return out


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [k, k+1) covered by [lo, hi)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1.0, hi) - np.maximum(edges, lo), 0.0, 1.0)


def render(layout: Layout, cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    hh, ww = cfg.height, cfg.width
    yy, xx = np.mgrid[0:hh, 0:ww].astype(np.float64)
    img = np.full((hh, ww), 0.35)
    for _ in range(3):
        fx, fy = rng.uniform(-0.08, 0.08, size=2)
        img += 0.05 * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    for box, value in layout.pedestrians:
        cov = np.outer(_coverage(box.y1, box.y2, hh), _coverage(box.x1, box.x2, ww))
        rel = np.clip((yy + 0.5 - box.y1) / box.height(), 0.0, 1.0)
        # head brighter, vertical shading towards the feet
        shade = value * (1.0 - 0.3 * rel) + 0.08 * (rel < 1.0 / 7.0)
        img = img * (1.0 - cov) + shade * cov
    for box, value in layout.occluders:
        cov = np.outer(_coverage(box.y1, box.y2, hh), _coverage(box.x1, box.x2, ww))
        stripes = value + 0.06 * (np.floor((yy - box.y1) / 3.0) % 2)
        img = img * (1.0 - cov) + stripes * cov
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_scene(cfg: SceneConfig, index: int) -> tuple[np.ndarray, list[Annotation]]:
    rng = _rng(cfg, index)
    layout = sample_layout(cfg, rng)
    annotations = layout_annotations(layout, image_id_for(cfg, index))
    return render(layout, cfg, rng), annotations


def scene_annotations(cfg: SceneConfig, index: int) -> list[Annotation]:
    """Annotations of a scene without rendering its pixels."""
    layout = sample_layout(cfg, _rng(cfg, index))
    return layout_annotations(layout, image_id_for(cfg, index))


ANNOTATIONS_FILE = "annotations.json"
SCENE_SUFFIX = ".f2dt"


def write_dataset(out_dir: Union[str, Path], cfg: SceneConfig, count: int, start: int = 0) -> list[Annotation]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    annotations: list[Annotation] = []
    for index in range(start, start + count):
        image, anns = generate_scene(cfg, index)
        tensorfile.write(out / f"{image_id_for(cfg, index)}{SCENE_SUFFIX}", {"image": image})
        annotations.extend(anns)
    records.write_annotations(out / ANNOTATIONS_FILE, annotations)
    return annotations


@dataclass
class Dataset:
    image_ids: list[str]
    images: dict[str, np.ndarray]
    annotations: dict[str, list[Annotation]]

    def __len__(self) -> int:
        return len(self.image_ids)


def load_dataset(data_dir: Union[str, Path]) -> Dataset:
    """Load every scene file in ``data_dir`` plus its annotations.json.

    Images are ordered by image id; annotations naming an image that has
    no scene file are an error.
    """
    root = Path(data_dir)
    anns = records.read_annotations(root / ANNOTATIONS_FILE)
    files = sorted(root.glob(f"*{SCENE_SUFFIX}"))
    images = {f.name[: -len(SCENE_SUFFIX)]: tensorfile.read(f)["image"] for f in files}
    grouped = records.group_by_image(anns)
    missing = sorted(set(grouped) - set(images))
    if missing:
        raise ValueError(f"{root}: annotations reference missing scenes, e.g. {missing[0]!r}")
    ids = sorted(images)
    return Dataset(ids, images, {i: grouped.get(i, []) for i in ids})
