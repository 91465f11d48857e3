"""Synthetic shape scenes and the two incremental data protocols.

A class is a (shape, colour) pair: class ``k`` draws shape ``k % 4`` in
colour ``k // 4``. Scenes are stored as small records and rasterized on
demand; the pixels are a pure function of the record.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .diffcore import spawn_rng
from .geom import pairwise_iou, xyxy_to_cxcywh
from .matchloss import Target

SHAPES = ("circle", "square", "triangle", "cross")
PALETTE = ((0.92, 0.18, 0.15), (0.15, 0.78, 0.22), (0.22, 0.38, 0.95))
MANIFEST_FORMAT = "dyqdetr-scenes"
MANIFEST_VERSION = 1
RENDERER_VERSION = 1


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    box: tuple[float, float, float, float]   # pixels, x0 y0 x1 y1
    shade: float = 1.0


@dataclass(frozen=True)
class Scene:
    image_id: int
    canvas: int
    objects: tuple[SceneObject, ...]
    seed: int

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)


def class_name(k: int) -> str:
    return f"{('red', 'green', 'blue')[k // len(SHAPES)]}-{SHAPES[k % len(SHAPES)]}"


def max_classes() -> int:
    return len(SHAPES) * len(PALETTE)


def generate_corpus(n_images: int, n_classes: int, seed: int, canvas: int = 64,
                    max_objects: int = 5, size_range: tuple[int, int] = (12, 28),
                    max_overlap: float = 0.15) -> list[Scene]:
    """Random scenes with 1..``max_objects`` objects each, classes drawn uniformly.

    When ``n_images`` is large enough to expect it (``>= 25 * n_classes``),
    corpora missing any class are redrawn until all classes occur.
    """
    if n_classes < 2 or n_classes > max_classes():
        raise ValueError(f"n_classes must be in [2, {max_classes()}], got {n_classes}")
    if n_images < 1 or max_objects < 1:
        raise ValueError("n_images and max_objects must be positive")
    rng = spawn_rng(seed, "corpus")
    for _ in range(100):
        scenes = [_random_scene(rng, i, canvas, n_classes, max_objects, size_range, max_overlap)
                  for i in range(n_images)]
        seen = {o.class_id for s in scenes for o in s.objects}
        if len(seen) == n_classes or n_images < 25 * n_classes:
            return scenes
    raise RuntimeError("could not draw a corpus covering every class")


def _random_scene(rng, image_id, canvas, n_classes, max_objects, size_range, max_overlap) -> Scene:
    n = int(rng.integers(1, max_objects + 1))
    placed: list[SceneObject] = []
    lo, hi = size_range
    for _ in range(n):
        cls = int(rng.integers(n_classes))
        for _attempt in range(30):
            w = float(rng.uniform(lo, hi))
            h = float(np.clip(w * rng.uniform(0.8, 1.25), lo, hi))
            x0 = float(rng.uniform(0, canvas - w))
            y0 = float(rng.uniform(0, canvas - h))
            box = (round(x0, 3), round(y0, 3), round(x0 + w, 3), round(y0 + h, 3))
            if not placed or pairwise_iou([box], [o.box for o in placed]).max() <= max_overlap:
                placed.append(SceneObject(cls, box, round(float(rng.uniform(0.8, 1.0)), 3)))
                break
    return Scene(image_id, canvas, tuple(placed), int(rng.integers(2 ** 31)))


def _shape_mask(kind: str, box, canvas: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    c = np.arange(canvas) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    inside = (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
    u = (xx - x0) / (x1 - x0)                # 0..1 across the box
    v = (yy - y0) / (y1 - y0)
    if kind == "square":
        return inside
    if kind == "circle":
        return ((u - 0.5) ** 2 + (v - 0.5) ** 2) <= 0.25
    if kind == "triangle":
        return inside & (np.abs(u - 0.5) <= 0.5 * v)
    if kind == "cross":
        return inside & ((np.abs(u - 0.5) <= 1 / 6) | (np.abs(v - 0.5) <= 1 / 6))
    raise ValueError(kind)


def rasterize(scene: Scene) -> np.ndarray:
    """(canvas, canvas, 3) float image in [0, 1]; later objects paint over earlier ones."""
    rng = np.random.Generator(np.random.PCG64(scene.seed))
    img = 0.12 + 0.03 * rng.standard_normal((scene.canvas, scene.canvas, 3))
    for obj in scene.objects:
        m = _shape_mask(SHAPES[obj.class_id % len(SHAPES)], obj.box, scene.canvas)
        img[m] = np.asarray(PALETTE[obj.class_id // len(SHAPES)]) * obj.shade
    return np.clip(img, 0.0, 1.0)


class ImageCache:
    """Memoized rasterization keyed by image id."""

    def __init__(self, scenes: Iterable[Scene]):
        self.scenes = {s.image_id: s for s in scenes}
        self._pixels: dict[int, np.ndarray] = {}

    def __getitem__(self, image_id: int) -> np.ndarray:
        img = self._pixels.get(image_id)
        if img is None:
            img = self._pixels[image_id] = rasterize(self.scenes[image_id])
        return img

    def batch(self, image_ids: Sequence[int]) -> np.ndarray:
        return np.stack([self[i] for i in image_ids])


# ---------------------------------------------------------------- protocols

@dataclass
class PhaseDataset:
    phase: int
    class_set: tuple[int, ...]
    image_ids: list[int]
    annotations: dict[int, list[tuple[int, tuple[float, float, float, float]]]] = field(repr=False)

    def __len__(self):
        return len(self.image_ids)

    def target(self, image_id: int, canvas: int) -> Target:
        """Annotations of one image as normalized cxcywh boxes."""
        anns = self.annotations.get(image_id, [])
        if not anns:
            return Target(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
        labels = np.array([a[0] for a in anns], dtype=np.int64)
        boxes = xyxy_to_cxcywh(np.array([a[1] for a in anns], dtype=np.float64) / canvas)
        return Target(labels, boxes)


def restrict(scene: Scene, class_set: Iterable[int]):
    keep = set(class_set)
    return [(o.class_id, o.box) for o in scene.objects if o.class_id in keep]


def class_splits(split_sizes: Sequence[int], n_classes: int, seed: int | None = None) -> list[tuple[int, ...]]:
    """Cut classes ``0..n_classes-1`` into consecutive sets; shuffled first when ``seed`` is given."""
    if sum(split_sizes) != n_classes or any(s < 1 for s in split_sizes):
        raise ValueError(f"split sizes {list(split_sizes)} do not partition {n_classes} classes")
    order = np.arange(n_classes)
    if seed is not None:
        order = spawn_rng(seed, "class-order").permutation(n_classes)
    out, start = [], 0
    for s in split_sizes:
        out.append(tuple(sorted(int(c) for c in order[start:start + s])))
        start += s
    return out


def _check_covers(corpus: Sequence[Scene], n_classes: int) -> None:
    extra = sorted({o.class_id for s in corpus for o in s.objects if o.class_id >= n_classes})
    if extra:
        raise ValueError(f"split covers {n_classes} classes but the corpus also has classes {extra}")


def split_revised(corpus: Sequence[Scene], split_sizes: Sequence[int], seed: int,
                  drop_empty: bool = True) -> tuple[list[tuple[int, ...]], list[PhaseDataset]]:
    """Disjoint image partition: phase t sees a ``c_t / c`` share, annotated for ``C_t`` only."""
    n_classes = int(sum(split_sizes))
    _check_covers(corpus, n_classes)
    sets = class_splits(split_sizes, n_classes, seed)
    ids = np.array([s.image_id for s in corpus])
    perm = spawn_rng(seed, "image-order").permutation(len(ids))
    by_id = {s.image_id: s for s in corpus}
    cuts = np.round(np.cumsum([0] + list(split_sizes)) / n_classes * len(ids)).astype(int)
    phases = []
    for t, cs in enumerate(sets, start=1):
        chosen = sorted(int(i) for i in ids[perm[cuts[t - 1]:cuts[t]]])
        ann = {i: restrict(by_id[i], cs) for i in chosen}
        if drop_empty:
            chosen = [i for i in chosen if ann[i]]
            ann = {i: ann[i] for i in chosen}
        phases.append(PhaseDataset(t, cs, chosen, ann))
    return sets, phases


def split_traditional(corpus: Sequence[Scene], split_sizes: Sequence[int]) -> tuple[list[tuple[int, ...]], list[PhaseDataset]]:
    """Phase t holds every image with at least one ``C_t`` object; class order is not shuffled."""
    _check_covers(corpus, int(sum(split_sizes)))
    sets = class_splits(split_sizes, int(sum(split_sizes)))
    phases = []
    for t, cs in enumerate(sets, start=1):
        ann = {s.image_id: restrict(s, cs) for s in corpus}
        ann = {i: a for i, a in ann.items() if a}
        phases.append(PhaseDataset(t, cs, sorted(ann), ann))
    return sets, phases


def full_annotations(corpus: Sequence[Scene], class_set: Iterable[int] | None = None, phase: int = 0) -> PhaseDataset:
    """Every image with every object (or those in ``class_set``): test sets and joint training."""
    cs = tuple(sorted(class_set)) if class_set is not None else tuple(sorted({o.class_id for s in corpus for o in s.objects}))
    ann = {s.image_id: restrict(s, cs) for s in corpus}
    return PhaseDataset(phase, cs, [s.image_id for s in corpus], ann)


# ---------------------------------------------------------------- manifests

def write_manifest(path, scenes: Sequence[Scene], **header) -> None:
    """JSON lines: a header record, then one record per scene."""
    head = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "renderer": RENDERER_VERSION, **header}
    with open(path, "w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for s in scenes:
            rec = {"id": s.image_id, "canvas": s.canvas, "seed": s.seed,
                   "objects": [{"class": o.class_id, "box": list(o.box), "shade": o.shade} for o in s.objects]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> tuple[dict, list[Scene]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    head = json.loads(lines[0])
    if head.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    if head.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {head.get('version')}")
    scenes = []
    for line in lines[1:]:
        r = json.loads(line)
        objs = tuple(SceneObject(o["class"], tuple(o["box"]), o["shade"]) for o in r["objects"])
        scenes.append(Scene(r["id"], r["canvas"], objs, r["seed"]))
    return head, scenes


# ---------------------------------------------------------------- augmentation

def augment(images: np.ndarray, targets: Sequence[Target], rng: np.random.Generator) -> tuple[np.ndarray, list[Target]]:
    """Random horizontal flip plus a translation that keeps every labelled box on the canvas.

    Boxes are normalized cxcywh. Every shape class is left-right symmetric,
    so flipping never changes a label.
    """
    B, H, W, _ = images.shape
    out_imgs = np.empty_like(images)
    out_tgts = []
    for b in range(B):
        img = images[b]
        boxes = np.asarray(targets[b].boxes, dtype=np.float64).reshape(-1, 4).copy()
        if rng.random() < 0.5:
            img = img[:, ::-1]
            boxes[:, 0] = 1.0 - boxes[:, 0]
        if len(boxes):
            x0 = (boxes[:, 0] - boxes[:, 2] / 2).min() * W
            x1 = (boxes[:, 0] + boxes[:, 2] / 2).max() * W
            y0 = (boxes[:, 1] - boxes[:, 3] / 2).min() * H
            y1 = (boxes[:, 1] + boxes[:, 3] / 2).max() * H
            dx = int(rng.integers(-int(np.floor(x0)), int(np.floor(W - x1)) + 1))
            dy = int(rng.integers(-int(np.floor(y0)), int(np.floor(H - y1)) + 1))
        else:
            dx = int(rng.integers(-W // 4, W // 4 + 1))
            dy = int(rng.integers(-H // 4, H // 4 + 1))
        img = np.roll(img, (dy, dx), axis=(0, 1))
        boxes[:, 0] += dx / W
        boxes[:, 1] += dy / H
        out_imgs[b] = img
        out_tgts.append(Target(targets[b].labels, boxes))
    return out_imgs, out_tgts
