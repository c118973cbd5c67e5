"""
Annotated images, the synthetic repetitive-scene generator and dataset files.

Annotation files follow the FSC-147 layout: one JSON document mapping image
filename to ``{"class", "points", "box_examples"}``. Synthetic scenes also
carry ``hidden_gt``, the complete per-class instance lists that a real dataset
would not have. Only one class per image is visibly annotated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import as_boxes, box_iou, clip_boxes

ANNOTATION_FILE = "annotations.json"
IMAGE_DIR = "images"
SHAPE_KINDS = ("circle", "square", "triangle")


class DatasetError(ValueError):
    """Malformed annotation record or dataset layout."""


class PlacementError(RuntimeError):
    """Scene generator could not place all instances."""


@dataclass
class HiddenClass:
    class_id: str
    boxes: np.ndarray  # (n, 4)
    dots: np.ndarray  # (n, 2)
    kind: str = ""

    @property
    def count(self) -> int:
        return len(self.dots)


@dataclass
class AnnotatedImage:
    name: str
    image: np.ndarray  # (H, W, 3) uint8
    annotated_class: str
    exemplar_boxes: np.ndarray  # (3, 4)
    dots: np.ndarray  # (n, 2) x, y
    hidden_gt: Optional[list[HiddenClass]] = None

    def __post_init__(self):
        self.exemplar_boxes = as_boxes(self.exemplar_boxes)
        self.dots = np.asarray(self.dots, dtype=np.float64).reshape(-1, 2)
        if len(self.exemplar_boxes) != 3:
            raise DatasetError(
                f"{self.name}: exemplar_boxes needs 3 boxes, got {len(self.exemplar_boxes)}"
            )

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def gt_count(self) -> int:
        return len(self.dots)

    def annotation_boxes(self) -> np.ndarray:
        """One box of the mean exemplar size around every annotated dot."""
        return expand_dots_to_boxes(self.dots, self.exemplar_boxes, (self.height, self.width))


def expand_dots_to_boxes(dots, exemplar_boxes, image_size=None) -> np.ndarray:
    """
    Place a box of the mean exemplar width/height centred on every dot.

    Args:
        dots: (N, 2) (x, y)
        exemplar_boxes: (M, 4), M >= 1
        image_size: optional (H, W); boxes are clipped to it

    Returns:
        (N, 4)
    """
    ex = as_boxes(exemplar_boxes)
    if len(ex) == 0:
        raise ValueError("need at least one exemplar box")
    dots = np.asarray(dots, dtype=np.float64).reshape(-1, 2)
    half_w = np.mean(ex[:, 2] - ex[:, 0]) / 2
    half_h = np.mean(ex[:, 3] - ex[:, 1]) / 2
    boxes = np.stack(
        [dots[:, 0] - half_w, dots[:, 1] - half_h, dots[:, 0] + half_w, dots[:, 1] + half_h],
        axis=1,
    )
    if image_size is not None:
        boxes = clip_boxes(boxes, *image_size) if len(boxes) else boxes
    return boxes


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class ClassSpec:
    kind: str = "circle"
    color: tuple = (220, 60, 60)
    size_range: tuple = (8.0, 12.0)
    count_range: tuple = (5, 30)

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        lo, hi = self.count_range
        if lo < 1 or hi < lo:
            raise ValueError("count_range must satisfy 1 <= lo <= hi")
        if self.size_range[0] <= 0 or self.size_range[1] < self.size_range[0]:
            raise ValueError("bad size_range")


@dataclass
class SceneSpec:
    height: int = 128
    width: int = 128
    classes: list = field(default_factory=lambda: [ClassSpec()])
    annotated: int = 0
    max_overlap: float = 0.0
    noise: float = 6.0
    color_jitter: float = 12.0
    background: tuple = (90, 110, 100)
    max_retries: int = 500

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]
        if not 1 <= len(self.classes) <= 3:
            raise ValueError("a scene holds 1 to 3 classes")
        if not 0 <= self.annotated < len(self.classes):
            raise ValueError("annotated class index out of range")
        if self.classes[self.annotated].count_range[0] < 3:
            raise ValueError("the annotated class needs at least 3 instances for exemplars")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["classes"] = [ClassSpec(**{**c, "color": tuple(c.get("color", (220, 60, 60)))})
                        for c in d.get("classes", [{}])]
        for key in ("background",):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _shape_mask(kind: str, box: np.ndarray, h: int, w: int):
    x1, y1, x2, y2 = box
    c0, c1 = max(int(np.floor(x1)), 0), min(int(np.ceil(x2)), w)
    r0, r1 = max(int(np.floor(y1)), 0), min(int(np.ceil(y2)), h)
    px, py = np.meshgrid(np.arange(c0, c1) + 0.5, np.arange(r0, r1) + 0.5)
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    if kind == "circle":
        r = (x2 - x1) / 2
        m = (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    elif kind == "square":
        m = (px >= x1) & (px <= x2) & (py >= y1) & (py <= y2)
    else:  # upward triangle inscribed in the box
        rel = (py - y1) / (y2 - y1)
        m = (py >= y1) & (py <= y2) & (np.abs(px - cx) <= rel * (x2 - x1) / 2)
    return (slice(r0, r1), slice(c0, c1)), m


def generate_scene(spec: SceneSpec, rng: np.random.Generator, name: str = "scene") -> AnnotatedImage:
    """
    Draw one scene: non-overlapping filled shapes on a noisy background.

    Every class in ``spec`` gets a count drawn uniformly from its range. The
    annotated class contributes dots and 3 random exemplar boxes; all classes
    are recorded in ``hidden_gt``.
    """
    h, w = spec.height, spec.width
    placed = np.zeros((0, 4))
    hidden = []
    for ci, cs in enumerate(spec.classes):
        n = int(rng.integers(cs.count_range[0], cs.count_range[1] + 1))
        boxes = []
        for _ in range(n):
            for _attempt in range(spec.max_retries):
                s = rng.uniform(*cs.size_range)
                cx = rng.uniform(s / 2, w - s / 2)
                cy = rng.uniform(s / 2, h - s / 2)
                box = np.array([cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2])
                if len(placed) == 0 or box_iou(box, placed).max() <= spec.max_overlap:
                    break
            else:
                raise PlacementError(
                    f"{name}: could not place instance {len(boxes) + 1}/{n} of class {ci}"
                )
            boxes.append(box)
            placed = np.vstack([placed, box])
        boxes = np.asarray(boxes).reshape(-1, 4)
        dots = np.stack([(boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2], 1)
        hidden.append(HiddenClass(f"{cs.kind}_{ci}", boxes, dots, cs.kind))

    img = np.empty((h, w, 3))
    img[:] = np.asarray(spec.background, dtype=np.float64)
    img += rng.normal(0, spec.noise, size=img.shape)
    for cs, hc in zip(spec.classes, hidden):
        for box in hc.boxes:
            color = np.asarray(cs.color, dtype=np.float64) + rng.normal(0, spec.color_jitter, 3)
            sl, m = _shape_mask(cs.kind, box, h, w)
            patch = img[sl]
            patch[m] = color
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)

    ann = hidden[spec.annotated]
    pick = rng.choice(ann.count, 3, replace=False)
    return AnnotatedImage(
        name=name,
        image=image,
        annotated_class=ann.class_id,
        exemplar_boxes=ann.boxes[np.sort(pick)],
        dots=ann.dots.copy(),
        hidden_gt=hidden,
    )


def generate_dataset(spec: SceneSpec, n: int, seed: int, prefix: str = "scene") -> list[AnnotatedImage]:
    """``n`` scenes; scene ``i`` uses its own generator seeded by ``(seed, i)``."""
    return [
        generate_scene(spec, np.random.default_rng([seed, i]), name=f"{prefix}_{i:05d}.png")
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _record(img: AnnotatedImage) -> dict:
    rec = {
        "class": img.annotated_class,
        "H": img.height,
        "W": img.width,
        "points": img.dots.tolist(),
        "box_examples": img.exemplar_boxes.tolist(),
    }
    if img.hidden_gt is not None:
        rec["hidden_gt"] = [
            {"class": hc.class_id, "kind": hc.kind, "boxes": hc.boxes.tolist(), "points": hc.dots.tolist()}
            for hc in img.hidden_gt
        ]
    return rec


def save_dataset(images: Sequence[AnnotatedImage], path) -> Path:
    """Write ``images/<name>`` PNGs and ``annotations.json`` under ``path``."""
    root = Path(path)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    doc = {}
    for img in images:
        Image.fromarray(img.image).save(root / IMAGE_DIR / img.name, format="PNG")
        doc[img.name] = _record(img)
    (root / ANNOTATION_FILE).write_text(json.dumps(doc, indent=1))
    return root


def _boxes_field(name: str, rec: dict) -> np.ndarray:
    if "box_examples" in rec:
        raw = rec["box_examples"]
        try:
            b = np.asarray(raw, dtype=np.float64)
        except (TypeError, ValueError):
            raise DatasetError(f"{name}: box_examples is not a numeric list") from None
        if b.ndim != 2 or b.shape[1] != 4:
            raise DatasetError(f"{name}: box_examples must be a list of [x1, y1, x2, y2]")
    elif "box_examples_coordinates" in rec:
        # FSC-147 stores each exemplar as four corner points
        try:
            c = np.asarray(rec["box_examples_coordinates"], dtype=np.float64)
        except (TypeError, ValueError):
            raise DatasetError(f"{name}: box_examples_coordinates is malformed") from None
        if c.ndim != 3 or c.shape[2] != 2:
            raise DatasetError(f"{name}: box_examples_coordinates must be lists of corner points")
        b = np.concatenate([c.min(axis=1), c.max(axis=1)], axis=1)
    else:
        raise DatasetError(f"{name}: missing field 'exemplar_boxes' (box_examples)")
    if len(b) < 3:
        raise DatasetError(f"{name}: box_examples needs 3 boxes, got {len(b)}")
    if np.any(b[:, 2] <= b[:, 0]) or np.any(b[:, 3] <= b[:, 1]):
        raise DatasetError(f"{name}: box_examples contains a degenerate box")
    return b[:3]


def parse_record(name: str, rec: dict, image: np.ndarray) -> AnnotatedImage:
    if not isinstance(rec, dict):
        raise DatasetError(f"{name}: record must be an object")
    if "points" not in rec:
        raise DatasetError(f"{name}: missing field 'points'")
    try:
        dots = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 2)
    except (TypeError, ValueError):
        raise DatasetError(f"{name}: points must be a list of [x, y]") from None
    boxes = _boxes_field(name, rec)
    hidden = None
    if "hidden_gt" in rec:
        try:
            hidden = [
                HiddenClass(
                    str(hc["class"]),
                    np.asarray(hc["boxes"], dtype=np.float64).reshape(-1, 4),
                    np.asarray(hc["points"], dtype=np.float64).reshape(-1, 2),
                    hc.get("kind", ""),
                )
                for hc in rec["hidden_gt"]
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"{name}: malformed field 'hidden_gt' ({e})") from None
    return AnnotatedImage(name, image, str(rec.get("class", "unknown")), boxes, dots, hidden)


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, FileNotFoundError) as e:
        raise DatasetError(f"cannot read image {path}: {e}") from None


def load_dataset(path, image_dir=None) -> list[AnnotatedImage]:
    """
    Load a dataset directory (or an annotation JSON file directly).

    Images are looked up in ``image_dir``, else ``<root>/images``, else ``<root>``.
    """
    path = Path(path)
    ann = path / ANNOTATION_FILE if path.is_dir() else path
    root = ann.parent
    try:
        doc = json.loads(ann.read_text())
    except FileNotFoundError:
        raise DatasetError(f"no annotation file at {ann}") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"{ann}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise DatasetError(f"{ann}: top level must map filenames to records")
    dirs = [Path(image_dir)] if image_dir else [root / IMAGE_DIR, root]
    out = []
    for name in sorted(doc):
        img_path = next((d / name for d in dirs if (d / name).exists()), dirs[0] / name)
        out.append(parse_record(name, doc[name], _read_image(img_path)))
    return out
