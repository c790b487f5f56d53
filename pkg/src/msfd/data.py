"""Synthetic multi-scale "train parts" scenes with box annotations.

Stands in for proprietary inspection imagery: each image holds a few textured
rectangular parts on a cluttered, unevenly lit background. A part is one of
four types; its fault variant has one sub-element removed or displaced, so
fault and normal differ geometrically. Everything is a pure function of
(spec, count).
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

NUM_PART_TYPES = 4
NUM_CLASSES = 2 * NUM_PART_TYPES  # (part type, fault flag) pairs

PART_COLORS = (
    (0.80, 0.30, 0.25),
    (0.25, 0.60, 0.80),
    (0.80, 0.70, 0.20),
    (0.50, 0.30, 0.70),
)

# Sub-element layouts per part type, in box-relative (x0, y0, x1, y1).
# Each type carries one large inset cover plate: removing or displacing it
# alters the texture near every part corner, like a missing cover or key
# plate on real rolling stock (part identity itself comes from the body
# color, not the plate shape).
PART_SUBELEMENTS = (
    ((0.12, 0.12, 0.88, 0.88),),
    ((0.08, 0.18, 0.92, 0.82),),
    ((0.18, 0.08, 0.82, 0.92),),
    ((0.14, 0.14, 0.86, 0.86),),
)


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 512
    parts_per_image: Tuple[int, int] = (1, 3)
    aspect_ratio_range: Tuple[float, float] = (1 / 8, 8.0)
    area_range: Tuple[float, float] = (0.001, 0.25)
    fault_probability: float = 0.5
    clutter_density: float = 0.5
    illumination_gradient_strength: float = 0.3
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "parts_per_image", tuple(self.parts_per_image))
        object.__setattr__(self, "aspect_ratio_range", tuple(self.aspect_ratio_range))
        object.__setattr__(self, "area_range", tuple(self.area_range))
        lo, hi = self.parts_per_image
        if not 0 <= lo <= hi:
            raise ValueError("parts_per_image range is empty")
        for name in ("aspect_ratio_range", "area_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} is empty")
        if not 0 <= self.fault_probability <= 1:
            raise ValueError("fault_probability must be in [0, 1]")
        if self.image_size < 64:
            raise ValueError("image_size too small")


@dataclass
class FaultAnnotation:
    image_id: str
    bbox: Tuple[float, float, float, float]
    class_id: int  # part type, 0..3
    is_fault: bool

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if not (x1 < x2 and y1 < y2):
            raise ValueError("degenerate box")
        if not 0 <= self.class_id < NUM_PART_TYPES:
            raise ValueError("bad part type")


@dataclass
class BoxLabel:
    """Detection-head view of an annotation: bbox + flat heatmap class."""

    bbox: Tuple[float, float, float, float]
    class_id: int


def detection_class(part_type, is_fault):
    return part_type * 2 + int(is_fault)


def class_is_fault(class_id):
    return class_id % 2 == 1


def to_box_labels(annotations: Sequence[FaultAnnotation]) -> List[BoxLabel]:
    return [
        BoxLabel(a.bbox, detection_class(a.class_id, a.is_fault)) for a in annotations
    ]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _fill(img, x1, y1, x2, y2, color):
    x1, y1 = max(0, int(x1)), max(0, int(y1))
    x2, y2 = min(img.shape[1], int(x2)), min(img.shape[0], int(y2))
    if x2 > x1 and y2 > y1:
        img[y1:y2, x1:x2] = color


def _render_part(img, box, part_type, is_fault, rng):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    body = np.array(PART_COLORS[part_type]) + rng.uniform(-0.05, 0.05, 3)
    _fill(img, x1, y1, x2, y2, np.clip(body, 0, 1))
    # Thin dark frame so the part stands out from clutter.
    edge = np.clip(body * 0.4, 0, 1)
    t = max(1, int(min(w, h) * 0.06))
    _fill(img, x1, y1, x2, y1 + t, edge)
    _fill(img, x1, y2 - t, x2, y2, edge)
    _fill(img, x1, y1, x1 + t, y2, edge)
    _fill(img, x2 - t, y1, x2, y2, edge)

    # Layout insets snap to zero when they would render under ~6 px: a
    # margin too thin to resolve at feature strides would make the intact
    # plate indistinguishable from a displaced flush one, so on thin axes
    # the intact plate simply spans the part fully instead.
    def _inset(base, dim):
        return base if base * dim >= 6.0 else 0.0

    subs = [
        (_inset(rx0, w), _inset(ry0, h), 1 - _inset(1 - rx1, w), 1 - _inset(1 - ry1, h))
        for rx0, ry0, rx1, ry1 in PART_SUBELEMENTS[part_type]
    ]
    sub_color = np.clip(1.0 - body, 0, 1)
    faulty_idx = int(rng.integers(len(subs))) if is_fault else -1
    for si, (rx0, ry0, rx1, ry1) in enumerate(subs):
        if si == faulty_idx:
            if rng.random() < 0.5:
                continue  # missing sub-element
            # Displace by well over 30% of the sub-element size so the
            # fault stays visible at coarse feature strides.
            dx = 0.8 * (rx1 - rx0) * (1 if rng.random() < 0.5 else -1)
            dy = 0.8 * (ry1 - ry0) * (1 if rng.random() < 0.5 else -1)
            rx0, rx1 = np.clip((rx0 + dx, rx1 + dx), 0.0, 1.0)
            ry0, ry1 = np.clip((ry0 + dy, ry1 + dy), 0.0, 1.0)
        _fill(
            img,
            x1 + rx0 * w,
            y1 + ry0 * h,
            max(x1 + rx1 * w, x1 + rx0 * w + 1),
            max(y1 + ry1 * h, y1 + ry0 * h + 1),
            sub_color,
        )


def _sample_box(spec: SceneSpec, rng, placed):
    s = spec.image_size
    for _ in range(60):
        area = np.exp(rng.uniform(*np.log(spec.area_range))) * s * s
        ar = np.exp(rng.uniform(*np.log(spec.aspect_ratio_range)))
        w = int(round(np.sqrt(area * ar)))
        h = int(round(np.sqrt(area / ar)))
        w, h = min(max(w, 8), s - 2), min(max(h, 8), s - 2)
        x1 = int(rng.integers(1, s - w))
        y1 = int(rng.integers(1, s - h))
        box = (x1, y1, x1 + w, y1 + h)
        if all(
            box[2] <= p[0] or p[2] <= box[0] or box[3] <= p[1] or p[3] <= box[1]
            for p in placed
        ):
            return box
    return None


def render_scene(spec: SceneSpec, rng):
    """One (image float32 [0,1] HWC, annotations-without-id) sample."""
    s = spec.image_size
    img = np.full((s, s, 3), 0.35, dtype=np.float32)
    img += rng.uniform(-0.05, 0.05, 3).astype(np.float32)

    for _ in range(int(spec.clutter_density * 30)):
        cw = int(rng.integers(4, s // 4))
        ch = int(rng.integers(4, s // 4))
        cx = int(rng.integers(0, s - cw))
        cy = int(rng.integers(0, s - ch))
        shade = rng.uniform(0.15, 0.55)
        _fill(img, cx, cy, cx + cw, cy + ch, (shade, shade, shade))

    lo, hi = spec.parts_per_image
    n_parts = int(rng.integers(lo, hi + 1))
    placed, labels = [], []
    for _ in range(n_parts):
        box = _sample_box(spec, rng, placed)
        if box is None:
            continue
        part_type = int(rng.integers(NUM_PART_TYPES))
        is_fault = bool(rng.random() < spec.fault_probability)
        _render_part(img, box, part_type, is_fault, rng)
        placed.append(box)
        labels.append((box, part_type, is_fault))

    # Linear illumination ramp along a random axis.
    strength = spec.illumination_gradient_strength
    ramp = np.linspace(-0.5, 0.5, s, dtype=np.float32) * strength
    if rng.random() < 0.5:
        img *= 1.0 + ramp[None, :, None]
    else:
        img *= 1.0 + ramp[:, None, None]

    img += rng.normal(0.0, spec.noise_sigma, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0), labels


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------

def _image_rng(spec: SceneSpec, index):
    return np.random.default_rng([spec.seed, index])


def generate_dataset(spec: SceneSpec, count, out_dir):
    """Write ``count`` PNG scenes plus annotations.json and manifest.json."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out_dir}: {exc}") from exc

    images, annotations = [], []
    for idx in range(count):
        image_id = f"img_{idx:05d}"
        img, labels = render_scene(spec, _image_rng(spec, idx))
        fname = f"images/{image_id}.png"
        Image.fromarray((img * 255).round().astype(np.uint8)).save(out_dir / fname)
        images.append(
            {"id": image_id, "file": fname, "width": spec.image_size, "height": spec.image_size}
        )
        for box, part_type, is_fault in labels:
            annotations.append(
                {
                    "image_id": image_id,
                    "bbox": [float(v) for v in box],
                    "class": part_type,
                    "is_fault": is_fault,
                }
            )

    ann_doc = json.dumps(
        {"images": images, "annotations": annotations}, indent=1, sort_keys=True
    )
    (out_dir / "annotations.json").write_text(ann_doc)
    manifest = {
        "spec": asdict(spec),
        "count": count,
        "num_annotations": len(annotations),
        "content_hash": hashlib.sha256(ann_doc.encode()).hexdigest(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


class Dataset:
    """Loaded dataset: indexable and iterable as (image, annotations) pairs.

    Images are kept as uint8 and normalized to float32 [0, 1] on access.
    """

    def __init__(self, image_ids, images, annotations):
        self.image_ids = image_ids
        self._images = images
        self._annotations = annotations

    def __len__(self):
        return len(self.image_ids)

    def __getitem__(self, idx):
        img = self._images[idx].astype(np.float32) / 255.0
        return img, self._annotations[idx]

    def raw_image(self, idx):
        return self._images[idx]

    def annotations(self, idx) -> List[FaultAnnotation]:
        return self._annotations[idx]

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_dataset(dir_path) -> Dataset:
    dir_path = Path(dir_path)
    ann_file = dir_path / "annotations.json"
    if not (dir_path / "manifest.json").exists() or not ann_file.exists():
        raise DatasetError(f"{dir_path} does not contain a dataset manifest")
    doc = json.loads(ann_file.read_text())

    by_image = {img["id"]: img for img in doc["images"]}
    anns_by_image = {img_id: [] for img_id in by_image}
    for a in doc["annotations"]:
        if a["image_id"] not in by_image:
            raise DatasetError(f"annotation references unknown image {a['image_id']}")
        anns_by_image[a["image_id"]].append(
            FaultAnnotation(a["image_id"], tuple(a["bbox"]), a["class"], a["is_fault"])
        )

    image_ids = sorted(by_image)
    images, annotations = [], []
    for img_id in image_ids:
        path = dir_path / by_image[img_id]["file"]
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
        except OSError as exc:
            raise DatasetError(f"cannot load image {img_id}: {exc}") from exc
        images.append(arr)
        annotations.append(anns_by_image[img_id])
    return Dataset(image_ids, images, annotations)


def resize_with_annotations(image, annotations, target_size):
    """Bilinear resize to target_size (divisible by 128); boxes scale along."""
    if target_size % 128 != 0 or target_size < 128:
        raise ValueError("target_size must be a positive multiple of 128")
    h, w = image.shape[:2]
    if image.dtype != np.uint8:
        image = (np.clip(image, 0, 1) * 255).round().astype(np.uint8)
    resized = np.asarray(
        Image.fromarray(image).resize((target_size, target_size), Image.BILINEAR)
    ).astype(np.float32) / 255.0
    fx, fy = target_size / w, target_size / h
    scaled = [
        FaultAnnotation(
            a.image_id,
            (a.bbox[0] * fx, a.bbox[1] * fy, a.bbox[2] * fx, a.bbox[3] * fy),
            a.class_id,
            a.is_fault,
        )
        for a in annotations
    ]
    return resized, scaled
