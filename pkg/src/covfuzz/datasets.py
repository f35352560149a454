"""Dataset manifests, image I/O, and the synthetic person-scene generator.

Manifests are JSON-lines, one record per image:
``{"id": ..., "image_path": ..., "boxes": [[x1, y1, x2, y2], ...]}``
plus optional extra keys (corruption, severity, adv_image_path).

Scenes are 96x96 RGB canvases with 1-6 schematic persons (head circle,
torso block, two legs) over a gradient-plus-noise background. Shapes are
sampled at pixel centers from implicit functions that are symmetric in x
and linear in the person height, so re-rendering a flipped, translated, or
rescaled scene reproduces the transformed annotations to within a pixel.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ArgumentError, IntegrityError

CANVAS = (96, 96)


@dataclass
class Record:
    id: str
    image_path: str
    boxes: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(-1, 4)

    def to_json(self) -> dict:
        d = {"id": self.id, "image_path": self.image_path,
             "boxes": [[float(v) for v in b] for b in self.boxes]}
        d.update(self.extra)
        return d

    @staticmethod
    def from_json(d: dict) -> "Record":
        extra = {k: v for k, v in d.items()
                 if k not in ("id", "image_path", "boxes")}
        if "boxes" not in d:
            raise IntegrityError(f"record {d.get('id')!r} has no annotations")
        return Record(str(d["id"]), str(d["image_path"]), d["boxes"], extra)


def write_manifest(records: list[Record], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_manifest(path) -> list[Record]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(Record.from_json(json.loads(line)))
    return records


def save_image(image: np.ndarray, path) -> None:
    arr = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_record_image(rec: Record) -> np.ndarray:
    return load_image(rec.image_path)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class PersonSpec:
    cx: float
    y_top: float
    height: float
    head_color: tuple[float, float, float]
    torso_color: tuple[float, float, float]
    leg_color: tuple[float, float, float]


@dataclass
class SceneSpec:
    persons: list[PersonSpec]
    bg_color_a: tuple[float, float, float]
    bg_color_b: tuple[float, float, float]
    bg_angle: float
    noise_sigma: float
    seed: int
    canvas: tuple[int, int] = CANVAS


def person_mask(person: PersonSpec, canvas: tuple[int, int]) -> np.ndarray:
    """Boolean mask of the person's pixels, sampled at pixel centers."""
    head, torso, legs = _part_masks(person, canvas)
    return head | torso | legs


def _part_masks(person: PersonSpec, canvas: tuple[int, int]):
    h_can, w_can = canvas
    ys = np.arange(h_can)[:, None] + 0.5
    xs = np.arange(w_can)[None, :] + 0.5
    ax = np.abs(xs - person.cx)
    ry = ys - person.y_top
    h = person.height
    head = (ax ** 2 + (ry - 0.15 * h) ** 2) <= (0.12 * h) ** 2
    torso = (ax <= 0.17 * h) & (ry >= 0.25 * h) & (ry <= 0.62 * h)
    legs = (ax >= 0.03 * h) & (ax <= 0.14 * h) & (ry > 0.62 * h) & (ry <= h)
    return head, torso, legs


def tight_box(mask: np.ndarray) -> np.ndarray | None:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0 or cols.size == 0:
        return None
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], np.float32)


def render_scene(spec: SceneSpec):
    """Returns (image, boxes, masks); boxes are tight around drawn pixels."""
    h_can, w_can = spec.canvas
    ys = (np.arange(h_can)[:, None] + 0.5) / h_can
    xs = (np.arange(w_can)[None, :] + 0.5) / w_can
    direction = np.array([np.cos(spec.bg_angle), np.sin(spec.bg_angle)])
    proj = xs * direction[0] + ys * direction[1]
    lo, hi = proj.min(), proj.max()
    t = ((proj - lo) / (hi - lo))[..., None] if hi > lo else np.zeros((h_can, w_can, 1))
    a = np.asarray(spec.bg_color_a, np.float32)
    b = np.asarray(spec.bg_color_b, np.float32)
    image = (a * (1 - t) + b * t).astype(np.float32)
    rng = np.random.default_rng(spec.seed)
    image = image + rng.normal(0.0, spec.noise_sigma,
                               size=image.shape).astype(np.float32)

    boxes, masks = [], []
    for person in spec.persons:
        head, torso, legs = _part_masks(person, spec.canvas)
        for part, color in ((head, person.head_color),
                            (torso, person.torso_color),
                            (legs, person.leg_color)):
            image[part] = color
        mask = head | torso | legs
        box = tight_box(mask)
        if box is None:
            raise ArgumentError("person rendered with no pixels")
        masks.append(mask)
        boxes.append(box)
    # later persons may overdraw earlier ones; keep boxes as drawn extents
    boxes_arr = (np.stack(boxes) if boxes else np.zeros((0, 4), np.float32))
    return np.clip(image, 0.0, 1.0), boxes_arr, masks


def sample_scene(rng: np.random.Generator,
                 canvas: tuple[int, int] = CANVAS) -> SceneSpec:
    h_can, w_can = canvas
    n_persons = int(rng.integers(1, 7))
    persons: list[PersonSpec] = []
    placed_boxes: list[np.ndarray] = []
    for _ in range(n_persons):
        chosen = None
        for _attempt in range(30):
            height = float(rng.uniform(12.0, 48.0))
            margin = 0.18 * height
            cx = float(rng.uniform(margin, w_can - margin))
            y_top = float(rng.uniform(0.0, h_can - height))
            cand = np.array([cx - 0.17 * height, y_top,
                             cx + 0.17 * height, y_top + height])
            if all(_box_overlap(cand, other) < 0.4 for other in placed_boxes):
                chosen = (cx, y_top, height, cand)
                break
        if chosen is None:
            chosen = (cx, y_top, height, cand)   # crowded scenes are fine
        cx, y_top, height, cand = chosen
        placed_boxes.append(cand)
        head = tuple(np.clip(np.array([0.83, 0.66, 0.54])
                             + rng.uniform(-0.06, 0.06, 3), 0, 1))
        torso = rng.uniform(0.15, 1.0, 3)
        torso[int(rng.integers(0, 3))] = rng.uniform(0.6, 1.0)
        grey = float(rng.uniform(0.05, 0.35))
        leg = (grey, grey, min(1.0, grey + 0.05))
        persons.append(PersonSpec(cx, y_top, height, head,
                                  tuple(torso), leg))
    color_a = tuple(rng.uniform(0.1, 0.9, 3))
    color_b = tuple(rng.uniform(0.1, 0.9, 3))
    angle = float(rng.uniform(0.0, 2 * np.pi))
    sigma = float(rng.uniform(0.01, 0.04))
    noise_seed = int(rng.integers(0, 2 ** 31))
    return SceneSpec(persons, color_a, color_b, angle, sigma, noise_seed, canvas)


def _box_overlap(a: np.ndarray, b: np.ndarray) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return float(inter / union)


def generate_synthetic_dataset(out_dir, n_train_val: int, n_test: int,
                               seed: int) -> dict[str, str]:
    """Writes images plus train_val/test manifests; fully seed-deterministic."""
    if n_train_val <= 0 or n_test <= 0:
        raise ArgumentError("dataset sizes must be positive")
    out_dir = str(out_dir)
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    manifests = {}
    for split_idx, (prefix, count, name) in enumerate(
            (("tv", n_train_val, "train_val"), ("te", n_test, "test"))):
        records = []
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([seed, split_idx, i]))
            scene = sample_scene(rng)
            image, boxes, _ = render_scene(scene)
            image_id = f"{prefix}{i:05d}"
            path = os.path.join(images_dir, f"{image_id}.png")
            save_image(image, path)
            records.append(Record(image_id, path, boxes))
        manifest_path = os.path.join(out_dir, f"{name}.jsonl")
        write_manifest(records, manifest_path)
        manifests[name] = manifest_path
    return manifests
