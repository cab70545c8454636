"""Procedural stick-figure dataset generator for the two-domain experiments.

Figures are 17-keypoint skeletons rendered as strokes on a noisy canvas.
The natural domain draws plain bright strokes; art styles apply a
deterministic per-style combination of shear, stroke width, intensity
inversion and limb-pixel dropout.  Geometry transforms are applied to the
joints before rendering, so annotations stay exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .codec import N_KEYPOINTS, PersonInstance
from .evaluate import Dataset
from .images import read_image, write_ppm
from .text import CATEGORY_PROMPTS

__all__ = ["SynthData", "style_params", "synth_dataset", "write_dataset", "load_image_dir"]

# skeleton segments as keypoint index pairs (plus neck/hip midpoints handled inline)
_LIMBS = (
    (5, 7), (7, 9),      # left arm
    (6, 8), (8, 10),     # right arm
    (11, 13), (13, 15),  # left leg
    (12, 14), (14, 16),  # right leg
)


@dataclass
class SynthData:
    images: dict          # image_id -> HxWx3 uint8
    dataset: Dataset
    domain: str
    seed: int


def style_params(category_id: int) -> dict:
    """Deterministic rendering recipe per category; photo categories are plain.

    Art styles combine geometric shear, stroke width, stroke brightness,
    intensity inversion and limb-pixel dropout, all derived from the
    category id so a style is reproducible without extra state.
    """
    if not 1 <= category_id <= 19:
        raise ValueError(f"category id {category_id} outside 1..19")
    if category_id >= 15:
        return {"shear": 0.0, "stroke": 2.0, "invert": False, "dropout": 0.0,
                "value": 230.0, "tint": (1.0, 1.0, 1.0)}
    return {
        "shear": ((category_id % 5) - 2) * 0.12,
        "stroke": 1.0 + (category_id % 3),
        "invert": category_id % 2 == 1,
        "dropout": 0.1 * (category_id % 4),
        "value": 230.0 - 30.0 * ((category_id * 3) % 5),
        "tint": (1.0, 0.85 + 0.01 * category_id, 0.75 + 0.015 * category_id),
    }


def _skeleton(rng: np.random.Generator, cx: float, cy: float, scale: float) -> np.ndarray:
    """Sample a random pose; returns (17, 2) joint coordinates."""
    joints = np.zeros((N_KEYPOINTS, 2), dtype=np.float64)
    lean = rng.uniform(-0.25, 0.25)
    torso = 1.25 * scale
    hip_y = cy + torso / 2.0
    shoulder_y = cy - torso / 2.0
    shoulder_x = cx + lean * torso / 2.0
    hip_x = cx - lean * torso / 2.0
    shoulder_half, hip_half = 0.55 * scale, 0.38 * scale
    joints[5] = (shoulder_x - shoulder_half, shoulder_y)
    joints[6] = (shoulder_x + shoulder_half, shoulder_y)
    joints[11] = (hip_x - hip_half, hip_y)
    joints[12] = (hip_x + hip_half, hip_y)

    def chain(base, length, angle):
        return (base[0] + length * np.sin(angle), base[1] + length * np.cos(angle))

    for side, shoulder, hip in ((0, 5, 11), (1, 6, 12)):
        sign = -1.0 if side == 0 else 1.0
        upper = rng.uniform(0.25, 1.25) * sign
        joints[7 + side] = chain(joints[shoulder], 0.7 * scale, upper)
        joints[9 + side] = chain(joints[7 + side], 0.65 * scale, upper + rng.uniform(-0.9, 0.9))
        thigh = rng.uniform(-0.35, 0.55) * sign
        joints[13 + side] = chain(joints[hip], 0.9 * scale, thigh)
        joints[15 + side] = chain(joints[13 + side], 0.85 * scale, thigh + rng.uniform(-0.45, 0.45))

    head_center = (shoulder_x, shoulder_y - 0.55 * scale)
    radius = 0.3 * scale
    joints[0] = (head_center[0], head_center[1] + 0.12 * radius)
    joints[1] = (head_center[0] - 0.35 * radius, head_center[1] - 0.25 * radius)
    joints[2] = (head_center[0] + 0.35 * radius, head_center[1] - 0.25 * radius)
    joints[3] = (head_center[0] - 0.95 * radius, head_center[1])
    joints[4] = (head_center[0] + 0.95 * radius, head_center[1])
    return joints


def _fit_into(joints: np.ndarray, size: int, margin: float) -> np.ndarray:
    lo, hi = joints.min(axis=0), joints.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    avail = size - 2 * margin
    factor = min(1.0, avail / span.max())
    center = (lo + hi) / 2.0
    joints = (joints - center) * factor + center
    lo = joints.min(axis=0)
    joints += np.maximum(margin - lo, 0.0)
    hi = joints.max(axis=0)
    joints -= np.maximum(hi - (size - margin), 0.0)
    return joints


def _draw_segment(canvas: np.ndarray, p0, p1, width: float, value: float) -> None:
    h, w = canvas.shape
    x0, y0 = p0
    x1, y1 = p1
    lo_x = max(int(min(x0, x1) - width - 1), 0)
    hi_x = min(int(max(x0, x1) + width + 2), w)
    lo_y = max(int(min(y0, y1) - width - 1), 0)
    hi_y = min(int(max(y0, y1) + width + 2), h)
    if lo_x >= hi_x or lo_y >= hi_y:
        return
    ys, xs = np.mgrid[lo_y:hi_y, lo_x:hi_x]
    dx, dy = x1 - x0, y1 - y0
    denom = dx * dx + dy * dy
    if denom < 1e-12:
        t = np.zeros_like(xs, dtype=np.float64)
    else:
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / denom, 0.0, 1.0)
    dist = np.hypot(xs - (x0 + t * dx), ys - (y0 + t * dy))
    region = canvas[lo_y:hi_y, lo_x:hi_x]
    region[dist <= width / 2.0] = value


def _render(joints: np.ndarray, size: int, style: dict, rng: np.random.Generator) -> np.ndarray:
    canvas = rng.uniform(0.0, 55.0, size=(size, size))
    stroke_value = float(style["value"])
    width = float(style["stroke"])
    neck = (joints[5] + joints[6]) / 2.0
    pelvis = (joints[11] + joints[12]) / 2.0
    _draw_segment(canvas, neck, pelvis, width + 1.0, stroke_value)
    _draw_segment(canvas, joints[5], joints[6], width, stroke_value)
    _draw_segment(canvas, joints[11], joints[12], width, stroke_value)
    for a, b in _LIMBS:
        _draw_segment(canvas, joints[a], joints[b], width, stroke_value)
    head_center = ((joints[3] + joints[4]) / 2.0)
    radius = max(np.linalg.norm(joints[4] - joints[3]) / 1.9, 2.0)
    ys, xs = np.mgrid[0:size, 0:size]
    ring = np.abs(np.hypot(xs - head_center[0], ys - head_center[1]) - radius) <= width / 2.0 + 0.5
    canvas[ring] = stroke_value
    if style["dropout"] > 0:
        strokes = canvas >= stroke_value - 1
        drop = rng.random(canvas.shape) < style["dropout"]
        canvas[strokes & drop] = 30.0
    if style["invert"]:
        canvas = 255.0 - canvas
    tinted = np.stack([canvas * t for t in style["tint"]], axis=2)
    return np.clip(tinted, 0, 255).astype(np.uint8)


def _domain_categories(domain: str) -> list:
    if domain == "natural":
        return [15, 16, 17, 18, 19]
    if domain == "art":
        return list(range(1, 15))
    if domain == "all":
        return list(range(1, 20))
    if domain.startswith("art:"):
        style = int(domain.split(":", 1)[1])
        if not 1 <= style <= 14:
            raise ValueError(f"art style id {style} outside 1..14")
        return [style]
    raise ValueError(f"unknown domain {domain!r}; expected natural, art, art:K or all")


def synth_dataset(domain: str, n: int, seed: int, canvas: int = 160, persons_per_image: int = 1) -> SynthData:
    """Generate ``n`` annotated person instances; fully determined by the arguments."""
    if n < 1:
        raise ValueError("need n >= 1 instances")
    categories = _domain_categories(domain)
    rng = np.random.default_rng(seed)
    images: dict = {}
    instances: list = []
    image_entries: dict = {}
    instance_id = 0
    image_id = 0
    while instance_id < n:
        image_id += 1
        count = min(persons_per_image, n - instance_id)
        merged = None
        for k in range(count):
            category = categories[instance_id % len(categories)]
            style = style_params(category)
            scale = rng.uniform(0.16, 0.22) * canvas / (1.0 + 0.35 * (count - 1))
            cx = rng.uniform(0.3, 0.7) * canvas if count == 1 else (k + 0.5) / count * canvas
            cy = rng.uniform(0.4, 0.6) * canvas
            joints = _skeleton(rng, cx, cy, scale)
            if style["shear"]:
                joints[:, 0] = joints[:, 0] + style["shear"] * (joints[:, 1] - cy)
            joints = _fit_into(joints, canvas, margin=4.0 + 2 * scale * 0.3)
            rendered = _render(joints, canvas, style, rng).astype(np.float64)
            merged = rendered if merged is None else np.maximum(merged, rendered)
            vis = np.full(N_KEYPOINTS, 2.0)
            flip = rng.random(N_KEYPOINTS)
            vis[flip < 0.05] = 1.0
            lo = joints.min(axis=0) - 3.0
            hi = joints.max(axis=0) + 3.0
            lo = np.maximum(lo, 0.0)
            hi = np.minimum(hi, canvas)
            bbox = (float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]))
            instance_id += 1
            instances.append(
                PersonInstance(
                    instance_id=instance_id,
                    image_id=image_id,
                    bbox=bbox,
                    keypoints=np.concatenate([joints, vis[:, None]], axis=1),
                    category_id=category,
                    area=bbox[2] * bbox[3],
                )
            )
        images[image_id] = merged.astype(np.uint8) if merged is not None else np.zeros((canvas, canvas, 3), np.uint8)
        image_entries[image_id] = {"width": canvas, "height": canvas, "file_name": f"images/im_{image_id:05d}.ppm"}
    dataset = Dataset(
        images=image_entries,
        instances=instances,
        categories=[(cid, name) for cid, name, _ in CATEGORY_PROMPTS],
    )
    return SynthData(images=images, dataset=dataset, domain=domain, seed=seed)


def write_dataset(data: SynthData, out_dir) -> str:
    """Write PPM images plus annotations.json; returns the annotation path."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    for image_id, arr in sorted(data.images.items()):
        write_ppm(os.path.join(out_dir, data.dataset.images[image_id]["file_name"]), arr)
    payload = {
        "images": [
            {"id": iid, **meta} for iid, meta in sorted(data.dataset.images.items())
        ],
        "annotations": [
            {
                "id": inst.instance_id,
                "image_id": inst.image_id,
                "category_id": inst.category_id,
                "bbox": [round(v, 3) for v in inst.bbox],
                "keypoints": [round(float(v), 3) for v in inst.keypoints.reshape(-1)],
                "area": round(float(inst.area), 3),
                "num_keypoints": inst.n_labeled,
            }
            for inst in data.dataset.instances
        ],
        "categories": [{"id": cid, "name": name} for cid, name in data.dataset.categories],
    }
    path = os.path.join(out_dir, "annotations.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_image_dir(annotation_path) -> dict:
    """Load every image referenced by an annotation file, keyed by image id."""
    base = os.path.dirname(os.path.abspath(annotation_path))
    with open(annotation_path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    out = {}
    for entry in raw["images"]:
        out[int(entry["id"])] = read_image(os.path.join(base, entry["file_name"]))
    return out
