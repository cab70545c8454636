"""Keypoint-similarity matching and AP/AR metrics with category breakdown.

Similarity between a prediction and a ground-truth instance is
OKS = mean over labeled keypoints of exp(-d^2 / (2 * s^2 * k_i^2)) with
s^2 the instance area and k_i a per-keypoint falloff constant.  Matching is
greedy per image and category in descending score order; precision/recall
curves are interpolated at 101 recall points and averaged over the
0.50:0.05:0.95 threshold ladder.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .codec import PersonInstance

__all__ = [
    "DEFAULT_FALLOFF",
    "EvalConfig",
    "EvalResult",
    "Prediction",
    "Dataset",
    "oks",
    "match_instances",
    "compute_metrics",
    "load_annotations",
    "load_results",
    "write_metrics",
    "pck",
]

# Twice the conventional 17-keypoint sigma set, so the OKS exponent matches
# the reference person-keypoint protocol.
_SIGMAS = np.array(
    [0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
     0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089]
)
DEFAULT_FALLOFF = tuple(float(v) for v in 2.0 * _SIGMAS)

RECALL_GRID = np.linspace(0.0, 1.0, 101)


class AnnotationError(ValueError):
    pass


@dataclass
class EvalConfig:
    falloff: tuple = DEFAULT_FALLOFF
    thresholds: tuple = tuple(np.arange(0.50, 0.951, 0.05).round(2))
    max_detections: int = 20

    def __post_init__(self):
        falloff = np.asarray(self.falloff, dtype=np.float64)
        if (falloff <= 0).any():
            raise ValueError("falloff constants must be positive")
        thr = np.asarray(self.thresholds, dtype=np.float64)
        if len(thr) != 10 or (np.diff(thr) <= 0).any():
            raise ValueError("thresholds must be the 10 strictly increasing 0.50:0.05:0.95 values")


@dataclass
class Prediction:
    image_id: int
    category_id: int
    keypoints: np.ndarray
    score: float

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)


@dataclass
class Dataset:
    images: dict  # id -> {"width", "height", "file_name"}
    instances: list
    categories: list  # [(id, name)] in file order

    def instances_for(self, image_id: int, category_id: int):
        return [g for g in self.instances if g.image_id == image_id and g.category_id == category_id]


@dataclass
class EvalResult:
    ap: float | None
    ap50: float | None
    ap75: float | None
    ar: float | None
    ar50: float | None
    per_category: dict = field(default_factory=dict)
    n_images: int = 0
    n_instances: int = 0

    @property
    def is_empty(self) -> bool:
        return self.ap is None


def oks(pred_keypoints, gt: PersonInstance, config: EvalConfig) -> float:
    """Similarity in [0, 1]; requires at least one labeled gt keypoint."""
    kp = np.asarray(pred_keypoints, dtype=np.float64).reshape(-1, 3)
    gt_kp = gt.keypoints
    labeled = gt_kp[:, 2] > 0
    if not labeled.any():
        raise ValueError(f"instance {gt.instance_id} has no labeled keypoints")
    falloff = np.asarray(config.falloff, dtype=np.float64)
    if falloff.shape[0] != gt_kp.shape[0]:
        raise ValueError(f"falloff has {falloff.shape[0]} entries for {gt_kp.shape[0]} keypoints")
    d2 = (kp[labeled, 0] - gt_kp[labeled, 0]) ** 2 + (kp[labeled, 1] - gt_kp[labeled, 1]) ** 2
    s2 = max(float(gt.area), np.finfo(np.float64).tiny)
    e = d2 / (2.0 * s2 * falloff[labeled] ** 2)
    return float(np.mean(np.exp(-e)))


def match_instances(preds, gts, threshold: float, config: EvalConfig):
    """Greedy assignment: best unmatched gt with OKS >= threshold per prediction.

    Predictions are visited in descending score order (stable for ties).
    Returns (matches, order) where matches[i] is the gt index for the i-th
    visited prediction or -1, and order maps visit rank to input index.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    matches = []
    for rank in order:
        best, best_oks = -1, threshold
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            value = oks(preds[rank].keypoints, gt, config)
            if value >= best_oks:
                best, best_oks = j, value
        if best >= 0:
            taken[best] = True
        matches.append(best)
    return matches, order


def _average_precision(tp_flags: np.ndarray, scores: np.ndarray, n_gt: int) -> tuple:
    """101-point interpolated AP and max recall for one category/threshold."""
    if n_gt == 0:
        return None, None
    if tp_flags.size == 0:
        return 0.0, 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp_flags[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)
    # monotone envelope from the right, then sample the recall grid
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(sampled.mean()), float(recall[-1])


def compute_metrics(dataset: Dataset, predictions, config: EvalConfig | None = None) -> EvalResult:
    """AP / AP50 / AP75 / AR / AR50 averaged over categories with ground truth."""
    config = config or EvalConfig()
    usable = [g for g in dataset.instances if g.n_labeled > 0]
    if not usable:
        return EvalResult(ap=None, ap50=None, ap75=None, ar=None, ar50=None,
                          n_images=len(dataset.images), n_instances=0)
    thresholds = list(config.thresholds)
    cat_ids = sorted({g.category_id for g in usable})
    per_cat_ap: dict = {}
    per_cat_curves: dict = {}
    for cid in cat_ids:
        gts_by_image: dict = {}
        for g in usable:
            if g.category_id == cid:
                gts_by_image.setdefault(g.image_id, []).append(g)
        n_gt = sum(len(v) for v in gts_by_image.values())
        ap_per_thr, rec_per_thr = [], []
        for thr in thresholds:
            flags, scores = [], []
            for image_id, gts in gts_by_image.items():
                preds = [p for p in predictions if p.image_id == image_id and p.category_id == cid]
                preds = sorted(preds, key=lambda p: -p.score)[: config.max_detections]
                matches, order = match_instances(preds, gts, thr, config)
                for rank, gt_idx in zip(order, matches):
                    flags.append(gt_idx >= 0)
                    scores.append(preds[rank].score)
            # predictions on images without gt of this category are false
            # positives, truncated per image like everything else
            stray: dict = {}
            for p in predictions:
                if p.category_id == cid and p.image_id not in gts_by_image:
                    stray.setdefault(p.image_id, []).append(p)
            for preds in stray.values():
                for p in sorted(preds, key=lambda q: -q.score)[: config.max_detections]:
                    flags.append(False)
                    scores.append(p.score)
            ap, rec = _average_precision(np.asarray(flags, dtype=bool), np.asarray(scores, dtype=np.float64), n_gt)
            ap_per_thr.append(ap)
            rec_per_thr.append(rec)
        per_cat_curves[cid] = (ap_per_thr, rec_per_thr)
        per_cat_ap[cid] = float(np.mean(ap_per_thr))

    def across(index: int | None, which: int) -> float:
        values = []
        for cid in cat_ids:
            series = per_cat_curves[cid][which]
            values.append(np.mean(series) if index is None else series[index])
        return float(np.mean(values))

    idx50 = thresholds.index(0.50)
    idx75 = thresholds.index(0.75)
    return EvalResult(
        ap=across(None, 0),
        ap50=across(idx50, 0),
        ap75=across(idx75, 0),
        ar=across(None, 1),
        ar50=across(idx50, 1),
        per_category=per_cat_ap,
        n_images=len(dataset.images),
        n_instances=len(usable),
    )


# -- annotation / result files ------------------------------------------------


def load_annotations(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    for section in ("images", "annotations", "categories"):
        if section not in raw:
            raise AnnotationError(f"{path}: missing top-level {section!r} section")
    images = {}
    for entry in raw["images"]:
        for key in ("id", "width", "height", "file_name"):
            if key not in entry:
                raise AnnotationError(f"{path}: image entry missing {key!r}: {entry}")
        images[int(entry["id"])] = {
            "width": int(entry["width"]),
            "height": int(entry["height"]),
            "file_name": entry["file_name"],
        }
    instances = []
    for entry in raw["annotations"]:
        ident = entry.get("id", "<missing id>")
        for key in ("id", "image_id", "category_id", "bbox", "keypoints", "area"):
            if key not in entry:
                raise AnnotationError(f"{path}: annotation {ident} missing field {key!r}")
        if int(entry["image_id"]) not in images:
            raise AnnotationError(f"{path}: annotation {ident} references unknown image {entry['image_id']}")
        kp = np.asarray(entry["keypoints"], dtype=np.float64)
        if kp.size % 3:
            raise AnnotationError(f"{path}: annotation {ident} keypoints are not (x, y, v) triples")
        try:
            instance = PersonInstance(
                instance_id=int(entry["id"]),
                image_id=int(entry["image_id"]),
                bbox=tuple(float(v) for v in entry["bbox"]),
                keypoints=kp.reshape(-1, 3),
                category_id=int(entry["category_id"]),
                area=float(entry["area"]),
            )
            meta = images[instance.image_id]
            instance.check_in_bounds(meta["width"], meta["height"])
        except ValueError as exc:
            raise AnnotationError(f"{path}: annotation {ident}: {exc}") from None
        instances.append(instance)
    categories = [(int(c["id"]), c.get("name", str(c["id"]))) for c in raw["categories"]]
    return Dataset(images=images, instances=instances, categories=categories)


def load_results(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise AnnotationError(f"{path}: results must be a JSON array")
    out = []
    for i, entry in enumerate(raw):
        for key in ("image_id", "category_id", "keypoints", "score"):
            if key not in entry:
                raise AnnotationError(f"{path}: result #{i} missing field {key!r}")
        out.append(
            Prediction(
                image_id=int(entry["image_id"]),
                category_id=int(entry["category_id"]),
                keypoints=np.asarray(entry["keypoints"], dtype=np.float64).reshape(-1, 3),
                score=float(entry["score"]),
            )
        )
    return out


def write_metrics(result: EvalResult, csv_path, json_path, category_names: dict | None = None) -> None:
    """Emit `metric,category,value` rows plus a JSON mirror."""
    names = category_names or {}
    rows = []
    if not result.is_empty:
        for metric, value in (("AP", result.ap), ("AP50", result.ap50), ("AP75", result.ap75),
                              ("AR", result.ar), ("AR50", result.ar50)):
            rows.append((metric, "overall", value))
        for cid in sorted(result.per_category):
            rows.append(("AP", names.get(cid, str(cid)), result.per_category[cid]))
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "category", "value"])
        for metric, cat, value in rows:
            writer.writerow([metric, cat, f"{value:.6f}"])
        writer.writerow(["count", "images", str(result.n_images)])
        writer.writerow(["count", "instances", str(result.n_instances)])
    payload = {
        "empty": result.is_empty,
        "overall": None if result.is_empty else {
            "AP": result.ap, "AP50": result.ap50, "AP75": result.ap75,
            "AR": result.ar, "AR50": result.ar50,
        },
        "per_category": {names.get(cid, str(cid)): v for cid, v in sorted(result.per_category.items())},
        "images": result.n_images,
        "instances": result.n_instances,
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def pck(pred_keypoints, gt: PersonInstance, fraction: float = 0.1) -> float:
    """Share of labeled keypoints within ``fraction`` of the box diagonal."""
    kp = np.asarray(pred_keypoints, dtype=np.float64).reshape(-1, 3)
    labeled = gt.keypoints[:, 2] > 0
    if not labeled.any():
        return float("nan")
    _, _, w, h = gt.bbox
    limit = fraction * float(np.hypot(w, h))
    dist = np.hypot(kp[labeled, 0] - gt.keypoints[labeled, 0], kp[labeled, 1] - gt.keypoints[labeled, 1])
    return float((dist <= limit).mean())
