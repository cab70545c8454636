"""Instance cropping, Gaussian heatmap targets and sub-pixel decoding.

Coordinates follow the pixel-center alignment convention throughout:
input coordinate = (grid index + 0.5) * stride - 0.5, with stride 4 between
the model input and the heatmap grid.  Decoding is classic argmax plus a
quarter-pixel shift toward the larger neighbor, a documented stand-in for
fancier unbiased post-processing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import Heatmaps
from .tensor import Tensor

__all__ = [
    "N_KEYPOINTS",
    "KEYPOINT_NAMES",
    "PersonInstance",
    "CropTransform",
    "affine_crop",
    "gaussian_targets",
    "heatmaps_to_keypoints",
]

HEATMAP_STRIDE = 4

KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
N_KEYPOINTS = len(KEYPOINT_NAMES)


@dataclass
class PersonInstance:
    """One annotated person: box, keypoint triples and category."""

    instance_id: int
    image_id: int
    bbox: tuple  # (x, y, w, h) in source pixels
    keypoints: np.ndarray = field(repr=False)  # (N_k, 3) of (x, y, v)
    category_id: int = 1
    area: float = 0.0

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"instance {self.instance_id}: degenerate bbox {self.bbox}")
        v = self.keypoints[:, 2]
        if not np.isin(v, (0.0, 1.0, 2.0)).all():
            raise ValueError(f"instance {self.instance_id}: visibility flags must be 0, 1 or 2")
        if self.area <= 0:
            self.area = float(w * h)

    @property
    def n_labeled(self) -> int:
        return int((self.keypoints[:, 2] > 0).sum())

    def check_in_bounds(self, image_w: int, image_h: int) -> None:
        kp = self.keypoints
        labeled = kp[kp[:, 2] > 0]
        if labeled.size and (
            (labeled[:, 0] < 0).any() or (labeled[:, 0] > image_w).any()
            or (labeled[:, 1] < 0).any() or (labeled[:, 1] > image_h).any()
        ):
            raise ValueError(f"instance {self.instance_id}: labeled keypoints outside image bounds")


@dataclass
class CropTransform:
    """Affine source -> model-input map and its exact inverse."""

    matrix: np.ndarray  # 2x3
    inverse: np.ndarray  # 2x3

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.inverse[:, :2].T + self.inverse[:, 2]


def _expand_to_aspect(bbox, out_h: int, out_w: int):
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate bbox {bbox}")
    ratio = out_h / out_w
    cx, cy = x + w / 2.0, y + h / 2.0
    if h < w * ratio:
        h = w * ratio
    else:
        w = h / ratio
    return cx, cy, w, h


def _bilinear_sample(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample HxWxC image at real-valued coords; zero outside the frame."""
    h, w = image.shape[:2]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros(sx.shape + (image.shape[2],), dtype=np.float32)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = ((fx if dx else 1 - fx) * (fy if dy else 1 - fy)).astype(np.float32)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c = np.clip(xi, 0, w - 1)
            yi_c = np.clip(yi, 0, h - 1)
            out += (weight * valid)[..., None] * image[yi_c, xi_c]
    return out


def affine_crop(image: np.ndarray, bbox, out_hw: tuple = (256, 192)):
    """Crop a person box to the model input; returns (3xHxW tensor, transform).

    The box is expanded (never shrunk) to the output aspect ratio around its
    center, then resampled bilinearly; pixels outside the source are zero.
    """
    out_h, out_w = out_hw
    cx, cy, w, h = _expand_to_aspect(bbox, out_h, out_w)
    scale = out_h / h
    x0, y0 = cx - w / 2.0, cy - h / 2.0
    matrix = np.array([[scale, 0.0, -scale * x0], [0.0, scale, -scale * y0]], dtype=np.float64)
    inverse = np.array([[1.0 / scale, 0.0, x0], [0.0, 1.0 / scale, y0]], dtype=np.float64)
    transform = CropTransform(matrix=matrix, inverse=inverse)

    src = np.asarray(image)
    if src.ndim == 2:
        src = np.repeat(src[:, :, None], 3, axis=2)
    if src.dtype == np.uint8:
        src = src.astype(np.float32) / 255.0
    else:
        src = src.astype(np.float32)
    xs = np.arange(out_w, dtype=np.float64)
    ys = np.arange(out_h, dtype=np.float64)
    grid_x, grid_y = np.meshgrid(xs, ys)
    source_pts = transform.apply_inverse(np.stack([grid_x.reshape(-1), grid_y.reshape(-1)], axis=1))
    sx = source_pts[:, 0].reshape(out_h, out_w)
    sy = source_pts[:, 1].reshape(out_h, out_w)
    sampled = _bilinear_sample(src, sx, sy)
    return Tensor(np.transpose(sampled, (2, 0, 1)).copy()), transform


def gaussian_targets(
    keypoints: np.ndarray,
    sigma: float = 2.0,
    grid_hw: tuple = (64, 48),
    stride: int = HEATMAP_STRIDE,
):
    """Per-keypoint unnormalized Gaussians (peak value 1) on the output grid.

    Keypoints are (N_k, 3) in model-input coordinates.  Unlabeled (v = 0)
    and out-of-grid keypoints produce a zero map and a zero mask entry.
    """
    gh, gw = grid_hw
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    n = kp.shape[0]
    maps = np.zeros((n, gh, gw), dtype=np.float32)
    mask = np.zeros(n, dtype=np.float32)
    ys = np.arange(gh, dtype=np.float64)[:, None]
    xs = np.arange(gw, dtype=np.float64)[None, :]
    for i, (x, y, v) in enumerate(kp):
        if v <= 0:
            continue
        gx = (x + 0.5) / stride - 0.5
        gy = (y + 0.5) / stride - 0.5
        if not (0 <= gx <= gw - 1 and 0 <= gy <= gh - 1):
            continue
        maps[i] = np.exp(-((xs - gx) ** 2 + (ys - gy) ** 2) / (2.0 * sigma * sigma))
        mask[i] = 1.0
    return Heatmaps(Tensor(maps)), mask


def heatmaps_to_keypoints(heatmaps, transform: CropTransform | None = None, stride: int = HEATMAP_STRIDE):
    """Decode per-channel peaks to (x, y, score) rows in source coordinates.

    Flat argmax (lowest index wins ties), quarter-pixel shift toward the
    larger adjacent neighbor per axis, then the inverse crop transform.  An
    all-equal map decodes to the grid center with a degenerate score of 0.
    Scores are the raw peak values clamped to [0, 1]; clamping never moves
    the localization.
    """
    arr = heatmaps.array if isinstance(heatmaps, Heatmaps) else np.asarray(heatmaps)
    if not np.isfinite(arr).all():
        raise ValueError("heatmaps contain non-finite values")
    n, gh, gw = arr.shape
    out = np.zeros((n, 3), dtype=np.float64)
    for i in range(n):
        hm = arr[i]
        if hm.max() == hm.min():
            gx, gy = (gw - 1) / 2.0, (gh - 1) / 2.0
            score = 0.0
        else:
            flat = int(np.argmax(hm))
            iy, ix = divmod(flat, gw)
            gx, gy = float(ix), float(iy)
            if 0 < ix < gw - 1:
                gx += 0.25 * np.sign(hm[iy, ix + 1] - hm[iy, ix - 1])
            if 0 < iy < gh - 1:
                gy += 0.25 * np.sign(hm[iy + 1, ix] - hm[iy - 1, ix])
            score = float(np.clip(hm[iy, ix], 0.0, 1.0))
        x_in = (gx + 0.5) * stride - 0.5
        y_in = (gy + 0.5) * stride - 0.5
        if transform is not None:
            src = transform.apply_inverse(np.array([[x_in, y_in]]))[0]
            out[i] = (src[0], src[1], score)
        else:
            out[i] = (x_in, y_in, score)
    return out
