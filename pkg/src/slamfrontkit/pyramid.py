"""Image pyramid construction and per-level keypoint budgeting.

Levels shrink geometrically by a factor 1/lambda. The total pyramid area
has the closed form S = W*H*(1 - (1/lambda)^n)/(1 - 1/lambda), and the
per-level feature budget allocates a global budget N proportionally to
level area:

    N_alpha = N * (1 - 1/lambda) / (1 - (1/lambda)^n) * (1/lambda)^alpha

Budgets are rounded with the largest-remainder method so they always sum
to exactly N.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import FeatureSet, GrayImage, Keypoint
from .errors import DetectionError, ImageTooSmallError


@dataclass(frozen=True)
class PyramidConfig:
    """Pyramid shape and detection budget.

    scale_factor: per-level downscale ratio lambda (> 1)
    levels: number of levels n (level 0 is the full-resolution input)
    total_features: global keypoint budget N across all levels
    nms_radius: suppression radius in base-image pixels
    """

    scale_factor: float = 1.2
    levels: int = 8
    total_features: int = 1000
    nms_radius: float = 4.0

    def __post_init__(self):
        if not (self.scale_factor > 1.0):
            raise ValueError(f"scale_factor must be > 1, got {self.scale_factor}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.total_features < self.levels:
            raise ValueError(
                f"total_features ({self.total_features}) must be >= levels ({self.levels})"
            )
        if self.nms_radius < 0:
            raise ValueError(f"nms_radius must be >= 0, got {self.nms_radius}")


@dataclass(frozen=True)
class ImagePyramid:
    levels: tuple
    scale_factor: float

    def __len__(self):
        return len(self.levels)


def level_dims(width, height, scale_factor, alpha):
    """Integer dimensions of level alpha: round(dim * (1/lambda)^alpha)."""
    r = (1.0 / scale_factor) ** alpha
    return int(round(width * r)), int(round(height * r))


def _resample_bilinear(data, out_w, out_h):
    """Center-aligned bilinear resample with edge clamping.

    Every level is sampled directly from the base image rather than from
    the previous level, so no blur accumulates down the pyramid.
    """
    in_h, in_w = data.shape
    sx = in_w / out_w
    sy = in_h / out_h
    xs = (np.arange(out_w) + 0.5) * sx - 0.5
    ys = (np.arange(out_h) + 0.5) * sy - 0.5
    xs = np.clip(xs, 0.0, in_w - 1.0)
    ys = np.clip(ys, 0.0, in_h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    wx = xs - x0
    wy = ys - y0
    top = data[y0][:, x0] * (1.0 - wx) + data[y0][:, x1] * wx
    bot = data[y1][:, x0] * (1.0 - wx) + data[y1][:, x1] * wx
    return top * (1.0 - wy[:, None]) + bot * wy[:, None]


def build_pyramid(image, config):
    """Build the n-level pyramid. Level 0 is the unmodified input.

    Raises ImageTooSmallError if any level would shrink below 3x3.
    """
    w, h = image.width, image.height
    levels = [image]
    for alpha in range(1, config.levels):
        lw, lh = level_dims(w, h, config.scale_factor, alpha)
        if lw < 3 or lh < 3:
            raise ImageTooSmallError(
                f"level {alpha} would be {lw}x{lh}; every level must be at least 3x3"
            )
        levels.append(GrayImage(_resample_bilinear(image.data, lw, lh), scale=image.scale))
    # n = 1 still needs the base image to be usable
    if w < 3 or h < 3:
        raise ImageTooSmallError(f"input is {w}x{h}; must be at least 3x3")
    return ImagePyramid(levels=tuple(levels), scale_factor=config.scale_factor)


def pyramid_area(width, height, scale_factor, levels):
    """Closed-form total area S = W*H*(1 - (1/lambda)^n)/(1 - 1/lambda)."""
    q = 1.0 / scale_factor
    return width * height * (1.0 - q ** levels) / (1.0 - q)


def level_budgets(config):
    """Per-level keypoint budgets, largest-remainder rounded to sum to N.

    The real-valued allocation is proportional to level area, i.e. a
    geometric series in (1/lambda)^alpha. Floors are taken first and the
    leftover units go to the largest fractional parts (ties to the lower
    level index, which also keeps the sequence non-increasing).
    """
    n = config.levels
    total = config.total_features
    q = 1.0 / config.scale_factor
    scale = total * (1.0 - q) / (1.0 - q ** n) if n > 1 else float(total)
    real = [scale * q ** alpha for alpha in range(n)]
    floors = [math.floor(v) for v in real]
    leftover = total - sum(floors)
    fracs = sorted(range(n), key=lambda a: (-(real[a] - floors[a]), a))
    budgets = list(floors)
    for a in fracs[:leftover]:
        budgets[a] += 1
    return budgets


def _nms_order(keypoints):
    """Priority order for greedy suppression: response desc, then level
    asc, then (y, x). Deterministic for any input order."""
    resp = np.array([k.response for k in keypoints])
    lvl = np.array([k.level for k in keypoints])
    ys = np.array([k.y for k in keypoints])
    xs = np.array([k.x for k in keypoints])
    return np.lexsort((xs, ys, lvl, -resp))


def _greedy_keep(keypoints, radius, max_keep=None):
    """Indices (into `keypoints`) kept by greedy radius suppression."""
    if not keypoints:
        return []
    order = _nms_order(keypoints)
    xs = np.array([keypoints[i].x for i in order], dtype=np.float64)
    ys = np.array([keypoints[i].y for i in order], dtype=np.float64)
    cap = len(keypoints) if max_keep is None else max_keep
    mask = _kernels.greedy_nms(xs, ys, float(radius), cap)
    return [int(order[i]) for i in range(len(order)) if mask[i]]


def cross_level_nms(benchmark, candidates, radius):
    """Deduplicate rescaled keypoints across levels.

    Level-0 points (`benchmark`) and coarser-level points (`candidates`)
    are pooled and suppressed greedily by response: a point survives only
    if no already-kept point lies within `radius` (base-image pixels,
    Euclidean, boundary-inclusive). Ties in response keep the lower level,
    then the smaller (y, x). Returns the kept keypoints; the result is a
    fixed point of the operation.
    """
    pool = list(benchmark) + list(candidates)
    kept = _greedy_keep(pool, radius)
    return [pool[i] for i in sorted(kept)]


def detect_multiscale(pyramid, config, detector, threads=1):
    """Detect and describe on every level, merge into one FeatureSet.

    Budgets follow level_budgets. Each level is detected and described at
    its own resolution; coordinates are then rescaled to the base image by
    lambda^alpha. Levels may run on a thread pool, but results are gathered
    in level order and sorted within a level, so the output is identical
    for any thread count. Cross-level duplicates are removed with
    cross_level_nms.
    """
    budgets = level_budgets(config)
    lam = config.scale_factor

    def run_level(alpha):
        img = pyramid.levels[alpha]
        try:
            pts = detector.detect(img, budgets[alpha])
            desc = detector.describe(img, pts)
        except Exception as exc:
            raise DetectionError(f"detector failed on level {alpha}: {exc}", alpha) from exc
        if len(pts) > budgets[alpha]:
            raise DetectionError(
                f"detector returned {len(pts)} points on level {alpha}, budget {budgets[alpha]}",
                alpha,
            )
        s = lam ** alpha
        kps = [Keypoint(x * s, y * s, level=alpha, response=float(r)) for x, y, r in pts]
        return kps, np.asarray(desc, dtype=np.float32)

    if threads > 1 and config.levels > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_level, range(config.levels)))
    else:
        results = [run_level(a) for a in range(config.levels)]

    all_kps = []
    all_desc = []
    for alpha, (kps, desc) in enumerate(results):
        if len(kps) == 0:
            continue
        order = np.lexsort((
            np.array([k.x for k in kps]),
            np.array([k.y for k in kps]),
            -np.array([k.response for k in kps]),
        ))
        all_kps.extend(kps[i] for i in order)
        all_desc.append(desc[order])
    if not all_kps:
        dim = 64
        return FeatureSet.empty(dim)
    desc_mat = np.concatenate(all_desc, axis=0)
    keep = sorted(_greedy_keep(all_kps, config.nms_radius))
    kept_kps = tuple(all_kps[i] for i in keep)
    kept_desc = desc_mat[keep]
    return FeatureSet(keypoints=kept_kps, descriptors=kept_desc)
