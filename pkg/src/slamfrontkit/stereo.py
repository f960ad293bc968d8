"""Gradient-based block matching with semi-global aggregation.

Pipeline: Sobel gradient magnitude on both rectified images, a
window-summed absolute-difference cost volume over a disparity range,
path-wise cost aggregation along 4 or 8 canonical directions, then a
winner-takes-all disparity pick and pinhole depth conversion
z = fx * baseline / d.
"""
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import GrayImage
from .errors import NonPositiveDepthError, SizeMismatchError
from .features import sobel_gradients

INVALID_DISPARITY = -1

# direction order: →, ←, ↓, ↑, then the four diagonals
_DIRECTIONS_8 = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1))


@dataclass(frozen=True)
class SgmConfig:
    """Disparity search range, window size, and smoothness penalties.

    p1/p2 default to 8 and 32 times the window area, matching the scale
    of window-summed absolute gradient differences. disparity_sign picks
    which way the right image is sampled: -1 means column x - d (the
    usual rectified layout where the right view shifts content left).
    """

    d_min: int = 0
    d_max: int = 127
    window_radius: int = 2
    p1: float = None
    p2: float = None
    directions: int = 8
    disparity_sign: int = -1

    def __post_init__(self):
        if self.d_min < 0 or self.d_max <= self.d_min:
            raise ValueError(f"need 0 <= d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.window_radius < 0:
            raise ValueError(f"window_radius must be >= 0, got {self.window_radius}")
        area = (2 * self.window_radius + 1) ** 2
        if self.p1 is None:
            object.__setattr__(self, "p1", 8.0 * area)
        if self.p2 is None:
            object.__setattr__(self, "p2", 32.0 * area)
        if not (0 < self.p1 <= self.p2):
            raise ValueError(f"penalties must satisfy 0 < p1 <= p2, got {self.p1}, {self.p2}")
        if self.directions not in (4, 8):
            raise ValueError(f"directions must be 4 or 8, got {self.directions}")
        if self.disparity_sign not in (-1, 1):
            raise ValueError(f"disparity_sign must be -1 or 1, got {self.disparity_sign}")

    @property
    def disparity_count(self):
        return self.d_max - self.d_min + 1


@dataclass(frozen=True)
class CostVolume:
    """(H, W, D) float32 stack, one slice per disparity hypothesis."""

    costs: np.ndarray
    d_min: int

    def __post_init__(self):
        c = np.asarray(self.costs, dtype=np.float32)
        if c.ndim != 3:
            raise ValueError(f"cost volume must be 3-D, got shape {c.shape}")
        object.__setattr__(self, "costs", c)

    @property
    def height(self):
        return self.costs.shape[0]

    @property
    def width(self):
        return self.costs.shape[1]

    @property
    def disparity_count(self):
        return self.costs.shape[2]


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth in meters; NaN marks invalid pixels."""

    depth: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {d.shape}")
        object.__setattr__(self, "depth", d)

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    def valid_mask(self):
        return np.isfinite(self.depth) & (self.depth > 0)


def gradient_magnitude(image):
    """L1 Sobel magnitude |Gx| + |Gy| with edge-replicated borders."""
    gx, gy = sobel_gradients(image.data)
    return np.abs(gx) + np.abs(gy)


def matching_cost(grad_left, grad_right, config):
    """Window-summed |grad_l - grad_r| cost volume.

    For disparity d the right image is sampled at x + disparity_sign * d.
    Pixels whose center sample falls outside the image get a sentinel
    strictly larger than any achievable window cost, so any in-range
    hypothesis beats them.
    """
    gl = np.asarray(grad_left, dtype=np.float64)
    gr = np.asarray(grad_right, dtype=np.float64)
    if gl.shape != gr.shape:
        raise SizeMismatchError(f"gradient shapes differ: {gl.shape} vs {gr.shape}")
    if gl.ndim != 2:
        raise ValueError(f"gradient fields must be 2-D, got {gl.shape}")
    h, w = gl.shape
    n = config.window_radius
    area = (2 * n + 1) ** 2
    lo = min(gl.min(), gr.min()) if gl.size else 0.0
    hi = max(gl.max(), gr.max()) if gl.size else 0.0
    sentinel = np.float32(area * (hi - lo) + 1.0)
    gl_pad = np.pad(gl, n, mode="edge").astype(np.float32)
    gr_pad = np.pad(gr, n, mode="edge").astype(np.float32)
    out = np.empty((h, w, config.disparity_count), dtype=np.float32)
    _kernels.sad_cost_volume(
        gl_pad, gr_pad, n, config.d_min, config.disparity_count,
        config.disparity_sign, sentinel, out,
    )
    return CostVolume(costs=out, d_min=config.d_min)


def aggregate_costs(volume, config):
    """Sum of per-direction path costs s(x, d) = sum_r L_r(x, d).

    Each direction's recursion subtracts the previous pixel's minimum, so
    aggregated values stay bounded; directions are accumulated in a fixed
    order and each path writes a disjoint pixel set, making the result
    identical for any thread count.
    """
    agg = np.zeros_like(volume.costs)
    for dx, dy in _DIRECTIONS_8[:config.directions]:
        _kernels.sgm_aggregate_dir(
            volume.costs, agg, dx, dy, np.float32(config.p1), np.float32(config.p2)
        )
    return CostVolume(costs=agg, d_min=volume.d_min)


def select_disparity(volume, config):
    """Winner-takes-all disparity map (int32), ties to the smaller d.

    A pixel is marked INVALID_DISPARITY when its winning hypothesis has
    no geometrically valid right-image sample, which is where the cost
    construction placed the out-of-bounds sentinel.
    """
    best = np.argmin(volume.costs, axis=2).astype(np.int32)
    disp = best + volume.d_min
    h, w, _ = volume.costs.shape
    xs = np.arange(w)[None, :]
    sample = xs + config.disparity_sign * disp
    invalid = (sample < 0) | (sample >= w)
    disp[invalid] = INVALID_DISPARITY
    return disp


def disparity_to_depth(disparity, rig):
    """z = fx * baseline / d; d <= 0 or the invalid marker give NaN."""
    d = np.asarray(disparity, dtype=np.float64)
    valid = d > 0
    safe = np.where(valid, d, 1.0)
    z = rig.intrinsics.fx * rig.baseline / safe
    z[~valid] = np.nan
    return DepthMap(depth=z)


def compute_depth(left, right, rig, config):
    """Full stereo pipeline from a rectified image pair to a DepthMap."""
    if (left.width, left.height) != (right.width, right.height):
        raise SizeMismatchError(
            f"stereo pair sizes differ: {left.width}x{left.height} "
            f"vs {right.width}x{right.height}"
        )
    gl = gradient_magnitude(left)
    gr = gradient_magnitude(right)
    vol = matching_cost(gl, gr, config)
    agg = aggregate_costs(vol, config)
    disp = select_disparity(agg, config)
    return disparity_to_depth(disp, rig)


def keypoint_depths(features, depth_map):
    """Bilinear depth sample at each keypoint; NaN where unreliable.

    The four surrounding pixels (clamped at the border) vote: with fewer
    than 3 valid neighbors the sample is invalid, otherwise the bilinear
    weights are renormalized over the valid ones.
    """
    d = depth_map.depth
    h, w = d.shape
    valid = depth_map.valid_mask()
    out = np.full(len(features), np.nan)
    for i, kp in enumerate(features.keypoints):
        if not (0 <= kp.x <= w - 1 and 0 <= kp.y <= h - 1):
            continue
        x0 = int(np.floor(kp.x))
        y0 = int(np.floor(kp.y))
        x1 = min(x0 + 1, w - 1)
        y1 = min(y0 + 1, h - 1)
        fx = kp.x - x0
        fy = kp.y - y0
        corners = ((y0, x0), (y0, x1), (y1, x0), (y1, x1))
        weights = (
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        )
        flags = [valid[cy, cx] for cy, cx in corners]
        if sum(flags) < 3:
            continue
        wsum = sum(wt for wt, ok in zip(weights, flags) if ok)
        if wsum <= 0:
            continue
        out[i] = sum(
            wt * d[cy, cx] for (cy, cx), wt, ok in zip(corners, weights, flags) if ok
        ) / wsum
    return out


def backproject(u, v, z, k):
    """Pixel plus depth to a camera-frame 3D point."""
    if not z > 0:
        raise NonPositiveDepthError(f"depth must be positive, got {z}")
    return np.array([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z])


def _atomic_bytes(path, payload):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_disparity_pgm(path, disparity):
    """Debug dump: disparity * 256 as a 16-bit binary PGM (big-endian
    samples per the format); invalid pixels write 0."""
    d = np.asarray(disparity, dtype=np.float64)
    scaled = np.clip(np.where(d > 0, d * 256.0, 0.0), 0, 65535).astype(">u2")
    header = f"P5\n{d.shape[1]} {d.shape[0]}\n65535\n".encode("ascii")
    _atomic_bytes(path, header + scaled.tobytes())


def save_depth_raw(path, depth_map):
    """Debug dump: row-major little-endian float32 plus a JSON sidecar."""
    payload = np.ascontiguousarray(depth_map.depth, dtype="<f4").tobytes()
    _atomic_bytes(path, payload)
    sidecar = {
        "width": depth_map.width,
        "height": depth_map.height,
        "dtype": "float32-le",
        "units": "meters",
    }
    _atomic_bytes(path + ".json", (json.dumps(sidecar, indent=2) + "\n").encode("ascii"))
