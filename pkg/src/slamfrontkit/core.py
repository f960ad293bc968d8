"""Shared geometric and image domain types.

Everything here is an immutable value type: arrays are copied on
construction and marked read-only, so instances can be shared freely
between worker threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepthError

# Canonical intensity scale chosen at image load time. Gradient and SGM
# penalty defaults assume this range.
INTENSITY_SCALE = 255.0

_ORTHO_TOL = 1e-9


def _frozen(a, dtype=np.float64):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GrayImage:
    """Single-channel image, row-major float intensities in [0, scale]."""

    data: np.ndarray
    scale: float = INTENSITY_SCALE

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"expected 2-D intensity array, got shape {d.shape}")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels (rectified, undistorted)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair: shared intrinsics plus baseline in meters."""

    intrinsics: CameraIntrinsics
    baseline: float

    def __post_init__(self):
        if not self.baseline > 0:
            raise ValueError(f"baseline must be positive, got {self.baseline}")


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform: x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return PoseSE3(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to one 3-vector or an (N, 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Rigid transform a∘b: apply b first, then a."""
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: PoseSE3) -> PoseSE3:
    rt = p.rotation.T
    return PoseSE3(rt, -rt @ p.translation)


def project(p, k: CameraIntrinsics) -> np.ndarray:
    """Project a camera-frame 3D point to pixel coordinates.

    Raises NonPositiveDepthError for points at or behind the camera plane.
    """
    x, y, z = np.asarray(p, dtype=np.float64).reshape(3)
    if z <= 0:
        raise NonPositiveDepthError(f"point depth must be positive, got z={z}")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy])


def project_points(points: np.ndarray, k: CameraIntrinsics):
    """Batched projection of (N, 3) camera-frame points.

    Returns (pixels (N, 2), valid (N,) bool); rows with z <= 0 are flagged
    invalid instead of raising, with pixel values unspecified.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)
    uv = np.empty((p.shape[0], 2))
    uv[:, 0] = k.fx * p[:, 0] / zs + k.cx
    uv[:, 1] = k.fy * p[:, 1] / zs + k.cy
    return uv, valid


@dataclass(frozen=True)
class Keypoint:
    """Detection in base-image coordinates.

    level is the pyramid layer the point was detected on; response is the
    detector score (>= 0).
    """

    x: float
    y: float
    level: int = 0
    response: float = 0.0


@dataclass(frozen=True)
class FeatureSet:
    """Keypoints plus row-aligned unit-norm descriptors for one frame."""

    keypoints: tuple
    descriptors: np.ndarray

    def __post_init__(self):
        kps = tuple(self.keypoints)
        d = np.asarray(self.descriptors, dtype=np.float32)
        if d.ndim != 2:
            raise ValueError(f"descriptors must be 2-D, got shape {d.shape}")
        if len(kps) != d.shape[0]:
            raise ValueError(f"{len(kps)} keypoints vs {d.shape[0]} descriptor rows")
        if d.shape[0] > 0:
            norms = np.linalg.norm(d.astype(np.float64), axis=1)
            # matches the widest drift the feature loader passes through
            if np.max(np.abs(norms - 1.0)) > 1e-3:
                raise ValueError("descriptors must be unit-norm")
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "descriptors", _frozen(d, dtype=np.float32))

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    def xy(self) -> np.ndarray:
        """(N, 2) array of base-image coordinates."""
        return np.array([(kp.x, kp.y) for kp in self.keypoints], dtype=np.float64).reshape(-1, 2)

    @staticmethod
    def empty(descriptor_dim: int) -> "FeatureSet":
        return FeatureSet((), np.zeros((0, descriptor_dim), dtype=np.float32))


@dataclass(frozen=True)
class Landmark:
    """3D map point with the descriptor it was spawned from."""

    position: np.ndarray
    descriptor: np.ndarray
    last_observed_frame: int

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        d = np.asarray(self.descriptor, dtype=np.float32).reshape(-1)
        n = float(np.linalg.norm(d.astype(np.float64)))
        if abs(n - 1.0) > 1e-3:
            raise ValueError(f"landmark descriptor norm {n} not unit")
        object.__setattr__(self, "position", _frozen(pos))
        object.__setattr__(self, "descriptor", _frozen(d, dtype=np.float32))
