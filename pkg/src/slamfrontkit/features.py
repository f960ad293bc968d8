"""Built-in corner detector, patch descriptor, and feature file IO.

The detector scores pixels with the minimum eigenvalue of the 2x2
structure tensor accumulated over a 3x3 window of Sobel gradients, then
keeps local maxima through a 3-pixel greedy non-maximum suppression.
Descriptors are 8x8 mean-subtracted, L2-normalized intensity patches
(64-dimensional).

Feature files (.lsft) are little-endian throughout:

    header   : magic "LSFT", u32 version (=1), u32 frame_count, u32 dim
    per frame: u32 count
               count * (f32 x, f32 y, u8 level, f32 response)   13 B each
               count * dim * f32 descriptors, row-major
"""
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import _kernels
from .core import FeatureSet, Keypoint
from .errors import (
    BadMagicError,
    DimensionMismatchError,
    FrameOutOfRangeError,
    ParseError,
    TruncatedFileError,
    VersionMismatchError,
)

MAGIC = b"LSFT"
VERSION = 1
DESCRIPTOR_DIMS = (64, 128, 256)
BUILTIN_DIM = 64

_KP_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("level", "u1"), ("response", "<f4")])
assert _KP_DTYPE.itemsize == 13


class DetectorInterface(Protocol):
    """Behavioral contract used by the pyramid's multiscale detection."""

    def detect(self, image, max_points):
        """Return at most max_points of (x, y, response), level coords."""
        ...

    def describe(self, image, points):
        """Return a (len(points), D) float32 matrix of unit-norm rows."""
        ...


def sobel_gradients(data):
    """Horizontal and vertical Sobel responses with edge replication."""
    d = np.asarray(data, dtype=np.float64)
    p = np.pad(d, 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    gx = dx[:-2, :] + 2.0 * dx[1:-1, :] + dx[2:, :]
    dy = p[2:, :] - p[:-2, :]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return gx, gy


def corner_response(data):
    """Min-eigenvalue corner score of the 3x3-window structure tensor."""
    gx, gy = sobel_gradients(data)

    def box3(a):
        p = np.pad(a, 1, mode="edge")
        return (
            p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
            + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
            + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]
        )

    sxx = box3(gx * gx)
    syy = box3(gy * gy)
    sxy = box3(gx * gy)
    tr = sxx + syy
    det_term = np.sqrt((sxx - syy) ** 2 + 4.0 * sxy ** 2)
    return np.maximum(0.5 * (tr - det_term), 0.0)


_EARLIER = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
_LATER = ((0, 1), (1, -1), (1, 0), (1, 1))


def builtin_detect(image, max_points):
    """Detect up to max_points corners, strongest first.

    Candidates are 8-neighborhood local maxima of the corner score
    (plateaus keep their first pixel in raster order); the greedy
    suppression then drops any candidate within 3 pixels of a stronger
    kept one. Returns a list of (x, y, response) with response > 0,
    ordered by response descending, ties by (y, x).
    """
    if max_points <= 0:
        return []
    resp = corner_response(image.data)
    p = np.pad(resp, 1, mode="constant", constant_values=-1.0)
    h, w = resp.shape

    def shifted(dy, dx):
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    mask = resp > 0.0
    for dy, dx in _EARLIER:
        mask &= resp > shifted(dy, dx)
    for dy, dx in _LATER:
        mask &= resp >= shifted(dy, dx)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return []
    scores = resp[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    xs = xs[order].astype(np.float64)
    ys = ys[order].astype(np.float64)
    scores = scores[order]
    keep = _kernels.greedy_nms(xs, ys, 3.0, int(max_points))
    return [(float(xs[i]), float(ys[i]), float(scores[i])) for i in np.nonzero(keep)[0]]


def builtin_describe(image, points):
    """8x8 mean-subtracted, unit-norm patches around each point.

    The window spans rows [y-3, y+4] and columns [x-3, x+4] (nearest-pixel
    anchor), zero-padded outside the image. A constant patch has no
    appearance to encode; such rows degenerate to the canonical first
    basis vector, which doubles as the caller-visible flag.
    """
    d = np.asarray(image.data, dtype=np.float64)
    padded = np.pad(d, ((3, 4), (3, 4)), mode="constant")
    out = np.empty((len(points), BUILTIN_DIM), dtype=np.float32)
    for i, pt in enumerate(points):
        x = int(round(float(pt[0])))
        y = int(round(float(pt[1])))
        patch = padded[y:y + 8, x:x + 8].ravel()
        centered = patch - patch.mean()
        norm = np.linalg.norm(centered)
        if norm <= 1e-12 * (1.0 + abs(patch.mean())):
            row = np.zeros(BUILTIN_DIM)
            row[0] = 1.0
        else:
            row = centered / norm
        out[i] = row.astype(np.float32)
    return out


class BuiltinDetector:
    """Default DetectorInterface implementation."""

    def detect(self, image, max_points):
        return builtin_detect(image, max_points)

    def describe(self, image, points):
        return builtin_describe(image, points)


@dataclass(frozen=True)
class FeatureFileHeader:
    version: int
    frame_count: int
    descriptor_dim: int

    def pack(self):
        return MAGIC + struct.pack("<III", self.version, self.frame_count, self.descriptor_dim)


def _atomic_write(path, payload):
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


def save_features(path, feature_sets):
    """Write a sequence of FeatureSets as one .lsft file (atomically)."""
    sets = list(feature_sets)
    if not sets:
        raise ValueError("cannot save an empty sequence of feature sets")
    dim = sets[0].descriptor_dim
    for i, fs in enumerate(sets):
        if fs.descriptor_dim != dim:
            raise DimensionMismatchError(
                f"frame {i} has descriptor dim {fs.descriptor_dim}, expected {dim}"
            )
    if dim not in DESCRIPTOR_DIMS:
        raise ValueError(f"descriptor dim {dim} not in {DESCRIPTOR_DIMS}")
    chunks = [FeatureFileHeader(VERSION, len(sets), dim).pack()]
    for fs in sets:
        chunks.append(struct.pack("<I", len(fs)))
        recs = np.empty(len(fs), dtype=_KP_DTYPE)
        for j, kp in enumerate(fs.keypoints):
            if not (0 <= kp.level <= 255):
                raise ValueError(f"keypoint level {kp.level} does not fit in a byte")
            recs[j] = (kp.x, kp.y, kp.level, kp.response)
        chunks.append(recs.tobytes())
        chunks.append(np.ascontiguousarray(fs.descriptors, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(chunks))


def read_feature_header(path):
    with open(path, "rb") as f:
        head = f.read(16)
    if len(head) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the magic")
    if head[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, got {head[:4]!r}")
    if len(head) < 16:
        raise TruncatedFileError(f"{path}: header truncated at {len(head)} bytes")
    version, frame_count, dim = struct.unpack("<III", head[4:16])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, this reader supports {VERSION}")
    if dim not in DESCRIPTOR_DIMS:
        raise ParseError(f"{path}: descriptor dim {dim} not in {DESCRIPTOR_DIMS}")
    return FeatureFileHeader(version, frame_count, dim)


def load_features(path, frame_index):
    """Load one frame's FeatureSet from a .lsft file.

    Descriptors are re-normalized (with a warning) if any stored row's
    norm deviates from 1 by more than 1e-3; otherwise the stored values
    pass through bit-exactly. A truncated file raises before any partial
    set is constructed.
    """
    header = read_feature_header(path)
    if not (0 <= frame_index < header.frame_count):
        raise FrameOutOfRangeError(
            f"{path}: frame {frame_index} outside [0, {header.frame_count})"
        )
    dim = header.descriptor_dim
    with open(path, "rb") as f:
        f.seek(16)
        for fi in range(frame_index + 1):
            raw = f.read(4)
            if len(raw) < 4:
                raise TruncatedFileError(f"{path}: frame {fi} count field truncated")
            count = struct.unpack("<I", raw)[0]
            body_len = count * _KP_DTYPE.itemsize + count * dim * 4
            body = f.read(body_len)
            if len(body) < body_len:
                raise TruncatedFileError(
                    f"{path}: frame {fi} body truncated ({len(body)} of {body_len} bytes)"
                )
        recs = np.frombuffer(body[:count * _KP_DTYPE.itemsize], dtype=_KP_DTYPE)
        desc = np.frombuffer(body[count * _KP_DTYPE.itemsize:], dtype="<f4")
        desc = desc.reshape(count, dim).astype(np.float32)

    if count > 0:
        norms = np.linalg.norm(desc.astype(np.float64), axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-3:
            bad = int(np.sum(np.abs(norms - 1.0) > 1e-3))
            warnings.warn(
                f"{path}: re-normalized descriptors ({bad} rows deviated by > 1e-3)",
                stacklevel=2,
            )
            safe = np.where(norms > 1e-12, norms, 1.0)
            desc = (desc.astype(np.float64) / safe[:, None]).astype(np.float32)
            dead = norms <= 1e-12
            if np.any(dead):
                desc[dead] = 0.0
                desc[dead, 0] = 1.0
    kps = tuple(
        Keypoint(float(r["x"]), float(r["y"]), level=int(r["level"]), response=float(r["response"]))
        for r in recs
    )
    return FeatureSet(keypoints=kps, descriptors=desc)
