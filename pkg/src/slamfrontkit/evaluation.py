"""Trajectory files and absolute trajectory error.

Estimates are stored in the timestamped text format
``t tx ty tz qx qy qz qw`` (one pose per line, '#' comments allowed);
references may also come as 12-value row-major 3x4 matrices per line, in
which case timestamps are synthesized at 10 Hz. ATE associates poses by
nearest timestamp, optionally aligns with a closed-form similarity fit,
and reports translation error statistics over the matched pairs.
"""
import math
import os
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

from .core import PoseSE3
from .errors import (
    DegenerateGeometryError,
    NonFiniteValueError,
    NoOverlapError,
    ParseError,
)


@dataclass(frozen=True)
class Trajectory:
    """Timestamped world-from-camera poses, timestamps strictly increasing."""

    entries: tuple

    def __post_init__(self):
        entries = tuple((float(t), p) for t, p in self.entries)
        if not entries:
            raise ValueError("trajectory must contain at least one pose")
        times = [t for t, _ in entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def timestamps(self):
        return np.array([t for t, _ in self.entries])

    def positions(self):
        return np.array([p.translation for _, p in self.entries])


def associate_by_time(est, ref, max_dt=0.02):
    """Greedy nearest-timestamp pairing, smallest |dt| first, one-to-one.

    Pairs that would cross an already accepted pair (breaking index
    monotonicity) are dropped. Raises NoOverlapError when nothing pairs
    within max_dt.
    """
    ta = est.timestamps()
    tb = ref.timestamps()
    candidates = []
    for i, t in enumerate(ta):
        j0 = int(np.searchsorted(tb, t - max_dt, side="left"))
        j1 = int(np.searchsorted(tb, t + max_dt, side="right"))
        for j in range(j0, j1):
            candidates.append((abs(t - tb[j]), i, j))
    candidates.sort()
    used_i = set()
    used_j = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    pairs.sort()
    monotone = []
    last_j = -1
    for i, j in pairs:
        if j > last_j:
            monotone.append((i, j))
            last_j = j
    if not monotone:
        raise NoOverlapError(f"no timestamp pairs within {max_dt}s")
    return monotone


def align_umeyama(source, target, with_scale=False):
    """Least-squares similarity fit: argmin sum ||s*R*p + t - q||^2.

    Returns (R, t, s); s is fixed to 1 unless with_scale. Raises
    DegenerateGeometryError for fewer than 3 points or point sets too
    flat to determine a rotation (coincident or collinear).
    """
    p = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError(f"point sets differ in shape: {p.shape} vs {q.shape}")
    n = p.shape[0]
    if n < 3:
        raise DegenerateGeometryError(f"alignment needs at least 3 points, got {n}")
    mu_p = p.mean(axis=0)
    mu_q = q.mean(axis=0)
    pc = p - mu_p
    qc = q - mu_q
    cov = qc.T @ pc / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= max(d[0], 1e-300) * 1e-9:
        raise DegenerateGeometryError(
            "points are coincident or collinear; rotation is not determined"
        )
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    if with_scale:
        var_p = float(np.mean(np.sum(pc * pc, axis=1)))
        scale = float(np.trace(np.diag(d) @ s_fix)) / var_p
    else:
        scale = 1.0
    t = mu_q - scale * rot @ mu_p
    return rot, t, scale


@dataclass(frozen=True)
class AteReport:
    rmse: float
    mean: float
    median: float
    max: float
    matched_pairs: int
    aligned: bool
    scale: float
    alignment: PoseSE3

    def to_dict(self):
        out = {
            "rmse": self.rmse,
            "mean": self.mean,
            "median": self.median,
            "max": self.max,
            "pairs": self.matched_pairs,
            "aligned": self.aligned,
        }
        if self.scale != 1.0:
            out["scale"] = self.scale
        return out


def ate_rmse(est, ref, align=True, with_scale=False, max_dt=0.02):
    """Absolute trajectory error between two trajectories.

    Pairs poses by timestamp, optionally aligns est onto ref (similarity
    fit over the paired translations), and reports rmse/mean/median/max
    of the pairwise translation distances.
    """
    pairs = associate_by_time(est, ref, max_dt=max_dt)
    if len(pairs) < 2 or (align and len(pairs) < 3):
        raise NoOverlapError(
            f"only {len(pairs)} matched pair(s); need at least {'3' if align else '2'}"
        )
    p = est.positions()[[i for i, _ in pairs]]
    q = ref.positions()[[j for _, j in pairs]]
    if align:
        rot, t, scale = align_umeyama(p, q, with_scale=with_scale)
        p = (scale * (rot @ p.T)).T + t
        alignment = PoseSE3(rot, t)
    else:
        scale = 1.0
        alignment = PoseSE3.identity()
    err = np.linalg.norm(p - q, axis=1)
    return AteReport(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mean=float(np.mean(err)),
        median=float(np.median(err)),
        max=float(np.max(err)),
        matched_pairs=len(pairs),
        aligned=bool(align),
        scale=float(scale),
        alignment=alignment,
    )


def quaternion_to_rotation(qx, qy, qz, qw):
    """Unit quaternion (x, y, z, w) to a rotation matrix."""
    n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
        [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
        [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
    ])


def rotation_to_quaternion(r):
    """Rotation matrix to (qx, qy, qz, qw) with qw >= 0 for determinism."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        qw = 0.25 * s
        qx = (r[2, 1] - r[1, 2]) / s
        qy = (r[0, 2] - r[2, 0]) / s
        qz = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        qw = (r[2, 1] - r[1, 2]) / s
        qx = 0.25 * s
        qy = (r[0, 1] + r[1, 0]) / s
        qz = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        qw = (r[0, 2] - r[2, 0]) / s
        qx = (r[0, 1] + r[1, 0]) / s
        qy = 0.25 * s
        qz = (r[1, 2] + r[2, 1]) / s
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        qw = (r[1, 0] - r[0, 1]) / s
        qx = (r[0, 2] + r[2, 0]) / s
        qy = (r[1, 2] + r[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def _parse_floats(parts, path, lineno):
    try:
        vals = [float(v) for v in parts]
    except ValueError as exc:
        raise ParseError(f"{path}:{lineno}: non-numeric field ({exc})") from exc
    if not all(math.isfinite(v) for v in vals):
        raise NonFiniteValueError(f"{path}:{lineno}: non-finite value")
    return vals


def read_trajectory_tum(path):
    """Parse a timestamped trajectory file.

    Each data line needs exactly 8 fields. Quaternions are normalized on
    read; a deviation beyond 1e-3 from unit norm additionally warns.
    """
    entries = []
    prev_t = None
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 8:
                raise ParseError(
                    f"{path}:{lineno}: expected 8 fields, got {len(parts)}"
                )
            t, tx, ty, tz, qx, qy, qz, qw = _parse_floats(parts, path, lineno)
            qn = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
            if qn <= 1e-12:
                raise ParseError(f"{path}:{lineno}: zero-norm quaternion")
            if abs(qn - 1.0) > 1e-3:
                warnings.warn(
                    f"{path}:{lineno}: quaternion norm {qn:.6f}, re-normalizing",
                    stacklevel=2,
                )
            if prev_t is not None and t <= prev_t:
                raise ParseError(
                    f"{path}:{lineno}: timestamp {t} not after {prev_t}"
                )
            prev_t = t
            rot = quaternion_to_rotation(qx, qy, qz, qw)
            entries.append((t, PoseSE3(rot, np.array([tx, ty, tz]))))
    if not entries:
        raise ParseError(f"{path}: no poses found")
    return Trajectory(entries=tuple(entries))


def _atomic_text(path, text):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trajectory_tum(path, trajectory):
    """Write atomically, 9 decimal places throughout."""
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for t, pose in trajectory.entries:
        q = rotation_to_quaternion(pose.rotation)
        tx, ty, tz = pose.translation
        lines.append(
            f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} "
            f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"
        )
    _atomic_text(path, "\n".join(lines) + "\n")


def read_trajectory_kitti(path, dt=0.1):
    """Parse 12-value 3x4 row-major pose lines; timestamps are k*dt.

    Rotation blocks more than 1e-6 from orthonormal are re-orthonormalized
    via SVD.
    """
    entries = []
    index = 0
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 12:
                raise ParseError(
                    f"{path}:{lineno}: expected 12 fields, got {len(parts)}"
                )
            vals = _parse_floats(parts, path, lineno)
            m = np.array(vals).reshape(3, 4)
            rot = m[:, :3]
            if np.linalg.norm(rot.T @ rot - np.eye(3)) > 1e-6:
                u, _, vt = np.linalg.svd(rot)
                fix = np.eye(3)
                if np.linalg.det(u) * np.linalg.det(vt) < 0:
                    fix[2, 2] = -1.0
                rot = u @ fix @ vt
            entries.append((index * dt, PoseSE3(rot, m[:, 3])))
            index += 1
    if not entries:
        raise ParseError(f"{path}: no poses found")
    return Trajectory(entries=tuple(entries))
