"""Frame-to-map camera tracking.

Poses throughout this module are world-from-camera (the camera's pose in
the world frame), matching what the trajectory file stores. Pose
refinement internally optimizes the inverse, camera-from-world, with a
left-multiplicative se(3) update:

    T <- exp([rho, phi]) * T

and reprojection residuals r_i = project(T * p_i) - u_i under a Huber
robust weight. The Jacobian of the residual at the current estimate is
J_proj * [I | -hat(q)] with q the point in camera coordinates.
"""
import time
from dataclasses import dataclass, replace

import numpy as np

from .core import Landmark, PoseSE3, compose, invert, project_points
from .errors import (
    DivergedError,
    InsufficientCorrespondencesError,
    TrackingLostError,
)
from .matcher import match_descriptors
from .stereo import backproject


@dataclass(frozen=True)
class TrackerConfig:
    min_tracked_matches: int = 15
    keyframe_min_interval: int = 5
    keyframe_tracked_ratio: float = 0.9
    gn_max_iters: int = 20
    gn_tol: float = 1e-10
    huber_delta: float = 2.0
    search_radius: float = 25.0
    match_threshold: float = 0.2

    def __post_init__(self):
        if self.min_tracked_matches < 4:
            raise ValueError("min_tracked_matches must be at least 4")
        if self.keyframe_min_interval < 1:
            raise ValueError("keyframe_min_interval must be >= 1")
        if not (0.0 < self.keyframe_tracked_ratio < 1.0):
            raise ValueError("keyframe_tracked_ratio must be in (0, 1)")
        if self.gn_max_iters < 1 or self.gn_tol <= 0 or self.huber_delta <= 0:
            raise ValueError("gn_max_iters, gn_tol, huber_delta must be positive")
        if self.search_radius <= 0:
            raise ValueError("search_radius must be positive")


@dataclass(frozen=True)
class FrameInput:
    """Everything tracking needs about one frame, extraction already done.

    depths holds one entry per keypoint (meters, NaN where unknown);
    width/height bound the visibility test for keyframe decisions.
    """

    index: int
    timestamp: float
    features: object
    depths: np.ndarray
    width: int
    height: int


@dataclass(frozen=True)
class FrameState:
    index: int
    timestamp: float
    pose: PoseSE3
    features: object
    depths: np.ndarray


@dataclass
class LocalMap:
    """Landmarks plus the keyframe history; owned by the tracking loop."""

    landmarks: list
    keyframes: list

    @staticmethod
    def empty():
        return LocalMap(landmarks=[], keyframes=[])


def _hat(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def exp_so3(phi):
    """Rodrigues rotation from an axis-angle 3-vector."""
    phi = np.asarray(phi, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(phi)
    k = _hat(phi)
    if theta < 1e-8:
        # second-order Taylor keeps orthonormality to machine precision
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def exp_se3(xi):
    """SE(3) exponential of a twist [rho, phi]."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    k = _hat(phi)
    r = exp_so3(phi)
    if theta < 1e-8:
        v = np.eye(3) + 0.5 * k + (k @ k) / 6.0
    else:
        t2 = theta * theta
        v = (
            np.eye(3)
            + (1.0 - np.cos(theta)) / t2 * k
            + (theta - np.sin(theta)) / (t2 * theta) * (k @ k)
        )
    return PoseSE3(r, v @ rho)


def predict_pose(prev, prev_prev):
    """Constant-velocity extrapolation: (prev * prev_prev^-1) * prev."""
    delta = compose(prev, invert(prev_prev))
    return compose(delta, prev)


def reprojection_jacobian(camera_from_world, point_world, k):
    """d(residual)/d(twist) at the current estimate, a (2, 6) matrix.

    The twist is the left-multiplicative update [rho, phi] applied to the
    camera-from-world transform. Raises if the point is not in front of
    the camera.
    """
    q = camera_from_world.transform(np.asarray(point_world, dtype=np.float64))
    x, y, z = q
    if z <= 0:
        raise ValueError(f"point behind camera (z={z}); jacobian undefined")
    j_proj = np.array([
        [k.fx / z, 0.0, -k.fx * x / (z * z)],
        [0.0, k.fy / z, -k.fy * y / (z * z)],
    ])
    return j_proj @ np.hstack([np.eye(3), -_hat(q)])


def _huber_cost(err_norms, delta):
    small = err_norms <= delta
    out = np.where(small, 0.5 * err_norms ** 2, delta * (err_norms - 0.5 * delta))
    return float(np.sum(out))


def _orthonormalized(rot):
    """Nearest rotation matrix; keeps roundoff from feeding back through
    the constant-velocity prediction, where it compounds geometrically."""
    u, _, vt = np.linalg.svd(rot)
    fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        fix[2, 2] = -1.0
    return u @ fix @ vt


def refine_pose(initial, correspondences, k, config):
    """Motion-only Gauss-Newton over (world point, observed pixel) pairs.

    `initial` and the returned pose are world-from-camera. Points that
    fall behind the camera get zero weight for that iteration. Stops when
    the update norm drops below gn_tol (checked before applying, so an
    already-optimal initial pose is returned unchanged) or after
    gn_max_iters. Raises DivergedError once the robust cost has increased
    five times in a row.

    Returns (pose, inlier_mask); a correspondence is an inlier when its
    final residual norm is at most 3 * huber_delta and the point projects
    in front of the camera.
    """
    pairs = list(correspondences)
    if len(pairs) < 4:
        raise InsufficientCorrespondencesError(
            f"need at least 4 correspondences, got {len(pairs)}"
        )
    pts = np.array([np.asarray(p, dtype=np.float64).reshape(3) for p, _ in pairs])
    obs = np.array([np.asarray(u, dtype=np.float64).reshape(2) for _, u in pairs])
    t_cw = invert(initial)
    delta = config.huber_delta

    def evaluate(pose_cw):
        q = pose_cw.transform(pts)
        uv, valid = project_points(q, k)
        r = uv - obs
        norms = np.linalg.norm(r, axis=1)
        return q, r, valid, norms

    q, r, valid, norms = evaluate(t_cw)
    cost = _huber_cost(norms[valid], delta)
    increases = 0
    stepped = False
    for _ in range(config.gn_max_iters):
        h = np.zeros((6, 6))
        g = np.zeros(6)
        for i in range(len(pairs)):
            if not valid[i]:
                continue
            x, y, z = q[i]
            j_proj = np.array([
                [k.fx / z, 0.0, -k.fx * x / (z * z)],
                [0.0, k.fy / z, -k.fy * y / (z * z)],
            ])
            j = j_proj @ np.hstack([np.eye(3), -_hat(q[i])])
            w = 1.0 if norms[i] <= delta else delta / norms[i]
            h += w * (j.T @ j)
            g += w * (j.T @ r[i])
        try:
            step = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError as exc:
            raise DivergedError(f"normal equations singular: {exc}") from exc
        if np.linalg.norm(step) < config.gn_tol:
            break
        t_cw = compose(exp_se3(step), t_cw)
        stepped = True
        q, r, valid, norms = evaluate(t_cw)
        new_cost = _huber_cost(norms[valid], delta)
        if new_cost > cost:
            increases += 1
            if increases >= 5:
                raise DivergedError(
                    f"robust cost increased {increases} consecutive iterations"
                )
        else:
            increases = 0
        cost = new_cost
    inliers = valid & (norms <= 3.0 * delta)
    if not stepped:
        return initial, inliers
    refined = invert(t_cw)
    return PoseSE3(_orthonormalized(refined.rotation), refined.translation), inliers


def associate(frame, local_map, predicted, k, weights, search_radius,
              threshold=0.2, landmark_indices=None):
    """Match map landmarks against the frame's keypoints.

    Landmarks are projected through the predicted (world-from-camera)
    pose; only keypoints within search_radius pixels of a landmark's
    projection are admissible for it, enforced by masking the soft
    assignment. Returns a one-to-one list of
    (landmark_index, keypoint_index, score).
    """
    indices = (list(range(len(local_map.landmarks)))
               if landmark_indices is None else list(landmark_indices))
    feats = frame.features
    if not indices or len(feats) == 0:
        return []
    lms = [local_map.landmarks[i] for i in indices]
    positions = np.array([lm.position for lm in lms])
    cam_pts = invert(predicted).transform(positions)
    uv, in_front = project_points(cam_pts, k)
    xy = feats.xy()
    dist = np.linalg.norm(uv[:, None, :] - xy[None, :, :], axis=2)
    mask = in_front[:, None] & (dist <= search_radius)
    if not mask.any():
        return []
    lm_desc = np.array([lm.descriptor for lm in lms], dtype=np.float64)
    result = match_descriptors(lm_desc, feats.descriptors, weights,
                               threshold=threshold, mask=mask)
    return [(indices[i], j, score) for i, j, score in result.matches]


def keyframe_decision(tracked, total_visible, frames_since_keyframe, config):
    """New keyframe once enough frames have passed and tracking covers too
    little of the visible map."""
    if total_visible < tracked:
        raise ValueError(
            f"total_visible ({total_visible}) cannot be below tracked ({tracked})"
        )
    if frames_since_keyframe < config.keyframe_min_interval:
        return False
    if total_visible == 0:
        return True
    return tracked < config.keyframe_tracked_ratio * total_visible


def spawn_landmarks(frame, local_map, k, matched_keypoints=frozenset()):
    """Backproject every unassociated keypoint with a valid depth.

    New landmarks take the keypoint's descriptor and the current frame as
    their last observation. Returns the number spawned.
    """
    feats = frame.features
    count = 0
    for i, kp in enumerate(feats.keypoints):
        if i in matched_keypoints:
            continue
        z = frame.depths[i]
        if not (np.isfinite(z) and z > 0):
            continue
        p_cam = backproject(kp.x, kp.y, z, k)
        local_map.landmarks.append(Landmark(
            position=frame.pose.transform(p_cam),
            descriptor=feats.descriptors[i],
            last_observed_frame=frame.index,
        ))
        count += 1
    return count


def track_sequence(frames, k, weights, config):
    """Run the tracking loop over an iterable of FrameInputs.

    Frame 0 anchors the gauge (identity pose, first keyframe, all valid
    keypoints spawned as landmarks). Every later frame is predicted with
    the constant-velocity model, associated against the landmarks seen
    within the last 4 keyframe intervals, and refined. The keyframe test
    compares the inlier count against the landmark count the last
    keyframe observed, so coverage decays measurably as the view leaves
    that keyframe behind. Raises TrackingLostError, carrying the partial
    trajectory and diagnostics, when the refined inlier count drops below
    min_tracked_matches or the refinement diverges.

    Returns (trajectory, diagnostics, local_map) where trajectory is a
    list of (timestamp, world-from-camera pose) and diagnostics one dict
    per frame.
    """
    local_map = LocalMap.empty()
    trajectory = []
    diagnostics = []
    prev = prev_prev = PoseSE3.identity()
    frames_since_keyframe = 0
    window = 4 * config.keyframe_min_interval
    reference_visible = 0
    first = True

    for frame in frames:
        t0 = time.perf_counter()
        if first:
            state = FrameState(frame.index, frame.timestamp, PoseSE3.identity(),
                               frame.features, frame.depths)
            spawned = spawn_landmarks(state, local_map, k)
            local_map.keyframes.append((frame.index, state.pose))
            trajectory.append((frame.timestamp, state.pose))
            diagnostics.append({
                "frame_index": frame.index,
                "tracked": 0,
                "inliers": 0,
                "keyframe": True,
                "spawned": spawned,
                "ms_match": 0.0,
                "ms_optimize": 0.0,
                "ms_track": (time.perf_counter() - t0) * 1e3,
            })
            prev = prev_prev = state.pose
            frames_since_keyframe = 0
            reference_visible = spawned
            first = False
            continue

        predicted = predict_pose(prev, prev_prev)
        cutoff = frame.index - window
        active = [i for i, lm in enumerate(local_map.landmarks)
                  if lm.last_observed_frame >= cutoff]
        tm0 = time.perf_counter()
        matches = associate(frame, local_map, predicted, k, weights,
                            config.search_radius, threshold=config.match_threshold,
                            landmark_indices=active)
        ms_match = (time.perf_counter() - tm0) * 1e3

        row = {
            "frame_index": frame.index,
            "tracked": len(matches),
            "inliers": 0,
            "keyframe": False,
            "spawned": 0,
            "ms_match": ms_match,
            "ms_optimize": 0.0,
            "ms_track": 0.0,
        }

        def lost(inliers):
            row["inliers"] = inliers
            row["ms_track"] = (time.perf_counter() - t0) * 1e3
            diagnostics.append(row)
            return TrackingLostError(frame.index, inliers,
                                     trajectory=list(trajectory),
                                     diagnostics=list(diagnostics))

        if len(matches) < 4:
            raise lost(len(matches))

        kps = frame.features.keypoints
        correspondences = [
            (local_map.landmarks[li].position, (kps[ki].x, kps[ki].y))
            for li, ki, _ in matches
        ]
        to0 = time.perf_counter()
        try:
            pose, inlier_mask = refine_pose(predicted, correspondences, k, config)
        except DivergedError:
            row["ms_optimize"] = (time.perf_counter() - to0) * 1e3
            raise lost(0) from None
        row["ms_optimize"] = (time.perf_counter() - to0) * 1e3
        inliers = int(np.sum(inlier_mask))
        row["inliers"] = inliers
        if inliers < config.min_tracked_matches:
            raise lost(inliers)

        for (li, ki, _), good in zip(matches, inlier_mask):
            if good:
                local_map.landmarks[li] = replace(
                    local_map.landmarks[li], last_observed_frame=frame.index
                )
        state = FrameState(frame.index, frame.timestamp, pose,
                           frame.features, frame.depths)
        trajectory.append((frame.timestamp, pose))

        total_visible = max(reference_visible, inliers)
        frames_since_keyframe += 1
        if keyframe_decision(inliers, total_visible, frames_since_keyframe, config):
            matched_kp = {ki for _, ki, _ in matches}
            row["spawned"] = spawn_landmarks(state, local_map, k,
                                             matched_keypoints=matched_kp)
            local_map.keyframes.append((frame.index, pose))
            frames_since_keyframe = 0
            reference_visible = inliers + row["spawned"]
            row["keyframe"] = True

        prev_prev = prev
        prev = pose
        row["ms_track"] = (time.perf_counter() - t0) * 1e3
        diagnostics.append(row)

    return trajectory, diagnostics, local_map
