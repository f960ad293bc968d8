"""Dataset readers: KITTI-odometry style, TUM-RGBD style, plain folders.

All readers validate layout up front (every referenced file must exist,
counts must line up) and then yield frames lazily so long sequences never
sit in memory at once. Images load as single-channel float in [0, 255];
color inputs are converted with the usual luma weights.
"""
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .core import CameraIntrinsics, GrayImage, StereoRig
from .errors import CalibrationError, LayoutError, ParseError

# fallback intrinsics for depth-camera sequences shipped without a
# calibration file (the common 640x480 default)
DEFAULT_DEPTH_INTRINSICS = CameraIntrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5)
DEFAULT_DEPTH_FACTOR = 5000.0
DEFAULT_FRAME_DT = 0.1


@dataclass(frozen=True)
class DatasetFrame:
    """One frame: left image always present, right/depth optional."""

    index: int
    timestamp: float
    left: GrayImage
    right: GrayImage = None
    depth: np.ndarray = None


class DatasetSequence:
    """Lazily loaded frame sequence plus calibration."""

    def __init__(self, intrinsics, rig, records, loader, name):
        self.intrinsics = intrinsics
        self.rig = rig
        self._records = records
        self._loader = loader
        self.name = name

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        for i, rec in enumerate(self._records):
            yield self._loader(i, rec)

    @property
    def has_right(self):
        return self._records and self._records[0].get("right") is not None

    @property
    def has_depth(self):
        return self._records and self._records[0].get("depth") is not None


def load_gray(path):
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "I", "I;16", "F"):
                im = im.convert("L")
            data = np.asarray(im, dtype=np.float64)
    except OSError as exc:
        raise LayoutError(f"cannot read image {path}: {exc}") from exc
    if data.ndim != 2:
        data = data[..., 0]
    return GrayImage(data)


def _load_depth_png(path, factor):
    try:
        with Image.open(path) as im:
            raw = np.asarray(im, dtype=np.float64)
    except OSError as exc:
        raise LayoutError(f"cannot read depth image {path}: {exc}") from exc
    depth = raw / factor
    depth[raw == 0] = np.nan
    return depth


def _load_depth_any(path, factor):
    if path.endswith(".npy"):
        depth = np.load(path).astype(np.float64)
        depth[~(depth > 0)] = np.nan
        return depth
    return _load_depth_png(path, factor)


def _listing(directory, exts=(".png", ".jpg", ".jpeg", ".pgm", ".npy")):
    names = sorted(
        n for n in os.listdir(directory)
        if os.path.splitext(n)[1].lower() in exts
    )
    return [os.path.join(directory, n) for n in names]


def _read_times(path, expected, what):
    times = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                times.append(float(text.split()[0]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad timestamp") from exc
    if len(times) != expected:
        raise LayoutError(
            f"{what}: {len(times)} timestamps for {expected} frames ({path})"
        )
    return times


def _parse_projection(line, path):
    parts = line.split()
    if len(parts) != 13:
        raise CalibrationError(f"{path}: projection line needs 12 values: {line!r}")
    return np.array([float(v) for v in parts[1:]]).reshape(3, 4)


def load_kitti(root, sequence):
    """sequences/<id>/{image_0,image_1,calib.txt,times.txt} layout.

    Intrinsics come from P0; the stereo baseline is -P1[0,3]/P1[0,0]
    (P1 stores -fx*baseline in its fourth column). image_1 is optional;
    without it the sequence is monocular and carries no rig.
    """
    seq_dir = os.path.join(root, "sequences", sequence)
    if not os.path.isdir(seq_dir):
        raise LayoutError(f"missing sequence directory {seq_dir}")
    left_dir = os.path.join(seq_dir, "image_0")
    if not os.path.isdir(left_dir):
        raise LayoutError(f"missing {left_dir}")
    calib_path = os.path.join(seq_dir, "calib.txt")
    if not os.path.isfile(calib_path):
        raise CalibrationError(f"missing {calib_path}")
    projections = {}
    with open(calib_path, "r") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key = line.split()[0].rstrip(":")
            if key.startswith("P"):
                projections[key] = _parse_projection(line, calib_path)
    if "P0" not in projections:
        raise CalibrationError(f"{calib_path}: no P0 entry")
    p0 = projections["P0"]
    intr = CameraIntrinsics(fx=p0[0, 0], fy=p0[1, 1], cx=p0[0, 2], cy=p0[1, 2])

    lefts = _listing(left_dir)
    if not lefts:
        raise LayoutError(f"{left_dir} contains no images")
    right_dir = os.path.join(seq_dir, "image_1")
    rights = None
    rig = None
    if os.path.isdir(right_dir):
        rights = _listing(right_dir)
        if len(rights) != len(lefts):
            raise LayoutError(
                f"{len(lefts)} left vs {len(rights)} right images in {seq_dir}"
            )
        if "P1" not in projections:
            raise CalibrationError(f"{calib_path}: stereo sequence but no P1 entry")
        p1 = projections["P1"]
        baseline = -p1[0, 3] / p1[0, 0]
        if not baseline > 0:
            raise CalibrationError(f"{calib_path}: non-positive baseline {baseline}")
        rig = StereoRig(intrinsics=intr, baseline=baseline)

    times_path = os.path.join(seq_dir, "times.txt")
    if os.path.isfile(times_path):
        times = _read_times(times_path, len(lefts), "kitti times.txt")
    else:
        times = [i * DEFAULT_FRAME_DT for i in range(len(lefts))]

    records = [
        {"time": times[i], "left": lefts[i],
         "right": rights[i] if rights else None, "depth": None}
        for i in range(len(lefts))
    ]

    def loader(i, rec):
        right = load_gray(rec["right"]) if rec["right"] else None
        return DatasetFrame(index=i, timestamp=rec["time"],
                            left=load_gray(rec["left"]), right=right)

    return DatasetSequence(intr, rig, records, loader, name=f"kitti/{sequence}")


def _read_tum_listing(path):
    rows = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) < 2:
                raise ParseError(f"{path}:{lineno}: expected 'timestamp path'")
            try:
                rows.append((float(parts[0]), parts[1]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad timestamp") from exc
    return rows


def load_tum_rgbd(root, max_dt=0.02):
    """rgb.txt/depth.txt listings with nearest-timestamp association.

    Depth PNGs divide by the depth factor (default 5000 per the 16-bit
    convention); zero pixels are invalid. Intrinsics come from an optional
    calibration.json, else the 640x480 defaults.
    """
    rgb_list = os.path.join(root, "rgb.txt")
    depth_list = os.path.join(root, "depth.txt")
    if not os.path.isfile(rgb_list) or not os.path.isfile(depth_list):
        raise LayoutError(f"{root} needs rgb.txt and depth.txt")
    rgb_rows = _read_tum_listing(rgb_list)
    depth_rows = _read_tum_listing(depth_list)
    if not rgb_rows or not depth_rows:
        raise LayoutError(f"{root}: empty rgb/depth listing")

    intr = DEFAULT_DEPTH_INTRINSICS
    factor = DEFAULT_DEPTH_FACTOR
    calib_path = os.path.join(root, "calibration.json")
    if os.path.isfile(calib_path):
        intr, _, factor = _read_calibration_json(calib_path)

    # greedy nearest-|dt| association, one-to-one, order preserving
    rgb_t = np.array([t for t, _ in rgb_rows])
    dep_t = np.array([t for t, _ in depth_rows])
    cands = []
    for i, t in enumerate(rgb_t):
        j0 = int(np.searchsorted(dep_t, t - max_dt, side="left"))
        j1 = int(np.searchsorted(dep_t, t + max_dt, side="right"))
        for j in range(j0, j1):
            cands.append((abs(t - dep_t[j]), i, j))
    cands.sort()
    used_i, used_j = set(), set()
    pairs = []
    for _, i, j in cands:
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
    pairs = monotone
    if not pairs:
        raise LayoutError(f"{root}: no rgb/depth pairs within {max_dt}s")

    records = []
    for i, j in pairs:
        rgb_path = os.path.join(root, rgb_rows[i][1])
        depth_path = os.path.join(root, depth_rows[j][1])
        for p in (rgb_path, depth_path):
            if not os.path.isfile(p):
                raise LayoutError(f"listing references absent file {p}")
        records.append({"time": rgb_rows[i][0], "left": rgb_path,
                        "right": None, "depth": depth_path})

    def loader(i, rec):
        return DatasetFrame(
            index=i, timestamp=rec["time"], left=load_gray(rec["left"]),
            depth=_load_depth_png(rec["depth"], factor),
        )

    return DatasetSequence(intr, None, records, loader, name="tum-rgbd")


def _read_calibration_json(path):
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CalibrationError(f"cannot parse {path}: {exc}") from exc
    try:
        intr = CameraIntrinsics(fx=float(raw["fx"]), fy=float(raw["fy"]),
                                cx=float(raw["cx"]), cy=float(raw["cy"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CalibrationError(f"{path}: needs numeric fx, fy, cx, cy") from exc
    baseline = raw.get("baseline")
    if baseline is not None:
        baseline = float(baseline)
    factor = float(raw.get("depth_scale", DEFAULT_DEPTH_FACTOR))
    return intr, baseline, factor


def load_image_folder(root):
    """Plain directory layout:

        calibration.json   fx, fy, cx, cy; baseline if right/ exists;
                           optional depth_scale for 16-bit depth PNGs
        left/              required images, sorted by filename
        right/             optional rectified right images
        depth/             optional .npy (meters) or 16-bit PNG depth
        times.txt          optional, one timestamp per frame (else 10 Hz)

    When both right/ and depth/ exist the depth maps win; the right
    images are still loaded into the frames for callers that want them.
    """
    if not os.path.isdir(root):
        raise LayoutError(f"{root} is not a directory")
    left_dir = os.path.join(root, "left")
    if not os.path.isdir(left_dir):
        raise LayoutError(f"missing {left_dir}")
    lefts = _listing(left_dir)
    if not lefts:
        raise LayoutError(f"{left_dir} contains no images")
    calib_path = os.path.join(root, "calibration.json")
    if not os.path.isfile(calib_path):
        raise CalibrationError(f"missing {calib_path}")
    intr, baseline, factor = _read_calibration_json(calib_path)

    right_dir = os.path.join(root, "right")
    rights = None
    rig = None
    if os.path.isdir(right_dir):
        rights = _listing(right_dir)
        if len(rights) != len(lefts):
            raise LayoutError(f"{len(lefts)} left vs {len(rights)} right images")
        if baseline is None:
            raise CalibrationError(
                f"{calib_path}: right/ images present but no baseline"
            )
        rig = StereoRig(intrinsics=intr, baseline=baseline)

    depth_dir = os.path.join(root, "depth")
    depths = None
    if os.path.isdir(depth_dir):
        depths = _listing(depth_dir)
        if len(depths) != len(lefts):
            raise LayoutError(f"{len(lefts)} left vs {len(depths)} depth maps")

    times_path = os.path.join(root, "times.txt")
    if os.path.isfile(times_path):
        times = _read_times(times_path, len(lefts), "times.txt")
    else:
        times = [i * DEFAULT_FRAME_DT for i in range(len(lefts))]

    records = [
        {"time": times[i], "left": lefts[i],
         "right": rights[i] if rights else None,
         "depth": depths[i] if depths else None}
        for i in range(len(lefts))
    ]

    def loader(i, rec):
        right = load_gray(rec["right"]) if rec["right"] else None
        depth = _load_depth_any(rec["depth"], factor) if rec["depth"] else None
        return DatasetFrame(index=i, timestamp=rec["time"],
                            left=load_gray(rec["left"]), right=right, depth=depth)

    return DatasetSequence(intr, rig, records, loader, name="image-folder")


def load_dataset(kind, root, sequence=""):
    if kind == "kitti":
        return load_kitti(root, sequence)
    if kind == "tum-rgbd":
        return load_tum_rgbd(root)
    if kind == "image-folder":
        return load_image_folder(root)
    raise LayoutError(f"unknown dataset kind {kind!r}")
