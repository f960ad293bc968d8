"""Visual odometry front end toolkit.

Multiscale feature extraction over an image pyramid, attention-based
descriptor matching, semi-global stereo depth, constant-velocity pose
tracking with Gauss-Newton refinement, and trajectory evaluation.
"""
from .core import (
    CameraIntrinsics,
    FeatureSet,
    GrayImage,
    Keypoint,
    Landmark,
    PoseSE3,
    StereoRig,
    compose,
    invert,
    project,
    project_points,
)
from .errors import SlamFrontKitError, TrackingLostError
from .evaluation import Trajectory, ate_rmse, read_trajectory_tum, write_trajectory_tum
from .features import BuiltinDetector, load_features, save_features
from .matcher import MatcherWeights, match_feature_sets
from .pyramid import ImagePyramid, PyramidConfig, build_pyramid, detect_multiscale
from .stereo import DepthMap, SgmConfig, compute_depth
from .tracking import FrameInput, TrackerConfig, track_sequence

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "FeatureSet", "GrayImage", "Keypoint", "Landmark",
    "PoseSE3", "StereoRig", "compose", "invert", "project", "project_points",
    "SlamFrontKitError", "TrackingLostError",
    "Trajectory", "ate_rmse", "read_trajectory_tum", "write_trajectory_tum",
    "BuiltinDetector", "load_features", "save_features",
    "MatcherWeights", "match_feature_sets",
    "ImagePyramid", "PyramidConfig", "build_pyramid", "detect_multiscale",
    "DepthMap", "SgmConfig", "compute_depth",
    "FrameInput", "TrackerConfig", "track_sequence",
    "__version__",
]
