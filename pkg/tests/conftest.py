import pytest

import synthworld


@pytest.fixture(scope="session")
def world100(tmp_path_factory):
    """100-frame rendered orbit with stereo/depth/exact dataset views."""
    root = tmp_path_factory.mktemp("world100")
    poses = synthworld.build_master_dataset(root, 100)
    return root, poses


@pytest.fixture(scope="session")
def world12(tmp_path_factory):
    """First 12 frames of the 100-frame schedule, for CLI round trips."""
    root = tmp_path_factory.mktemp("world12")
    poses = synthworld.build_master_dataset(root, 12, schedule=100)
    return root, poses
