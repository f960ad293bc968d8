import numpy as np
import pytest

from slamfrontkit.core import (
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
from slamfrontkit.errors import NonPositiveDepthError

K = CameraIntrinsics(fx=100.0, fy=200.0, cx=320.0, cy=240.0)


def rodrigues(axis, angle):
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    kx = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


class TestGrayImage:
    def test_dimensions(self):
        img = GrayImage(np.zeros((4, 7)))
        assert img.height == 4 and img.width == 7
        assert img.scale == 255.0

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            GrayImage(np.zeros((4, 7, 3)))

    def test_data_is_read_only(self):
        img = GrayImage(np.ones((2, 2)))
        with pytest.raises(ValueError):
            img.data[0, 0] = 5.0

    def test_copies_input(self):
        src = np.ones((2, 2))
        img = GrayImage(src)
        src[0, 0] = 99.0
        assert img.data[0, 0] == 1.0


class TestIntrinsicsAndRig:
    def test_rejects_non_positive_focal(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=0.0, fy=1.0, cx=0.0, cy=0.0)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1.0, fy=-2.0, cx=0.0, cy=0.0)

    def test_rejects_non_positive_baseline(self):
        with pytest.raises(ValueError):
            StereoRig(intrinsics=K, baseline=0.0)


class TestPoseSE3:
    def test_identity(self):
        p = PoseSE3.identity()
        np.testing.assert_array_equal(p.rotation, np.eye(3))
        np.testing.assert_array_equal(p.translation, np.zeros(3))

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            PoseSE3(np.eye(4), np.zeros(3))
        with pytest.raises(ValueError):
            PoseSE3(np.eye(3), np.zeros(4))

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            PoseSE3(np.eye(3) * 1.1, np.zeros(3))

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            PoseSE3(r, np.zeros(3))

    def test_matrix_round_trip(self):
        r = rodrigues([1.0, -2.0, 0.5], 0.8)
        p = PoseSE3(r, [0.1, 0.2, 0.3])
        q = PoseSE3.from_matrix(p.matrix())
        np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-15)
        np.testing.assert_allclose(q.translation, p.translation, atol=1e-15)
        assert p.matrix().shape == (4, 4)
        np.testing.assert_array_equal(p.matrix()[3], [0, 0, 0, 1])

    def test_transform_single_and_batch(self):
        r = rodrigues([0.0, 0.0, 1.0], np.pi / 2)
        p = PoseSE3(r, [1.0, 0.0, 0.0])
        np.testing.assert_allclose(p.transform([1.0, 0.0, 0.0]),
                                   [1.0, 1.0, 0.0], atol=1e-15)
        pts = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.5]])
        out = p.transform(pts)
        np.testing.assert_allclose(out, pts @ r.T + [1.0, 0.0, 0.0], atol=1e-15)

    def test_compose_matches_matrix_product(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            a = PoseSE3(rodrigues(rng.normal(size=3), rng.uniform(0, 2)),
                        rng.normal(size=3))
            b = PoseSE3(rodrigues(rng.normal(size=3), rng.uniform(0, 2)),
                        rng.normal(size=3))
            np.testing.assert_allclose(compose(a, b).matrix(),
                                       a.matrix() @ b.matrix(), atol=1e-12)

    def test_invert(self):
        p = PoseSE3(rodrigues([1.0, 1.0, 0.0], 0.3), [0.5, -1.0, 2.0])
        ident = compose(p, invert(p))
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(ident.translation, np.zeros(3), atol=1e-12)


class TestProjection:
    def test_pinhole_arithmetic(self):
        uv = project([0.5, -0.25, 2.0], K)
        np.testing.assert_allclose(uv, [345.0, 215.0], atol=1e-12)

    def test_rejects_non_positive_depth(self):
        with pytest.raises(NonPositiveDepthError):
            project([0.0, 0.0, 0.0], K)
        with pytest.raises(NonPositiveDepthError):
            project([0.0, 0.0, -1.0], K)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1, 1, size=(20, 3))
        pts[:, 2] = rng.uniform(0.5, 5.0, size=20)
        uv, valid = project_points(pts, K)
        assert valid.all()
        for i in range(20):
            np.testing.assert_allclose(uv[i], project(pts[i], K), atol=1e-12)

    def test_batch_flags_behind_camera(self):
        pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 1.0, -2.0]])
        uv, valid = project_points(pts, K)
        np.testing.assert_array_equal(valid, [True, False, False])
        assert uv.shape == (3, 2)


def unit_rows(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, dim)).astype(np.float32)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class TestFeatureSet:
    def test_basic_accessors(self):
        kps = (Keypoint(1.5, 2.5), Keypoint(3.0, 4.0, level=2, response=9.0))
        fs = FeatureSet(kps, unit_rows(2, 8))
        assert len(fs) == 2
        assert fs.descriptor_dim == 8
        np.testing.assert_allclose(fs.xy(), [[1.5, 2.5], [3.0, 4.0]])
        assert fs.keypoints[1].level == 2

    def test_keypoint_defaults(self):
        kp = Keypoint(1.0, 2.0)
        assert kp.level == 0 and kp.response == 0.0

    def test_row_count_mismatch(self):
        with pytest.raises(ValueError):
            FeatureSet((Keypoint(0, 0),), unit_rows(2, 4))

    def test_rejects_non_unit_descriptors(self):
        d = unit_rows(2, 4) * 1.5
        with pytest.raises(ValueError):
            FeatureSet((Keypoint(0, 0), Keypoint(1, 1)), d)

    def test_empty(self):
        fs = FeatureSet.empty(16)
        assert len(fs) == 0
        assert fs.descriptor_dim == 16
        assert fs.xy().shape == (0, 2)

    def test_descriptors_read_only(self):
        fs = FeatureSet((Keypoint(0, 0),), unit_rows(1, 4))
        with pytest.raises(ValueError):
            fs.descriptors[0, 0] = 3.0


class TestLandmark:
    def test_holds_position_and_descriptor(self):
        lm = Landmark([1.0, 2.0, 3.0], unit_rows(1, 4)[0], 7)
        np.testing.assert_array_equal(lm.position, [1.0, 2.0, 3.0])
        assert lm.last_observed_frame == 7

    def test_rejects_non_unit_descriptor(self):
        with pytest.raises(ValueError):
            Landmark([0.0, 0.0, 1.0], np.full(4, 0.9, dtype=np.float32), 0)
