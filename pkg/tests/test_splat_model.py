import math

import numpy as np
import pytest
import yaml

from foci import ply_io, splat_model
from foci.splat_model import (
    EmptySceneError,
    Gaussian3,
    Pose,
    RobotBody,
    RobotModel,
    SplatScene,
    corridor_slabs,
    generate_synthetic_scene,
    load_robot_model,
    load_splat_ply,
    robot_gaussians_at_pose,
    rot_z,
    wrap_angle,
)


def logit(p):
    return math.log(p / (1.0 - p))


def write_ply(path, means, log_scales, quats, opacities):
    ply_io.write_splat_ply(
        path, means, log_scales, quats, np.array([logit(p) for p in opacities])
    )


def unit_quats(n):
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


class TestTypes:
    def test_wrap_angle_range(self):
        for yaw in (-7.0, -math.pi, 0.0, math.pi, 3 * math.pi, 10.0):
            w = wrap_angle(yaw)
            assert -math.pi < w <= math.pi
        assert wrap_angle(math.pi) == math.pi
        assert wrap_angle(-math.pi) == math.pi

    def test_gaussian_requires_spd(self):
        with pytest.raises(ValueError):
            Gaussian3(np.zeros(3), np.diag([1.0, 1.0, -1.0]))
        with pytest.raises(ValueError):
            Gaussian3(np.zeros(3), np.array([[1, 0.5, 0], [0, 1, 0], [0, 0, 1.0]]))

    def test_gaussian_floors_tiny_eigenvalues(self):
        g = Gaussian3(np.zeros(3), np.diag([1e-12, 1.0, 1.0]))
        assert np.linalg.eigvalsh(g.covariance).min() >= splat_model.COVARIANCE_EIGENVALUE_FLOOR

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            Gaussian3(np.zeros(3), np.eye(3), weight=-0.1)

    def test_scene_bounds_contain_all_means(self):
        rng = np.random.default_rng(0)
        means = rng.normal(size=(40, 3)) * 3.0
        covs = np.tile(np.eye(3) * 0.01, (40, 1, 1))
        scene = SplatScene(means, covs)
        assert np.all(means >= scene.bounds[0]) and np.all(means <= scene.bounds[1])

    def test_index_covers_every_gaussian_once(self):
        rng = np.random.default_rng(1)
        scene = SplatScene(
            rng.normal(size=(100, 3)), np.tile(np.eye(3) * 0.02, (100, 1, 1))
        )
        assert sum(scene.index.bucket_sizes) == len(scene)

    def test_index_query_ball_matches_brute_force(self):
        rng = np.random.default_rng(2)
        means = rng.uniform(-2, 2, size=(200, 3))
        scene = SplatScene(means, np.tile(np.eye(3) * 0.01, (200, 1, 1)))
        for _ in range(10):
            center = rng.uniform(-2, 2, size=3)
            radius = rng.uniform(0.2, 1.5)
            got = np.sort(scene.index.query_ball(center, radius))
            want = np.nonzero(np.linalg.norm(means - center, axis=1) <= radius)[0]
            np.testing.assert_array_equal(got, want)

    def test_empty_scene_rejected(self):
        with pytest.raises(EmptySceneError):
            SplatScene(np.empty((0, 3)), np.empty((0, 3, 3)))


class TestRobotPose:
    def robot(self):
        cov = np.diag([0.028, 0.016, 0.016])
        return RobotModel(
            bodies=[
                RobotBody(np.array([0.35, 0.0, 0.0]), cov),
                RobotBody(np.array([0.0, 0.0, 0.0]), cov),
                RobotBody(np.array([-0.35, 0.0, 0.0]), cov),
            ],
            name="threebody",
        )

    def test_identity_pose_returns_body_frame(self):
        robot = self.robot()
        out = robot_gaussians_at_pose(robot, Pose(np.zeros(3), 0.0))
        for body, g in zip(robot.bodies, out):
            np.testing.assert_allclose(g.mean, body.offset)
            np.testing.assert_allclose(g.covariance, body.covariance)

    def test_translation_and_quarter_turn(self):
        robot = self.robot()
        out = robot_gaussians_at_pose(robot, Pose(np.array([1.0, 2.0, 3.0]), 0.0))
        np.testing.assert_allclose(out[0].mean, [1.35, 2.0, 3.0])
        out = robot_gaussians_at_pose(robot, Pose(np.zeros(3), math.pi / 2))
        np.testing.assert_allclose(out[0].mean, [0.0, 0.35, 0.0], atol=1e-12)

    def test_pi_rotation_preserves_diagonal_covariance(self):
        robot = self.robot()
        out = robot_gaussians_at_pose(robot, Pose(np.zeros(3), math.pi))
        np.testing.assert_allclose(
            out[1].covariance, robot.bodies[1].covariance, atol=1e-12
        )

    def test_spectrum_invariant_under_any_pose(self):
        robot = self.robot()
        rng = np.random.default_rng(3)
        for _ in range(10):
            pose = Pose(rng.normal(size=3), rng.uniform(-math.pi, math.pi))
            for body, g in zip(robot.bodies, robot_gaussians_at_pose(robot, pose)):
                np.testing.assert_allclose(
                    np.linalg.eigvalsh(g.covariance),
                    np.linalg.eigvalsh(body.covariance),
                    atol=1e-12,
                )


class TestPlyLoading:
    def test_threshold_filtering(self, tmp_path):
        path = str(tmp_path / "scene.ply")
        means = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
        write_ply(path, means, np.zeros((3, 3)), unit_quats(3), [0.99, 0.99, 0.99])
        assert len(load_splat_ply(path, opacity_threshold=0.5)) == 3

        write_ply(path, means, np.zeros((3, 3)), unit_quats(3), [0.99, 0.01, 0.99])
        scene = load_splat_ply(path, opacity_threshold=0.5)
        assert len(scene) == 2
        np.testing.assert_allclose(scene.means[:, 0], [0.0, 2.0])

    def test_identity_covariance_from_zero_log_scales(self, tmp_path):
        path = str(tmp_path / "one.ply")
        write_ply(path, np.zeros((1, 3)), np.zeros((1, 3)), unit_quats(1), [0.9])
        scene = load_splat_ply(path)
        np.testing.assert_allclose(scene.covariances[0], np.eye(3), atol=1e-7)

    def test_covariance_reconstruction_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        n = 50
        log_scales = rng.uniform(-3.0, 0.5, size=(n, 3))
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        path = str(tmp_path / "rt.ply")
        write_ply(path, rng.normal(size=(n, 3)), log_scales, quats, [0.9] * n)
        scene = load_splat_ply(path)
        eigvals = np.sort(np.linalg.eigvalsh(scene.covariances), axis=1)
        want = np.sort(np.exp(2.0 * log_scales), axis=1)
        # float32 storage in the PLY dominates the error budget
        np.testing.assert_allclose(eigvals, want, rtol=1e-5)
        assert eigvals.min() > 0

    def test_loading_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(5)
        path = str(tmp_path / "det.ply")
        n = 20
        write_ply(
            path, rng.normal(size=(n, 3)), rng.normal(size=(n, 3)) * 0.3,
            unit_quats(n), [0.8] * n,
        )
        a, b = load_splat_ply(path), load_splat_ply(path)
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.covariances, b.covariances)

    def test_missing_field_named_in_error(self, tmp_path):
        path = str(tmp_path / "bad.ply")
        header = (
            "ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        with open(path, "wb") as fh:
            fh.write(header.encode())
            fh.write(np.zeros(3, dtype="<f4").tobytes())
        with pytest.raises(ply_io.SplatFileError, match="scale_0"):
            load_splat_ply(path)

    def test_all_filtered_is_empty_scene_error(self, tmp_path):
        path = str(tmp_path / "dim.ply")
        write_ply(path, np.zeros((2, 3)), np.zeros((2, 3)), unit_quats(2), [0.01, 0.02])
        with pytest.raises(EmptySceneError):
            load_splat_ply(path, opacity_threshold=0.5)

    def test_unknown_extra_properties_ignored(self, tmp_path):
        path = str(tmp_path / "extra.ply")
        fields = [(n, "<f4") for n in ply_io.SPLAT_FIELDS] + [("f_dc_0", "<f4")]
        rec = np.zeros(1, dtype=np.dtype(fields))
        rec["rot_0"] = 1.0
        rec["opacity"] = 5.0
        header = ["ply", "format binary_little_endian 1.0", "element vertex 1"]
        header += [f"property float {name}" for name, _ in fields]
        header.append("end_header")
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode())
            fh.write(rec.tobytes())
        assert len(load_splat_ply(path)) == 1


class TestRobotFile:
    def test_three_body_model(self, tmp_path):
        doc = {
            "name": "anymal-like",
            "bodies": [
                {"offset": [0.35, 0, 0], "cov": np.diag([0.028, 0.016, 0.016]).tolist()},
                {"offset": [0.0, 0, 0], "cov": np.diag([0.028, 0.016, 0.016]).tolist()},
                {"offset": [-0.35, 0, 0], "cov": np.diag([0.028, 0.016, 0.016]).tolist()},
            ],
        }
        path = tmp_path / "robot.yaml"
        path.write_text(yaml.safe_dump(doc))
        robot = load_robot_model(str(path))
        assert robot.num_bodies == 3
        assert robot.name == "anymal-like"
        np.testing.assert_allclose(robot.offsets[2], [-0.35, 0, 0])

    def test_single_spherical_body(self, tmp_path):
        doc = {"name": "ball", "bodies": [{"offset": [0, 0, 0], "cov": (0.04 * np.eye(3)).tolist()}]}
        path = tmp_path / "ball.yaml"
        path.write_text(yaml.safe_dump(doc))
        assert load_robot_model(str(path)).num_bodies == 1

    def test_non_spd_covariance_rejected(self, tmp_path):
        doc = {"bodies": [{"offset": [0, 0, 0], "cov": np.diag([1.0, 1.0, -1.0]).tolist()}]}
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(doc))
        with pytest.raises(ValueError):
            load_robot_model(str(path))

    def test_empty_bodies_rejected(self, tmp_path):
        path = tmp_path / "none.yaml"
        path.write_text(yaml.safe_dump({"name": "x", "bodies": []}))
        with pytest.raises(ValueError):
            load_robot_model(str(path))


class TestSyntheticScenes:
    def test_corridor_means_inside_slabs_with_single_gap(self):
        scene = generate_synthetic_scene("corridor", opening=0.6, density=200.0)
        slabs = corridor_slabs(0.6)
        means = scene.means
        inside = np.zeros(len(scene), dtype=bool)
        for lo, hi in slabs:
            inside |= np.all((means >= lo) & (means <= hi), axis=1)
        assert inside.all()
        # nothing inside the opening band
        gap = np.abs(means[:, 1]) < 0.3
        assert not gap.any()

    def test_corridor_gap_width_respected(self):
        scene = generate_synthetic_scene("corridor", opening=0.6, density=400.0, seed=3)
        y = np.sort(scene.means[:, 1])
        below = y[y < 0].max()
        above = y[y > 0].min()
        assert above - below >= 0.6

    def test_pillars_form_disjoint_clusters(self):
        scene = generate_synthetic_scene("pillars", count=4, radius=0.3, density=150.0)
        means = scene.means
        # single-linkage connected components at 0.3 m
        n = len(scene)
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        from scipy.spatial import cKDTree

        tree = cKDTree(means)
        for i, j in tree.query_pairs(0.3):
            pi, pj = find(i), find(j)
            if pi != pj:
                parent[pi] = pj
        assert len({find(i) for i in range(n)}) == 4

    def test_determinism(self):
        a = generate_synthetic_scene("corridor", opening=0.8, seed=7)
        b = generate_synthetic_scene("corridor", opening=0.8, seed=7)
        np.testing.assert_array_equal(a.means, b.means)

    def test_parameter_errors(self):
        with pytest.raises(ValueError):
            generate_synthetic_scene("corridor", opening=-1.0)
        with pytest.raises(EmptySceneError):
            generate_synthetic_scene("corridor", opening=0.6, density=0.0)
        with pytest.raises(ValueError):
            generate_synthetic_scene("maze")


class TestSceneRoundTrip:
    def test_scene_ply_round_trip(self, tmp_path):
        scene = generate_synthetic_scene("pillars", count=2, radius=0.3, density=60.0)
        path = str(tmp_path / "out.ply")
        splat_model.save_scene_ply(path, scene)
        back = load_splat_ply(path, opacity_threshold=0.5)
        assert len(back) == len(scene)
        np.testing.assert_allclose(back.means, scene.means, atol=1e-5)
        np.testing.assert_allclose(back.covariances, scene.covariances, rtol=2e-4, atol=1e-7)
