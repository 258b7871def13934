"""Synthetic capture generation: body rig, cloth dynamics, rendering, archives."""

import numpy as np
import pytest

from lavatar.errors import ConfigError, NumericalAbort
from lavatar.kinematics import joint_world_transforms
from lavatar.synthcap import (
    DEFAULT_MOTION,
    MotionCurve,
    SynthSceneConfig,
    body_texture,
    bone_weights,
    build_body,
    build_skeleton,
    capsule_mesh,
    capture_rig,
    cloth_rest,
    cloth_texture,
    config_from_dict,
    config_to_dict,
    generate_capture,
    motion_poses,
    pose_at,
    read_capture_archive,
    simulate_cloth,
    write_capture_archive,
)
from lavatar.synthcap import _constraint_groups
from lavatar.utils import read_json, sha256_tree, write_json


def small_config(**overrides):
    base = dict(frames=2, views=2, image_size=48, focal=48.0,
                cloth_rows=8, cloth_cols=8, texture_res=16,
                substeps=2, iterations=10)
    base.update(overrides)
    return SynthSceneConfig(**base)


@pytest.fixture(scope="module")
def small_capture():
    return generate_capture(small_config())


def segment_distances(points, a, b):
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    foot = a + t[:, None] * ab
    return np.linalg.norm(points - foot, axis=1)


class TestCapsuleMesh:
    def test_outward_normals(self):
        p0, p1 = np.array([0.1, -0.2, 0.3]), np.array([0.2, 0.4, 0.1])
        mesh = capsule_mesh(p0, p1, 0.08)
        tri = mesh.vertices[mesh.faces]
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        centroids = tri.mean(axis=1)
        ab = p1 - p0
        t = np.clip(((centroids - p0) @ ab) / (ab @ ab), 0.0, 1.0)
        outward = centroids - (p0 + t[:, None] * ab)
        assert ((normals * outward).sum(axis=1) > 0).all()

    def test_closed_surface(self):
        mesh = capsule_mesh((0, 0, 0), (0, 0.3, 0), 0.1)
        edges = np.sort(mesh.faces[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
        unique, counts = np.unique(edges, axis=0, return_counts=True)
        assert (counts == 2).all()  # watertight: every edge shared by 2 faces
        euler = mesh.num_vertices - len(unique) + mesh.num_faces
        assert euler == 2

    def test_template_contract(self):
        mesh = capsule_mesh((0, 0, 0), (0.2, 0.1, 0), 0.05,
                            chart=((0.25, 0.5), (0.5, 1.0)))
        mesh.validate(template=True)
        assert mesh.uv_coords[:, 0].min() >= 0.25
        assert mesh.uv_coords[:, 0].max() <= 0.5
        assert mesh.uv_coords[:, 1].min() >= 0.5

    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            capsule_mesh((0, 0, 0), (0, 0, 0), 0.1)
        with pytest.raises(ValueError):
            capsule_mesh((0, 0, 0), (1, 0, 0), 0.0)


class TestBodyRig:
    def test_skeleton_layout(self):
        sk = build_skeleton()
        assert sk.num_joints == 12
        assert sk.parents[0] == -1
        assert all(sk.parents[i] < i for i in range(1, 12))
        rest = sk.rest_world_positions()
        assert rest[sk.joint_index("head"), 1] > rest[sk.joint_index("pelvis"), 1]
        assert rest[sk.joint_index("l_wrist"), 0] > 0.5
        assert rest[sk.joint_index("r_wrist"), 0] < -0.5

    def test_template_is_valid_atlas(self):
        rig = build_body()
        rig.template.validate(template=True)
        assert rig.template.has_uv()
        assert len(rig.capsules) == 7
        assert rig.weights.num_vertices == rig.template.num_vertices

    def test_forearm_vertices_follow_elbow(self):
        rig = build_body()
        target = np.array([0.55, 0.46, 0.0])
        vid = np.argmin(((rig.template.vertices - target) ** 2).sum(axis=1))
        top = rig.weights.joints[vid, np.argmax(rig.weights.weights[vid])]
        assert top == rig.skeleton.joint_index("l_elbow")

    def test_weights_partition(self):
        rig = build_body()
        np.testing.assert_allclose(rig.weights.weights.sum(axis=1), 1.0, atol=1e-12)

    def test_scale_scales_everything(self):
        big = build_body(scale=2.0)
        small = build_body(scale=1.0)
        np.testing.assert_allclose(big.template.vertices,
                                   small.template.vertices * 2.0, atol=1e-12)
        assert big.capsules[0].radius == pytest.approx(2 * small.capsules[0].radius)


class TestMotion:
    def test_single_curve_samples_sine(self):
        cfg = small_config(frames=8, motion=(MotionCurve("l_elbow", 1, 0.5, 1.0),))
        sk = build_skeleton()
        j = sk.joint_index("l_elbow")
        for t in (0, 1, 3):
            pose = pose_at(cfg, t, sk)
            assert pose.angles[j, 1] == pytest.approx(0.5 * np.sin(2 * np.pi * t / 8))
            other = pose.angles.copy()
            other[j, 1] = 0.0
            assert not other.any()

    def test_curves_on_same_channel_sum(self):
        curves = (MotionCurve("chest", 0, 0.2, 1.0, 0.3),
                  MotionCurve("chest", 0, 0.1, 2.0, 0.0))
        cfg = small_config(frames=6, motion=curves)
        sk = build_skeleton()
        j = sk.joint_index("chest")
        t = 2
        expected = 0.2 * np.sin(2 * np.pi * t / 6 + 0.3) + 0.1 * np.sin(4 * np.pi * t / 6)
        assert pose_at(cfg, t, sk).angles[j, 0] == pytest.approx(expected)

    def test_empty_motion_is_identity(self):
        cfg = small_config(motion=())
        for pose in motion_poses(cfg):
            assert not pose.angles.any()
            assert not pose.root_translation.any()


class TestClothRest:
    def test_tube_geometry(self):
        cfg = small_config(cloth_rows=8, cloth_cols=12)
        mesh = cloth_rest(cfg)
        assert mesh.num_vertices == 8 * 12
        radii = np.hypot(mesh.vertices[:, 0], mesh.vertices[:, 2])
        np.testing.assert_allclose(radii, cfg.cloth_radius, atol=1e-12)
        assert mesh.vertices[:12, 1].max() == pytest.approx(cfg.cloth_top)
        assert mesh.vertices[-12:, 1].min() == pytest.approx(cfg.cloth_bottom)
        mesh.validate(template=True)

    def test_tube_seam_duplicated_in_uv(self):
        cfg = small_config()
        mesh = cloth_rest(cfg)
        assert len(mesh.uv_coords) == cfg.cloth_rows * (cfg.cloth_cols + 1)
        assert mesh.num_faces == 2 * (cfg.cloth_rows - 1) * cfg.cloth_cols

    def test_sheet_geometry(self):
        cfg = small_config(cloth_shape="sheet", cloth_rows=9, cloth_cols=9)
        mesh = cloth_rest(cfg)
        np.testing.assert_allclose(mesh.vertices[:, 2], 0.5, atol=1e-12)
        assert mesh.vertices[:9, 1].max() == pytest.approx(0.5)
        assert mesh.num_faces == 2 * 8 * 8
        mesh.validate(template=True)


class TestSimulateCloth:
    def test_rest_tube_motionless_without_gravity(self):
        cfg = small_config(frames=3, gravity=(0.0, 0.0, 0.0), motion=())
        rest = cloth_rest(cfg)
        for mesh in simulate_cloth(cfg, motion_poses(cfg)):
            assert np.abs(mesh.vertices - rest.vertices).max() < 1e-9

    def test_pinned_sheet_sags(self):
        # 10% slack: a taut sheet pinned at both corners is already at
        # equilibrium, so sag needs rest lengths longer than the geometry
        cfg = small_config(frames=6, cloth_shape="sheet", motion=(),
                           pins=(0, 7), stretch_scale=1.1,
                           substeps=4, iterations=15)
        rest = cloth_rest(cfg)
        final = simulate_cloth(cfg, motion_poses(cfg))[-1]
        np.testing.assert_array_equal(final.vertices[[0, 7]], rest.vertices[[0, 7]])
        free = np.setdiff1d(np.arange(rest.num_vertices), [0, 7])
        drop = rest.vertices[free, 1] - final.vertices[free, 1]
        assert drop.mean() > 0.01
        assert final.vertices[3, 1] < rest.vertices[3, 1] - 0.003  # top row droops

    def test_no_capsule_penetration(self):
        cfg = small_config(frames=4, substeps=4, iterations=12)
        rig = build_body()
        poses = motion_poses(cfg)
        cloths = simulate_cloth(cfg, poses, rig)
        for pose, mesh in zip(poses, cloths):
            world = joint_world_transforms(rig.skeleton, pose)
            for cap in rig.capsules:
                d = segment_distances(mesh.vertices, world[cap.joint_a, :3, 3],
                                      world[cap.joint_b, :3, 3])
                assert d.min() >= cap.radius

    def test_stretch_stays_within_two_percent(self):
        cfg = SynthSceneConfig(frames=8, views=1, image_size=48, focal=48.0,
                               texture_res=16)
        rest = cloth_rest(cfg)
        groups = _constraint_groups(cfg.cloth_rows, cfg.cloth_cols, True)
        worst = 0.0
        for mesh in simulate_cloth(cfg, motion_poses(cfg)):
            for g in groups:
                length = np.linalg.norm(mesh.vertices[g[:, 1]] - mesh.vertices[g[:, 0]], axis=1)
                target = np.linalg.norm(rest.vertices[g[:, 1]] - rest.vertices[g[:, 0]], axis=1)
                worst = max(worst, float(np.abs(length / target - 1.0).max()))
        assert worst <= 0.02

    def test_divergence_raises(self):
        cfg = small_config(frames=1, substeps=1, iterations=1,
                           gravity=(0.0, -1e300, 0.0))
        with pytest.raises(NumericalAbort):
            simulate_cloth(cfg, motion_poses(cfg))

    def test_topology_shared_across_frames(self):
        cfg = small_config(frames=3)
        rest = cloth_rest(cfg)
        for mesh in simulate_cloth(cfg, motion_poses(cfg)):
            np.testing.assert_array_equal(mesh.faces, rest.faces)
            np.testing.assert_array_equal(mesh.uv_coords, rest.uv_coords)
            np.testing.assert_array_equal(mesh.uv_faces, rest.uv_faces)


class TestTextures:
    def test_body_texture_contract(self):
        tex = body_texture(32)
        assert tex.texels.shape == (32, 32, 3)
        assert tex.valid_mask.all()
        assert tex.texels.min() >= 0.0 and tex.texels.max() <= 1.0

    def test_cloth_texture_has_logo_contrast(self):
        tex = cloth_texture(64)
        assert tex.valid_mask.all()
        logo = tex.texels[24, 10]  # red field, clear of the white cross
        base = tex.texels[10, 50]  # plain row between stripes
        assert logo[0] - logo[2] > 0.3
        assert abs(base[0] - base[2]) < 0.15
        assert tex.texels.min() >= 0.0 and tex.texels.max() <= 1.0


class TestGenerateCapture:
    def test_frame_contract(self, small_capture):
        cfg = small_config()
        assert len(small_capture) == cfg.frames
        frame = small_capture[0]
        assert len(frame.images) == cfg.views
        assert frame.images[0].shape == (48, 48, 3)
        assert frame.masks[0].shape == (48, 48)
        assert frame.labels[0].dtype == np.int8
        assert frame.masks[0].min() >= 0.0 and frame.masks[0].max() <= 1.0
        assert set(np.unique(frame.labels[0])) <= {0, 1, 2}

    def test_labels_cover_both_layers(self, small_capture):
        lab = small_capture[0].labels[0]
        assert (lab == 1).sum() > 20  # bare body: head, arms
        assert (lab == 2).sum() > 20  # shirt over torso
        assert lab[0, 0] == 0 and lab[-1, -1] == 0

    def test_cloth_pixels_sit_between_body_bands(self, small_capture):
        lab = small_capture[0].labels[0]
        rows_cloth = np.nonzero((lab == 2).any(axis=1))[0]
        rows_body = np.nonzero((lab == 1).any(axis=1))[0]
        assert rows_body.min() < rows_cloth.min()  # head above shirt

    def test_reconstruction_is_exact_union_without_noise(self, small_capture):
        frame = small_capture[1]
        expected_v = np.vstack([frame.gt_body.vertices, frame.gt_cloth.vertices])
        np.testing.assert_array_equal(frame.surface.vertices, expected_v)
        expected_f = np.vstack([frame.gt_body.faces,
                                frame.gt_cloth.faces + frame.gt_body.num_vertices])
        np.testing.assert_array_equal(frame.surface.faces, expected_f)

    def test_reconstruction_noise_perturbs_surface_only(self):
        cfg = small_config(frames=1, views=1, recon_noise=0.002)
        frame = generate_capture(cfg)[0]
        union = np.vstack([frame.gt_body.vertices, frame.gt_cloth.vertices])
        delta = frame.surface.vertices - union
        assert delta.any()
        assert np.abs(delta).max() < 0.02

    def test_keypoints_track_joints(self, small_capture):
        cfg = small_config()
        sk = build_skeleton(cfg.body_scale)
        for t, frame in enumerate(small_capture):
            world = joint_world_transforms(sk, pose_at(cfg, t, sk))
            kp = frame.keypoints.select(list(sk.names))
            np.testing.assert_allclose(kp.points, world[:, :3, 3], atol=1e-12)
            head = world[sk.joint_index("head"), :3, 3]
            nose = frame.keypoints.select(["nose"]).points[0]
            assert np.linalg.norm(nose - head) < 0.15

    def test_deterministic_across_runs(self):
        cfg = small_config(frames=1, views=1, recon_noise=0.001)
        a = generate_capture(cfg)[0]
        b = generate_capture(cfg)[0]
        np.testing.assert_array_equal(a.images[0], b.images[0])
        np.testing.assert_array_equal(a.surface.vertices, b.surface.vertices)
        np.testing.assert_array_equal(a.gt_cloth.vertices, b.gt_cloth.vertices)

    def test_slide_rotates_cloth_not_body(self):
        base = small_config(frames=4, views=1)
        slid = small_config(frames=4, views=1, slide_amplitude=0.3)
        a = generate_capture(base)
        b = generate_capture(slid)
        np.testing.assert_array_equal(a[1].gt_body.vertices, b[1].gt_body.vertices)
        assert np.abs(a[1].gt_cloth.vertices - b[1].gt_cloth.vertices).max() > 0.01
        np.testing.assert_array_equal(a[1].gt_cloth.uv_coords, b[1].gt_cloth.uv_coords)
        radii_a = np.hypot(a[1].gt_cloth.vertices[:, 0], a[1].gt_cloth.vertices[:, 2])
        radii_b = np.hypot(b[1].gt_cloth.vertices[:, 0], b[1].gt_cloth.vertices[:, 2])
        np.testing.assert_allclose(radii_a, radii_b, atol=1e-9)

    def test_rig_aims_at_torso(self):
        cfg = small_config()
        cams = capture_rig(cfg)
        assert len(cams) == cfg.views
        for cam in cams:
            pix, depth = cam.project(np.array([[0.0, 0.3, 0.0]]))
            assert depth[0] > 0
            np.testing.assert_allclose(pix[0], [24.0, 24.0], atol=1e-9)


class TestArchive:
    def test_round_trip(self, small_capture, tmp_path):
        cfg = small_config()
        write_capture_archive(tmp_path / "cap", small_capture, cfg)
        frames, doc = read_capture_archive(tmp_path / "cap")
        assert config_from_dict(doc) == cfg
        assert len(frames) == len(small_capture)
        a, b = small_capture[1], frames[1]
        assert b.index == 1
        assert np.abs(a.images[0] - b.images[0]).max() <= 0.5 / 255 + 1e-12
        np.testing.assert_array_equal(a.labels[1], b.labels[1])
        np.testing.assert_allclose(b.surface.vertices, a.surface.vertices, atol=1e-6)
        np.testing.assert_array_equal(b.surface.faces, a.surface.faces)
        assert b.keypoints.names == a.keypoints.names
        np.testing.assert_allclose(b.keypoints.points, a.keypoints.points, atol=0)
        np.testing.assert_allclose(b.gt_pose.angles, a.gt_pose.angles, atol=0)
        assert len(b.cameras) == len(a.cameras)

    def test_byte_identical_per_seed(self, tmp_path):
        cfg = small_config(frames=1, views=1, recon_noise=0.001)
        write_capture_archive(tmp_path / "a", generate_capture(cfg), cfg)
        write_capture_archive(tmp_path / "b", generate_capture(cfg), cfg)
        assert sha256_tree(tmp_path / "a") == sha256_tree(tmp_path / "b")

    def test_seed_changes_noise(self, tmp_path):
        base = small_config(frames=1, views=1, recon_noise=0.001)
        other = small_config(frames=1, views=1, recon_noise=0.001, seed=7)
        a = generate_capture(base)[0]
        b = generate_capture(other)[0]
        assert np.abs(a.surface.vertices - b.surface.vertices).max() > 1e-6

    def test_config_json_round_trip(self, tmp_path):
        cfg = small_config(pins=(0, 3), slide_amplitude=0.1)
        write_json(tmp_path / "c.json", config_to_dict(cfg))
        assert config_from_dict(read_json(tmp_path / "c.json")) == cfg


class TestConfigValidation:
    @pytest.mark.parametrize("bad", [
        dict(frames=0),
        dict(views=0),
        dict(image_size=8),
        dict(cloth_rows=6),
        dict(cloth_cols=6),
        dict(cloth_cols=9),  # tube needs even columns
        dict(cloth_shape="cape"),
        dict(substeps=0),
        dict(iterations=0),
        dict(damping=0.0),
        dict(damping=1.5),
        dict(texture_res=4),
    ])
    def test_rejects_bad_config(self, bad):
        with pytest.raises(ConfigError):
            small_config(**bad)

    def test_sheet_allows_odd_columns(self):
        cfg = small_config(cloth_shape="sheet", cloth_cols=9)
        assert cfg.cloth_cols == 9

    def test_rejects_unknown_keys(self):
        doc = config_to_dict(small_config())
        doc["zoom"] = 2
        with pytest.raises(ConfigError):
            config_from_dict(doc)
