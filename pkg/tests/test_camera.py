import numpy as np
import pytest

from lavatar.camera import Camera, read_rig, ring_rig, write_rig


def test_project_pinhole_formula():
    cam = Camera(fx=60.0, fy=50.0, cx=24.0, cy=20.0, rotation=np.eye(3),
                 translation=np.zeros(3), width=48, height=40)
    pts = np.array([[0.1, 0.2, 2.0]])
    pix, depth = cam.project(pts)
    assert np.allclose(pix[0], [60.0 * 0.05 + 24.0, 50.0 * 0.1 + 20.0])
    assert np.allclose(depth, [2.0])


def test_look_at_centers_target():
    cam = Camera.look_at(eye=(1.0, 0.5, -2.0), target=(0.2, -0.1, 1.0),
                         fx=80, fy=80, width=64, height=64)
    pix, depth = cam.project(np.array([[0.2, -0.1, 1.0]]))
    assert np.allclose(pix[0], [32.0, 32.0], atol=1e-9)
    assert np.allclose(depth[0], np.linalg.norm([0.8, 0.6, -3.0]))


def test_look_at_rotation_orthonormal():
    cam = Camera.look_at(eye=(2.0, 1.0, 3.0), target=(0, 0, 0), width=32, height=32)
    r = cam.rotation
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    forward = r[2]
    expect = -np.array([2.0, 1.0, 3.0])
    assert np.allclose(forward, expect / np.linalg.norm(expect))


def test_center_recovers_eye():
    eye = np.array([0.3, -1.2, 2.5])
    cam = Camera.look_at(eye=eye, target=(0, 0, 0), width=16, height=16)
    assert np.allclose(cam.center, eye, atol=1e-12)


def test_view_direction_unit_toward_camera():
    cam = Camera.look_at(eye=(0, 0, -3.0), target=(0, 0, 0), width=16, height=16)
    d = cam.view_direction(np.array([0.0, 0.0, 1.0]))
    assert np.isclose(np.linalg.norm(d), 1.0)
    assert d[2] < 0  # camera sits on the -z side of the target


def test_parallel_up_rejected():
    with pytest.raises(ValueError):
        Camera.look_at(eye=(0, 1, 0), target=(0, 0, 0), up=(0, 1, 0))


def test_invalid_intrinsics_rejected():
    with pytest.raises(ValueError):
        Camera(fx=0.0, fy=50.0, cx=8, cy=8, rotation=np.eye(3),
               translation=np.zeros(3), width=16, height=16)


def test_non_orthogonal_rotation_rejected():
    r = np.eye(3)
    r[0, 1] = 0.1
    with pytest.raises(ValueError):
        Camera(fx=50, fy=50, cx=8, cy=8, rotation=r,
               translation=np.zeros(3), width=16, height=16)


def test_ring_rig_geometry():
    center = np.array([0.1, 0.9, -0.2])
    cams = ring_rig(6, radius=2.5, center=center, height_offset=0.4,
                    fx=70, fy=70, width=32, height=32)
    assert len(cams) == 6
    for cam in cams:
        eye = cam.center
        assert np.isclose(eye[1], center[1] + 0.4)
        planar = eye - center
        assert np.isclose(np.hypot(planar[0], planar[2]), 2.5)
        pix, depth = cam.project(center[None, :])
        assert np.allclose(pix[0], [16.0, 16.0], atol=1e-9)
        assert depth[0] > 0
    eyes = np.array([c.center for c in cams])
    assert len({tuple(np.round(e, 9)) for e in eyes}) == 6


def test_rig_roundtrip(tmp_path):
    cams = ring_rig(4, radius=2.0, center=(0, 1, 0), fx=55, fy=65,
                    width=24, height=20)
    path = tmp_path / "rig.json"
    write_rig(path, cams)
    back = read_rig(path)
    assert len(back) == 4
    for a, b in zip(cams, back):
        assert np.array_equal(a.rotation, b.rotation)
        assert np.array_equal(a.translation, b.translation)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == \
            (b.fx, b.fy, b.cx, b.cy, b.width, b.height)


def test_rig_unknown_key_rejected(tmp_path):
    cams = ring_rig(1, radius=2.0)
    path = tmp_path / "rig.json"
    write_rig(path, cams)
    import json
    doc = json.loads(path.read_text())
    doc["extra"] = 1
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        read_rig(path)
