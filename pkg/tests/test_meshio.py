import numpy as np
import pytest

from helpers import grid_plane, icosphere
from lavatar.mesh import UVGrid
from lavatar.meshio import (
    png_to_texture,
    read_grid,
    read_mesh_frame,
    read_obj,
    read_png,
    texture_to_png,
    write_grid,
    write_mesh_frame,
    write_obj,
    write_png,
)


class TestObj:
    def test_roundtrip_with_uv(self, tmp_path):
        mesh = grid_plane(4, 3)
        p = tmp_path / "m.obj"
        write_obj(p, mesh)
        back = read_obj(p)
        assert np.array_equal(back.faces, mesh.faces)
        assert np.array_equal(back.uv_faces, mesh.uv_faces)
        assert np.abs(back.vertices - mesh.vertices).max() == 0
        assert np.abs(back.uv_coords - mesh.uv_coords).max() == 0

    def test_roundtrip_without_uv(self, tmp_path):
        mesh = icosphere(1)
        p = tmp_path / "m.obj"
        write_obj(p, mesh)
        back = read_obj(p)
        assert back.uv_coords is None
        assert np.array_equal(back.faces, mesh.faces)
        assert np.abs(back.vertices - mesh.vertices).max() == 0

    def test_write_deterministic(self, tmp_path):
        mesh = grid_plane(3, 3)
        a, b = tmp_path / "a.obj", tmp_path / "b.obj"
        write_obj(a, mesh)
        write_obj(b, mesh)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_quads(self, tmp_path):
        p = tmp_path / "q.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        with pytest.raises(ValueError):
            read_obj(p)


class TestMeshFrame:
    def test_roundtrip_vertices_only(self, tmp_path):
        rng = np.random.default_rng(0)
        verts = rng.normal(size=(17, 3))
        p = tmp_path / "f.lav1"
        write_mesh_frame(p, verts)
        back, faces = read_mesh_frame(p)
        assert faces is None
        assert np.abs(back - verts).max() < 1e-6  # f32 storage
        assert p.read_bytes()[:4] == b"LAV1"

    def test_roundtrip_with_faces(self, tmp_path):
        mesh = icosphere(0)
        p = tmp_path / "f.lav1"
        write_mesh_frame(p, mesh.vertices, mesh.faces)
        verts, faces = read_mesh_frame(p)
        assert np.array_equal(faces, mesh.faces)
        assert np.abs(verts - mesh.vertices).max() < 1e-6

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.lav1"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            read_mesh_frame(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.lav1"
        write_mesh_frame(p, np.zeros((5, 3)))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError):
            read_mesh_frame(p)

    def test_deterministic_bytes(self, tmp_path):
        verts = np.linspace(0, 1, 30).reshape(10, 3)
        a, b = tmp_path / "a", tmp_path / "b"
        write_mesh_frame(a, verts)
        write_mesh_frame(b, verts)
        assert a.read_bytes() == b.read_bytes()


class TestGrid:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        grid = UVGrid(8, 5, rng.normal(size=(8, 8, 5)), rng.random((8, 8)) > 0.4)
        p = tmp_path / "g.lavg"
        write_grid(p, grid)
        back = read_grid(p)
        assert back.resolution == 8 and back.channels == 5
        assert np.abs(back.texels - grid.texels).max() < 1e-6
        assert np.array_equal(back.valid_mask, grid.valid_mask)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.lavg"
        p.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(ValueError):
            read_grid(p)


class TestPng:
    def test_rgb_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
        p = tmp_path / "x.png"
        write_png(p, img)
        assert np.array_equal(read_png(p), img)

    def test_rejects_float(self, tmp_path):
        with pytest.raises(ValueError):
            write_png(tmp_path / "x.png", np.zeros((4, 4, 3)))

    def test_texture_roundtrip_quantized(self, tmp_path):
        rng = np.random.default_rng(3)
        grid = UVGrid(16, 3, rng.random((16, 16, 3)), rng.random((16, 16)) > 0.3)
        p = tmp_path / "t.png"
        texture_to_png(p, grid)
        back = png_to_texture(p)
        assert np.array_equal(back.valid_mask, grid.valid_mask)
        assert np.abs(back.texels - grid.texels).max() <= 0.5 / 255 + 1e-9

    def test_texture_bytes_deterministic(self, tmp_path):
        grid = UVGrid(8, 3, np.random.default_rng(4).random((8, 8, 3)),
                      np.ones((8, 8), bool))
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        texture_to_png(a, grid)
        texture_to_png(b, grid)
        assert a.read_bytes() == b.read_bytes()
