"""Mesh, grid, and image file I/O.

Formats:
  OBJ    text meshes with optional vt/uv faces.
  LAV1   little-endian binary mesh frame: magic, u32 vertex count, f32
         xyz triples; optionally u32 face count + u32 index triples when
         topology needs to travel with the frame.
  LAVG   little-endian binary scalar grid: magic, u32 resolution, u32
         channels, f32 texels row-major, u8 validity bytes.
  PNG    8-bit images via Pillow; RGBA alpha carries per-texel validity.

All writers are deterministic: same input bytes out for same data in.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .mesh import TriMesh, UVGrid
from .utils import format_float

MESH_MAGIC = b"LAV1"
GRID_MAGIC = b"LAVG"


def write_obj(path, mesh: TriMesh) -> None:
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {format_float(v[0])} {format_float(v[1])} {format_float(v[2])}")
    if mesh.has_uv():
        for uv in mesh.uv_coords:
            lines.append(f"vt {format_float(uv[0])} {format_float(uv[1])}")
        for f, uf in zip(mesh.faces, mesh.uv_faces):
            lines.append(
                "f "
                + " ".join(f"{int(f[k]) + 1}/{int(uf[k]) + 1}" for k in range(3))
            )
    else:
        for f in mesh.faces:
            lines.append("f " + " ".join(str(int(f[k]) + 1) for k in range(3)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, uvs, faces, uv_faces = [], [], [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError(f"only triangle faces supported: {raw!r}")
            vi, ti = [], []
            for tok in parts[1:4]:
                fields = tok.split("/")
                vi.append(int(fields[0]) - 1)
                if len(fields) > 1 and fields[1]:
                    ti.append(int(fields[1]) - 1)
            faces.append(vi)
            if len(ti) == 3:
                uv_faces.append(ti)
    if uv_faces and len(uv_faces) != len(faces):
        raise ValueError("mixed faces with and without UV indices")
    return TriMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int32).reshape(-1, 3),
        np.array(uvs, dtype=np.float64).reshape(-1, 2) if uv_faces else None,
        np.array(uv_faces, dtype=np.int32).reshape(-1, 3) if uv_faces else None,
    )


def write_mesh_frame(path, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    vertices = np.asarray(vertices, dtype=np.float32).reshape(-1, 3)
    blob = [MESH_MAGIC, struct.pack("<I", len(vertices)), vertices.astype("<f4").tobytes()]
    if faces is not None and len(faces):
        faces = np.asarray(faces, dtype=np.uint32).reshape(-1, 3)
        blob.append(struct.pack("<I", len(faces)))
        blob.append(faces.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(blob))


def read_mesh_frame(path):
    """Returns (vertices float64 (N,3), faces int32 (F,3) or None)."""
    data = Path(path).read_bytes()
    if data[:4] != MESH_MAGIC:
        raise ValueError(f"not a mesh frame file: {path}")
    (nv,) = struct.unpack_from("<I", data, 4)
    off = 8
    need = nv * 12
    if len(data) < off + need:
        raise ValueError(f"truncated mesh frame: {path}")
    verts = np.frombuffer(data, dtype="<f4", count=nv * 3, offset=off).reshape(nv, 3)
    off += need
    faces = None
    if len(data) >= off + 4:
        (nf,) = struct.unpack_from("<I", data, off)
        off += 4
        if len(data) < off + nf * 12:
            raise ValueError(f"truncated face block: {path}")
        faces = np.frombuffer(data, dtype="<u4", count=nf * 3, offset=off)
        faces = faces.reshape(nf, 3).astype(np.int32)
    return verts.astype(np.float64), faces


def write_grid(path, grid: UVGrid) -> None:
    texels = np.asarray(grid.texels, dtype="<f4")
    blob = [
        GRID_MAGIC,
        struct.pack("<II", grid.resolution, grid.channels),
        texels.tobytes(),
        np.asarray(grid.valid_mask, dtype=np.uint8).tobytes(),
    ]
    Path(path).write_bytes(b"".join(blob))


def read_grid(path) -> UVGrid:
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise ValueError(f"not a grid file: {path}")
    r, c = struct.unpack_from("<II", data, 4)
    off = 12
    n = r * r * c
    if len(data) < off + 4 * n + r * r:
        raise ValueError(f"truncated grid file: {path}")
    texels = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(r, r, c)
    mask = np.frombuffer(data, dtype=np.uint8, count=r * r, offset=off + 4 * n)
    return UVGrid(r, c, texels.astype(np.float64), mask.reshape(r, r).astype(bool))


def write_png(path, array: np.ndarray) -> None:
    """8-bit image writer; accepts HxW, HxWx3, or HxWx4 uint8 arrays."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("write_png expects uint8 data")
    Image.fromarray(array).save(str(path), format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        return np.asarray(im).copy()


def texture_to_png(path, grid: UVGrid) -> None:
    """Color texture in [0,1] to RGBA PNG; alpha 255 marks valid texels."""
    if grid.channels != 3:
        raise ValueError("texture grids must have 3 channels")
    rgb = np.clip(np.rint(grid.texels * 255.0), 0, 255).astype(np.uint8)
    alpha = np.where(grid.valid_mask, 255, 0).astype(np.uint8)
    write_png(path, np.concatenate([rgb, alpha[..., None]], axis=2))


def png_to_texture(path) -> UVGrid:
    img = read_png(path)
    if img.ndim != 3 or img.shape[2] not in (3, 4):
        raise ValueError("expected an RGB or RGBA image")
    if img.shape[0] != img.shape[1]:
        raise ValueError("texture images must be square")
    rgb = img[..., :3].astype(np.float64) / 255.0
    if img.shape[2] == 4:
        mask = img[..., 3] > 127
    else:
        mask = np.ones(img.shape[:2], dtype=bool)
    return UVGrid(img.shape[0], 3, rgb, mask)
