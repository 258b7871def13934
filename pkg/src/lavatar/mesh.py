"""Triangle meshes with UV atlases, graph Laplacians, and geometric queries.

Shared geometry layer: everything here is a pure function over immutable
inputs (meshes are treated as frozen once built), so call sites are free to
evaluate queries from worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .utils import parallel_map, rng_for

DEGENERATE_FACE_AREA = 1e-12


@dataclass
class TriMesh:
    """Shared-topology triangle mesh with an optional UV atlas.

    vertices are in meters. ``uv_coords``/``uv_faces`` follow the OBJ
    convention: UV vertices are indexed separately from positions so seams
    can duplicate texture coordinates without duplicating geometry.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray | None = None
    uv_faces: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        if self.uv_coords is not None:
            self.uv_coords = np.asarray(self.uv_coords, dtype=np.float64).reshape(-1, 2)
        if self.uv_faces is not None:
            self.uv_faces = np.asarray(self.uv_faces, dtype=np.int32).reshape(-1, 3)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def has_uv(self) -> bool:
        return self.uv_coords is not None and self.uv_faces is not None

    def copy(self) -> "TriMesh":
        return TriMesh(
            self.vertices.copy(),
            self.faces.copy(),
            None if self.uv_coords is None else self.uv_coords.copy(),
            None if self.uv_faces is None else self.uv_faces.copy(),
        )

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        """New mesh sharing topology/atlas with replaced vertex positions."""
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        if len(v) != self.num_vertices:
            raise ValueError(f"vertex count mismatch: {len(v)} != {self.num_vertices}")
        return TriMesh(v, self.faces, self.uv_coords, self.uv_faces)

    def validate(self, template: bool = False) -> None:
        """Check structural invariants; ``template=True`` adds the stricter
        authored-template checks (no degenerate faces, no flipped UV charts)."""
        if self.num_faces and (self.faces.min() < 0 or self.faces.max() >= self.num_vertices):
            raise ValueError("face indices out of range")
        if not np.isfinite(self.vertices).all():
            raise ValueError("non-finite vertex positions")
        if self.uv_faces is not None:
            if len(self.uv_faces) != self.num_faces:
                raise ValueError("uv_faces count must match faces")
            if self.uv_coords is None:
                raise ValueError("uv_faces without uv_coords")
            if len(self.uv_coords) and (self.uv_faces.min() < 0 or self.uv_faces.max() >= len(self.uv_coords)):
                raise ValueError("uv face indices out of range")
        if template:
            if (face_areas(self) < DEGENERATE_FACE_AREA).any():
                raise ValueError("degenerate face in template mesh")
            if self.has_uv():
                uv = self.uv_coords[self.uv_faces]
                e1 = uv[:, 1] - uv[:, 0]
                e2 = uv[:, 2] - uv[:, 0]
                signed = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
                if (signed < -1e-15).any():
                    raise ValueError("flipped (negative-area) UV chart")


@dataclass
class UVGrid:
    """Square texel grid over the UV atlas; ``valid_mask`` marks texels
    covered by at least one UV face."""

    resolution: int
    channels: int
    texels: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.texels = np.asarray(self.texels, dtype=np.float64).reshape(
            self.resolution, self.resolution, self.channels
        )
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool).reshape(
            self.resolution, self.resolution
        )

    @classmethod
    def zeros(cls, resolution: int, channels: int, valid_mask=None) -> "UVGrid":
        mask = (
            np.zeros((resolution, resolution), dtype=bool)
            if valid_mask is None
            else np.asarray(valid_mask, dtype=bool)
        )
        return cls(resolution, channels, np.zeros((resolution, resolution, channels)), mask)

    def copy(self) -> "UVGrid":
        return UVGrid(self.resolution, self.channels, self.texels.copy(), self.valid_mask.copy())


# ---------------------------------------------------------------------------
# Normals and areas
# ---------------------------------------------------------------------------


def face_cross(mesh: TriMesh) -> np.ndarray:
    tri = mesh.vertices[mesh.faces]
    return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])


def face_areas(mesh: TriMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross(mesh), axis=1)


def face_normals(mesh: TriMesh) -> np.ndarray:
    c = face_cross(mesh)
    n = np.linalg.norm(c, axis=1, keepdims=True)
    return np.divide(c, n, out=np.zeros_like(c), where=n > 1e-300)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length.

    Isolated vertices (no incident face) come back as zero rows, which is
    how degeneracy is flagged to callers.
    """
    cross = face_cross(mesh)  # magnitude = 2*area, so summing is area weighting
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], cross)
    norms = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norms, out=np.zeros_like(acc), where=norms > 1e-300)


# ---------------------------------------------------------------------------
# Uniform graph Laplacian
# ---------------------------------------------------------------------------


@dataclass
class LaplacianOperator:
    """Uniform graph Laplacian: each row has 1/deg on neighbors, -1 on the
    diagonal, so rows sum to zero and constant fields map to zero."""

    matrix: sp.csr_matrix

    @classmethod
    def from_mesh(cls, mesh: TriMesh) -> "LaplacianOperator":
        n = mesh.num_vertices
        f = mesh.faces
        pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        pairs = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
        pairs = np.unique(pairs, axis=0) if len(pairs) else pairs.reshape(0, 2)
        deg = np.bincount(pairs[:, 0], minlength=n).astype(np.float64)
        inv_deg = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        data = inv_deg[pairs[:, 0]]
        adj = sp.csr_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        diag = sp.diags(np.where(deg > 0, -1.0, 0.0))
        return cls((adj + diag).tocsr())

    @property
    def num_vertices(self) -> int:
        return self.matrix.shape[0]

    def rows(self) -> Iterator[list[tuple[int, float]]]:
        """Yield (neighbor index, weight) pairs per vertex, diagonal included."""
        m = self.matrix
        for i in range(m.shape[0]):
            yield [(int(j), float(w)) for j, w in zip(m.indices[m.indptr[i]:m.indptr[i + 1]],
                                                      m.data[m.indptr[i]:m.indptr[i + 1]])]


def laplacian_apply(op: LaplacianOperator, field: np.ndarray) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    if field.shape[0] != op.num_vertices:
        raise ValueError(
            f"field length {field.shape[0]} does not match vertex count {op.num_vertices}"
        )
    return op.matrix @ field


# ---------------------------------------------------------------------------
# Closest point / signed distance
# ---------------------------------------------------------------------------


def _closest_on_triangles(points: np.ndarray, a, b, c):
    """Closest point on each triangle for each query (Ericson's region walk).

    points: (Q,3); a/b/c: (F,3). Returns (dist2 (Q,F), closest (Q,F,3)).
    """
    q = points[:, None, :]
    ab = (b - a)[None]
    ac = (c - a)[None]
    ap = q - a[None]

    def dot(u, v):
        return (u * v).sum(-1)

    d1 = dot(ab, ap)
    d2 = dot(ac, ap)
    bp = q - b[None]
    d3 = dot(ab, bp)
    d4 = dot(ac, bp)
    cp = q - c[None]
    d5 = dot(ab, cp)
    d6 = dot(ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    eps = 1e-300
    t_ab = d1 / np.maximum(d1 - d3, eps)
    t_ac = d2 / np.maximum(d2 - d6, eps)
    t_bc = (d4 - d3) / np.maximum((d4 - d3) + (d5 - d6), eps)
    denom = va + vb + vc
    inv = 1.0 / np.where(np.abs(denom) > eps, denom, 1.0)
    v_in = vb * inv
    w_in = vc * inv

    close = a[None] + ab * v_in[..., None] + ac * w_in[..., None]
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    close = np.where(on_bc[..., None], b[None] + (c - b)[None] * t_bc[..., None], close)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    close = np.where(on_ac[..., None], a[None] + ac * t_ac[..., None], close)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    close = np.where(on_ab[..., None], a[None] + ab * t_ab[..., None], close)
    at_c = (d6 >= 0) & (d5 <= d6)
    close = np.where(at_c[..., None], c[None] * np.ones_like(close), close)
    at_b = (d3 >= 0) & (d4 <= d3)
    close = np.where(at_b[..., None], b[None] * np.ones_like(close), close)
    at_a = (d1 <= 0) & (d2 <= 0)
    close = np.where(at_a[..., None], a[None] * np.ones_like(close), close)

    diff = q - close
    return (diff * diff).sum(-1), close


class SurfaceQuery:
    """Batched closest-point / signed-distance / ray queries on one mesh.

    Precomputes face normals and angle-weighted pseudo-normals (Baerentzen &
    Aanaes) so the distance sign is robust on edges and vertices. Positive
    means outside.
    """

    def __init__(self, mesh: TriMesh, chunk: int = 64):
        if mesh.num_faces == 0:
            raise ValueError("empty mesh")
        self.mesh = mesh
        self.chunk = chunk
        tri = mesh.vertices[mesh.faces]
        self.a, self.b, self.c = tri[:, 0], tri[:, 1], tri[:, 2]
        self.face_n = face_normals(mesh)
        self._vertex_pseudo = self._angle_weighted_vertex_normals()
        self._edge_keys, self._edge_pseudo = self._edge_normals()

    def _angle_weighted_vertex_normals(self) -> np.ndarray:
        v = self.mesh.vertices
        f = self.mesh.faces
        acc = np.zeros_like(v)
        for k in range(3):
            i0, i1, i2 = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
            e1 = v[i1] - v[i0]
            e2 = v[i2] - v[i0]
            n1 = np.linalg.norm(e1, axis=1)
            n2 = np.linalg.norm(e2, axis=1)
            cosang = np.clip(
                (e1 * e2).sum(1) / np.maximum(n1 * n2, 1e-300), -1.0, 1.0
            )
            np.add.at(acc, i0, self.face_n * np.arccos(cosang)[:, None])
        norms = np.linalg.norm(acc, axis=1, keepdims=True)
        return np.divide(acc, norms, out=np.zeros_like(acc), where=norms > 1e-300)

    def _edge_normals(self):
        f = self.mesh.faces.astype(np.int64)
        n = self.mesh.num_vertices
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        edges.sort(axis=1)
        keys = edges[:, 0] * n + edges[:, 1]
        order = np.argsort(keys, kind="stable")
        keys_sorted = keys[order]
        fn_rep = np.concatenate([self.face_n] * 3, axis=0)[order]
        uniq, start = np.unique(keys_sorted, return_index=True)
        sums = np.add.reduceat(fn_rep, start, axis=0)
        norms = np.linalg.norm(sums, axis=1, keepdims=True)
        sums = np.divide(sums, norms, out=np.zeros_like(sums), where=norms > 1e-300)
        return uniq, sums

    def closest(self, queries: np.ndarray):
        """Return (points (Q,3), face indices (Q,), signed distances (Q,)).

        Ties between faces at identical distance go to the lowest face index.
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        out_p = np.empty_like(queries)
        out_f = np.empty(len(queries), dtype=np.int64)
        out_d = np.empty(len(queries))
        for s in range(0, len(queries), self.chunk):
            qs = queries[s : s + self.chunk]
            d2, close = _closest_on_triangles(qs, self.a, self.b, self.c)
            fi = np.argmin(d2, axis=1)  # argmin takes the first (lowest) index on ties
            rows = np.arange(len(qs))
            cp = close[rows, fi]
            out_p[s : s + self.chunk] = cp
            out_f[s : s + self.chunk] = fi
            out_d[s : s + self.chunk] = np.sqrt(d2[rows, fi])
        signs = self._signs(queries, out_p, out_f)
        return out_p, out_f, signs * out_d

    def _signs(self, queries, closest, face_idx):
        f = self.mesh.faces[face_idx]
        tri = self.mesh.vertices[f]
        # barycentric coordinates of the closest point, to classify the feature
        v0 = tri[:, 1] - tri[:, 0]
        v1 = tri[:, 2] - tri[:, 0]
        v2 = closest - tri[:, 0]
        d00 = (v0 * v0).sum(1)
        d01 = (v0 * v1).sum(1)
        d11 = (v1 * v1).sum(1)
        d20 = (v2 * v0).sum(1)
        d21 = (v2 * v1).sum(1)
        den = np.maximum(d00 * d11 - d01 * d01, 1e-300)
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
        u = 1.0 - v - w
        bary = np.stack([u, v, w], axis=1)
        tol = 1e-9
        on = bary > tol
        n_on = on.sum(1)

        normal = self.face_n[face_idx].copy()
        edge_mask = n_on == 2
        if edge_mask.any():
            idx = np.where(edge_mask)[0]
            # edge between the two vertices with nonzero barycentrics
            pair = np.array([np.sort(f[i][on[i]]) for i in idx], dtype=np.int64)
            keys = pair[:, 0] * self.mesh.num_vertices + pair[:, 1]
            pos = np.searchsorted(self._edge_keys, keys)
            normal[idx] = self._edge_pseudo[pos]
        vert_mask = n_on <= 1
        if vert_mask.any():
            idx = np.where(vert_mask)[0]
            which = np.argmax(bary[idx], axis=1)
            normal[idx] = self._vertex_pseudo[f[idx, which]]

        d = ((queries - closest) * normal).sum(1)
        return np.where(d >= 0, 1.0, -1.0)

    def rays_hit(self, origins: np.ndarray, dirs: np.ndarray, t_min: float = 1e-6) -> np.ndarray:
        """Any-hit test (Moller-Trumbore), vectorized over rays x faces."""
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        hit = np.zeros(len(origins), dtype=bool)
        e1 = (self.b - self.a)[None]
        e2 = (self.c - self.a)[None]
        for s in range(0, len(origins), self.chunk):
            o = origins[s : s + self.chunk][:, None, :]
            d = dirs[s : s + self.chunk][:, None, :]
            p = np.cross(d, e2)
            det = (e1 * p).sum(-1)
            ok = np.abs(det) > 1e-14
            inv = 1.0 / np.where(ok, det, 1.0)
            tvec = o - self.a[None]
            u = (tvec * p).sum(-1) * inv
            qv = np.cross(tvec, e1)
            v = (d * qv).sum(-1) * inv
            t = (e2 * qv).sum(-1) * inv
            inside = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min)
            hit[s : s + self.chunk] = inside.any(axis=1)
        return hit


def closest_point(mesh: TriMesh, query) -> tuple[np.ndarray, int, float]:
    """Closest surface point, its face index, and the signed distance
    (positive outside). For repeated queries build a SurfaceQuery once."""
    sq = SurfaceQuery(mesh)
    p, f, d = sq.closest(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return p[0], int(f[0]), float(d[0])


# ---------------------------------------------------------------------------
# Ambient occlusion
# ---------------------------------------------------------------------------


@dataclass
class AmbientOcclusion:
    values: np.ndarray  # per-vertex, in [0, 1]; 1 = fully open
    degenerate: np.ndarray  # per-vertex flags; True where the normal was unusable


def _hemisphere_dirs(normals: np.ndarray, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified uniform-hemisphere directions around each normal: (V,S,3)."""
    nv = len(normals)
    k = max(1, int(np.floor(np.sqrt(samples))))
    cells = np.arange(samples)
    gi = np.minimum(cells // k, k - 1)
    gj = cells % k
    jitter = rng.random((nv, samples, 2))
    u = (gi[None] + jitter[..., 0]) / k  # cos(theta) in [0,1): uniform solid angle
    phi = 2.0 * np.pi * (gj[None] + jitter[..., 1]) / k
    sin_t = np.sqrt(np.clip(1.0 - u * u, 0.0, 1.0))
    local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), u], axis=-1)

    # orthonormal frame with z = normal
    n = normals
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t = np.cross(helper, n)
    t /= np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-300)
    b = np.cross(n, t)
    frame = np.stack([t, b, n], axis=1)  # (V,3,3) rows are the basis vectors
    return np.einsum("vsk,vkj->vsj", local, frame)


def ambient_occlusion(
    mesh_set: Sequence[TriMesh],
    samples: int,
    seed: int = 0,
    offset: float = 1e-4,
) -> list[AmbientOcclusion]:
    """Per-vertex openness for every mesh in ``mesh_set`` against the union.

    Stratified hemisphere sampling with a deterministic seed; directions
    depend only on (seed, mesh index, vertex normals), never on the occluder
    set, so adding occluders can only lower values.
    """
    if samples < 16:
        raise ValueError("samples must be >= 16")
    queries = [SurfaceQuery(m) for m in mesh_set if m.num_faces > 0]
    results = []
    for mi, mesh in enumerate(mesh_set):
        normals = vertex_normals(mesh)
        degenerate = np.linalg.norm(normals, axis=1) < 1e-12
        rng = rng_for("ambient-occlusion", seed, mi, mesh.num_vertices)
        dirs = _hemisphere_dirs(normals, samples, rng)
        origins = mesh.vertices + offset * normals

        flat_o = np.repeat(origins, samples, axis=0)
        flat_d = dirs.reshape(-1, 3)

        def any_hit(chunk_range, flat_o=flat_o, flat_d=flat_d, queries=queries):
            s, e = chunk_range
            acc = np.zeros(e - s, dtype=bool)
            for q in queries:
                acc |= q.rays_hit(flat_o[s:e], flat_d[s:e])
            return acc

        step = 4096
        ranges = [(s, min(s + step, len(flat_o))) for s in range(0, len(flat_o), step)]
        hit = np.concatenate(parallel_map(any_hit, ranges)) if ranges else np.zeros(0, bool)
        ao = 1.0 - hit.reshape(mesh.num_vertices, samples).mean(axis=1)
        ao[degenerate] = 1.0  # convention: unusable normal counts as fully open
        results.append(AmbientOcclusion(values=ao, degenerate=degenerate))
    return results


# ---------------------------------------------------------------------------
# UV atlas rasterization and sampling operators
# ---------------------------------------------------------------------------


def uv_texel_coverage(mesh: TriMesh, resolution: int):
    """Map texels to UV faces: texel-center-inside coverage.

    Returns (face_idx (R,R) int32 with -1 outside, bary (R,R,3)). The first
    covering face (lowest index) wins, which makes the valid mask a pure
    function of the atlas.
    """
    if not mesh.has_uv():
        raise ValueError("mesh has no UV atlas")
    r = resolution
    face_idx = np.full((r, r), -1, dtype=np.int32)
    bary = np.zeros((r, r, 3))
    uv = mesh.uv_coords * r  # texel (i,j) center at (j + .5, i + .5) in uv*r
    for fi in range(mesh.num_faces):
        p = uv[mesh.uv_faces[fi]]
        lo = np.floor(p.min(axis=0) - 0.5).astype(int)
        hi = np.ceil(p.max(axis=0) + 0.5).astype(int)
        x0, y0 = np.maximum(lo, 0)
        x1, y1 = np.minimum(hi, r - 1)
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        det = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if abs(det) < 1e-300:
            continue
        w1 = ((gx - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (gy - p[0, 1])) / det
        w2 = ((p[1, 0] - p[0, 0]) * (gy - p[0, 1]) - (gx - p[0, 0]) * (p[1, 1] - p[0, 1])) / det
        w0 = 1.0 - w1 - w2
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
        yy, xx = np.nonzero(inside)
        rows, cols = yy + y0, xx + x0
        fresh = face_idx[rows, cols] < 0
        rows, cols = rows[fresh], cols[fresh]
        face_idx[rows, cols] = fi
        bary[rows, cols] = np.stack(
            [w0[inside][fresh], w1[inside][fresh], w2[inside][fresh]], axis=1
        )
    return face_idx, bary


def uv_valid_mask(mesh: TriMesh, resolution: int) -> np.ndarray:
    face_idx, _ = uv_texel_coverage(mesh, resolution)
    return face_idx >= 0


def texel_vertex_matrix(mesh: TriMesh, resolution: int) -> sp.csr_matrix:
    """Sparse (R*R, N): texel value = barycentric blend of its UV face's
    vertices. Rows of invalid texels are zero."""
    face_idx, bary = uv_texel_coverage(mesh, resolution)
    rr = resolution * resolution
    flat_f = face_idx.reshape(-1)
    valid = np.nonzero(flat_f >= 0)[0]
    rows = np.repeat(valid, 3)
    cols = mesh.faces[flat_f[valid]].reshape(-1)
    data = bary.reshape(-1, 3)[valid].reshape(-1)
    return sp.csr_matrix((data, (rows, cols)), shape=(rr, mesh.num_vertices))


def vertex_uvs(mesh: TriMesh) -> np.ndarray:
    """Per-vertex UV (first occurrence across uv_faces wins at seams)."""
    uv = np.zeros((mesh.num_vertices, 2))
    seen = np.zeros(mesh.num_vertices, dtype=bool)
    for fi in range(mesh.num_faces):
        for k in range(3):
            v = mesh.faces[fi, k]
            if not seen[v]:
                uv[v] = mesh.uv_coords[mesh.uv_faces[fi, k]]
                seen[v] = True
    return uv


def vertex_texel_matrix(mesh: TriMesh, resolution: int) -> sp.csr_matrix:
    """Sparse (N, R*R): vertex value = bilinear sample of the texel grid at
    the vertex UV, restricted to valid texels (weights renormalized)."""
    r = resolution
    mask = uv_valid_mask(mesh, r).reshape(-1)
    uv = vertex_uvs(mesh) * r - 0.5
    x = np.clip(uv[:, 0], 0.0, r - 1.0)
    y = np.clip(uv[:, 1], 0.0, r - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, r - 2) if r > 1 else np.zeros(len(x), int)
    y0 = np.clip(np.floor(y).astype(int), 0, r - 2) if r > 1 else np.zeros(len(y), int)
    fx = x - x0
    fy = y - y0
    n = mesh.num_vertices
    rows, cols, data = [], [], []
    corner = [(0, 0), (1, 0), (0, 1), (1, 1)]
    weights = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
    )
    texel = np.stack([(y0 + cy) * r + (x0 + cx) for cx, cy in corner], axis=1)
    w_valid = weights * mask[texel]
    total = w_valid.sum(axis=1)
    for v in range(n):
        if total[v] <= 1e-12:
            # no valid texel under the footprint: fall back to nearest valid
            valid_ids = np.nonzero(mask)[0]
            ty, tx = np.divmod(valid_ids, r)
            d2 = (tx - x[v]) ** 2 + (ty - y[v]) ** 2
            rows.append(v)
            cols.append(int(valid_ids[np.argmin(d2)]))
            data.append(1.0)
            continue
        for k in range(4):
            if w_valid[v, k] > 0:
                rows.append(v)
                cols.append(int(texel[v, k]))
                data.append(w_valid[v, k] / total[v])
    return sp.csr_matrix((data, (rows, cols)), shape=(n, r * r))


def boundary_loops(mesh: TriMesh) -> list[np.ndarray]:
    """Vertex loops of boundary edges (edges with exactly one incident face),
    each loop ordered by adjacency. Loops are reported in order of their
    smallest vertex index."""
    f = mesh.faces.astype(np.int64)
    n = mesh.num_vertices
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    keys = np.sort(edges, axis=1)
    enc = keys[:, 0] * n + keys[:, 1]
    uniq, counts = np.unique(enc, return_counts=True)
    boundary = set(uniq[counts == 1].tolist())
    nxt: dict[int, int] = {}
    for i, j in edges:
        k = min(i, j) * n + max(i, j)
        if k in boundary:
            nxt[int(i)] = int(j)  # directed as stored: consistent winding
    loops = []
    visited = set()
    for start in sorted(nxt):
        if start in visited:
            continue
        loop = [start]
        visited.add(start)
        cur = nxt[start]
        while cur != start and cur not in visited:
            loop.append(cur)
            visited.add(cur)
            if cur not in nxt:
                break
            cur = nxt[cur]
        loops.append(np.array(loop, dtype=np.int64))
    return loops
