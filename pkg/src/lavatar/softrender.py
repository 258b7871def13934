"""Differentiable soft rasterizer, two-layer compositing, and render losses.

The rasterizer draws one triangle mesh per call with sigmoid-softened
silhouette edges and a hard per-pixel depth winner, so screen-space
derivatives flow to vertices and to the sampled texture while occlusion
stays a plain z-buffer. All discrete choices (which face-pixel pairs exist,
which pair wins a pixel, which bilinear cell a sample lands in) are frozen
during the forward pass; the remaining computation is a pure tensor graph,
so gradients are exact wherever those choices are locally constant.

Pixel centers sit at half-integer coordinates. Distances that feed the
edge sigmoid are measured in pixels; ``edge_softness`` is the sigmoid
bandwidth in the same units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, concat, sparse_matmul, where
from .camera import Camera
from .mesh import TriMesh, UVGrid, texel_vertex_matrix, uv_valid_mask, vertex_normals

# Pairs are generated out to this many bandwidths from each face so that a
# pair appearing or vanishing under a tiny vertex move changes the mask by
# less than sigmoid(-16) ~ 1e-7, keeping finite-difference checks clean.
PAD_SIGMAS = 16.0

_MIN_AREA_PX = 1e-8  # projected faces flatter than this are skipped
_DIST_EPS = 1e-18  # keeps sqrt differentiable when a pixel sits on an edge


@dataclass
class LayerRender:
    """One mesh rendered from one camera.

    ``image`` is surface color composited over the background with the soft
    mask, ``surface`` the pre-composite winner color, ``depth`` the
    perspective-correct winner depth (0 where nothing was drawn), and
    ``covered`` the hard footprint: pixels whose center lies inside at
    least one projected face.
    """

    image: Tensor
    surface: Tensor
    mask: Tensor
    depth: Tensor
    covered: np.ndarray


@dataclass
class RenderOutput:
    """Two-layer composite: body behind clothing unless depth says otherwise.

    ``layer`` assigns each pixel 0 (background), 1 (body on top), or
    2 (clothing on top); ``cloth_on_top`` is the boolean gate used for the
    composite at pixels both layers cover.
    """

    image: Tensor
    mask: Tensor
    body: LayerRender
    cloth: LayerRender
    layer: np.ndarray
    cloth_on_top: np.ndarray

    @property
    def body_depth(self) -> Tensor:
        return self.body.depth

    @property
    def cloth_depth(self) -> Tensor:
        return self.cloth.depth


@dataclass
class LossWeights:
    """Weights shared by the fitting and inverse-rendering objectives.

    ``depth_scale`` is the softness (meters) of the depth-order sigmoid in
    the visibility loss.
    """

    geometry: float = 1.0
    laplacian: float = 1.0
    texture: float = 1.0
    kl: float = 1e-3
    image: float = 1.0
    mask: float = 1.0
    visibility: float = 1.0
    depth_scale: float = 0.01

    def __post_init__(self):
        for name in ("geometry", "laplacian", "texture", "kl", "image",
                     "mask", "visibility"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"weight {name!r} must be finite and >= 0")
            setattr(self, name, v)
        self.depth_scale = float(self.depth_scale)
        if not np.isfinite(self.depth_scale) or self.depth_scale <= 0.0:
            raise ValueError("depth_scale must be finite and > 0")


def _texture_tensor(texture) -> Tensor:
    if isinstance(texture, UVGrid):
        t = Tensor(np.asarray(texture.texels, dtype=np.float64))
    elif isinstance(texture, Tensor):
        t = texture
    else:
        t = Tensor(np.asarray(texture, dtype=np.float64))
    if t.value.ndim != 3 or t.value.shape[0] != t.value.shape[1]:
        raise ValueError("texture must be a square (R, R, C) grid")
    return t


def _empty_render(camera: Camera, channels: int, background) -> LayerRender:
    h, w = camera.height, camera.width
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64),
                         (h, w, channels)).copy()
    return LayerRender(
        image=Tensor(bg),
        surface=Tensor(np.zeros((h, w, channels))),
        mask=Tensor(np.zeros((h, w))),
        depth=Tensor(np.zeros((h, w))),
        covered=np.zeros((h, w), dtype=bool),
    )


def rasterize(mesh: TriMesh, texture, camera: Camera, edge_softness: float = 1.0,
              vertices=None, background=0.0, znear: float = 1e-3,
              pad_sigmas: float = PAD_SIGMAS) -> LayerRender:
    """Render one mesh with soft silhouettes and hard depth visibility.

    ``vertices`` overrides ``mesh.vertices`` and may be a Tensor to make the
    output differentiable with respect to geometry; ``texture`` may be a
    UVGrid or a Tensor for the same reason. Faces with any vertex nearer
    than ``znear`` or with a near-degenerate projection are skipped.
    ``pad_sigmas`` widens the face-pixel pairing window; larger values cost
    pairs but shrink the step the mask takes when the window boundary
    crosses a pixel.

    The mask is the clipped sum of per-face coverages. Coverage is a
    sigmoid of the smooth distance to the silhouette, handed across seam
    edges by complementary sigmoid gates, so interiors stay solid while
    coverage decays within a few bandwidths of the footprint; the decay
    assumes projected faces larger than a few bandwidths.
    """
    if not mesh.has_uv():
        raise ValueError("rasterize needs a mesh with a UV atlas")
    if edge_softness <= 0.0:
        raise ValueError("edge_softness must be > 0")
    tex_t = _texture_tensor(texture)
    res, channels = tex_t.value.shape[0], tex_t.value.shape[2]
    if vertices is None:
        verts_t = Tensor(mesh.vertices)
    elif isinstance(vertices, Tensor):
        verts_t = vertices
    else:
        verts_t = Tensor(np.asarray(vertices, dtype=np.float64).reshape(-1, 3))
    if verts_t.value.shape != mesh.vertices.shape:
        raise ValueError("vertex override must match the mesh vertex count")
    h, w = camera.height, camera.width
    sigma = float(edge_softness)

    cam_pts = verts_t @ camera.rotation.T + camera.translation
    z_t = cam_pts[:, 2].clip(znear, np.inf)
    u_t = cam_pts[:, 0] / z_t * camera.fx + camera.cx
    v_t = cam_pts[:, 1] / z_t * camera.fy + camera.cy
    uval, vval, zraw = u_t.value, v_t.value, cam_pts.value[:, 2]

    faces = mesh.faces
    fz = zraw[faces]
    ok = np.all(fz > znear, axis=1)
    fu, fv = uval[faces], vval[faces]
    area2 = ((fu[:, 1] - fu[:, 0]) * (fv[:, 2] - fv[:, 0])
             - (fv[:, 1] - fv[:, 0]) * (fu[:, 2] - fu[:, 0]))
    ok &= np.abs(area2) > _MIN_AREA_PX
    pad = float(pad_sigmas) * sigma + 0.5
    lox = np.floor(fu.min(axis=1) - pad).astype(int)
    hix = np.ceil(fu.max(axis=1) + pad).astype(int)
    loy = np.floor(fv.min(axis=1) - pad).astype(int)
    hiy = np.ceil(fv.max(axis=1) + pad).astype(int)
    lox, hix = np.clip(lox, 0, w - 1), np.clip(hix, 0, w - 1)
    loy, hiy = np.clip(loy, 0, h - 1), np.clip(hiy, 0, h - 1)
    ok &= (np.floor(fu.min(axis=1) - pad) <= w - 1) & (np.ceil(fu.max(axis=1) + pad) >= 0)
    ok &= (np.floor(fv.min(axis=1) - pad) <= h - 1) & (np.ceil(fv.max(axis=1) + pad) >= 0)

    # an edge softens the mask only where the projected footprint actually
    # ends: edges shared by two valid faces with the same projected winding
    # are interior seams and must not dim the summed coverage
    valid_faces = np.nonzero(ok)[0]
    sil = np.ones((len(faces), 3), dtype=bool)
    neighbor_pairs = np.zeros((0, 2), dtype=np.int64)
    if valid_faces.size:
        end_a = faces[valid_faces]
        end_b = end_a[:, [1, 2, 0]]
        lo = np.minimum(end_a, end_b).astype(np.int64)
        hi = np.maximum(end_a, end_b).astype(np.int64)
        key = (lo * np.int64(len(mesh.vertices) + 1) + hi).ravel()
        owner_face = np.repeat(valid_faces, 3)
        owner_slot = np.tile(np.arange(3), valid_faces.size)
        owner_sign = np.sign(area2[owner_face])
        kord = np.argsort(key, kind="stable")
        key, owner_face = key[kord], owner_face[kord]
        owner_slot, owner_sign = owner_slot[kord], owner_sign[kord]
        starts_e = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        counts_e = np.diff(np.r_[starts_e, key.size])
        two = starts_e[counts_e == 2]
        shared = two[owner_sign[two] == owner_sign[two + 1]]
        sil[owner_face[shared], owner_slot[shared]] = False
        sil[owner_face[shared + 1], owner_slot[shared + 1]] = False
        neighbor_pairs = np.stack(
            [owner_face[shared], owner_face[shared + 1]], axis=1)

    # Per-face edge tables for the soft coverage. A face is gated softly by
    # its silhouette edges plus those of its seam neighbors (so coverage
    # handed across a seam still respects the footprint boundary) and by one
    # sigmoid per seam edge. The seam gates of the two sides are exact
    # complements, which makes summed coverage flat across seams.
    own_sil = {int(f): [] for f in valid_faces}
    own_int = {int(f): [] for f in valid_faces}
    signs = np.sign(area2)
    for f in valid_faces:
        fi = int(f)
        for k in range(3):
            a, b = int(faces[f, k]), int(faces[f, (k + 1) % 3])
            entry = (a, b, float(signs[f]))
            (own_sil if sil[f, k] else own_int)[fi].append(entry)
    sil_sets = {f: list(v) for f, v in own_sil.items()}
    for fa, fb in neighbor_pairs:
        sil_sets[int(fa)].extend(own_sil[int(fb)])
        sil_sets[int(fb)].extend(own_sil[int(fa)])

    pair_face, pair_pid = [], []
    for f in valid_faces:
        xs = np.arange(lox[f], hix[f] + 1)
        ys = np.arange(loy[f], hiy[f] + 1)
        gx, gy = np.meshgrid(xs, ys)
        pid = (gy * w + gx).ravel()
        pair_face.append(np.full(pid.size, f, dtype=np.int64))
        pair_pid.append(pid)
    if not pair_face:
        return _empty_render(camera, channels, background)
    pair_face = np.concatenate(pair_face)
    pair_pid = np.concatenate(pair_pid)
    order = np.argsort(pair_pid, kind="stable")
    pair_face, pair_pid = pair_face[order], pair_pid[order]
    np_pairs = pair_pid.size

    corner_idx = faces[pair_face]  # (P, 3) vertex ids
    pxc = (pair_pid % w).astype(np.float64) + 0.5
    pyc = (pair_pid // w).astype(np.float64) + 0.5
    cu = [u_t[corner_idx[:, k]] for k in range(3)]
    cv = [v_t[corner_idx[:, k]] for k in range(3)]
    cz = [z_t[corner_idx[:, k]] for k in range(3)]

    winding = np.sign(area2[pair_face])
    dists, feet, crosses = [], [], []
    for k in range(3):
        ax, ay = cu[k], cv[k]
        bx, by = cu[(k + 1) % 3], cv[(k + 1) % 3]
        ex, ey = bx - ax, by - ay
        apx, apy = pxc - ax, pyc - ay
        tproj = (apx * ex + apy * ey) / (ex * ex + ey * ey + 1e-30)
        t = tproj.clip(0.0, 1.0)
        dx, dy = apx - t * ex, apy - t * ey
        dists.append(((dx * dx + dy * dy) + _DIST_EPS) ** 0.5)
        feet.append(t)
        cross = ex * apy - ey * apx
        crosses.append(cross.value)

    arange_p = np.arange(np_pairs)
    pair_sil = sil[pair_face]  # (P, 3)
    dvals = np.stack([d.value for d in dists], axis=0)
    big = 1e6 * sigma  # sigmoid underflows to exactly 0/1 this far out
    kmin = np.argmin(np.where(pair_sil.T, dvals, np.inf), axis=0)
    any_sil = pair_sil.any(axis=1)
    kmin[~any_sil] = 0
    dminv = np.min(np.where(pair_sil.T, dvals, np.inf), axis=0)
    dminv[~any_sil] = big
    tstack = concat([t.reshape(1, np_pairs) for t in feet], axis=0)
    tmin = tstack[(kmin, arange_p)]
    inside = np.all(np.stack(crosses, axis=0) * winding >= 0.0, axis=0)

    # soft coverage of one pair: sigmoid(-smoothmax(silhouette lines)/sigma)
    # damped by one sigmoid per seam edge. Signed line distances are
    # negative on the face's inside; the smoothmax (sigma-scaled logsumexp)
    # has no kinks at nearest-edge switches, so mask gradients match finite
    # differences everywhere.
    def _line_rows(table):
        counts = np.zeros(len(faces), dtype=np.int64)
        fa, fb, fs = [], [], []
        for f in valid_faces:
            ents = table[int(f)]
            counts[f] = len(ents)
            for a, b, s in ents:
                fa.append(a)
                fb.append(b)
                fs.append(s)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        cnt = counts[pair_face]
        rp = np.repeat(arange_p, cnt)
        offs = np.arange(int(cnt.sum())) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        ent = np.repeat(starts[pair_face], cnt) + offs
        ra = np.array(fa, dtype=np.int64)[ent]
        rb = np.array(fb, dtype=np.int64)[ent]
        rs = np.array(fs, dtype=np.float64)[ent]
        ax, ay = u_t[ra], v_t[ra]
        ex, ey = u_t[rb] - ax, v_t[rb] - ay
        apx, apy = pxc[rp] - ax, pyc[rp] - ay
        elen = (ex * ex + ey * ey + 1e-30) ** 0.5
        return rp, (ex * apy - ey * apx) * (-rs) / elen

    sil_rows, sil_svals = _line_rows(sil_sets)
    int_rows, int_svals = _line_rows(own_int)
    has_sil = np.zeros(np_pairs, dtype=bool)
    has_sil[sil_rows] = True
    shift = np.zeros(np_pairs)
    if sil_rows.size:
        gstart = np.flatnonzero(np.r_[True, sil_rows[1:] != sil_rows[:-1]])
        shift[sil_rows[gstart]] = np.maximum.reduceat(sil_svals.value, gstart)
    terms = ((sil_svals - shift[sil_rows]) * (1.0 / sigma)).exp()
    smat = sp.csr_matrix(
        (np.ones(sil_rows.size), (sil_rows, np.arange(sil_rows.size))),
        shape=(np_pairs, sil_rows.size))
    ssum = sparse_matmul(smat, terms) + (~has_sil).astype(np.float64)
    sdist = ssum.log() * sigma + shift
    sil_log = where(has_sil, -((sdist * (1.0 / sigma)).softplus()),
                    np.zeros(np_pairs))
    imat = sp.csr_matrix(
        (np.ones(int_rows.size), (int_rows, np.arange(int_rows.size))),
        shape=(np_pairs, int_rows.size))
    int_log = sparse_matmul(imat, (int_svals * (1.0 / sigma)).softplus())
    cov_pair = (sil_log - int_log).exp()

    # per-pixel groups (pairs are sorted by pid); the mask is the clipped
    # sum of coverages, which seam complements keep solid across interior
    # edges and the clip caps where projections overlap
    new_group = np.r_[True, pair_pid[1:] != pair_pid[:-1]]
    group_id = np.cumsum(new_group) - 1
    active_pid = pair_pid[new_group]
    n_active = active_pid.size
    gather = sp.csr_matrix(
        (np.ones(np_pairs), (group_id, arange_p)), shape=(n_active, np_pairs))
    mask_active = sparse_matmul(gather, cov_pair).clip(0.0, 1.0)

    # hard winner per pixel: inside pairs by nearest interpolated depth,
    # otherwise the pair whose edge is closest (values only, frozen)
    zv = np.stack([c.value for c in cz], axis=1)
    uvv = np.stack([c.value for c in cu], axis=1)
    vvv = np.stack([c.value for c in cv], axis=1)
    v0x, v0y = uvv[:, 1] - uvv[:, 0], vvv[:, 1] - vvv[:, 0]
    v1x, v1y = uvv[:, 2] - uvv[:, 0], vvv[:, 2] - vvv[:, 0]
    v2x, v2y = pxc - uvv[:, 0], pyc - vvv[:, 0]
    d00 = v0x * v0x + v0y * v0y
    d01 = v0x * v1x + v0y * v1y
    d11 = v1x * v1x + v1y * v1y
    d20 = v2x * v0x + v2y * v0y
    d21 = v2x * v1x + v2y * v1y
    denom_v = d00 * d11 - d01 * d01
    bw1 = (d11 * d20 - d01 * d21) / denom_v
    bw2 = (d00 * d21 - d01 * d20) / denom_v
    bw0 = 1.0 - bw1 - bw2
    bv = np.clip(np.stack([bw0, bw1, bw2], axis=1), 0.0, 1.0)
    bv /= bv.sum(axis=1, keepdims=True)
    z_est = 1.0 / (bv / zv).sum(axis=1)
    sort_key = np.where(inside, z_est, dminv)
    worder = np.lexsort((pair_face, sort_key, ~inside, pair_pid))
    starts = np.flatnonzero(np.r_[True, pair_pid[worder][1:] != pair_pid[worder][:-1]])
    wsel = worder[starts]  # winner pair per active pixel, pid-sorted

    wa = [c[wsel] for c in cu]
    wb = [c[wsel] for c in cv]
    wz = [c[wsel] for c in cz]
    px_w, py_w = pxc[wsel], pyc[wsel]
    e0x, e0y = wa[1] - wa[0], wb[1] - wb[0]
    e1x, e1y = wa[2] - wa[0], wb[2] - wb[0]
    p0x, p0y = px_w - wa[0], py_w - wb[0]
    t00 = e0x * e0x + e0y * e0y
    t01 = e0x * e1x + e0y * e1y
    t11 = e1x * e1x + e1y * e1y
    t20 = p0x * e0x + p0y * e0y
    t21 = p0x * e1x + p0y * e1y
    denom = t00 * t11 - t01 * t01
    in1 = (t11 * t20 - t01 * t21) / denom
    in2 = (t00 * t21 - t01 * t20) / denom
    in0 = 1.0 - in1 - in2
    t_w = tmin[wsel]
    k_w = kmin[wsel]
    one0 = (k_w == 0).astype(np.float64)
    one1 = (k_w == 1).astype(np.float64)
    one2 = (k_w == 2).astype(np.float64)
    rim0 = (1.0 - t_w) * one0 + t_w * one2
    rim1 = t_w * one0 + (1.0 - t_w) * one1
    rim2 = t_w * one1 + (1.0 - t_w) * one2
    ins_w = inside[wsel]
    b0 = where(ins_w, in0, rim0)
    b1 = where(ins_w, in1, rim1)
    b2 = where(ins_w, in2, rim2)

    inv_z = b0 / wz[0] + b1 / wz[1] + b2 / wz[2]
    z_pix = 1.0 / inv_z
    wp0 = b0 / wz[0] * z_pix
    wp1 = b1 / wz[1] * z_pix
    wp2 = b2 / wz[2] * z_pix

    uv_corners = mesh.uv_coords[mesh.uv_faces[pair_face[wsel]]]  # (A, 3, 2)
    sx = wp0 * uv_corners[:, 0, 0] + wp1 * uv_corners[:, 1, 0] + wp2 * uv_corners[:, 2, 0]
    sy = wp0 * uv_corners[:, 0, 1] + wp1 * uv_corners[:, 1, 1] + wp2 * uv_corners[:, 2, 1]
    cx_t = (sx.clip(0.0, 1.0) * float(res) - 0.5).clip(0.0, res - 1.0)
    cy_t = (sy.clip(0.0, 1.0) * float(res) - 0.5).clip(0.0, res - 1.0)
    x0 = np.minimum(np.floor(cx_t.value), res - 2).astype(int) if res > 1 else np.zeros(n_active, int)
    y0 = np.minimum(np.floor(cy_t.value), res - 2).astype(int) if res > 1 else np.zeros(n_active, int)
    fx_t = (cx_t - x0).reshape(n_active, 1)
    fy_t = (cy_t - y0).reshape(n_active, 1)
    x1 = np.minimum(x0 + 1, res - 1)
    y1 = np.minimum(y0 + 1, res - 1)
    c00 = tex_t[(y0, x0)]
    c10 = tex_t[(y0, x1)]
    c01 = tex_t[(y1, x0)]
    c11 = tex_t[(y1, x1)]
    color = (c00 * ((1.0 - fy_t) * (1.0 - fx_t)) + c10 * ((1.0 - fy_t) * fx_t)
             + c01 * (fy_t * (1.0 - fx_t)) + c11 * (fy_t * fx_t))

    scatter = sp.csr_matrix(
        (np.ones(n_active), (active_pid, np.arange(n_active))),
        shape=(h * w, n_active))
    mask_full = sparse_matmul(scatter, mask_active).reshape(h, w)
    surface_full = sparse_matmul(scatter, color).reshape(h, w, channels)
    depth_full = sparse_matmul(scatter, z_pix).reshape(h, w)
    covered = np.zeros(h * w, dtype=bool)
    covered[pair_pid[inside]] = True
    covered = covered.reshape(h, w)

    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (channels,))
    mask_col = mask_full.reshape(h, w, 1)
    image = surface_full * mask_col + (1.0 - mask_col) * bg
    return LayerRender(image=image, surface=surface_full, mask=mask_full,
                       depth=depth_full, covered=covered)


def hard_depth(mesh: TriMesh, camera: Camera, vertices=None,
               znear: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Winner depth and hard footprint without the differentiable graph.

    Returns ``(depth, covered)`` matching ``rasterize`` on covered pixels:
    ``covered`` is identical and ``depth`` agrees wherever ``covered`` is
    True (elsewhere it is 0). Use for visibility probes where gradients and
    soft coverage are not needed; it is an order of magnitude cheaper.
    """
    verts = mesh.vertices if vertices is None else np.asarray(vertices, float)
    h, w = camera.height, camera.width
    depth = np.zeros((h, w))
    covered = np.zeros((h, w), dtype=bool)

    cam_pts = verts @ camera.rotation.T + camera.translation
    zraw = cam_pts[:, 2]
    z_cl = np.clip(zraw, znear, np.inf)
    uval = cam_pts[:, 0] / z_cl * camera.fx + camera.cx
    vval = cam_pts[:, 1] / z_cl * camera.fy + camera.cy

    faces = mesh.faces
    fz = zraw[faces]
    ok = np.all(fz > znear, axis=1)
    fu, fv = uval[faces], vval[faces]
    area2 = ((fu[:, 1] - fu[:, 0]) * (fv[:, 2] - fv[:, 0])
             - (fv[:, 1] - fv[:, 0]) * (fu[:, 2] - fu[:, 0]))
    ok &= np.abs(area2) > _MIN_AREA_PX
    lox = np.clip(np.floor(fu.min(axis=1) - 0.5).astype(int), 0, w - 1)
    hix = np.clip(np.ceil(fu.max(axis=1) + 0.5).astype(int), 0, w - 1)
    loy = np.clip(np.floor(fv.min(axis=1) - 0.5).astype(int), 0, h - 1)
    hiy = np.clip(np.ceil(fv.max(axis=1) + 0.5).astype(int), 0, h - 1)

    pair_face, pair_pid = [], []
    for f in np.nonzero(ok)[0]:
        xs = np.arange(lox[f], hix[f] + 1)
        ys = np.arange(loy[f], hiy[f] + 1)
        gx, gy = np.meshgrid(xs, ys)
        pid = (gy * w + gx).ravel()
        pair_face.append(np.full(pid.size, f, dtype=np.int64))
        pair_pid.append(pid)
    if not pair_face:
        return depth, covered
    pair_face = np.concatenate(pair_face)
    pair_pid = np.concatenate(pair_pid)

    corner = faces[pair_face]
    pxc = (pair_pid % w).astype(np.float64) + 0.5
    pyc = (pair_pid // w).astype(np.float64) + 0.5
    cu = uval[corner]
    cv = vval[corner]
    winding = np.sign(area2[pair_face])
    inside = np.ones(pair_pid.size, dtype=bool)
    for k in range(3):
        ax, ay = cu[:, k], cv[:, k]
        ex = cu[:, (k + 1) % 3] - ax
        ey = cv[:, (k + 1) % 3] - ay
        inside &= (ex * (pyc - ay) - ey * (pxc - ax)) * winding >= 0.0
    if not inside.any():
        return depth, covered
    pair_face, pair_pid = pair_face[inside], pair_pid[inside]
    cu, cv, pxc, pyc = cu[inside], cv[inside], pxc[inside], pyc[inside]
    zv = z_cl[faces[pair_face]]

    # perspective-correct depth from screen barycentrics, as the renderer
    v0x, v0y = cu[:, 1] - cu[:, 0], cv[:, 1] - cv[:, 0]
    v1x, v1y = cu[:, 2] - cu[:, 0], cv[:, 2] - cv[:, 0]
    v2x, v2y = pxc - cu[:, 0], pyc - cv[:, 0]
    d00 = v0x * v0x + v0y * v0y
    d01 = v0x * v1x + v0y * v1y
    d11 = v1x * v1x + v1y * v1y
    d20 = v2x * v0x + v2y * v0y
    d21 = v2x * v1x + v2y * v1y
    denom_v = d00 * d11 - d01 * d01
    bw1 = (d11 * d20 - d01 * d21) / denom_v
    bw2 = (d00 * d21 - d01 * d20) / denom_v
    bw0 = 1.0 - bw1 - bw2
    bv = np.clip(np.stack([bw0, bw1, bw2], axis=1), 0.0, 1.0)
    bv /= bv.sum(axis=1, keepdims=True)
    z_est = 1.0 / (bv / zv).sum(axis=1)

    order = np.lexsort((pair_face, z_est, pair_pid))
    first = np.r_[True, pair_pid[order][1:] != pair_pid[order][:-1]]
    win = order[first]
    flat = depth.ravel()
    flat[pair_pid[win]] = z_est[win]
    covered.ravel()[pair_pid[win]] = True
    return flat.reshape(h, w), covered


def composite_layers(body: LayerRender, cloth: LayerRender,
                     background=0.0) -> RenderOutput:
    """Blend two rendered layers with the nearer one on top.

    Where only one layer covers a pixel that layer is on top; where both
    cover, the one with the smaller winner depth wins (ties go to the
    clothing layer, which sits outside the body at equal depth).
    """
    if body.mask.value.shape != cloth.mask.value.shape:
        raise ValueError("layer renders must share the image size")
    h, w = body.mask.value.shape
    channels = body.surface.value.shape[2]
    cloth_top = cloth.covered & (~body.covered
                                 | (cloth.depth.value <= body.depth.value))
    ct3 = cloth_top[:, :, None]
    top_mask = where(cloth_top, cloth.mask, body.mask)
    bot_mask = where(cloth_top, body.mask, cloth.mask)
    top_surf = where(ct3, cloth.surface, body.surface)
    bot_surf = where(ct3, body.surface, cloth.surface)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (channels,))
    tm3 = top_mask.reshape(h, w, 1)
    bm3 = bot_mask.reshape(h, w, 1)
    image = top_surf * tm3 + (1.0 - tm3) * (bot_surf * bm3 + (1.0 - bm3) * bg)
    mask = 1.0 - (1.0 - body.mask) * (1.0 - cloth.mask)
    layer = np.where(cloth_top, 2, np.where(body.covered, 1, 0)).astype(np.int8)
    return RenderOutput(image=image, mask=mask, body=body, cloth=cloth,
                        layer=layer, cloth_on_top=cloth_top)


def soft_visibility_loss(render: RenderOutput, cloth_labels: np.ndarray,
                         depth_scale: float = 0.01) -> Tensor:
    """Penalty for clothing hidden behind the body at cloth-labeled pixels.

    At pixels both layers cover, S = sigmoid((cloth depth - body depth) /
    depth_scale) measures how confidently the body occludes the clothing.
    Pixels labeled clothing with S strictly above 1/2 contribute S^2; the
    loss is their mean (0 when no pixel qualifies). The gradient with
    respect to cloth depth is positive there, so a descent step (the
    negative gradient) pulls the clothing toward the camera.
    """
    depth_scale = float(depth_scale)
    if not np.isfinite(depth_scale) or depth_scale <= 0.0:
        raise ValueError("depth_scale must be finite and > 0")
    labels = np.asarray(cloth_labels, dtype=bool)
    h, w = render.body.depth.value.shape
    if labels.shape != (h, w):
        raise ValueError("cloth label image must match the render size")
    both = render.body.covered & render.cloth.covered
    idx = np.flatnonzero(both.ravel())
    if idx.size == 0:
        return Tensor(0.0)
    db = render.body.depth.reshape(h * w)[idx]
    dc = render.cloth.depth.reshape(h * w)[idx]
    s = ((dc - db) * (1.0 / depth_scale)).sigmoid()
    active = labels.ravel()[idx] & (s.value > 0.5)
    if not active.any():
        return Tensor(0.0)
    contrib = where(active, s * s, np.zeros(idx.size))
    return contrib.sum() * (1.0 / max(1, int(active.sum())))


def inverse_render_loss(render: RenderOutput, target_image: np.ndarray,
                        target_mask: np.ndarray, cloth_labels: np.ndarray,
                        weights: LossWeights, laplacian_terms=()) -> Tensor:
    """Weighted image, mask, visibility, and Laplacian objective.

    ``laplacian_terms`` is a sequence of (laplacian, vertices, reference)
    triples, one per mesh layer: the term is the mean over vertices of the
    squared difference between the Laplacian coordinates of ``vertices``
    (a Tensor) and those of the reference geometry.
    """
    target_image = np.asarray(target_image, dtype=np.float64)
    target_mask = np.asarray(target_mask, dtype=np.float64)
    if target_image.shape != render.image.value.shape:
        raise ValueError("target image size does not match the render")
    if target_mask.shape != render.mask.value.shape:
        raise ValueError("target mask size does not match the render")
    terms = []
    if weights.image > 0.0:
        terms.append((render.image - target_image).abs().mean() * weights.image)
    if weights.mask > 0.0:
        terms.append((render.mask - target_mask).abs().mean() * weights.mask)
    if weights.visibility > 0.0:
        vis = soft_visibility_loss(render, cloth_labels, weights.depth_scale)
        terms.append(vis * weights.visibility)
    if weights.laplacian > 0.0:
        for lap, verts, ref in laplacian_terms:
            ref_delta = lap @ np.asarray(ref, dtype=np.float64)
            diff = sparse_matmul(sp.csr_matrix(lap), verts) - ref_delta
            terms.append((diff * diff).sum(axis=1).mean() * weights.laplacian)
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def unwrap_texture(mesh: TriMesh, images, cameras, resolution: int,
                   vertices=None, depth_tolerance: float = 0.005,
                   pixel_masks=None) -> UVGrid:
    """Back-project camera images into the mesh's UV atlas.

    Each texel's world position (barycentric blend of mesh vertices) is
    projected into every view; views where the texel passes a depth test
    against the mesh's own rendered depth map contribute a bilinear sample
    weighted by the cosine between surface normal and view direction.
    ``pixel_masks`` optionally scales each view's contribution by a per-pixel
    weight (nearest-pixel lookup), e.g. a segmentation gate. Texels outside
    the atlas or seen by no view are marked invalid.
    """
    if len(images) != len(cameras):
        raise ValueError("need one camera per image")
    if len(images) == 0:
        raise ValueError("need at least one view")
    if pixel_masks is not None and len(pixel_masks) != len(cameras):
        raise ValueError("need one pixel mask per view")
    verts = mesh.vertices if vertices is None else np.asarray(vertices, float)
    posed = mesh.with_vertices(verts)
    channels = int(np.asarray(images[0]).shape[2])
    bary = texel_vertex_matrix(mesh, resolution)
    atlas_valid = uv_valid_mask(mesh, resolution).ravel()
    pos = bary @ verts
    nrm = bary @ vertex_normals(posed)
    nlen = np.linalg.norm(nrm, axis=1)
    nrm[nlen > 1e-12] /= nlen[nlen > 1e-12, None]
    rr = resolution * resolution
    csum = np.zeros((rr, channels))
    wsum = np.zeros(rr)
    for view, (img, cam) in enumerate(zip(images, cameras)):
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (cam.height, cam.width, channels):
            raise ValueError("image size does not match its camera")
        dmap, cov = hard_depth(posed, cam)
        pix, z = cam.project(pos)
        u, v = pix[:, 0], pix[:, 1]
        inb = (z > 1e-6) & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
        ix = np.clip(np.floor(u), 0, cam.width - 1).astype(int)
        iy = np.clip(np.floor(v), 0, cam.height - 1).astype(int)
        vis = inb & cov[iy, ix] & (z <= dmap[iy, ix] + depth_tolerance)
        to_cam = cam.center - pos
        dlen = np.linalg.norm(to_cam, axis=1)
        to_cam[dlen > 1e-12] /= dlen[dlen > 1e-12, None]
        cosw = np.maximum((nrm * to_cam).sum(axis=1), 0.0)
        weight = np.where(vis & atlas_valid, cosw, 0.0)
        if pixel_masks is not None:
            pm = np.asarray(pixel_masks[view], dtype=np.float64)
            if pm.shape != (cam.height, cam.width):
                raise ValueError("pixel mask size does not match its camera")
            weight = weight * pm[iy, ix]
        cxp = np.clip(u - 0.5, 0.0, cam.width - 1.0)
        cyp = np.clip(v - 0.5, 0.0, cam.height - 1.0)
        x0 = np.minimum(np.floor(cxp), cam.width - 2).astype(int)
        y0 = np.minimum(np.floor(cyp), cam.height - 2).astype(int)
        fx = (cxp - x0)[:, None]
        fy = (cyp - y0)[:, None]
        sample = (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x0 + 1] * (1 - fy) * fx
                  + img[y0 + 1, x0] * fy * (1 - fx) + img[y0 + 1, x0 + 1] * fy * fx)
        csum += weight[:, None] * sample
        wsum += weight
    valid = atlas_valid & (wsum > 1e-8)
    texels = np.zeros((rr, channels))
    texels[valid] = csum[valid] / wsum[valid, None]
    return UVGrid(resolution=resolution, channels=channels,
                  texels=texels.reshape(resolution, resolution, channels),
                  valid_mask=valid.reshape(resolution, resolution))
