"""Two-layer registration: tracking, segmentation, clothing fit, inner layer.

Pipeline per frame: fit the skeleton to keypoints and free-form track the
single-layer surface, segment it into body and clothing, register the
clothing template to the clothing region (biharmonic initialization plus
non-rigid ICP), estimate the body surface hidden under the garment, and
unwrap per-layer textures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .errors import RegistrationError, SolverError
from .kinematics import (
    SkeletonPose,
    SkinningWeights,
    fit_pose,
    lbs_pose,
    read_pose_sequence_text,
    write_pose_sequence_text,
)
from .mesh import (
    LaplacianOperator,
    SurfaceQuery,
    TriMesh,
    UVGrid,
    boundary_loops,
    face_normals,
    vertex_normals,
)
from .meshio import read_grid, read_mesh_frame, texture_to_png, write_grid, write_mesh_frame
from .softrender import hard_depth, unwrap_texture

log = logging.getLogger(__name__)

BODY = 0
UPPER_CLOTHING = 1

# image label conventions from capture frames
_IMG_BODY = 1
_IMG_CLOTH = 2


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class SegmentationLabels:
    """Per-vertex body/clothing split plus the per-view label images that
    produced it. Labels: 0 body, 1 upper clothing."""

    vertex_labels: np.ndarray
    view_images: list[np.ndarray]

    def __post_init__(self):
        self.vertex_labels = np.asarray(self.vertex_labels, dtype=np.int8).reshape(-1)
        if not np.isin(self.vertex_labels, (BODY, UPPER_CLOTHING)).all():
            raise ValueError("vertex labels must be 0 (body) or 1 (upper clothing)")

    def body_vertices(self) -> np.ndarray:
        return np.nonzero(self.vertex_labels == BODY)[0]

    def cloth_vertices(self) -> np.ndarray:
        return np.nonzero(self.vertex_labels == UPPER_CLOTHING)[0]


@dataclass
class BoundaryConstraint:
    """Pinned template vertices: ``indices[k]`` must land on ``targets[k]``."""

    indices: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if len(self.indices) != len(self.targets):
            raise ValueError("indices and targets must pair up")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("constraint indices must be distinct")
        if not np.isfinite(self.targets).all():
            raise ValueError("constraint targets must be finite")


@dataclass
class FrameRegistration:
    """One frame of the two-layer registration: fitted pose, both template
    meshes in world space, and per-layer unwrapped textures."""

    pose: SkeletonPose
    body_mesh: TriMesh
    cloth_mesh: TriMesh
    body_texture: UVGrid
    cloth_texture: UVGrid


# ---------------------------------------------------------------------------
# Single-layer tracking
# ---------------------------------------------------------------------------


def single_layer_track(capture, skeleton, weights, rest: TriMesh,
                       prev_pose: SkeletonPose, data_weight: float = 1.0,
                       laplacian_weight: float = 0.1,
                       icp_iters: int = 4) -> tuple[SkeletonPose, TriMesh]:
    """Fit the skeleton to the frame's keypoints, then free-form deform the
    skinned mesh onto the reconstructed surface.

    The free-form step minimizes squared closest-point distance plus
    ``laplacian_weight`` times the squared Laplacian of the displacement
    from the skinned mesh, so corrections stay smooth.
    """
    fit = fit_pose(skeleton, capture.keypoints, prev_pose)
    if not fit.converged:
        log.warning("pose fit did not converge (residual %.3g m after %d iterations)",
                    fit.residual, fit.iterations)
    skinned = lbs_pose(rest, skeleton, weights, fit.pose)
    target = SurfaceQuery(capture.surface, chunk=512)
    lap = LaplacianOperator.from_mesh(rest).matrix
    n = rest.num_vertices
    system = (data_weight * sp.identity(n, format="csc")
              + laplacian_weight * (lap.T @ lap)).tocsc()
    solver = splu(system)
    verts = skinned.vertices.copy()
    for _ in range(icp_iters):
        closest, _, _ = target.closest(verts)
        rhs = data_weight * (closest - skinned.vertices)
        disp = np.column_stack([solver.solve(rhs[:, k]) for k in range(3)])
        verts = skinned.vertices + disp
    tracked = rest.with_vertices(verts)
    if log.isEnabledFor(logging.INFO):
        forward = np.abs(target.closest(verts)[2]).mean()
        backward = np.abs(
            SurfaceQuery(tracked, chunk=512).closest(capture.surface.vertices)[2]).mean()
        log.info("tracked frame: symmetric surface distance %.4f mm",
                 (forward + backward) * 500.0)
    return fit.pose, tracked


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


def _mesh_edges(faces: np.ndarray) -> np.ndarray:
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def _label_energy(labels, votes_frac, edges, smoothness) -> float:
    unary = -votes_frac[np.arange(len(labels)), labels].sum()
    cut = (labels[edges[:, 0]] != labels[edges[:, 1]]).sum()
    return float(unary + smoothness * cut)


def _icm_labels(labels, frac, neighbors, smoothness, max_sweeps: int = 100):
    """Iterated conditional modes on a two-label Potts model. Each update
    minimizes one vertex's conditional energy, so the total never rises."""
    labels = np.asarray(labels).copy()
    for _ in range(max_sweeps):
        changed = False
        for v_i in range(len(labels)):
            cut0 = sum(labels[u_i] != BODY for u_i in neighbors[v_i])
            cut1 = sum(labels[u_i] != UPPER_CLOTHING for u_i in neighbors[v_i])
            e0 = -frac[v_i, BODY] + smoothness * cut0
            e1 = -frac[v_i, UPPER_CLOTHING] + smoothness * cut1
            new = BODY if e0 <= e1 else UPPER_CLOTHING
            if new != labels[v_i]:
                labels[v_i] = new
                changed = True
        if not changed:
            break
    return labels


def _interior_pixels(label_img: np.ndarray) -> np.ndarray:
    """Pixels whose full 3x3 neighborhood shares their label. Pixels on a
    label transition are unreliable at low resolutions and must not vote."""
    lab = np.asarray(label_img)
    padded = np.pad(lab, 1, mode="edge")
    interior = np.ones(lab.shape, dtype=bool)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            interior &= padded[dy:dy + lab.shape[0], dx:dx + lab.shape[1]] == lab
    return interior


def segment_mesh(mesh: TriMesh, capture, smoothness: float,
                 max_components: int = 1,
                 depth_tolerance: float = 0.005) -> SegmentationLabels:
    """Label every vertex body or upper clothing from multi-view label images.

    Votes come from views where the vertex is front-facing, passes a depth
    test against the mesh's own rendering, and lands on a pixel whose 3x3
    neighborhood is uniformly labeled. Unary cost is the negative vote
    fraction; a Potts penalty of ``smoothness`` per cut edge is minimized by
    iterated conditional modes from the majority-vote initialization.
    Vertices seen by no view inherit the majority label of their labeled
    neighbors. Clothing is pruned to the ``max_components`` largest connected
    components.
    """
    n = mesh.num_vertices
    votes = np.zeros((n, 2))
    normals = vertex_normals(mesh)
    for cam, label_img in zip(capture.cameras, capture.labels):
        dmap, cov = hard_depth(mesh, cam)
        pix, z = cam.project(mesh.vertices)
        u = np.nan_to_num(pix[:, 0], nan=-1.0, posinf=-1.0, neginf=-1.0)
        v = np.nan_to_num(pix[:, 1], nan=-1.0, posinf=-1.0, neginf=-1.0)
        inb = (z > 1e-6) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        ix = np.clip(np.floor(u), 0, cam.width - 1).astype(int)
        iy = np.clip(np.floor(v), 0, cam.height - 1).astype(int)
        facing = ((cam.center - mesh.vertices) * normals).sum(axis=1) > 0.0
        visible = (inb & facing & cov[iy, ix]
                   & (z <= dmap[iy, ix] + depth_tolerance)
                   & _interior_pixels(label_img)[iy, ix])
        lab = np.asarray(label_img)[iy, ix]
        votes[:, BODY] += visible & (lab == _IMG_BODY)
        votes[:, UPPER_CLOTHING] += visible & (lab == _IMG_CLOTH)

    total = votes.sum(axis=1)
    frac = np.zeros_like(votes)
    frac[total > 0] = votes[total > 0] / total[total > 0, None]
    labels = np.argmax(votes, axis=1).astype(np.int64)  # ties resolve to body

    edges = _mesh_edges(mesh.faces.astype(np.int64))
    neighbors = [[] for _ in range(n)]
    for a, b in edges:
        neighbors[a].append(int(b))
        neighbors[b].append(int(a))

    # vertices with no votes inherit the majority of already-labeled neighbors
    unlabeled = total == 0
    frontier = set(np.nonzero(unlabeled)[0].tolist())
    while frontier:
        progressed = False
        for v_i in sorted(frontier):
            ns = [u_i for u_i in neighbors[v_i] if not unlabeled[u_i]]
            if not ns:
                continue
            cloth = sum(labels[u_i] == UPPER_CLOTHING for u_i in ns)
            labels[v_i] = UPPER_CLOTHING if cloth * 2 > len(ns) else BODY
            unlabeled[v_i] = False
            frontier.discard(v_i)
            progressed = True
        if not progressed:
            for v_i in frontier:  # isolated patch with no information
                labels[v_i] = BODY
                unlabeled[v_i] = False
            break

    init_energy = _label_energy(labels, frac, edges, smoothness)
    labels = _icm_labels(labels, frac, neighbors, smoothness)
    final_energy = _label_energy(labels, frac, edges, smoothness)
    if final_energy > init_energy + 1e-9:
        raise RegistrationError("label energy increased during refinement",
                                diagnostics={"initial": init_energy,
                                             "final": final_energy})

    labels = _prune_cloth_components(labels, edges, n, max_components)
    return SegmentationLabels(labels, [np.asarray(li) for li in capture.labels])


def _prune_cloth_components(labels, edges, n, max_components):
    cloth = labels == UPPER_CLOTHING
    if not cloth.any():
        return labels
    keep = cloth[edges[:, 0]] & cloth[edges[:, 1]]
    ce = edges[keep]
    adj = sp.csr_matrix((np.ones(len(ce) * 2),
                         (np.concatenate([ce[:, 0], ce[:, 1]]),
                          np.concatenate([ce[:, 1], ce[:, 0]]))), shape=(n, n))
    _, comp = connected_components(adj, directed=False)
    comp_ids = np.unique(comp[cloth])
    if len(comp_ids) <= max_components:
        return labels
    sizes = np.array([(cloth & (comp == c)).sum() for c in comp_ids])
    order = np.argsort(-sizes, kind="stable")
    for c in comp_ids[order[max_components:]]:
        labels[cloth & (comp == c)] = BODY
    return labels


def extract_region(mesh: TriMesh, vertex_mask) -> tuple[TriMesh, np.ndarray]:
    """Submesh induced by the masked vertices (faces fully inside the mask).
    Returns the submesh and the original index of each new vertex."""
    vertex_mask = np.asarray(vertex_mask, dtype=bool).reshape(-1)
    face_keep = vertex_mask[mesh.faces].all(axis=1)
    used = np.unique(mesh.faces[face_keep])
    remap = np.full(mesh.num_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(mesh.vertices[used], remap[mesh.faces[face_keep]]), used


# ---------------------------------------------------------------------------
# Biharmonic deformation
# ---------------------------------------------------------------------------


def biharmonic_field(template: TriMesh, constraints: BoundaryConstraint) -> np.ndarray:
    """Per-vertex displacement with the constrained vertices reaching their
    targets exactly and the squared Laplacian minimized over free vertices.

    Distortion is measured on free rows only; rows at constrained vertices
    have asymmetric stencils that would otherwise pull interior vertices off
    an exact affine field.
    """
    n = template.num_vertices
    idx = constraints.indices
    if len(idx) == 0:
        raise SolverError("no constraints given", deficiency=n)
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError("constraint index out of range")

    edges = _mesh_edges(template.faces.astype(np.int64))
    adj = sp.csr_matrix((np.ones(len(edges) * 2),
                         (np.concatenate([edges[:, 0], edges[:, 1]]),
                          np.concatenate([edges[:, 1], edges[:, 0]]))), shape=(n, n))
    _, comp = connected_components(adj, directed=False)
    missing = np.setdiff1d(np.unique(comp), np.unique(comp[idx]))
    if len(missing):
        raise SolverError(
            f"{len(missing)} mesh component(s) have no constraint; "
            "the system is rank deficient", deficiency=int(len(missing)))

    lap = LaplacianOperator.from_mesh(template).matrix.tocsr()
    free = np.ones(n, dtype=bool)
    free[idx] = False
    d_c = constraints.targets - template.vertices[idx]
    rows = lap[free]
    a = rows[:, free].tocsc()
    rhs = -(rows[:, idx] @ d_c)
    try:
        solver = splu(a)
        d_f = np.column_stack([solver.solve(rhs[:, k]) for k in range(3)])
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    if not np.isfinite(d_f).all():
        raise SolverError("solver produced non-finite displacements")
    residual = np.abs(a.T @ (a @ d_f - rhs)).max()
    if residual >= 1e-8:
        raise SolverError(f"normal-equation residual {residual:.3g} exceeds 1e-8")
    d = np.zeros((n, 3))
    d[idx] = d_c
    d[free] = d_f
    return d


# ---------------------------------------------------------------------------
# Boundary loop matching
# ---------------------------------------------------------------------------


def _loop_params(points: np.ndarray) -> np.ndarray:
    """Arc-length fraction of each vertex along the closed loop, starting 0."""
    seg = np.linalg.norm(np.roll(points, -1, axis=0) - points, axis=1)
    total = seg.sum()
    if total <= 0:
        raise RegistrationError("degenerate boundary loop")
    return np.concatenate([[0.0], np.cumsum(seg[:-1])]) / total


def _loop_interp(points: np.ndarray, params: np.ndarray, s) -> np.ndarray:
    """Linear interpolation along a closed polyline at fractions s (mod 1)."""
    s = np.mod(np.asarray(s, dtype=np.float64), 1.0)
    grid = np.concatenate([params, [1.0]])
    pts = np.vstack([points, points[:1]])
    k = np.clip(np.searchsorted(grid, s, side="right") - 1, 0, len(points) - 1)
    span = grid[k + 1] - grid[k]
    t = np.where(span > 0, (s - grid[k]) / np.where(span > 0, span, 1.0), 0.0)
    return pts[k] + t[:, None] * (pts[k + 1] - pts[k])


def _match_one_loop(tpl_pts, tgt_pts, offsets_per_edge=8):
    tp = _loop_params(tpl_pts)
    best = None
    for pts in (tgt_pts, tgt_pts[::-1]):
        gp = _loop_params(pts)
        deltas = (gp[:, None] + np.arange(offsets_per_edge) / (offsets_per_edge * len(gp))).ravel()
        for delta in deltas:
            cand = _loop_interp(pts, gp, tp + delta)
            cost = ((cand - tpl_pts) ** 2).sum()
            if best is None or cost < best[0]:
                best = (cost, pts, gp, delta)
    cost, pts, gp, delta = best
    # parabolic refinement around the best discrete offset
    h = 1.0 / (offsets_per_edge * len(gp))
    for _ in range(12):
        c0 = ((_loop_interp(pts, gp, tp + delta - h) - tpl_pts) ** 2).sum()
        c2 = ((_loop_interp(pts, gp, tp + delta + h) - tpl_pts) ** 2).sum()
        denom = c0 - 2 * cost + c2
        step = 0.0 if abs(denom) < 1e-300 else 0.5 * h * (c0 - c2) / denom
        step = np.clip(step, -h, h)
        new = delta + step
        cnew = ((_loop_interp(pts, gp, tp + new) - tpl_pts) ** 2).sum()
        if cnew < cost:
            delta, cost = new, cnew
        h *= 0.5
    return _loop_interp(pts, gp, tp + delta)


def match_boundary_loops(template: TriMesh, target: TriMesh,
                         offsets_per_edge: int = 8) -> BoundaryConstraint:
    """Pair template and target boundary loops and produce one target
    position per template boundary vertex by arc-length parameterization.

    Loops are paired greedily by centroid proximity under a global
    translation; each pair is then matched with its own centroid alignment
    so per-loop translation does not bias the cyclic correspondence.
    """
    tpl_loops = boundary_loops(template)
    tgt_loops = boundary_loops(target)
    if not tpl_loops:
        raise RegistrationError("template has no boundary loops")
    if len(tgt_loops) != len(tpl_loops):
        raise RegistrationError(
            "boundary loop count mismatch",
            diagnostics={"template_loops": len(tpl_loops),
                         "target_loops": len(tgt_loops),
                         "target_loop_sizes": [len(l) for l in tgt_loops]})
    tpl_all = np.concatenate(tpl_loops)
    tgt_all = np.concatenate(tgt_loops)
    shift = target.vertices[tgt_all].mean(axis=0) - template.vertices[tpl_all].mean(axis=0)

    tgt_centroids = np.array([target.vertices[l].mean(axis=0) for l in tgt_loops])
    taken = np.zeros(len(tgt_loops), dtype=bool)
    indices, targets = [], []
    for loop in tpl_loops:
        centroid = template.vertices[loop].mean(axis=0) + shift
        dists = np.linalg.norm(tgt_centroids - centroid, axis=1)
        dists[taken] = np.inf
        j = int(np.argmin(dists))
        taken[j] = True
        tpl_pts = template.vertices[loop]
        pair_shift = tgt_centroids[j] - tpl_pts.mean(axis=0)
        matched = _match_one_loop(tpl_pts + pair_shift,
                                  target.vertices[tgt_loops[j]],
                                  offsets_per_edge)
        indices.append(loop)
        targets.append(matched)
    return BoundaryConstraint(np.concatenate(indices), np.vstack(targets))


# ---------------------------------------------------------------------------
# Clothing registration
# ---------------------------------------------------------------------------


def register_clothing(template: TriMesh, target_region: TriMesh,
                      boundary: BoundaryConstraint, lambda_lap: float = 0.5,
                      data_weight: float = 1.0, max_iters: int = 10,
                      reject_distance_factor: float = 3.0,
                      reject_normal_degrees: float = 60.0) -> TriMesh:
    """Fit the clothing template to the segmented clothing region.

    Starts from the biharmonic field induced by the boundary constraints,
    then alternates closest-point correspondence with a sparse linear solve
    of data + Laplacian-distortion energy. Outlier pairs (distance beyond
    ``reject_distance_factor`` times the median, or facing more than
    ``reject_normal_degrees`` apart) are dropped each iteration. Iterations
    that fail to lower the energy are reverted, so accepted energies are
    non-increasing. Boundary vertices stay pinned; topology is preserved.
    """
    if target_region.num_faces == 0:
        raise RegistrationError("empty clothing target region")
    init = template.vertices + biharmonic_field(template, boundary)
    n = template.num_vertices
    free = np.ones(n, dtype=bool)
    free[boundary.indices] = False
    lap = LaplacianOperator.from_mesh(template).matrix
    lap_f = lap[:, free].tocsc()
    lap_c = lap[:, ~free]
    lap_ref = lap @ template.vertices
    v_c = boundary.targets[np.argsort(boundary.indices)]
    cos_limit = float(np.cos(np.deg2rad(reject_normal_degrees)))
    target = SurfaceQuery(target_region, chunk=512)
    tgt_face_n = face_normals(target_region)

    def full_energy(verts):
        _, _, dist = target.closest(verts)
        data = float((dist[free] ** 2).sum())
        smooth = float(((lap @ verts - lap_ref) ** 2).sum())
        return data_weight * data + lambda_lap * smooth

    verts = init.copy()
    current = full_energy(verts)
    energies = [current]
    for _ in range(max_iters):
        closest, fidx, dist = target.closest(verts)
        adist = np.abs(dist)
        median = np.median(adist[free])
        keep = adist <= reject_distance_factor * median + 1e-12
        vn = vertex_normals(template.with_vertices(verts))
        keep &= (vn * tgt_face_n[fidx]).sum(axis=1) >= cos_limit
        keep &= free
        w = keep.astype(np.float64) * data_weight
        system = (sp.diags(w[free]) + lambda_lap * (lap_f.T @ lap_f)).tocsc()
        rhs = (w[free, None] * closest[free]
               + lambda_lap * (lap_f.T @ (lap_ref - lap_c @ v_c)))
        solver = splu(system)
        cand = verts.copy()
        cand[free] = np.column_stack([solver.solve(rhs[:, k]) for k in range(3)])
        updated = full_energy(cand)
        if updated > current + 1e-12:
            break
        converged = current - updated < 1e-14
        verts, current = cand, updated
        energies.append(updated)
        if converged:
            break
    if any(b > a + 1e-9 for a, b in zip(energies, energies[1:])):
        raise RegistrationError("accepted registration energy increased",
                                diagnostics={"energies": energies})
    return template.with_vertices(verts)


# ---------------------------------------------------------------------------
# Inner-layer estimation
# ---------------------------------------------------------------------------


def estimate_inner_layer(tracked: TriMesh, labels: SegmentationLabels,
                         body_template: TriMesh, cloth: TriMesh,
                         margin: float = 0.003,
                         max_push_iters: int = 10) -> TriMesh:
    """Estimate the full body surface including the region under clothing.

    Template vertices whose closest tracked surface point is body-labeled
    snap to that point; covered vertices are filled in by a biharmonic field
    and then pushed inside the clothing surface to a signed distance of
    ``-margin``. Output keeps the body template topology.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    face_cloth = labels.vertex_labels[tracked.faces].sum(axis=1) >= 2
    sq_tracked = SurfaceQuery(tracked, chunk=512)
    snap, fidx, _ = sq_tracked.closest(body_template.vertices)
    visible = ~face_cloth[fidx]
    if visible.all():
        return body_template.with_vertices(snap)
    disp = biharmonic_field(
        body_template,
        BoundaryConstraint(np.nonzero(visible)[0], snap[visible]))
    verts = body_template.vertices + disp

    covered = np.nonzero(~visible)[0]
    sq_cloth = SurfaceQuery(cloth, chunk=512)
    cloth_fn = face_normals(cloth)
    for _ in range(max_push_iters):
        cp, cf, sd = sq_cloth.closest(verts[covered])
        viol = sd > -margin
        if not viol.any():
            break
        delta = verts[covered][viol] - cp[viol]
        sdv = sd[viol]
        outward = np.where(np.abs(sdv)[:, None] > 1e-12,
                           delta / np.where(np.abs(sdv)[:, None] > 1e-12,
                                            sdv[:, None], 1.0),
                           cloth_fn[cf[viol]])
        verts[covered[viol]] = cp[viol] - margin * outward
    _, _, sd = sq_cloth.closest(verts[covered])
    bad = sd > -margin + 1e-6
    if bad.any():
        log.warning("inner layer: %d covered vertices could not reach the "
                    "margin (worst signed distance %.6f)", int(bad.sum()),
                    float(sd.max()))
    return body_template.with_vertices(verts)


# ---------------------------------------------------------------------------
# Frame-level driver and archives
# ---------------------------------------------------------------------------


@dataclass
class RegistrationTemplates:
    """Shared inputs for per-frame registration.

    ``cloth_weights`` skins the clothing template so boundary matching and
    the Laplacian reference see a pose-carried garment; without it the rest
    shape is used and any tangential motion of the garment is unobservable
    from geometry alone.
    """

    skeleton: object
    union_rest: TriMesh
    union_weights: object
    body_rest: TriMesh
    body_weights: object
    cloth_rest: TriMesh
    cloth_weights: SkinningWeights | None = None
    texture_resolution: int = 64
    smoothness: float = 0.5
    margin: float = 0.003
    lambda_lap: float = 0.5
    laplacian_weight: float = 0.1


def synthetic_templates(config, texture_resolution: int = 64,
                        **overrides) -> RegistrationTemplates:
    """Templates for captures produced by the synthetic generator.

    The tube garment hangs from the chest, so its template is skinned
    rigidly to that joint.
    """
    from .synthcap import bone_weights, build_body, cloth_rest

    rig = build_body(config.body_scale)
    cloth = cloth_rest(config)
    union = TriMesh(
        np.vstack([rig.template.vertices, cloth.vertices]),
        np.vstack([rig.template.faces, cloth.faces + rig.template.num_vertices]))
    chest = rig.skeleton.joint_index("chest")
    n_cloth = cloth.num_vertices
    joints = np.full((n_cloth, 4), -1, dtype=np.int32)
    joints[:, 0] = chest
    weights = np.zeros((n_cloth, 4))
    weights[:, 0] = 1.0
    return RegistrationTemplates(
        skeleton=rig.skeleton,
        union_rest=union,
        union_weights=bone_weights(union.vertices, rig.skeleton),
        body_rest=rig.template,
        body_weights=rig.weights,
        cloth_rest=cloth,
        cloth_weights=SkinningWeights(joints, weights),
        texture_resolution=texture_resolution,
        **overrides)


def register_frame(capture, templates: RegistrationTemplates,
                   prev_pose: SkeletonPose | None = None) -> FrameRegistration:
    """Run the full per-frame registration chain on one capture frame."""
    t = templates
    if prev_pose is None:
        prev_pose = SkeletonPose.identity(t.skeleton.num_joints)
    pose, tracked = single_layer_track(
        capture, t.skeleton, t.union_weights, t.union_rest, prev_pose,
        laplacian_weight=t.laplacian_weight)
    labels = segment_mesh(tracked, capture, t.smoothness)
    region, _ = extract_region(tracked, labels.vertex_labels == UPPER_CLOTHING)
    if region.num_faces == 0:
        raise RegistrationError("segmentation produced no clothing region")
    cloth_tpl = t.cloth_rest
    if t.cloth_weights is not None:
        cloth_tpl = lbs_pose(t.cloth_rest, t.skeleton, t.cloth_weights, pose)
    # garment openings come from the scan itself when it has them: tracked
    # open edges slip along the surface, scan boundaries do not
    boundary_source = region
    if len(boundary_loops(capture.surface)) == len(boundary_loops(t.cloth_rest)):
        boundary_source = capture.surface
    boundary = match_boundary_loops(cloth_tpl, boundary_source)
    cloth_mesh = register_clothing(cloth_tpl, region, boundary,
                                   lambda_lap=t.lambda_lap)
    body_posed = lbs_pose(t.body_rest, t.skeleton, t.body_weights, pose)
    body_mesh = estimate_inner_layer(tracked, labels, body_posed, cloth_mesh,
                                     margin=t.margin)
    body_masks = [np.asarray(li) == _IMG_BODY for li in capture.labels]
    cloth_masks = [np.asarray(li) == _IMG_CLOTH for li in capture.labels]
    body_texture = unwrap_texture(body_mesh, capture.images, capture.cameras,
                                  t.texture_resolution, pixel_masks=body_masks)
    cloth_texture = unwrap_texture(cloth_mesh, capture.images, capture.cameras,
                                   t.texture_resolution, pixel_masks=cloth_masks)
    return FrameRegistration(pose, body_mesh, cloth_mesh,
                             body_texture, cloth_texture)


def write_frame_registration(path, reg: FrameRegistration) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_mesh_frame(path / "body.bin", reg.body_mesh.vertices, reg.body_mesh.faces)
    write_mesh_frame(path / "cloth.bin", reg.cloth_mesh.vertices, reg.cloth_mesh.faces)
    write_pose_sequence_text(path / "pose.txt", [reg.pose])
    write_grid(path / "body_texture.grid", reg.body_texture)
    write_grid(path / "cloth_texture.grid", reg.cloth_texture)
    texture_to_png(path / "body_texture.png", reg.body_texture)
    texture_to_png(path / "cloth_texture.png", reg.cloth_texture)


def read_frame_registration(path, body_template: TriMesh,
                            cloth_template: TriMesh) -> FrameRegistration:
    path = Path(path)
    bv, bf = read_mesh_frame(path / "body.bin")
    cv, cf = read_mesh_frame(path / "cloth.bin")
    for got, tpl, name in ((bf, body_template, "body"), (cf, cloth_template, "cloth")):
        if not np.array_equal(got, tpl.faces):
            raise RegistrationError(f"stored {name} mesh does not match the template topology")
    return FrameRegistration(
        pose=read_pose_sequence_text(path / "pose.txt")[0],
        body_mesh=body_template.with_vertices(bv),
        cloth_mesh=cloth_template.with_vertices(cv),
        body_texture=read_grid(path / "body_texture.grid"),
        cloth_texture=read_grid(path / "cloth_texture.grid"))
