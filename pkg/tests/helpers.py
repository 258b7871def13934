"""Procedural meshes and small oracles shared by the test suite."""

import numpy as np

from lavatar.kinematics import Skeleton, SkinningWeights
from lavatar.mesh import TriMesh
from lavatar.utils import stable_seed


def chain_skeleton(n=3, seg=0.5, names=None):
    """Straight chain along +x: root at origin, each child offset (seg,0,0)."""
    if names is None:
        names = [f"j{i}" for i in range(n)]
    parents = [-1] + list(range(n - 1))
    offsets = [[0.0, 0.0, 0.0]] + [[seg, 0.0, 0.0]] * (n - 1)
    return Skeleton(names, parents, offsets)


def smooth_chain_weights(mesh, skeleton, sharp=4.0):
    """Blend every vertex between the two nearest chain joints by x position."""
    joints = skeleton.rest_world_positions()
    pairs = []
    for v in mesh.vertices:
        d = np.linalg.norm(joints - v, axis=1)
        order = np.argsort(d)[:2]
        w = np.exp(-sharp * d[order])
        w /= w.sum()
        pairs.append([(int(order[k]), float(w[k])) for k in range(2)])
    return SkinningWeights.from_pairs(pairs)


def grid_plane(nx=8, ny=8, size=1.0, z=0.0, uv_lo=(0.0, 0.0), uv_hi=(1.0, 1.0)):
    """Planar triangle grid in z=const, normals +z, UVs spanning the given box."""
    xs = np.linspace(-size / 2, size / 2, nx)
    ys = np.linspace(-size / 2, size / 2, ny)
    gx, gy = np.meshgrid(xs, ys)
    verts = np.stack([gx.ravel(), gy.ravel(), np.full(nx * ny, float(z))], axis=1)
    u = np.linspace(uv_lo[0], uv_hi[0], nx)
    v = np.linspace(uv_lo[1], uv_hi[1], ny)
    gu, gv = np.meshgrid(u, v)
    uv = np.stack([gu.ravel(), gv.ravel()], axis=1)
    faces = []
    for iy in range(ny - 1):
        for ix in range(nx - 1):
            a = iy * nx + ix
            b = a + 1
            c = a + nx + 1
            d = a + nx
            faces.append([a, b, c])
            faces.append([a, c, d])
    faces = np.array(faces, dtype=np.int32)
    return TriMesh(verts, faces, uv, faces.copy())


def icosphere(subdiv=2, radius=1.0, center=(0.0, 0.0, 0.0)):
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdiv):
        cache = {}
        verts = list(verts)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = (np.asarray(verts[i]) + np.asarray(verts[j])) / 2.0
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
        verts = np.array(verts)
    verts = verts * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(verts, faces)


def cube(size=1.0, center=(0.0, 0.0, 0.0)):
    """Closed axis-aligned cube, outward winding."""
    h = size / 2.0
    c = np.asarray(center, dtype=np.float64)
    corners = np.array(
        [[sx, sy, sz] for sx in (-h, h) for sy in (-h, h) for sz in (-h, h)]
    ) + c
    # index bits: x*4 + y*2 + z
    quads = [
        (0, 1, 3, 2, [-1, 0, 0]), (4, 6, 7, 5, [1, 0, 0]),
        (0, 4, 5, 1, [0, -1, 0]), (2, 3, 7, 6, [0, 1, 0]),
        (0, 2, 6, 4, [0, 0, -1]), (1, 5, 7, 3, [0, 0, 1]),
    ]
    faces = []
    for a, b, cc, d, n in quads:
        tri1, tri2 = [a, b, cc], [a, cc, d]
        pts = corners[tri1]
        if np.dot(np.cross(pts[1] - pts[0], pts[2] - pts[0]), n) < 0:
            tri1, tri2 = tri1[::-1], tri2[::-1]
        faces += [tri1, tri2]
    return TriMesh(corners, np.array(faces, dtype=np.int64))


def tiny_triangle(center=(0.0, 0.0, 0.0), scale=1e-3):
    c = np.asarray(center, dtype=np.float64)
    verts = c + scale * np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=np.float64)
    return TriMesh(verts, np.array([[0, 1, 2]], dtype=np.int64))


def gradcheck(build_scalar, params, h=1e-5, rtol=1e-3, atol=1e-8, max_coords=None,
              rng=None):
    """Compare analytic gradients of a scalar against central differences.

    build_scalar() must construct a fresh graph from the params' current
    values and return a scalar Tensor. Checks every coordinate unless
    max_coords caps it (coordinates then drawn with rng).
    """
    out = build_scalar()
    for p in params:
        p.grad = None
    out.backward()
    worst = 0.0
    for p in params:
        grad = np.zeros_like(p.value) if p.grad is None else p.grad
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(
                flat.size, size=max_coords, replace=False
            )
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = build_scalar().item()
            flat[c] = orig - h
            dn = build_scalar().item()
            flat[c] = orig
            fd = (up - dn) / (2 * h)
            an = grad.reshape(-1)[c]
            denom = max(abs(fd), abs(an), atol / rtol)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def closest_on_triangle_oracle(q, a, b, c):
    """Closest point on one triangle by exhausting the candidate features
    (3 vertices, 3 clamped edge projections, interior plane foot if inside)."""
    cands = [a, b, c]
    for p0, p1 in ((a, b), (b, c), (a, c)):
        e = p1 - p0
        denom = float(np.dot(e, e))
        if denom > 0:
            t = float(np.clip(np.dot(q - p0, e) / denom, 0.0, 1.0))
            cands.append(p0 + t * e)
    n = np.cross(b - a, c - a)
    n2 = float(np.dot(n, n))
    if n2 > 1e-30:
        proj = q - (np.dot(q - a, n) / n2) * n
        v0, v1, v2 = b - a, c - a, proj - a
        d00, d01, d11 = np.dot(v0, v0), np.dot(v0, v1), np.dot(v1, v1)
        d20, d21 = np.dot(v2, v0), np.dot(v2, v1)
        den = d00 * d11 - d01 * d01
        if abs(den) > 1e-30:
            v = (d11 * d20 - d01 * d21) / den
            w = (d00 * d21 - d01 * d20) / den
            if v >= 0 and w >= 0 and v + w <= 1:
                cands.append(proj)
    dists = [np.linalg.norm(q - p) for p in cands]
    return cands[int(np.argmin(dists))]


def closest_point_oracle(mesh, q):
    """Exhaustive per-face minimization; ties to the lowest face index."""
    best_d, best_p, best_f = np.inf, None, -1
    second = np.inf
    tri = mesh.vertices[mesh.faces]
    for fi in range(mesh.num_faces):
        p = closest_on_triangle_oracle(q, tri[fi, 0], tri[fi, 1], tri[fi, 2])
        d = float(np.linalg.norm(q - p))
        if d < best_d:
            second = best_d
            best_d, best_p, best_f = d, p, fi
        elif d < second:
            second = d
    return best_p, best_f, best_d, second


def render_grad_scene(seed: int):
    """Randomized single-sheet quad scene for renderer gradient checks.

    Returns (mesh, base_vertices, camera, affine_texture). The texture is an
    affine ramp so bilinear sampling of it is globally smooth; geometry gets
    a small random perturbation and the camera a small random offset so
    nothing aligns with the pixel grid.
    """
    from lavatar.camera import Camera

    rng = np.random.default_rng(stable_seed("render-grad-scene", seed))
    mesh = grid_plane(2, 2, size=float(rng.uniform(0.7, 1.1)), z=2.0)
    base = mesh.vertices.copy()
    # randomize shape with a shared affine map rather than per-vertex noise:
    # a parallelogram quad gives both triangles the same pixel-to-uv map, so
    # the rendered color has no derivative kink across the diagonal seam
    warp = np.eye(2) + rng.normal(0.0, 0.06, (2, 2))
    base[:, :2] = base[:, :2] @ warp.T + rng.normal(0.0, 0.03, 2)
    tilt = rng.uniform(-0.08, 0.08, 2)
    # affine z keeps the quad's two triangles coplanar, so depth ties along
    # the diagonal stay exactly harmless under finite-difference probes
    base[:, 2] = 2.0 + tilt[0] * base[:, 0] + tilt[1] * base[:, 1]
    eye = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                    rng.uniform(-0.25, 0.25)])
    target = np.array([0.0, 0.0, 2.0]) + rng.normal(0.0, 0.03, 3)
    cam = Camera.look_at(eye=eye, target=target, fx=40.0, fy=40.0,
                         width=32, height=32)
    res = 6
    ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
    tex = np.empty((res, res, 3))
    for c in range(3):
        a = rng.uniform(0.25, 0.55)
        bi = rng.uniform(-0.25, 0.25) / res
        bj = rng.uniform(-0.25, 0.25) / res
        tex[:, :, c] = a + bi * ii + bj * jj
    return mesh, base, cam, tex


def render_grad_instance(kind: str, seed: int) -> float:
    """Worst relative gradient error for one randomized renderer check.

    Kinds: "mask" (soft mask wrt vertices, silhouette band included),
    "interior" (image wrt vertices, silhouette band excluded), "texture"
    (image wrt texels), "depth" (covered interior depth wrt vertices).
    Rim pixel colors are only almost-everywhere differentiable (the
    nearest-edge choice switches on medial lines), so color checks weight
    interior pixels; the mask itself is smooth everywhere and is checked
    over the full frame.
    """
    from lavatar.autodiff import Tensor
    from lavatar.softrender import rasterize

    mesh, base, cam, tex = render_grad_scene(seed)
    rng = np.random.default_rng(stable_seed("render-grad-weights", kind, seed))
    h, w = cam.height, cam.width
    vt = Tensor(base.copy(), requires_grad=True)
    tt = Tensor(tex.copy(), requires_grad=True)

    base_out = rasterize(mesh, tex, cam, edge_softness=1.0, vertices=base,
                         pad_sigmas=24.0)
    wimg = rng.normal(0.0, 1.0, (h, w, 3))
    wmask = rng.normal(0.0, 1.0, (h, w))
    interior = (base_out.mask.value > 0.999) & base_out.covered
    wdep = np.where(interior, rng.normal(0.0, 1.0, (h, w)), 0.0)
    wint = np.where(interior[:, :, None], wimg, 0.0)

    def build():
        out = rasterize(mesh, tt, cam, edge_softness=1.0, vertices=vt,
                        pad_sigmas=24.0)
        if kind == "mask":
            return (out.mask * wmask).sum()
        if kind == "interior":
            return (out.image * wint).sum()
        if kind == "texture":
            return (out.image * wimg).sum()
        if kind == "depth":
            return (out.depth * wdep).sum()
        raise ValueError(kind)

    param = tt if kind == "texture" else vt
    return gradcheck(build, [param], h=1e-5, rtol=1e-3, max_coords=4, rng=rng)


def softvis_grad_instance(seed: int) -> float:
    """Gradient check of the soft visibility loss on a two-layer scene."""
    from lavatar.autodiff import Tensor
    from lavatar.camera import Camera
    from lavatar.softrender import composite_layers, rasterize, soft_visibility_loss

    rng = np.random.default_rng(stable_seed("softvis-grad-scene", seed))
    cam = Camera.look_at(eye=(0.0, 0.0, 0.0), target=(0.0, 0.0, 2.0),
                         fx=40.0, fy=40.0, width=32, height=32)
    body = grid_plane(2, 2, size=0.9, z=2.0)
    cloth = grid_plane(2, 2, size=0.7, z=2.0)
    # keep the depth-order sigmoid well above its strict 1/2 gate at every
    # pixel (the gate is a real discontinuity of the loss) and keep each
    # sheet planar (affine tilt, no per-vertex noise) so depth ties between
    # a quad's two triangles stay exactly harmless under perturbation
    body_v = body.vertices.copy()
    body_v[:, :2] += rng.normal(0.0, 0.01, (4, 2))
    tb = rng.uniform(-0.004, 0.004, 2)
    body_v[:, 2] = 2.0 + tb[0] * body_v[:, 0] + tb[1] * body_v[:, 1]
    gap = rng.uniform(0.010, 0.018)
    cloth_v = cloth.vertices.copy()
    cloth_v[:, :2] += rng.normal(0.0, 0.002, (4, 2))
    tc = rng.uniform(-0.004, 0.004, 2)
    cloth_v[:, 2] = 2.0 + gap + tc[0] * cloth_v[:, 0] + tc[1] * cloth_v[:, 1]
    tex = np.full((4, 4, 3), 0.5)
    bt = Tensor(body_v.copy(), requires_grad=True)
    ct = Tensor(cloth_v.copy(), requires_grad=True)
    labels = np.ones((32, 32), dtype=bool)

    def build():
        b = rasterize(body, tex, cam, vertices=bt, pad_sigmas=24.0)
        c = rasterize(cloth, tex, cam, vertices=ct, pad_sigmas=24.0)
        return soft_visibility_loss(composite_layers(b, c), labels, 0.01)

    return gradcheck(build, [bt, ct], h=1e-5, rtol=1e-3, max_coords=4, rng=rng)
