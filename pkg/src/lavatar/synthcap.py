"""Synthetic multi-view capture generation.

A small stand-in for a real capture studio: a capsule body skinned to a
12-joint skeleton, a position-based-dynamics cloth layer, and a ring of
cameras producing color images, foreground masks, per-pixel layer labels,
a reconstructed surface mesh, and 3D keypoints per frame. Ground-truth
meshes ride along for tests; pipeline stages never read them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .camera import Camera, ring_rig, read_rig, write_rig
from .errors import ConfigError, NumericalAbort
from .kinematics import (
    KeypointSet,
    Skeleton,
    SkeletonPose,
    SkinningWeights,
    joint_world_transforms,
    lbs_pose,
    read_pose_sequence_text,
    skinning_matrices,
    write_pose_sequence_text,
)
from .mesh import TriMesh, UVGrid
from .meshio import read_mesh_frame, read_png, write_mesh_frame, write_png
from .softrender import composite_layers, rasterize
from .utils import format_float, read_json, rng_for, write_json

# pairing window for capture rendering: masks are quantized to 8 bits, so
# the sigmoid tail cut at the window edge (~3e-4) is invisible
RENDER_PAD_SIGMAS = 8.0

FACIAL_OFFSETS = {
    "nose": (0.0, 0.01, 0.065),
    "l_eye": (0.03, 0.04, 0.055),
    "r_eye": (-0.03, 0.04, 0.055),
}


# ---------------------------------------------------------------------------
# Scene configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MotionCurve:
    """One sinusoidal joint-angle channel: amplitude * sin(2*pi*frequency*
    t/frames + phase) added to ``angles[joint, axis]``."""

    joint: str
    axis: int
    amplitude: float
    frequency: float
    phase: float = 0.0


DEFAULT_MOTION = (
    MotionCurve("l_shoulder", 2, -0.40, 1.0, 0.0),
    MotionCurve("r_shoulder", 2, 0.40, 1.0, 1.5707963267948966),
    MotionCurve("l_elbow", 1, 0.30, 1.0, 0.7853981633974483),
    MotionCurve("r_elbow", 1, -0.30, 1.0, 0.0),
    MotionCurve("spine_lower", 0, 0.10, 0.5, 0.0),
    MotionCurve("chest", 1, 0.12, 0.5, 0.5235987755982988),
)


@dataclass
class SynthSceneConfig:
    seed: int = 0
    frames: int = 8
    views: int = 4
    image_size: int = 128
    focal: float = 128.0
    ring_radius: float = 1.5
    ring_height: float = 0.05
    body_scale: float = 1.0
    cloth_shape: str = "tube"  # "tube" wraps the torso, "sheet" hangs free
    cloth_rows: int = 12
    cloth_cols: int = 24
    cloth_radius: float = 0.16
    cloth_top: float = 0.38
    cloth_bottom: float = 0.08
    sheet_size: float = 0.4
    pins: tuple[int, ...] | None = None  # None picks the shape default
    gravity: tuple[float, float, float] = (0.0, -9.8, 0.0)
    fps: float = 30.0
    substeps: int = 8
    iterations: int = 30
    damping: float = 0.995
    stretch_scale: float = 1.0
    collision_margin: float = 0.005
    recon_noise: float = 0.0
    slide_amplitude: float = 0.0  # radians of azimuthal correspondence slide
    texture_res: int = 64
    edge_softness: float = 0.7
    motion: tuple[MotionCurve, ...] = DEFAULT_MOTION

    def __post_init__(self):
        if self.frames < 1 or self.views < 1:
            raise ConfigError("need at least one frame and one view")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if self.cloth_rows < 8 or self.cloth_cols < 8:
            raise ConfigError("cloth grid must be at least 8x8")
        if self.cloth_shape == "tube" and self.cloth_cols % 2:
            raise ConfigError("tube cloth needs an even column count")
        if self.cloth_shape not in ("tube", "sheet"):
            raise ConfigError(f"unknown cloth shape: {self.cloth_shape!r}")
        if self.substeps < 1 or self.iterations < 1:
            raise ConfigError("substeps and iterations must be >= 1")
        if not (0.0 < self.damping <= 1.0):
            raise ConfigError("damping must lie in (0, 1]")
        if self.texture_res < 8:
            raise ConfigError("texture_res must be >= 8")
        self.motion = tuple(
            m if isinstance(m, MotionCurve) else MotionCurve(**m) for m in self.motion
        )
        if self.pins is not None:
            self.pins = tuple(int(i) for i in self.pins)
        self.gravity = tuple(float(g) for g in self.gravity)


def config_to_dict(config: SynthSceneConfig) -> dict:
    return asdict(config)


def config_from_dict(doc: dict) -> SynthSceneConfig:
    known = set(SynthSceneConfig.__dataclass_fields__)
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown capture config keys: {sorted(extra)}")
    doc = dict(doc)
    if "motion" in doc:
        doc["motion"] = tuple(MotionCurve(**m) for m in doc["motion"])
    if doc.get("pins") is not None:
        doc["pins"] = tuple(doc["pins"])
    if "gravity" in doc:
        doc["gravity"] = tuple(doc["gravity"])
    return SynthSceneConfig(**doc)


# ---------------------------------------------------------------------------
# Body rig: capsules skinned to a 12-joint skeleton
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Capsule:
    joint_a: int
    joint_b: int
    radius: float


@dataclass
class BodyRig:
    skeleton: Skeleton
    template: TriMesh
    weights: SkinningWeights
    capsules: list[Capsule]


def build_skeleton(scale: float = 1.0) -> Skeleton:
    names = [
        "pelvis", "spine_lower", "spine_upper", "chest", "neck", "head",
        "l_shoulder", "l_elbow", "l_wrist",
        "r_shoulder", "r_elbow", "r_wrist",
    ]
    parents = [-1, 0, 1, 2, 3, 4, 3, 6, 7, 3, 9, 10]
    offsets = np.array([
        [0.0, 0.0, 0.0],
        [0.0, 0.12, 0.0],
        [0.0, 0.14, 0.0],
        [0.0, 0.14, 0.0],
        [0.0, 0.12, 0.0],
        [0.0, 0.10, 0.0],
        [0.20, 0.06, 0.0],
        [0.24, 0.0, 0.0],
        [0.22, 0.0, 0.0],
        [-0.20, 0.06, 0.0],
        [-0.24, 0.0, 0.0],
        [-0.22, 0.0, 0.0],
    ]) * scale
    return Skeleton(names, parents, offsets)


# (joint_a, joint_b, radius) per capsule; radii scale with the skeleton
_CAPSULE_SPECS = (
    ("pelvis", "spine_upper", 0.11),
    ("spine_upper", "neck", 0.10),
    ("neck", "head", 0.07),
    ("l_shoulder", "l_elbow", 0.045),
    ("l_elbow", "l_wrist", 0.04),
    ("r_shoulder", "r_elbow", 0.045),
    ("r_elbow", "r_wrist", 0.04),
)

# 4x2 atlas cells, one chart per capsule, inset to keep bilinear lookups
# from bleeding across charts
_CHART_INSET = 0.015


def _chart_box(slot: int) -> tuple[tuple[float, float], tuple[float, float]]:
    row, col = divmod(slot, 4)
    lo = (col * 0.25 + _CHART_INSET, row * 0.5 + _CHART_INSET)
    hi = ((col + 1) * 0.25 - _CHART_INSET, (row + 1) * 0.5 - _CHART_INSET)
    return lo, hi


def capsule_mesh(p0, p1, radius: float, segments: int = 10, side_rings: int = 4,
                 cap_rings: int = 2, chart=((0.0, 0.0), (1.0, 1.0))) -> TriMesh:
    """Closed capsule around the segment p0-p1 with one rectangular UV chart
    (u around the axis with a duplicated seam column, v along the arc)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = float(np.linalg.norm(axis))
    if length < 1e-9 or radius <= 0.0:
        raise ValueError("capsule needs distinct endpoints and a positive radius")
    az = axis / length
    ref = np.array([1.0, 0.0, 0.0]) if abs(az[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(az, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(e1, az)  # e1 x e2 = -az keeps face normals outward

    arc_total = np.pi * radius + length
    rows = []  # (center, rho, v)
    for k in range(1, cap_rings + 1):
        phi = -0.5 * np.pi + 0.5 * np.pi * k / cap_rings
        rows.append((p0 + radius * np.sin(phi) * az, radius * np.cos(phi),
                     radius * (phi + 0.5 * np.pi) / arc_total))
    for t in range(1, side_rings):
        d = length * t / side_rings
        rows.append((p0 + d * az, radius, (0.5 * np.pi * radius + d) / arc_total))
    for k in range(cap_rings):
        phi = 0.5 * np.pi * k / cap_rings
        rows.append((p1 + radius * np.sin(phi) * az, radius * np.cos(phi),
                     (0.5 * np.pi * radius + length + radius * phi) / arc_total))

    s = segments
    theta = 2.0 * np.pi * np.arange(s) / s
    ring_dirs = np.outer(np.cos(theta), e1) + np.outer(np.sin(theta), e2)
    verts = [p0 - radius * az]
    for center, rho, _ in rows:
        verts.append(center + rho * ring_dirs)
    verts.append((p1 + radius * az).reshape(1, 3))
    verts = np.vstack([np.atleast_2d(v) for v in verts])

    (ulo, vlo), (uhi, vhi) = chart

    # u runs opposite to ring index j so charts read unmirrored from outside
    def uv(u, v):
        return (ulo + (uhi - ulo) * (1.0 - u), vlo + (vhi - vlo) * v)

    uvs = [uv((j + 0.5) / s, 0.0) for j in range(s)]
    row_uv_start = []
    for _, _, v in rows:
        row_uv_start.append(len(uvs))
        uvs.extend(uv(j / s, v) for j in range(s + 1))
    top_uv_start = len(uvs)
    uvs.extend(uv((j + 0.5) / s, 1.0) for j in range(s))

    def vid(row, j):
        return 1 + row * s + j % s

    faces, uv_faces = [], []
    for j in range(s):
        faces.append([0, vid(0, j), vid(0, j + 1)])
        uv_faces.append([j, row_uv_start[0] + j, row_uv_start[0] + j + 1])
    for i in range(len(rows) - 1):
        a, b = row_uv_start[i], row_uv_start[i + 1]
        for j in range(s):
            faces.append([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)])
            uv_faces.append([a + j, b + j, b + j + 1])
            faces.append([vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)])
            uv_faces.append([a + j, b + j + 1, a + j + 1])
    top_vid = len(verts) - 1
    last = len(rows) - 1
    for j in range(s):
        faces.append([top_vid, vid(last, j + 1), vid(last, j)])
        uv_faces.append([top_uv_start + j, row_uv_start[last] + j + 1,
                         row_uv_start[last] + j])
    return TriMesh(verts, np.array(faces), np.array(uvs), np.array(uv_faces))


def bone_weights(vertices: np.ndarray, skeleton: Skeleton,
                 softness: float = 0.02) -> SkinningWeights:
    """Distance-to-bone skinning: inverse-quartic falloff to each bone
    segment, credited to the bone's parent joint, top-4 joints kept."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    rest = skeleton.rest_world_positions()
    joint_w = np.zeros((len(vertices), skeleton.num_joints))
    for child in range(skeleton.num_joints):
        parent = int(skeleton.parents[child])
        if parent < 0:
            continue
        a, b = rest[parent], rest[child]
        ab = b - a
        denom = float(ab @ ab)
        t = ((vertices - a) @ ab) / denom if denom > 1e-18 else np.zeros(len(vertices))
        foot = a + np.clip(t, 0.0, 1.0)[:, None] * ab
        d2 = ((vertices - foot) ** 2).sum(axis=1)
        joint_w[:, parent] += 1.0 / (d2 + softness * softness) ** 2
    order = np.argsort(-joint_w, axis=1)[:, :4]
    picked = np.take_along_axis(joint_w, order, axis=1)
    picked /= picked.sum(axis=1, keepdims=True)
    joints = order.astype(np.int32)
    joints[picked <= 0.0] = -1
    picked[joints < 0] = 0.0
    return SkinningWeights(joints, picked)


def build_body(scale: float = 1.0, segments: int = 10, side_rings: int = 4,
               cap_rings: int = 2) -> BodyRig:
    skeleton = build_skeleton(scale)
    rest = skeleton.rest_world_positions()
    parts, capsules = [], []
    for slot, (name_a, name_b, radius) in enumerate(_CAPSULE_SPECS):
        a = skeleton.joint_index(name_a)
        b = skeleton.joint_index(name_b)
        capsules.append(Capsule(a, b, radius * scale))
        parts.append(capsule_mesh(rest[a], rest[b], radius * scale,
                                  segments, side_rings, cap_rings,
                                  chart=_chart_box(slot)))
    verts, faces, uvs, uv_faces = [], [], [], []
    nv = nuv = 0
    for part in parts:
        verts.append(part.vertices)
        faces.append(part.faces + nv)
        uvs.append(part.uv_coords)
        uv_faces.append(part.uv_faces + nuv)
        nv += part.num_vertices
        nuv += len(part.uv_coords)
    template = TriMesh(np.vstack(verts), np.vstack(faces),
                       np.vstack(uvs), np.vstack(uv_faces))
    return BodyRig(skeleton, template, bone_weights(template.vertices, skeleton),
                   capsules)


def pose_at(config: SynthSceneConfig, t: int,
            skeleton: Skeleton | None = None) -> SkeletonPose:
    skeleton = skeleton or build_skeleton(config.body_scale)
    angles = np.zeros((skeleton.num_joints, 3))
    for curve in config.motion:
        j = skeleton.joint_index(curve.joint)
        angles[j, curve.axis] += curve.amplitude * np.sin(
            2.0 * np.pi * curve.frequency * t / config.frames + curve.phase)
    return SkeletonPose(angles)


def motion_poses(config: SynthSceneConfig) -> list[SkeletonPose]:
    skeleton = build_skeleton(config.body_scale)
    return [pose_at(config, t, skeleton) for t in range(config.frames)]


# ---------------------------------------------------------------------------
# Cloth: rest geometry and position-based dynamics
# ---------------------------------------------------------------------------


def cloth_rest(config: SynthSceneConfig) -> TriMesh:
    """Rest cloth grid: an open tube around the torso (u wraps, seam
    duplicated in UV) or a flat hanging sheet placed clear of the body."""
    rows, cols = config.cloth_rows, config.cloth_cols
    s = config.body_scale
    if config.cloth_shape == "tube":
        theta = 2.0 * np.pi * np.arange(cols) / cols
        ys = np.linspace(config.cloth_top * s, config.cloth_bottom * s, rows)
        r = config.cloth_radius * s
        verts = np.stack(np.broadcast_arrays(
            r * np.cos(theta)[None, :], ys[:, None], r * np.sin(theta)[None, :],
        ), axis=2).reshape(-1, 3)
        wrap = True
    else:
        xs = np.linspace(-0.5, 0.5, cols) * config.sheet_size * s
        ys = np.linspace(0.5 * s, 0.5 * s - config.sheet_size * s, rows)
        verts = np.stack(np.broadcast_arrays(
            xs[None, :], ys[:, None], np.full((rows, cols), 0.5 * s),
        ), axis=2).reshape(-1, 3)
        wrap = False

    ucols = cols + 1 if wrap else cols
    uu = np.arange(ucols) / (ucols - 1 if not wrap else cols)
    vv = np.arange(rows) / (rows - 1)
    uvs = np.stack(np.broadcast_arrays(uu[None, :], vv[:, None]),
                   axis=2).reshape(-1, 2)
    faces, uv_faces = [], []
    for r_i in range(rows - 1):
        for c in range(cols if wrap else cols - 1):
            c1 = (c + 1) % cols
            a, b = r_i * cols + c, r_i * cols + c1
            d, e = (r_i + 1) * cols + c1, (r_i + 1) * cols + c
            faces.append([a, b, d])
            faces.append([a, d, e])
            ua, ub = r_i * ucols + c, r_i * ucols + c + 1
            ud, ue = (r_i + 1) * ucols + c + 1, (r_i + 1) * ucols + c
            uv_faces.append([ua, ub, ud])
            uv_faces.append([ua, ud, ue])
    return TriMesh(verts, np.array(faces), uvs, np.array(uv_faces))


def _default_pins(config: SynthSceneConfig) -> tuple[int, ...]:
    if config.pins is not None:
        return config.pins
    if config.cloth_shape == "tube":
        return tuple(range(config.cloth_cols))  # full top ring
    return ()


def _constraint_groups(rows: int, cols: int, wrap: bool) -> list[np.ndarray]:
    """Stretch and shear constraints split into vertex-disjoint groups so
    each group projects as one vectorized Gauss-Seidel sweep."""
    horiz_cols = cols if wrap else cols - 1
    groups = {k: [] for k in range(8)}
    for r in range(rows):
        for c in range(cols if wrap else cols - 1):
            groups[c % 2].append((r * cols + c, r * cols + (c + 1) % cols))
    for r in range(rows - 1):
        for c in range(cols):
            groups[2 + r % 2].append((r * cols + c, (r + 1) * cols + c))
    for r in range(rows - 1):
        for c in range(horiz_cols):
            c1 = (c + 1) % cols
            groups[4 + c % 2].append((r * cols + c, (r + 1) * cols + c1))
            groups[6 + c % 2].append((r * cols + c1, (r + 1) * cols + c))
    return [np.array(groups[k], dtype=np.int64).reshape(-1, 2) for k in range(8)]


def _collide_capsules(p: np.ndarray, ends_a: np.ndarray, ends_b: np.ndarray,
                      radii: np.ndarray, margin: float) -> None:
    for a, b, r in zip(ends_a, ends_b, radii):
        ab = b - a
        denom = float(ab @ ab)
        t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0) if denom > 1e-18 else 0.0
        foot = a + np.atleast_1d(t)[:, None] * ab
        d = p - foot
        dist = np.linalg.norm(d, axis=1)
        keep_out = r + margin
        bad = dist < keep_out
        if bad.any():
            safe = np.maximum(dist[bad], 1e-12)
            p[bad] = foot[bad] + d[bad] * (keep_out / safe)[:, None]


def simulate_cloth(config: SynthSceneConfig, body_motion: list[SkeletonPose],
                   rig: BodyRig | None = None) -> list[TriMesh]:
    """Run position-based dynamics over the motion; returns one cloth mesh
    per frame (shared topology). Gravity integration, stretch and shear
    distance projection, capsule keep-out, pinned vertices."""
    rig = rig or build_body(config.body_scale)
    rest = cloth_rest(config)
    rows, cols = config.cloth_rows, config.cloth_cols
    wrap = config.cloth_shape == "tube"
    groups = _constraint_groups(rows, cols, wrap)
    x = rest.vertices.copy()
    rests = [np.linalg.norm(x[g[:, 1]] - x[g[:, 0]], axis=1) * config.stretch_scale
             for g in groups]
    pins = np.array(_default_pins(config), dtype=np.int64)
    inv_mass = np.ones(len(x))
    if pins.size:
        inv_mass[pins] = 0.0
    chest = rig.skeleton.joint_index("chest")
    radii = np.array([c.radius for c in rig.capsules])
    gravity = np.asarray(config.gravity, dtype=np.float64)
    dt = 1.0 / (config.fps * config.substeps)
    v = np.zeros_like(x)
    out = []
    for t, pose in enumerate(body_motion):
        world = joint_world_transforms(rig.skeleton, pose)
        ends_a = world[[c.joint_a for c in rig.capsules], :3, 3]
        ends_b = world[[c.joint_b for c in rig.capsules], :3, 3]
        if pins.size:
            if wrap:
                m = skinning_matrices(rig.skeleton, pose)[chest]
                anchors = rest.vertices[pins] @ m[:3, :3].T + m[:3, 3]
            else:
                anchors = rest.vertices[pins]
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(config.substeps):
                v += gravity * dt
                v *= config.damping
                p = x + v * dt
                if pins.size:
                    p[pins] = anchors
                for _ in range(config.iterations):
                    for g, r0 in zip(groups, rests):
                        a, b = g[:, 0], g[:, 1]
                        d = p[b] - p[a]
                        length = np.maximum(np.linalg.norm(d, axis=1), 1e-12)
                        wsum = inv_mass[a] + inv_mass[b]
                        c = (length - r0) / (length * np.maximum(wsum, 1e-12))
                        p[a] += (inv_mass[a] * c)[:, None] * d
                        p[b] -= (inv_mass[b] * c)[:, None] * d
                    _collide_capsules(p, ends_a, ends_b, radii,
                                      config.collision_margin)
                    if pins.size:
                        p[pins] = anchors
                v = (p - x) / dt
                x = p
        if not np.isfinite(x).all():
            raise NumericalAbort(f"cloth solver diverged at frame {t}")
        out.append(rest.with_vertices(x.copy()))
    return out


def _rotate_y(vertices: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return vertices @ rot.T


def slide_angle(config: SynthSceneConfig, t: int) -> float:
    """Scripted azimuthal material slide injected into the rendered cloth;
    the tracked tube cannot observe it, so it is a known correspondence
    error for alignment benchmarks."""
    return config.slide_amplitude * np.sin(2.0 * np.pi * t / config.frames)


# ---------------------------------------------------------------------------
# Procedural textures
# ---------------------------------------------------------------------------


def body_texture(resolution: int = 64) -> UVGrid:
    """Skin-toned atlas with darker torso charts and faint grid lines."""
    tex = np.empty((resolution, resolution, 3))
    tex[:] = (0.80, 0.62, 0.50)
    torso = np.zeros((resolution, resolution), dtype=bool)
    torso[: resolution // 2, : resolution // 2] = True  # first two charts
    tex[torso] = (0.45, 0.50, 0.62)
    ii, jj = np.mgrid[0:resolution, 0:resolution]
    lines = (ii % 8 == 0) | (jj % 8 == 0)
    tex[lines] *= 0.82
    return UVGrid(resolution, 3, tex, np.ones((resolution, resolution), bool))


def cloth_texture(resolution: int = 64) -> UVGrid:
    """High-contrast shirt: striped base with a boxed logo patch placed away
    from the UV seam so alignment metrics have texture to grab."""
    r = resolution
    tex = np.empty((r, r, 3))
    tex[:] = (0.92, 0.92, 0.95)
    ii = np.arange(r)
    stripes = (ii // max(r // 10, 1)) % 3 == 0
    tex[stripes, :] = (0.16, 0.22, 0.45)
    y0, y1 = int(r * 0.35), int(r * 0.60)
    x0, x1 = int(r * 0.12), int(r * 0.37)
    tex[y0:y1, x0:x1] = (0.75, 0.10, 0.12)
    my = (y0 + y1) // 2
    mx = (x0 + x1) // 2
    bar = max((y1 - y0) // 6, 1)
    tex[my - bar:my + bar, x0 + 1:x1 - 1] = (0.97, 0.97, 0.97)
    tex[y0 + 1:y1 - 1, mx - bar:mx + bar] = (0.97, 0.97, 0.97)
    # one wrap-aware box blur keeps bilinear gradients well-behaved at the
    # stripe and logo boundaries; u wraps (tube seam), v clamps
    padded = np.concatenate([tex[:, -1:], tex, tex[:, :1]], axis=1)
    padded = np.concatenate([padded[:1], padded, padded[-1:]], axis=0)
    blurred = sum(
        padded[1 + dy:1 + dy + r, 1 + dx:1 + dx + r]
        for dy in (-1, 0, 1) for dx in (-1, 0, 1)
    ) / 9.0
    return UVGrid(r, 3, blurred, np.ones((r, r), bool))


# ---------------------------------------------------------------------------
# Capture generation
# ---------------------------------------------------------------------------


@dataclass
class CaptureFrame:
    """One multi-view frame. ``gt_*`` fields are test oracles; pipeline
    stages must not read them."""

    index: int
    images: list[np.ndarray]   # (H, W, 3) float in [0, 1], one per view
    masks: list[np.ndarray]    # (H, W) float in [0, 1]
    labels: list[np.ndarray]   # (H, W) int8: 0 background, 1 body, 2 clothing
    surface: TriMesh           # reconstructed body+cloth union mesh
    keypoints: KeypointSet
    cameras: list[Camera]
    gt_body: TriMesh
    gt_cloth: TriMesh
    gt_pose: SkeletonPose


def capture_rig(config: SynthSceneConfig) -> list[Camera]:
    return ring_rig(config.views, config.ring_radius,
                    center=(0.0, 0.30 * config.body_scale, 0.0),
                    height_offset=config.ring_height,
                    fx=config.focal, fy=config.focal,
                    width=config.image_size, height=config.image_size)


def _frame_keypoints(rig: BodyRig, pose: SkeletonPose) -> KeypointSet:
    world = joint_world_transforms(rig.skeleton, pose)
    names = list(rig.skeleton.names)
    points = [world[j, :3, 3] for j in range(rig.skeleton.num_joints)]
    head = rig.skeleton.joint_index("head")
    mats = skinning_matrices(rig.skeleton, pose)
    rest_head = rig.skeleton.rest_world_positions()[head]
    scale = float(np.linalg.norm(rig.skeleton.offsets[1]) / 0.12)
    for name, off in FACIAL_OFFSETS.items():
        p = rest_head + np.asarray(off) * scale
        names.append(name)
        points.append(mats[head, :3, :3] @ p + mats[head, :3, 3])
    return KeypointSet(names, np.array(points), np.ones(len(names)))


def generate_capture(config: SynthSceneConfig) -> list[CaptureFrame]:
    """Simulate, render, and package every frame. Deterministic per seed."""
    rig = build_body(config.body_scale)
    poses = motion_poses(config)
    cloths = simulate_cloth(config, poses, rig)
    cameras = capture_rig(config)
    btex = body_texture(config.texture_res)
    ctex = cloth_texture(config.texture_res)
    frames = []
    for t, pose in enumerate(poses):
        body = lbs_pose(rig.template, rig.skeleton, rig.weights, pose)
        cloth = cloths[t]
        angle = slide_angle(config, t)
        if angle != 0.0:
            cloth = cloth.with_vertices(_rotate_y(cloth.vertices, angle))
        images, masks, labels = [], [], []
        for cam in cameras:
            body_r = rasterize(body, btex, cam, edge_softness=config.edge_softness,
                               pad_sigmas=RENDER_PAD_SIGMAS)
            cloth_r = rasterize(cloth, ctex, cam, edge_softness=config.edge_softness,
                                pad_sigmas=RENDER_PAD_SIGMAS)
            out = composite_layers(body_r, cloth_r)
            images.append(np.clip(out.image.value, 0.0, 1.0))
            masks.append(np.clip(out.mask.value, 0.0, 1.0))
            labels.append(out.layer.copy())
        union = TriMesh(
            np.vstack([body.vertices, cloth.vertices]),
            np.vstack([body.faces, cloth.faces + body.num_vertices]))
        if config.recon_noise > 0.0:
            noise = rng_for(config.seed, "recon", t).normal(
                0.0, config.recon_noise, union.vertices.shape)
            union = union.with_vertices(union.vertices + noise)
        frames.append(CaptureFrame(
            index=t, images=images, masks=masks, labels=labels,
            surface=union, keypoints=_frame_keypoints(rig, pose),
            cameras=cameras, gt_body=body, gt_cloth=cloth, gt_pose=pose))
    return frames


# ---------------------------------------------------------------------------
# Capture archives
# ---------------------------------------------------------------------------


def _write_keypoints(path, kp: KeypointSet) -> None:
    lines = [
        f"{name} {format_float(c)} " + " ".join(format_float(x) for x in p)
        for name, p, c in zip(kp.names, kp.points, kp.confidences)
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_keypoints(path) -> KeypointSet:
    names, points, confs = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        names.append(parts[0])
        confs.append(float(parts[1]))
        points.append([float(x) for x in parts[2:5]])
    return KeypointSet(names, np.array(points), np.array(confs))


def write_capture_archive(root, frames: list[CaptureFrame],
                          config: SynthSceneConfig) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_rig(root / "rig.json", frames[0].cameras)
    write_json(root / "config.json", config_to_dict(config))
    for frame in frames:
        fdir = root / f"frame_{frame.index:05d}"
        (fdir / "gt").mkdir(parents=True, exist_ok=True)
        for v, (img, mask, lab) in enumerate(
                zip(frame.images, frame.masks, frame.labels)):
            write_png(fdir / f"view_{v:02d}.png",
                      np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8))
            write_png(fdir / f"mask_{v:02d}.png",
                      np.clip(np.rint(mask * 255.0), 0, 255).astype(np.uint8))
            write_png(fdir / f"labels_{v:02d}.png", lab.astype(np.uint8))
        write_mesh_frame(fdir / "mesh.bin", frame.surface.vertices,
                         frame.surface.faces)
        _write_keypoints(fdir / "keypoints.txt", frame.keypoints)
        write_mesh_frame(fdir / "gt" / "body.bin", frame.gt_body.vertices,
                         frame.gt_body.faces)
        write_mesh_frame(fdir / "gt" / "cloth.bin", frame.gt_cloth.vertices,
                         frame.gt_cloth.faces)
        write_pose_sequence_text(fdir / "gt" / "pose.txt", [frame.gt_pose])


def read_capture_archive(root) -> tuple[list[CaptureFrame], dict]:
    """Load an archive written by write_capture_archive. Meshes come back
    without UV atlases (templates are rebuilt from the config snapshot)."""
    root = Path(root)
    cameras = read_rig(root / "rig.json")
    config_doc = read_json(root / "config.json")
    frames = []
    for fdir in sorted(root.glob("frame_*")):
        index = int(fdir.name.split("_")[1])
        images, masks, labels = [], [], []
        for v in range(len(cameras)):
            images.append(read_png(fdir / f"view_{v:02d}.png").astype(np.float64) / 255.0)
            masks.append(read_png(fdir / f"mask_{v:02d}.png").astype(np.float64) / 255.0)
            labels.append(read_png(fdir / f"labels_{v:02d}.png").astype(np.int8))
        sv, sf = read_mesh_frame(fdir / "mesh.bin")
        bv, bf = read_mesh_frame(fdir / "gt" / "body.bin")
        cv, cf = read_mesh_frame(fdir / "gt" / "cloth.bin")
        frames.append(CaptureFrame(
            index=index, images=images, masks=masks, labels=labels,
            surface=TriMesh(sv, sf), keypoints=_read_keypoints(fdir / "keypoints.txt"),
            cameras=cameras, gt_body=TriMesh(bv, bf), gt_cloth=TriMesh(cv, cf),
            gt_pose=read_pose_sequence_text(fdir / "gt" / "pose.txt")[0]))
    return frames, config_doc
