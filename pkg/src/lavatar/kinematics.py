"""Skeletons, linear blend skinning, and pose/shape fitting.

Joint rotations are XYZ Euler angles in radians: R = Rx(ax) @ Ry(ay) @ Rz(az)
applied in the joint's parent frame. World transforms chain as
T_j = T_parent @ Translate(rest offset_j) @ Rotate(angles_j), with the root
additionally translated by the pose's root translation. Skinning uses the
usual rest-relative matrices M_j = T_j @ inverse(rest T_j).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import LbsError
from .mesh import LaplacianOperator, SurfaceQuery, TriMesh
from .utils import format_float, read_json, write_json

MAX_INFLUENCES = 4


@dataclass
class Skeleton:
    names: list[str]
    parents: np.ndarray  # -1 for the root
    offsets: np.ndarray  # rest offset from parent, meters

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int32).reshape(-1)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        self.validate()

    def validate(self) -> None:
        j = len(self.names)
        if len(self.parents) != j or len(self.offsets) != j:
            raise ValueError("joint name/parent/offset counts differ")
        if len(set(self.names)) != j:
            raise ValueError("duplicate joint names")
        roots = np.nonzero(self.parents < 0)[0]
        if len(roots) != 1:
            raise ValueError("skeleton must have exactly one root")
        for i, p in enumerate(self.parents):
            if p >= i:
                raise ValueError("parents must precede children (topological order)")

    @property
    def num_joints(self) -> int:
        return len(self.names)

    def joint_index(self, name: str) -> int:
        return self.names.index(name)

    def rest_world_positions(self) -> np.ndarray:
        pos = np.zeros((self.num_joints, 3))
        for i, p in enumerate(self.parents):
            pos[i] = self.offsets[i] if p < 0 else pos[p] + self.offsets[i]
        return pos


@dataclass
class SkeletonPose:
    angles: np.ndarray  # (J, 3) radians
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(-1, 3)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        if not np.isfinite(self.angles).all() or not np.isfinite(self.root_translation).all():
            raise ValueError("pose parameters must be finite")

    @classmethod
    def identity(cls, num_joints: int) -> "SkeletonPose":
        return cls(np.zeros((num_joints, 3)))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.angles.reshape(-1), self.root_translation])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "SkeletonPose":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if len(vec) < 3 or (len(vec) - 3) % 3 != 0:
            raise ValueError(f"pose vector length {len(vec)} is not 3J+3")
        return cls(vec[:-3].reshape(-1, 3), vec[-3:])

    def copy(self) -> "SkeletonPose":
        return SkeletonPose(self.angles.copy(), self.root_translation.copy())


@dataclass
class SkinningWeights:
    """Per-vertex joint influences, padded to MAX_INFLUENCES columns."""

    joints: np.ndarray  # (N, 4) int32, -1 padding
    weights: np.ndarray  # (N, 4) float64, 0 padding

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.int32).reshape(-1, MAX_INFLUENCES)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1, MAX_INFLUENCES)
        self.validate()

    def validate(self) -> None:
        if self.joints.shape != self.weights.shape:
            raise ValueError("joints/weights shape mismatch")
        if (self.weights < -1e-12).any():
            raise ValueError("negative skinning weight")
        sums = self.weights.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("skinning weights must sum to 1 per vertex")
        if (self.weights[self.joints < 0] != 0).any():
            raise ValueError("padding columns must carry zero weight")

    @property
    def num_vertices(self) -> int:
        return len(self.joints)

    @classmethod
    def from_pairs(cls, pairs: list[list[tuple[int, float]]]) -> "SkinningWeights":
        n = len(pairs)
        joints = np.full((n, MAX_INFLUENCES), -1, dtype=np.int32)
        weights = np.zeros((n, MAX_INFLUENCES))
        for v, lst in enumerate(pairs):
            if len(lst) > MAX_INFLUENCES:
                raise ValueError(f"vertex {v} has more than {MAX_INFLUENCES} influences")
            for k, (j, w) in enumerate(lst):
                joints[v, k] = j
                weights[v, k] = w
        return cls(joints, weights)

    def to_pairs(self) -> list[list[tuple[int, float]]]:
        out = []
        for v in range(self.num_vertices):
            out.append(
                [
                    (int(j), float(w))
                    for j, w in zip(self.joints[v], self.weights[v])
                    if j >= 0 and w > 0
                ]
            )
        return out


@dataclass
class KeypointSet:
    names: list[str]
    points: np.ndarray  # (K, 3)
    confidences: np.ndarray  # (K,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if len(self.names) != len(self.points) or len(self.names) != len(self.confidences):
            raise ValueError("keypoint name/point/confidence counts differ")
        if (self.confidences < 0).any() or (self.confidences > 1).any():
            raise ValueError("confidences must lie in [0, 1]")

    def select(self, names: list[str]) -> "KeypointSet":
        idx = [self.names.index(n) for n in names]
        return KeypointSet(
            [self.names[i] for i in idx], self.points[idx], self.confidences[idx]
        )


# ---------------------------------------------------------------------------
# Forward kinematics and skinning
# ---------------------------------------------------------------------------


def euler_xyz_matrix(angles: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 3) XYZ Euler angles: Rx @ Ry @ Rz."""
    a = np.asarray(angles, dtype=np.float64)
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    r = np.empty(a.shape[:-1] + (3, 3))
    r[..., 0, 0] = cy * cz
    r[..., 0, 1] = -cy * sz
    r[..., 0, 2] = sy
    r[..., 1, 0] = cx * sz + sx * sy * cz
    r[..., 1, 1] = cx * cz - sx * sy * sz
    r[..., 1, 2] = -sx * cy
    r[..., 2, 0] = sx * sz - cx * sy * cz
    r[..., 2, 1] = sx * cz + cx * sy * sz
    r[..., 2, 2] = cx * cy
    return r


def joint_world_transforms(skeleton: Skeleton, pose: SkeletonPose) -> np.ndarray:
    """(J, 4, 4) world transforms of every joint under the pose."""
    j = skeleton.num_joints
    if pose.angles.shape[0] != j:
        raise ValueError("pose joint count does not match skeleton")
    rots = euler_xyz_matrix(pose.angles)
    out = np.empty((j, 4, 4))
    for i in range(j):
        local = np.eye(4)
        local[:3, :3] = rots[i]
        local[:3, 3] = skeleton.offsets[i]
        p = skeleton.parents[i]
        if p < 0:
            local[:3, 3] += pose.root_translation
            out[i] = local
        else:
            out[i] = out[p] @ local
    return out


def skinning_matrices(skeleton: Skeleton, pose: SkeletonPose) -> np.ndarray:
    """(J, 4, 4) rest-relative transforms used to blend vertices."""
    world = joint_world_transforms(skeleton, pose)
    rest = skeleton.rest_world_positions()
    inv_rest = np.tile(np.eye(4), (skeleton.num_joints, 1, 1))
    inv_rest[:, :3, 3] = -rest  # rest transforms are pure translations
    return world @ inv_rest


def _blend_matrices(weights: SkinningWeights, mats: np.ndarray) -> np.ndarray:
    # blended as I + sum w*(M - I): exact identity when every M is identity,
    # and insensitive to 1-ulp weight normalization error
    idx = np.maximum(weights.joints, 0)
    gathered = (mats - np.eye(4))[idx]  # (N, 4, 4, 4)
    out = np.einsum("nk,nkij->nij", weights.weights, gathered)
    out += np.eye(4)
    return out


def lbs_pose(
    rest: TriMesh, skeleton: Skeleton, weights: SkinningWeights, pose: SkeletonPose
) -> TriMesh:
    """Skin the rest mesh into the pose; topology is shared with the input."""
    if weights.num_vertices != rest.num_vertices:
        raise ValueError("skinning weights do not match vertex count")
    blended = _blend_matrices(weights, skinning_matrices(skeleton, pose))
    v = np.einsum("nij,nj->ni", blended[:, :3, :3], rest.vertices) + blended[:, :3, 3]
    return rest.with_vertices(v)


def lbs_unpose(
    posed: TriMesh, skeleton: Skeleton, weights: SkinningWeights, pose: SkeletonPose
) -> TriMesh:
    """Invert the per-vertex blended transform to recover rest positions."""
    if weights.num_vertices != posed.num_vertices:
        raise ValueError("skinning weights do not match vertex count")
    blended = _blend_matrices(weights, skinning_matrices(skeleton, pose))
    dets = np.linalg.det(blended[:, :3, :3])
    bad = np.nonzero(np.abs(dets) <= 1e-9)[0]
    if len(bad):
        raise LbsError(
            f"singular blended transform at {len(bad)} vertices",
            vertex_indices=bad.tolist(),
        )
    inv = np.linalg.inv(blended)
    v = np.einsum("nij,nj->ni", inv[:, :3, :3], posed.vertices) + inv[:, :3, 3]
    return posed.with_vertices(v)


# ---------------------------------------------------------------------------
# Pose fitting (damped Gauss-Newton on joint keypoints)
# ---------------------------------------------------------------------------


@dataclass
class PoseFit:
    pose: SkeletonPose
    residual: float  # confidence-weighted RMS distance, meters
    converged: bool
    iterations: int


def _keypoint_residuals(skeleton, pose, idx_joints, targets, sqrt_conf):
    world = joint_world_transforms(skeleton, pose)
    pos = world[idx_joints, :3, 3]
    return ((pos - targets) * sqrt_conf[:, None]).reshape(-1)


def fit_pose(
    skeleton: Skeleton,
    keypoints: KeypointSet,
    init: SkeletonPose,
    max_iters: int = 60,
    fd_step: float = 1e-6,
) -> PoseFit:
    """Levenberg-Marquardt fit of pose parameters to named joint keypoints.

    Keypoints are matched to joints by name; entries that name no joint
    (face points) are ignored. Damping starts at 1e-3, divides by 10 on an
    accepted step and multiplies by 10 on a rejected one.
    """
    idx, targets, conf = [], [], []
    for k, name in enumerate(keypoints.names):
        if name in skeleton.names and keypoints.confidences[k] > 0:
            idx.append(skeleton.joint_index(name))
            targets.append(keypoints.points[k])
            conf.append(keypoints.confidences[k])
    if len(idx) < 3:
        raise ValueError("need at least 3 positive-confidence joint keypoints")
    idx = np.array(idx)
    targets = np.array(targets)
    conf = np.array(conf)
    sqrt_conf = np.sqrt(conf)

    x = init.to_vector()
    nj = skeleton.num_joints

    def residuals(vec):
        return _keypoint_residuals(
            skeleton, SkeletonPose.from_vector(vec), idx, targets, sqrt_conf
        )

    r = residuals(x)
    energy = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        jac = np.empty((len(r), len(x)))
        for p in range(len(x)):
            xp = x.copy()
            xp[p] += fd_step
            xm = x.copy()
            xm[p] -= fd_step
            jac[:, p] = (residuals(xp) - residuals(xm)) / (2 * fd_step)
        g = jac.T @ r
        if np.linalg.norm(g) < 1e-12:
            converged = True
            break
        h = jac.T @ jac
        accepted = False
        while lam < 1e12:
            try:
                delta = np.linalg.solve(h + lam * np.eye(len(x)), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = x + delta
            r_new = residuals(x_new)
            e_new = float(r_new @ r_new)
            if e_new < energy:
                x, r, energy = x_new, r_new, e_new
                lam = max(lam / 10, 1e-12)
                accepted = True
                if np.linalg.norm(delta) < 1e-12 or energy < 1e-24:
                    converged = True
                break
            lam *= 10
        if not accepted or converged:
            converged = converged or energy < 1e-18
            break

    rms = float(np.sqrt(energy / max(len(idx), 1)))
    return PoseFit(SkeletonPose.from_vector(x), rms, converged, it)


# ---------------------------------------------------------------------------
# Rest shape fitting (alternate correspondences and a sparse linear solve)
# ---------------------------------------------------------------------------


def fit_rest_shape(
    frames: list[tuple[TriMesh, SkeletonPose]],
    skeleton: Skeleton,
    weights: SkinningWeights,
    rest_init: TriMesh,
    reg_weight: float = 1.0,
    outer_iters: int = 10,
    energy_out: list | None = None,
) -> TriMesh:
    """Estimate rest vertices so the skinned mesh tracks the target frames.

    Alternates closest-point correspondence with an exact sparse solve of
    sum_f ||R_fv x_v + t_fv - c_fv||^2 + reg * ||L(x - x_init)||^2, so the
    true energy is non-increasing per outer iteration.
    """
    if not frames:
        raise ValueError("need at least one frame")
    n = rest_init.num_vertices
    lap = LaplacianOperator.from_mesh(rest_init).matrix
    lap3 = sp.kron(lap, sp.eye(3), format="csr")
    reg_mat = (lap3.T @ lap3) * reg_weight
    reg_rhs_base = reg_mat @ rest_init.vertices.reshape(-1)

    queries = [SurfaceQuery(target) for target, _ in frames]
    blended = [
        _blend_matrices(weights, skinning_matrices(skeleton, pose)) for _, pose in frames
    ]

    rest = rest_init.vertices.copy()
    prev_energy = np.inf
    for _ in range(outer_iters):
        # correspondences from current estimate
        corr = []
        data_energy = 0.0
        for fi in range(len(frames)):
            posed = (
                np.einsum("nij,nj->ni", blended[fi][:, :3, :3], rest)
                + blended[fi][:, :3, 3]
            )
            cp, _, _ = queries[fi].closest(posed)
            corr.append(cp)
            data_energy += float(((posed - cp) ** 2).sum())
        d = rest.reshape(-1) - rest_init.vertices.reshape(-1)
        energy = data_energy + float(d @ (reg_mat @ d))
        if energy_out is not None:
            energy_out.append(energy)
        if prev_energy - energy < 1e-14 and prev_energy != np.inf:
            break
        prev_energy = energy

        # exact solve with correspondences fixed
        rows, cols, vals = [], [], []
        rhs = reg_rhs_base.copy()
        diag_blocks = np.zeros((n, 3, 3))
        for fi in range(len(frames)):
            rot = blended[fi][:, :3, :3]
            diag_blocks += np.einsum("nij,nik->njk", rot, rot)
            resid = corr[fi] - blended[fi][:, :3, 3]
            rhs += np.einsum("nij,ni->nj", rot, resid).reshape(-1)
        base = np.arange(n) * 3
        for a in range(3):
            for b in range(3):
                rows.append(base + a)
                cols.append(base + b)
                vals.append(diag_blocks[:, a, b])
        data_mat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(3 * n, 3 * n),
        )
        system = (data_mat + reg_mat).tocsc()
        rest = spla.spsolve(system, rhs).reshape(n, 3)

    return rest_init.with_vertices(rest)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

SKELETON_VERSION = 1
WEIGHTS_VERSION = 1
POSE_MAGIC = b"LAVP"


def write_skeleton(path, skeleton: Skeleton) -> None:
    doc = {
        "version": SKELETON_VERSION,
        "joints": [
            {
                "name": skeleton.names[i],
                "parent": int(skeleton.parents[i]),
                "offset": [float(x) for x in skeleton.offsets[i]],
            }
            for i in range(skeleton.num_joints)
        ],
    }
    write_json(path, doc)


def read_skeleton(path) -> Skeleton:
    doc = read_json(path)
    extra = set(doc) - {"version", "joints"}
    if extra:
        raise ValueError(f"unknown skeleton keys: {sorted(extra)}")
    if doc.get("version") != SKELETON_VERSION:
        raise ValueError(f"unsupported skeleton version: {doc.get('version')}")
    names = [j["name"] for j in doc["joints"]]
    parents = [j["parent"] for j in doc["joints"]]
    offsets = [j["offset"] for j in doc["joints"]]
    return Skeleton(names, parents, offsets)


def write_weights(path, weights: SkinningWeights) -> None:
    write_json(path, {"version": WEIGHTS_VERSION, "weights": [
        [[int(j), float(w)] for j, w in vertex] for vertex in weights.to_pairs()
    ]})


def read_weights(path) -> SkinningWeights:
    doc = read_json(path)
    extra = set(doc) - {"version", "weights"}
    if extra:
        raise ValueError(f"unknown weight keys: {sorted(extra)}")
    if doc.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version: {doc.get('version')}")
    return SkinningWeights.from_pairs(
        [[(int(j), float(w)) for j, w in vertex] for vertex in doc["weights"]]
    )


def write_pose_sequence_text(path, poses: list[SkeletonPose]) -> None:
    lines = [
        " ".join(format_float(x) for x in pose.to_vector()) for pose in poses
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_pose_sequence_text(path) -> list[SkeletonPose]:
    poses = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            poses.append(SkeletonPose.from_vector([float(x) for x in line.split()]))
    return poses


def write_pose_sequence(path, poses: list[SkeletonPose]) -> None:
    import struct

    if not poses:
        raise ValueError("empty pose sequence")
    dim = len(poses[0].to_vector())
    blob = [POSE_MAGIC, struct.pack("<II", len(poses), dim)]
    for pose in poses:
        v = pose.to_vector()
        if len(v) != dim:
            raise ValueError("inconsistent pose dimensions")
        blob.append(v.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(blob))


def read_pose_sequence(path) -> list[SkeletonPose]:
    import struct

    data = Path(path).read_bytes()
    if data[:4] != POSE_MAGIC:
        raise ValueError(f"not a pose sequence file: {path}")
    count, dim = struct.unpack_from("<II", data, 4)
    if len(data) < 12 + 8 * count * dim:
        raise ValueError(f"truncated pose sequence: {path}")
    flat = np.frombuffer(data, dtype="<f8", count=count * dim, offset=12)
    return [SkeletonPose.from_vector(flat[i * dim : (i + 1) * dim]) for i in range(count)]
