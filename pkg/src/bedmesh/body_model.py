"""Parametric 3D body model.

Maps an 88-dim parameter vector ``[beta | theta | s | u | v]`` (10 shape
coefficients, 23x3 axis-angle joint rotations, global translation, and a
sine/cosine pair per global-rotation axis) to a posed mesh and 24 joint
centers via shape blendshapes, forward kinematics and linear blend
skinning.

Global rotation convention: each axis angle is ``phi_i = atan2(u_i, v_i)``
and the three angles compose intrinsically in X -> Y -> Z order, applied
about the root joint before the global translation.

A procedural "toy" template (capsule limbs over the standard 24-joint
kinematic tree) is provided so that nothing here depends on external model
assets; real template data with the same field layout can be loaded from a
container file instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .containers import read_container, write_container

PARAM_DIM = 88
NUM_JOINTS = 24
NUM_BODY_JOINTS = 23
NUM_BETAS = 10

# Kinematic tree: parent joint index per joint, root (pelvis) = -1.
KINEMATIC_PARENTS = (
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21
)

JOINT_NAMES = (
    "pelvis", "hip_l", "hip_r", "spine1", "knee_l", "knee_r", "spine2",
    "ankle_l", "ankle_r", "spine3", "foot_l", "foot_r", "neck",
    "collar_l", "collar_r", "head", "shoulder_l", "shoulder_r",
    "elbow_l", "elbow_r", "wrist_l", "wrist_r", "hand_l", "hand_r",
)


class InvalidRotationError(ValueError):
    """A (u, v) rotation pair is too close to (0, 0) to define an angle."""


class TemplateError(ValueError):
    """Template arrays are malformed or mutually inconsistent."""


@dataclass(frozen=True)
class SmplParams:
    """The 88-dim body parameter vector, split into named fields."""

    beta: Tensor   # (10,) shape coefficients
    theta: Tensor  # (23, 3) axis-angle joint rotations, radians
    s: Tensor      # (3,) global translation, meters
    u: Tensor      # (3,) global-rotation sine-like components
    v: Tensor      # (3,) global-rotation cosine-like components

    def __post_init__(self):
        for name, shape in (("beta", (10,)), ("theta", (23, 3)), ("s", (3,)),
                            ("u", (3,)), ("v", (3,))):
            t = torch.as_tensor(getattr(self, name))
            if tuple(t.shape) != shape:
                raise ValueError(f"{name} must have shape {shape}, got {tuple(t.shape)}")
            object.__setattr__(self, name, t)

    @staticmethod
    def zeros(dtype=torch.float64) -> "SmplParams":
        return SmplParams(
            beta=torch.zeros(10, dtype=dtype),
            theta=torch.zeros(23, 3, dtype=dtype),
            s=torch.zeros(3, dtype=dtype),
            u=torch.zeros(3, dtype=dtype),
            v=torch.ones(3, dtype=dtype),
        )


@dataclass(frozen=True)
class GenderFlag:
    """One-hot gender pair: [1, 0] = male, [0, 1] = female."""

    flag: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.flag)
        if f.shape != (2,) or sorted(f.tolist()) != [0, 1]:
            raise ValueError(f"gender flag must be a one-hot pair, got {f}")
        object.__setattr__(self, "flag", f.astype(np.uint8))

    @staticmethod
    def male() -> "GenderFlag":
        return GenderFlag(np.array([1, 0], dtype=np.uint8))

    @staticmethod
    def female() -> "GenderFlag":
        return GenderFlag(np.array([0, 1], dtype=np.uint8))

    @property
    def is_female(self) -> bool:
        return bool(self.flag[1] == 1)


@dataclass
class BodyTemplate:
    """Rest-pose body data: mesh, blendshapes, regressor, skinning weights."""

    rest_vertices: Tensor    # (N, 3) float32, meters
    shape_dirs: Tensor       # (N, 3, 10) float32, meters per unit beta
    joint_regressor: Tensor  # (24, N) float32, rows sum to 1
    kinematic_parents: Tensor  # (24,) int32, root = -1
    skin_weights: Tensor     # (N, 24) float32, convex rows
    faces: Tensor            # (F, 3) int32 triangle indices

    def __post_init__(self):
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    def validate(self) -> None:
        n = self.rest_vertices.shape[0]
        expected = {
            "rest_vertices": (n, 3),
            "shape_dirs": (n, 3, NUM_BETAS),
            "joint_regressor": (NUM_JOINTS, n),
            "kinematic_parents": (NUM_JOINTS,),
            "skin_weights": (n, NUM_JOINTS),
        }
        for name, shape in expected.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise TemplateError(f"{name}: expected shape {shape}, got {got}")
        faces = self.faces
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise TemplateError(f"faces: expected (F, 3), got {tuple(faces.shape)}")
        if faces.numel() and (faces.min() < 0 or faces.max() >= n):
            raise TemplateError("faces reference out-of-range vertices")

        w = self.skin_weights
        if torch.any(w < -1e-9):
            raise TemplateError("skin_weights must be nonnegative")
        if torch.any((w.sum(dim=1) - 1.0).abs() > 1e-6):
            raise TemplateError("skin_weights rows must sum to 1")
        if torch.any((self.joint_regressor.sum(dim=1) - 1.0).abs() > 1e-6):
            raise TemplateError("joint_regressor rows must sum to 1")

        parents = self.kinematic_parents.tolist()
        if parents[0] != -1:
            raise TemplateError("joint 0 must be the root (parent -1)")
        for j in range(1, NUM_JOINTS):
            # walk to the root; a cycle would never reach -1 within 24 hops
            k, hops = j, 0
            while k != -1:
                k = parents[k]
                hops += 1
                if hops > NUM_JOINTS:
                    raise TemplateError(f"kinematic_parents has a cycle through joint {j}")


@dataclass(frozen=True)
class TemplateSet:
    """Per-gender templates sharing one vertex layout."""

    female: BodyTemplate
    male: BodyTemplate

    def __post_init__(self):
        if self.female.n_vertices != self.male.n_vertices:
            raise TemplateError("female/male templates must share vertex count")

    @property
    def n_vertices(self) -> int:
        return self.female.n_vertices

    def for_gender(self, gender: GenderFlag) -> BodyTemplate:
        return self.female if gender.is_female else self.male


@dataclass(frozen=True)
class BodyMesh:
    """Posed body: mesh vertices and the 24 joint centers, in meters."""

    vertices: Tensor  # (N, 3)
    joints: Tensor    # (24, 3)
    faces: Tensor | None = None  # (F, 3) triangle indices, if known


def pack(params: SmplParams) -> Tensor:
    """Concatenate fields into the flat 88-vector [beta | theta | s | u | v]."""
    return torch.cat([
        params.beta.reshape(-1), params.theta.reshape(-1),
        params.s.reshape(-1), params.u.reshape(-1), params.v.reshape(-1),
    ])


def unpack(flat) -> SmplParams:
    """Split a flat 88-vector back into named fields."""
    flat = torch.as_tensor(flat).reshape(-1)
    if flat.shape[0] != PARAM_DIM:
        raise ValueError(f"expected a vector of length {PARAM_DIM}, got {flat.shape[0]}")
    return SmplParams(
        beta=flat[0:10],
        theta=flat[10:79].reshape(23, 3),
        s=flat[79:82],
        u=flat[82:85],
        v=flat[85:88],
    )


def decode_global_rotation(u, v, eps: float = 1e-8) -> Tensor:
    """Per-axis angles ``phi_i = atan2(u_i, v_i)`` in (-pi, pi].

    The pair is normalized to unit length before the atan2; pairs with norm
    below ``eps`` are rejected as degenerate.
    """
    u = torch.as_tensor(u)
    v = torch.as_tensor(v)
    norm = torch.sqrt(u * u + v * v)
    if torch.any(norm < eps):
        bad = torch.nonzero(norm < eps).flatten().tolist()
        raise InvalidRotationError(f"degenerate (u, v) rotation pair at indices {bad}")
    phi = torch.atan2(u / norm, v / norm)
    return torch.where(phi == -math.pi, torch.full_like(phi, math.pi), phi)


def euler_xyz_matrix(phi: Tensor) -> Tensor:
    """Rotation matrix for intrinsic X -> Y -> Z angles, ``Rx @ Ry @ Rz``."""
    phi = torch.as_tensor(phi)
    a, b, c = phi[..., 0], phi[..., 1], phi[..., 2]
    ca, sa = torch.cos(a), torch.sin(a)
    cb, sb = torch.cos(b), torch.sin(b)
    cc, sc = torch.cos(c), torch.sin(c)
    row0 = torch.stack([cb * cc, -cb * sc, sb], dim=-1)
    row1 = torch.stack([ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -sa * cb], dim=-1)
    row2 = torch.stack([sa * sc - ca * sb * cc, sa * cc + ca * sb * sc, ca * cb], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def euler_xyz_from_matrix(R: Tensor) -> Tensor:
    """Inverse of :func:`euler_xyz_matrix` away from the |b| = pi/2 gimbal."""
    R = torch.as_tensor(R)
    b = torch.asin(torch.clamp(R[..., 0, 2], -1.0, 1.0))
    a = torch.atan2(-R[..., 1, 2], R[..., 2, 2])
    c = torch.atan2(-R[..., 0, 1], R[..., 0, 0])
    return torch.stack([a, b, c], dim=-1)


def rodrigues(omega: Tensor) -> Tensor:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    Uses sinc-based coefficients, smooth at the identity (no branch on the
    rotation magnitude), so autograd derivatives are exact everywhere.
    """
    omega = torch.as_tensor(omega)
    theta = torch.linalg.norm(omega, dim=-1)
    # sin(t)/t and (1 - cos t)/t^2 via sinc, analytic at t = 0
    k1 = torch.sinc(theta / math.pi)
    k2 = 0.5 * torch.sinc(theta / (2.0 * math.pi)) ** 2
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    zero = torch.zeros_like(wx)
    K = torch.stack([
        torch.stack([zero, -wz, wy], dim=-1),
        torch.stack([wz, zero, -wx], dim=-1),
        torch.stack([-wy, wx, zero], dim=-1),
    ], dim=-2)
    eye = torch.eye(3, dtype=omega.dtype, device=omega.device).expand(K.shape)
    return eye + k1[..., None, None] * K + k2[..., None, None] * (K @ K)


def _se3(R: Tensor, t: Tensor) -> Tensor:
    """Stack rotation (..., 3, 3) and translation (..., 3) into (..., 4, 4)."""
    out = torch.zeros(R.shape[:-2] + (4, 4), dtype=R.dtype, device=R.device)
    out[..., :3, :3] = R
    out[..., :3, 3] = t
    out[..., 3, 3] = 1.0
    return out


def lbs_forward(flat: Tensor, template: BodyTemplate) -> tuple[Tensor, Tensor]:
    """Batched decode: (B, 88) parameters -> (B, N, 3) vertices, (B, 24, 3) joints.

    Pipeline: shaped rest mesh from blendshapes, rest joints from the
    regressor, forward kinematics over the tree (global rotation about the
    root joint, then translation), then linear blend skinning.
    """
    flat = torch.as_tensor(flat)
    if flat.ndim == 1:
        flat = flat[None]
    dtype = flat.dtype
    beta = flat[:, 0:10]
    theta = flat[:, 10:79].reshape(-1, 23, 3)
    s = flat[:, 79:82]
    u = flat[:, 82:85]
    v = flat[:, 85:88]

    rest = template.rest_vertices.to(dtype)
    dirs = template.shape_dirs.to(dtype)
    regressor = template.joint_regressor.to(dtype)
    weights = template.skin_weights.to(dtype)
    parents = template.kinematic_parents.tolist()

    shaped = rest[None] + torch.einsum("vdk,bk->bvd", dirs, beta)
    rest_joints = torch.einsum("jv,bvd->bjd", regressor, shaped)

    root_rot = euler_xyz_matrix(decode_global_rotation(u, v))
    rots = torch.cat([root_rot[:, None], rodrigues(theta)], dim=1)  # (B, 24, 3, 3)

    transforms = [None] * NUM_JOINTS
    transforms[0] = _se3(rots[:, 0], rest_joints[:, 0] + s)
    for j in range(1, NUM_JOINTS):
        local = _se3(rots[:, j], rest_joints[:, j] - rest_joints[:, parents[j]])
        transforms[j] = transforms[parents[j]] @ local
    G = torch.stack(transforms, dim=1)  # (B, 24, 4, 4)
    joints = G[..., :3, 3]

    # Skinning operator: subtract the rest joint, then apply G.
    A = G.clone()
    A[..., :3, 3] = A[..., :3, 3] - (G[..., :3, :3] @ rest_joints[..., None]).squeeze(-1)
    T = torch.einsum("vj,bjxy->bvxy", weights, A)
    vertices = (T[..., :3, :3] @ shaped[..., None]).squeeze(-1) + T[..., :3, 3]
    return vertices, joints


def forward(params: SmplParams, gender: GenderFlag, templates: TemplateSet) -> BodyMesh:
    """Decode one parameter set to a posed mesh using the gendered template."""
    template = templates.for_gender(gender)
    flat = pack(params).to(torch.promote_types(params.beta.dtype, torch.float32))
    vertices, joints = lbs_forward(flat[None], template)
    return BodyMesh(vertices=vertices[0], joints=joints[0], faces=template.faces)


# ---------------------------------------------------------------------------
# Procedural toy template
# ---------------------------------------------------------------------------

# Rest joints for a body lying supine: +x toward the head, +y to the body's
# left, +z up from the bed plane. Units: meters.
_BASE_JOINTS = np.array([
    (0.000, 0.000, 0.095),    # pelvis
    (-0.030, 0.095, 0.085),   # hip_l
    (-0.030, -0.095, 0.085),  # hip_r
    (0.110, 0.000, 0.100),    # spine1
    (-0.460, 0.105, 0.075),   # knee_l
    (-0.460, -0.105, 0.075),  # knee_r
    (0.230, 0.000, 0.105),    # spine2
    (-0.850, 0.110, 0.060),   # ankle_l
    (-0.850, -0.110, 0.060),  # ankle_r
    (0.310, 0.000, 0.110),    # spine3
    (-0.940, 0.110, 0.095),   # foot_l
    (-0.940, -0.110, 0.095),  # foot_r
    (0.460, 0.000, 0.105),    # neck
    (0.400, 0.060, 0.100),    # collar_l
    (0.400, -0.060, 0.100),   # collar_r
    (0.600, 0.000, 0.105),    # head
    (0.430, 0.170, 0.090),    # shoulder_l
    (0.430, -0.170, 0.090),   # shoulder_r
    (0.160, 0.220, 0.080),    # elbow_l
    (0.160, -0.220, 0.080),   # elbow_r
    (-0.090, 0.230, 0.080),   # wrist_l
    (-0.090, -0.230, 0.080),  # wrist_r
    (-0.180, 0.235, 0.080),   # hand_l
    (-0.180, -0.235, 0.080),  # hand_r
])

# Capsule radius per bone, indexed by the bone's child joint. Bone 0 is a
# synthetic pelvis segment along -x so the root also carries vertices.
_BONE_RADII = np.array([
    0.100, 0.075, 0.075, 0.105, 0.065, 0.065, 0.115, 0.050, 0.050, 0.115,
    0.035, 0.035, 0.060, 0.050, 0.050, 0.075, 0.055, 0.055, 0.042, 0.042,
    0.036, 0.036, 0.030, 0.030,
])

_TORSO_BONES = (0, 3, 6, 9)
_SPINE_CHAIN = (3, 6, 9, 12)
_LEG_BONES = (4, 5, 7, 8)
_ARM_BONES = (18, 19, 20, 21)
_LIMB_BONES = _LEG_BONES + _ARM_BONES
_RING_SIZE = 6


def _descendant_bones(bone: int) -> list[int]:
    out = []
    for j in range(1, NUM_JOINTS):
        k = KINEMATIC_PARENTS[j]
        while k != -1:
            if k == bone:
                out.append(j)
                break
            k = KINEMATIC_PARENTS[k]
    return out


def _gendered_joints_and_radii(is_female: bool) -> tuple[np.ndarray, np.ndarray]:
    joints = _BASE_JOINTS.copy()
    radii = _BONE_RADII.copy()
    if is_female:
        joints *= 0.94
        for j in (1, 2, 4, 5, 7, 8, 10, 11):  # wider hips / legs
            joints[j, 1] *= 1.12
        for j in (13, 14, 16, 17, 18, 19, 20, 21, 22, 23):  # narrower shoulders
            joints[j, 1] *= 0.94
        radii[[3, 6, 9]] *= 0.95
        radii[[1, 2, 4, 5]] *= 1.10
    else:
        for j in (13, 14, 16, 17, 18, 19, 20, 21, 22, 23):
            joints[j, 1] *= 1.08
        radii[[3, 6, 9]] *= 1.05
    return joints, radii


def _bone_segments(joints: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    segs = []
    for b in range(NUM_JOINTS):
        if b == 0:
            start = joints[0] + np.array([-0.10, 0.0, 0.0])
            end = joints[0] + np.array([0.05, 0.0, 0.0])
        else:
            start = joints[KINEMATIC_PARENTS[b]]
            end = joints[b]
        segs.append((start, end))
    return segs


def make_toy_template(n_vertices: int, seed: int) -> TemplateSet:
    """Deterministic procedural template pair (female, male).

    The first 24 vertices are joint markers (one per joint, regressed
    one-hot); remaining vertices form capsule rings along each bone,
    allocated by arc length. Ten shape directions implement per-segment
    length and girth scalings plus shoulder/hip width and head size.
    """
    if n_vertices < NUM_JOINTS:
        raise ValueError(f"n_vertices must be >= {NUM_JOINTS}, got {n_vertices}")
    female = _build_toy_template(n_vertices, np.random.default_rng([seed, 1]), is_female=True)
    male = _build_toy_template(n_vertices, np.random.default_rng([seed, 0]), is_female=False)
    return TemplateSet(female=female, male=male)


def _build_toy_template(n_vertices: int, rng: np.random.Generator, is_female: bool) -> BodyTemplate:
    joints, radii = _gendered_joints_and_radii(is_female)
    segments = _bone_segments(joints)
    lengths = np.array([np.linalg.norm(e - s) for s, e in segments])

    # Allocate non-marker vertices across bones, by length x sqrt(radius),
    # largest remainder so counts sum exactly.
    n_free = n_vertices - NUM_JOINTS
    weight = lengths * np.sqrt(radii)
    quota = weight / weight.sum() * n_free
    counts = np.floor(quota).astype(int)
    remainder = quota - counts
    for b in np.argsort(-remainder)[: n_free - counts.sum()]:
        counts[b] += 1

    verts = [joints[j] for j in range(NUM_JOINTS)]  # markers first
    vert_bone = [j for j in range(NUM_JOINTS)]
    vert_t = [1.0] * NUM_JOINTS
    vert_radial = [np.zeros(3)] * NUM_JOINTS
    vert_radius = [0.0] * NUM_JOINTS
    rings: dict[int, list[list[int]]] = {b: [] for b in range(NUM_JOINTS)}

    for b in range(NUM_JOINTS):
        start, end = segments[b]
        axis = end - start
        length = lengths[b]
        direction = axis / max(length, 1e-9)
        ref = np.array([0.0, 0.0, 1.0])
        if abs(direction @ ref) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        e1 = np.cross(direction, ref)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(direction, e1)
        phase = rng.uniform(0.0, 2.0 * np.pi)

        m = counts[b]
        n_rings = m // _RING_SIZE
        leftover = m % _RING_SIZE
        for r in range(n_rings):
            t = (r + 1) / (n_rings + 1)
            ring = []
            for k in range(_RING_SIZE):
                ang = phase + 2.0 * np.pi * k / _RING_SIZE
                radial = np.cos(ang) * e1 + np.sin(ang) * e2
                ring.append(len(verts))
                verts.append(start + t * axis + radii[b] * radial)
                vert_bone.append(b)
                vert_t.append(t)
                vert_radial.append(radial)
                vert_radius.append(radii[b])
            rings[b].append(ring)
        for k in range(leftover):
            t = rng.uniform(0.15, 0.85)
            ang = rng.uniform(0.0, 2.0 * np.pi)
            radial = np.cos(ang) * e1 + np.sin(ang) * e2
            verts.append(start + t * axis + radii[b] * radial)
            vert_bone.append(b)
            vert_t.append(t)
            vert_radial.append(radial)
            vert_radius.append(radii[b])

    rest = np.asarray(verts)
    bone_idx = np.asarray(vert_bone)
    frac = np.asarray(vert_t)
    radial_dirs = np.asarray(vert_radial)
    radius_of = np.asarray(vert_radius)

    faces = []
    for b in range(NUM_JOINTS):
        ring_list = rings[b]
        for ra, rb in zip(ring_list, ring_list[1:]):
            for k in range(_RING_SIZE):
                k2 = (k + 1) % _RING_SIZE
                faces.append((ra[k], ra[k2], rb[k]))
                faces.append((ra[k2], rb[k2], rb[k]))
        if ring_list:
            # caps: fan the first ring to the parent-side marker, the last
            # ring to this bone's own marker
            cap_a = KINEMATIC_PARENTS[b] if b != 0 else 0
            cap_b = b
            first, last = ring_list[0], ring_list[-1]
            for k in range(_RING_SIZE):
                k2 = (k + 1) % _RING_SIZE
                faces.append((max(cap_a, 0), first[k2], first[k]))
                faces.append((cap_b, last[k], last[k2]))
    faces_arr = np.asarray(faces, dtype=np.int32).reshape(-1, 3)

    # Skin weights: blend into the parent bone near the bone's start.
    weights = np.zeros((n_vertices, NUM_JOINTS))
    for i in range(n_vertices):
        b = bone_idx[i]
        t = frac[i]
        parent_bone = KINEMATIC_PARENTS[b]
        if i >= NUM_JOINTS and t < 0.22 and parent_bone >= 0:
            w_parent = 0.5 * (1.0 - t / 0.22)
            weights[i, parent_bone] = w_parent
            weights[i, b] = 1.0 - w_parent
        else:
            weights[i, b] = 1.0

    regressor = np.zeros((NUM_JOINTS, n_vertices))
    regressor[np.arange(NUM_JOINTS), np.arange(NUM_JOINTS)] = 1.0

    shape_dirs = np.zeros((n_vertices, 3, NUM_BETAS))
    axes = {b: segments[b][1] - segments[b][0] for b in range(NUM_JOINTS)}

    def stretch(k: int, bones: tuple[int, ...], scale: float) -> None:
        for b in bones:
            on_bone = bone_idx == b
            shape_dirs[on_bone, :, k] += scale * frac[on_bone, None] * axes[b][None, :]
            for d in _descendant_bones(b):
                shape_dirs[bone_idx == d, :, k] += scale * axes[b][None, :]

    def radial(k: int, bones: tuple[int, ...], scale: float) -> None:
        mask = np.isin(bone_idx, bones) & (radius_of > 0)
        shape_dirs[mask, :, k] += scale * radius_of[mask, None] * radial_dirs[mask]

    def widen(k: int, collar_bones: tuple[int, ...], scale: float) -> None:
        for b in collar_bones:
            sign = np.sign(joints[b][1])
            on_bone = bone_idx == b
            shape_dirs[on_bone, 1, k] += scale * sign * frac[on_bone]
            for d in _descendant_bones(b):
                shape_dirs[bone_idx == d, 1, k] += scale * sign

    shape_dirs[:, :, 0] = 0.040 * (rest - joints[0][None, :])  # overall size
    stretch(1, _SPINE_CHAIN, 0.05)                             # torso length
    stretch(2, _LEG_BONES, 0.05)                               # leg length
    stretch(3, _ARM_BONES, 0.05)                               # arm length
    radial(4, tuple(range(NUM_JOINTS)), 0.03)                  # overall girth
    radial(5, _TORSO_BONES, 0.05)                              # torso girth
    radial(6, _LIMB_BONES, 0.05)                               # limb girth
    neck = joints[12]
    on_head = bone_idx == 15
    shape_dirs[on_head, :, 7] = 0.06 * (rest[on_head] - neck[None, :])  # head size
    widen(8, (13, 14), 0.025)                                  # shoulder width
    widen(9, (1, 2), 0.020)                                    # hip width

    return BodyTemplate(
        rest_vertices=torch.from_numpy(rest.astype(np.float32)),
        shape_dirs=torch.from_numpy(shape_dirs.astype(np.float32)),
        joint_regressor=torch.from_numpy(regressor.astype(np.float32)),
        kinematic_parents=torch.tensor(KINEMATIC_PARENTS, dtype=torch.int32),
        skin_weights=torch.from_numpy(weights.astype(np.float32)),
        faces=torch.from_numpy(faces_arr),
    )


# ---------------------------------------------------------------------------
# Template file IO
# ---------------------------------------------------------------------------

_TEMPLATE_KEYS = (
    "rest_vertices", "shape_dirs", "joint_regressor",
    "kinematic_parents", "skin_weights", "faces",
)


def save_template(path, template: BodyTemplate) -> None:
    arrays = {
        "rest_vertices": template.rest_vertices.numpy().astype(np.float32),
        "shape_dirs": template.shape_dirs.numpy().astype(np.float32),
        "joint_regressor": template.joint_regressor.numpy().astype(np.float32),
        "kinematic_parents": template.kinematic_parents.numpy().astype(np.int32),
        "skin_weights": template.skin_weights.numpy().astype(np.float32),
        "faces": template.faces.numpy().astype(np.int32),
    }
    write_container(path, arrays, kind="body_template")


def load_template(path) -> BodyTemplate:
    """Load a template from a named-array container, validating invariants."""
    arrays, _ = read_container(path, kind="body_template")
    missing = [k for k in _TEMPLATE_KEYS if k not in arrays]
    if missing:
        raise TemplateError(f"template file missing arrays: {missing}")
    return BodyTemplate(
        rest_vertices=torch.from_numpy(arrays["rest_vertices"].astype(np.float32)),
        shape_dirs=torch.from_numpy(arrays["shape_dirs"].astype(np.float32)),
        joint_regressor=torch.from_numpy(arrays["joint_regressor"].astype(np.float32)),
        kinematic_parents=torch.from_numpy(arrays["kinematic_parents"].astype(np.int32)),
        skin_weights=torch.from_numpy(arrays["skin_weights"].astype(np.float32)),
        faces=torch.from_numpy(arrays["faces"].astype(np.int32)),
    )


def save_template_set(path, templates: TemplateSet) -> None:
    """Store both gendered templates in one container (gender-prefixed keys)."""
    arrays = {}
    for prefix, template in (("female", templates.female), ("male", templates.male)):
        arrays[f"{prefix}/rest_vertices"] = template.rest_vertices.numpy().astype(np.float32)
        arrays[f"{prefix}/shape_dirs"] = template.shape_dirs.numpy().astype(np.float32)
        arrays[f"{prefix}/joint_regressor"] = template.joint_regressor.numpy().astype(np.float32)
        arrays[f"{prefix}/kinematic_parents"] = template.kinematic_parents.numpy().astype(np.int32)
        arrays[f"{prefix}/skin_weights"] = template.skin_weights.numpy().astype(np.float32)
        arrays[f"{prefix}/faces"] = template.faces.numpy().astype(np.int32)
    write_container(path, arrays, kind="body_template_set")


def load_template_set(path) -> TemplateSet:
    arrays, _ = read_container(path, kind="body_template_set")

    def build(prefix: str) -> BodyTemplate:
        missing = [k for k in _TEMPLATE_KEYS if f"{prefix}/{k}" not in arrays]
        if missing:
            raise TemplateError(f"template set missing {prefix} arrays: {missing}")
        return BodyTemplate(
            rest_vertices=torch.from_numpy(arrays[f"{prefix}/rest_vertices"].astype(np.float32)),
            shape_dirs=torch.from_numpy(arrays[f"{prefix}/shape_dirs"].astype(np.float32)),
            joint_regressor=torch.from_numpy(arrays[f"{prefix}/joint_regressor"].astype(np.float32)),
            kinematic_parents=torch.from_numpy(arrays[f"{prefix}/kinematic_parents"].astype(np.int32)),
            skin_weights=torch.from_numpy(arrays[f"{prefix}/skin_weights"].astype(np.float32)),
            faces=torch.from_numpy(arrays[f"{prefix}/faces"].astype(np.int32)),
        )

    return TemplateSet(female=build("female"), male=build("male"))
