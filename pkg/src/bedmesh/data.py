"""Synthetic depth data: scene rendering, covers, domain shift, augmentation.

Depth images are plain ``(H, W)`` float arrays holding the distance in
meters from an overhead camera plane to the top surface below each pixel
(bed or body). Rendering uses an orthographic top-down height-field
rasterization of the body mesh over a flat bed. Blankets are approximated
by a smoothed upper envelope of the height field over a sampled
chest-to-feet region. A "pseudo-real" domain is synthesized by perturbing
clean renders with sensor noise, a per-participant calibration bias, blur
and a mattress-sag paraboloid.

Image layout: row 0 is the head end of the bed (+x), columns run across
the bed (+y leftward); pixel (i, j) is centered at
``x = ((H-1)/2 - i) * pitch, y = (j - (W-1)/2) * pitch``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .body_model import (
    NUM_JOINTS,
    PARAM_DIM,
    BodyMesh,
    GenderFlag,
    SmplParams,
    TemplateSet,
    euler_xyz_from_matrix,
    euler_xyz_matrix,
    lbs_forward,
    pack,
    unpack,
)
from .containers import read_container, write_container
from .diffusion import STD_FLOOR, LatentStandardizer

COVER_CONDITIONS = ("uncover", "cover1", "cover2")
DOMAINS = ("synthetic", "pseudo_real")

# Condition images fed to the network are heights above the bed, in
# decimeters, so typical body values land in O(1).
CONDITION_SCALE = 10.0


def depth_to_condition(depth: np.ndarray, camera_height: float) -> np.ndarray:
    return (camera_height - np.asarray(depth)) * CONDITION_SCALE


@dataclass(frozen=True)
class SceneConfig:
    """Bed/camera geometry for rendering and its image grid."""

    camera_height: float = 2.0
    bed_extent: tuple[float, float] = (2.0, 1.0)  # (length, width) meters
    pixel_pitch: float = 0.03125
    image_size: tuple[int, int] = (64, 32)
    bed_height: float = 0.0
    cover_condition: str = "uncover"

    def __post_init__(self):
        length, width = self.bed_extent
        h, w = self.image_size
        if min(length, width, self.pixel_pitch, self.camera_height) <= 0:
            raise ValueError("scene dimensions must be positive")
        if h * self.pixel_pitch < length - 1e-9 or w * self.pixel_pitch < width - 1e-9:
            raise ValueError("bed extent does not fit in the image footprint")
        if self.cover_condition not in COVER_CONDITIONS:
            raise ValueError(f"unknown cover condition {self.cover_condition!r}")

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.image_size
        xs = ((h - 1) / 2.0 - np.arange(h)) * self.pixel_pitch
        ys = (np.arange(w) - (w - 1) / 2.0) * self.pixel_pitch
        return xs, ys


# ---------------------------------------------------------------------------
# parameter sampling
# ---------------------------------------------------------------------------

def _default_theta_limits() -> np.ndarray:
    """Per-joint axis-angle bounds (23, 3, 2) radians, supine-plausible."""
    lim = np.zeros((23, 3, 2))
    lim[:, :, 0], lim[:, :, 1] = -0.15, 0.15
    by_joint = {
        # body joints are numbered 1..23; row index is joint - 1
        1: [(-0.30, 0.30), (-0.40, 0.40), (-0.15, 0.50)],   # hip_l
        2: [(-0.30, 0.30), (-0.40, 0.40), (-0.50, 0.15)],   # hip_r
        4: [(-0.10, 0.10), (0.00, 0.90), (-0.10, 0.10)],    # knee_l
        5: [(-0.10, 0.10), (0.00, 0.90), (-0.10, 0.10)],    # knee_r
        7: [(-0.25, 0.25), (-0.25, 0.25), (-0.25, 0.25)],   # ankle_l
        8: [(-0.25, 0.25), (-0.25, 0.25), (-0.25, 0.25)],   # ankle_r
        12: [(-0.25, 0.25), (-0.25, 0.25), (-0.25, 0.25)],  # neck
        15: [(-0.25, 0.25), (-0.25, 0.25), (-0.25, 0.25)],  # head
        16: [(-0.30, 0.30), (-0.30, 0.30), (-0.20, 0.60)],  # shoulder_l
        17: [(-0.30, 0.30), (-0.30, 0.30), (-0.60, 0.20)],  # shoulder_r
        18: [(-0.15, 0.15), (-0.15, 0.15), (0.00, 1.10)],   # elbow_l
        19: [(-0.15, 0.15), (-0.15, 0.15), (-1.10, 0.00)],  # elbow_r
        20: [(-0.30, 0.30), (-0.30, 0.30), (-0.30, 0.30)],  # wrist_l
        21: [(-0.30, 0.30), (-0.30, 0.30), (-0.30, 0.30)],  # wrist_r
    }
    for joint, rows in by_joint.items():
        for axis, (lo, hi) in enumerate(rows):
            lim[joint - 1, axis] = (lo, hi)
    return lim


@dataclass(frozen=True)
class ParamRanges:
    """Uniform sampling bounds for body parameters."""

    beta_lo: float = -2.0
    beta_hi: float = 2.0
    theta_limits: np.ndarray = field(default_factory=_default_theta_limits)
    s_x: tuple[float, float] = (-0.15, 0.15)
    s_y: tuple[float, float] = (-0.15, 0.15)
    s_z: tuple[float, float] = (0.0, 0.04)
    # supine bias: roll/pitch stay near zero, in-plane yaw varies most
    phi_x: tuple[float, float] = (-0.12, 0.12)
    phi_y: tuple[float, float] = (-0.12, 0.12)
    phi_z: tuple[float, float] = (-0.45, 0.45)
    bed_extent: tuple[float, float] = (2.0, 1.0)
    max_tries: int = 100


class FootprintError(RuntimeError):
    """Could not sample a body whose footprint stays inside the bed."""


def sample_params(
    rng: np.random.Generator, ranges: ParamRanges, templates: TemplateSet
) -> tuple[SmplParams, GenderFlag]:
    """Draw body parameters uniformly, rejecting off-bed footprints."""
    length, width = ranges.bed_extent
    lim = ranges.theta_limits
    for _ in range(ranges.max_tries):
        gender = GenderFlag.female() if rng.integers(2) else GenderFlag.male()
        beta = rng.uniform(ranges.beta_lo, ranges.beta_hi, size=10)
        theta = rng.uniform(lim[:, :, 0], lim[:, :, 1])
        s = np.array([
            rng.uniform(*ranges.s_x), rng.uniform(*ranges.s_y), rng.uniform(*ranges.s_z),
        ])
        phi = np.array([
            rng.uniform(*ranges.phi_x), rng.uniform(*ranges.phi_y), rng.uniform(*ranges.phi_z),
        ])
        params = SmplParams(
            beta=torch.from_numpy(beta),
            theta=torch.from_numpy(theta),
            s=torch.from_numpy(s),
            u=torch.from_numpy(np.sin(phi)),
            v=torch.from_numpy(np.cos(phi)),
        )
        verts, _ = lbs_forward(pack(params)[None], templates.for_gender(gender))
        xy = verts[0, :, :2].numpy()
        if (np.abs(xy[:, 0]) <= length / 2).all() and (np.abs(xy[:, 1]) <= width / 2).all():
            return params, gender
    raise FootprintError(f"no in-bed sample found in {ranges.max_tries} tries")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render_depth(mesh: BodyMesh | None, scene: SceneConfig) -> tuple[np.ndarray, bool]:
    """Rasterize the body over the bed; returns ``(depth, clipped)``.

    Each pixel holds ``camera_height - max(bed_height, top surface z)``.
    Triangles reaching outside the image are clipped silently; the second
    return value flags that this happened.
    """
    h, w = scene.image_size
    xs, ys = scene.pixel_centers()
    height = np.full((h, w), float(scene.bed_height))
    clipped = False

    if mesh is not None and mesh.faces is not None and len(mesh.faces):
        verts = np.asarray(mesh.vertices.detach().numpy()
                           if torch.is_tensor(mesh.vertices) else mesh.vertices,
                           dtype=np.float64)
        faces = np.asarray(mesh.faces.numpy() if torch.is_tensor(mesh.faces)
                           else mesh.faces, dtype=np.int64)
        if not np.all(np.isfinite(verts)):
            raise ValueError("mesh vertices must be finite")
        pitch = scene.pixel_pitch
        for tri in verts[faces]:
            (x1, y1, z1), (x2, y2, z2), (x3, y3, z3) = tri
            # row index grows toward -x, column index toward +y
            i_min = (h - 1) / 2.0 - max(x1, x2, x3) / pitch
            i_max = (h - 1) / 2.0 - min(x1, x2, x3) / pitch
            j_min = min(y1, y2, y3) / pitch + (w - 1) / 2.0
            j_max = max(y1, y2, y3) / pitch + (w - 1) / 2.0
            if i_min < -0.5 or i_max > h - 0.5 or j_min < -0.5 or j_max > w - 0.5:
                clipped = True
            i_lo, i_hi = max(int(np.ceil(i_min)), 0), min(int(np.floor(i_max)), h - 1)
            j_lo, j_hi = max(int(np.ceil(j_min)), 0), min(int(np.floor(j_max)), w - 1)
            if i_lo > i_hi or j_lo > j_hi:
                continue
            px = xs[i_lo:i_hi + 1, None]
            py = ys[None, j_lo:j_hi + 1]
            denom = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3)
            if abs(denom) < 1e-18:
                continue
            a = ((y2 - y3) * (px - x3) + (x3 - x2) * (py - y3)) / denom
            b = ((y3 - y1) * (px - x3) + (x1 - x3) * (py - y3)) / denom
            c = 1.0 - a - b
            inside = (a >= 0) & (b >= 0) & (c >= 0)
            z = a * z1 + b * z2 + c * z3
            patch = height[i_lo:i_hi + 1, j_lo:j_hi + 1]
            np.copyto(patch, np.maximum(patch, z), where=inside)

    return scene.camera_height - height, clipped


# ---------------------------------------------------------------------------
# covers
# ---------------------------------------------------------------------------

# (envelope dilation size, smoothing sigma in px, offset meters)
_COVER_PARAMS = {"cover1": (3, 1.0, 0.005), "cover2": (5, 2.5, 0.015)}
# chest line sampled as a fraction of image height from the head end
_CHEST_FRAC = (0.28, 0.45)


def apply_cover(depth: np.ndarray, cover: str, rng: np.random.Generator) -> np.ndarray:
    """Drape an approximate blanket from a sampled chest line to the feet.

    The blanket surface is a smoothed upper envelope of the height field
    plus a thickness offset; it can only move the surface toward the
    camera (never increases depth).
    """
    if cover == "uncover":
        return np.array(depth, copy=True)
    if cover not in _COVER_PARAMS:
        raise ValueError(f"unknown cover condition {cover!r}")
    size, sigma, offset = _COVER_PARAMS[cover]
    depth = np.asarray(depth, dtype=np.float64)
    chest_row = int(rng.uniform(*_CHEST_FRAC) * depth.shape[0])

    # upper envelope of heights == lower envelope of depths
    envelope = ndimage.gaussian_filter(
        ndimage.grey_erosion(depth, size=(size, size), mode="nearest"),
        sigma=sigma, mode="nearest",
    )
    out = np.array(depth, copy=True)
    region = out[chest_row:]
    out[chest_row:] = np.minimum(region, envelope[chest_row:] - offset)
    return out


# ---------------------------------------------------------------------------
# pseudo-real domain shift
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShiftProfile:
    """Fixed magnitudes of the synthetic-to-pseudo-real sensor shift."""

    noise_sigma: float = 0.005      # additive Gaussian, meters
    bias_center: float = 0.015      # calibration bias distribution center
    bias_range: float = 0.010       # participant bias ~ U(center +- range)
    blur_sigma_px: float = 1.0
    sag_depth: float = 0.020        # paraboloid max depth increase, meters

    @staticmethod
    def zero() -> "ShiftProfile":
        return ShiftProfile(0.0, 0.0, 0.0, 0.0, 0.0)


def participant_bias(profile: ShiftProfile, shift_seed: int, participant: int) -> float:
    """Calibration bias drawn once per participant, fixed across their samples."""
    rng = np.random.default_rng([shift_seed, participant])
    return float(rng.uniform(profile.bias_center - profile.bias_range,
                             profile.bias_center + profile.bias_range))


def sag_field(shape: tuple[int, int], sag_depth: float) -> np.ndarray:
    """Mattress-sag paraboloid: depth increases toward the bed center."""
    h, w = shape
    i = (np.arange(h)[:, None] - (h - 1) / 2.0) / ((h - 1) / 2.0)
    j = (np.arange(w)[None, :] - (w - 1) / 2.0) / ((w - 1) / 2.0)
    return sag_depth * np.maximum(0.0, 1.0 - i ** 2 - j ** 2)


def domain_shift(
    depth: np.ndarray,
    rng: np.random.Generator,
    profile: ShiftProfile,
    bias: float | None = None,
) -> np.ndarray:
    """Perturb a clean render into the pseudo-real domain.

    Applies blur, the sag paraboloid, a constant calibration bias (drawn
    from ``rng`` unless provided by the per-participant helper) and pixel
    noise, in that order. All-zero magnitudes give the identity.
    """
    out = np.asarray(depth, dtype=np.float64)
    if profile.blur_sigma_px > 0:
        out = ndimage.gaussian_filter(out, sigma=profile.blur_sigma_px, mode="nearest")
    else:
        out = np.array(out, copy=True)
    if profile.sag_depth != 0.0:
        out += sag_field(out.shape, profile.sag_depth)
    if bias is None:
        bias = rng.uniform(profile.bias_center - profile.bias_range,
                           profile.bias_center + profile.bias_range)
    out += bias
    if profile.noise_sigma > 0:
        out += rng.normal(0.0, profile.noise_sigma, size=out.shape)
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    """Probabilities and magnitudes for depth-image augmentation."""

    p_rotate: float = 0.3
    max_rotate_deg: float = 15.0
    p_erase: float = 0.3
    max_erase_frac: float = 0.2   # of image area
    p_noise: float = 0.5
    max_noise_sigma: float = 0.010
    fill_depth: float = 2.0       # bed-level depth used for rotation/erase fill
    rotate_labels: bool = False   # counter-rotate ground truth on rotation

    @staticmethod
    def disabled() -> "AugmentPolicy":
        return AugmentPolicy(p_rotate=0.0, p_erase=0.0, p_noise=0.0)


def rotate_depth(depth: np.ndarray, angle_deg: float, fill: float) -> np.ndarray:
    """Bilinear rotation about the image center, off-grid areas filled."""
    return ndimage.rotate(np.asarray(depth, dtype=np.float64), angle_deg,
                          reshape=False, order=1, mode="constant", cval=fill)


def erase_rect(depth: np.ndarray, rect: tuple[int, int, int, int], fill: float) -> np.ndarray:
    i0, i1, j0, j1 = rect
    out = np.array(depth, copy=True)
    out[i0:i1, j0:j1] = fill
    return out


def augment(depth: np.ndarray, rng: np.random.Generator,
            policy: AugmentPolicy) -> tuple[np.ndarray, float]:
    """Random rotation / erase / noise on the depth image.

    Labels are deliberately untouched (augmentation models sensor
    nuisance); the applied rotation angle is returned so callers running
    in label-consistent mode can counter-rotate the ground truth.
    """
    out = np.asarray(depth, dtype=np.float64)
    h, w = out.shape
    angle = 0.0
    if rng.uniform() < policy.p_rotate:
        angle = rng.uniform(-policy.max_rotate_deg, policy.max_rotate_deg)
        out = rotate_depth(out, angle, policy.fill_depth)
    if rng.uniform() < policy.p_erase:
        frac = rng.uniform(0.02, policy.max_erase_frac)
        aspect = rng.uniform(0.3, 3.0)
        eh = int(np.clip(round(np.sqrt(frac * h * w * aspect)), 1, h))
        ew = int(np.clip(round(np.sqrt(frac * h * w / aspect)), 1, w))
        i0 = int(rng.integers(0, h - eh + 1))
        j0 = int(rng.integers(0, w - ew + 1))
        out = erase_rect(out, (i0, i0 + eh, j0, j0 + ew), policy.fill_depth)
    if rng.uniform() < policy.p_noise:
        sigma = rng.uniform(0.0, policy.max_noise_sigma)
        out = out + rng.normal(0.0, sigma, size=out.shape)
    return out, angle


def rotate_params_about_vertical(
    flat: np.ndarray, angle_rad: float, gender: GenderFlag, templates: TemplateSet
) -> np.ndarray:
    """Rotate the body about the vertical axis through the bed center.

    Used by label-consistent augmentation: the returned parameters render
    (up to resampling) to the input's depth image rotated by the same
    angle.
    """
    params = unpack(torch.as_tensor(np.asarray(flat, dtype=np.float64)))
    template = templates.for_gender(gender)
    rest = template.rest_vertices.to(torch.float64)
    shaped = rest + torch.einsum("vdk,k->vd", template.shape_dirs.to(torch.float64),
                                 params.beta.to(torch.float64))
    root = (template.joint_regressor.to(torch.float64) @ shaped)[0]

    rz = euler_xyz_matrix(torch.tensor([0.0, 0.0, angle_rad], dtype=torch.float64))
    phi = torch.atan2(params.u.to(torch.float64), params.v.to(torch.float64))
    new_rot = rz @ euler_xyz_matrix(phi)
    new_phi = euler_xyz_from_matrix(new_rot)
    new_s = rz @ (root + params.s.to(torch.float64)) - root

    out = np.array(flat, dtype=np.float64, copy=True)
    out[79:82] = new_s.numpy()
    out[82:85] = torch.sin(new_phi).numpy()
    out[85:88] = torch.cos(new_phi).numpy()
    return out


def image_angle_to_world_rad(angle_deg: float) -> float:
    """World yaw equivalent to rotating the depth image by ``angle_deg``."""
    return -np.deg2rad(angle_deg)


def augment_sample(
    sample: Sample,
    rng: np.random.Generator,
    policy: AugmentPolicy,
    templates: TemplateSet,
) -> Sample:
    """Augment one sample; optionally counter-rotates labels (off by default)."""
    depth, angle = augment(sample.depth, rng, policy)
    params = sample.params
    if policy.rotate_labels and angle != 0.0:
        params = rotate_params_about_vertical(
            params, image_angle_to_world_rad(angle), sample.gender, templates
        ).astype(sample.params.dtype)
    return Sample(depth=depth, params=params, gender=sample.gender,
                  cover=sample.cover, domain=sample.domain,
                  participant=sample.participant)


def pad_to_multiple(depth: np.ndarray, multiple: int, fill: float) -> np.ndarray:
    """Pad bottom/right with the fill depth until H and W divide ``multiple``."""
    h, w = depth.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return np.asarray(depth)
    return np.pad(depth, ((0, ph), (0, pw)), constant_values=fill)


def fit_images(depth: np.ndarray, target: tuple[int, int], fill: float) -> np.ndarray:
    """Pad a (B, H, W) batch bottom/right up to the network image size."""
    depth = np.asarray(depth)
    h, w = depth.shape[-2:]
    th, tw = target
    if (h, w) == (th, tw):
        return depth
    if h > th or w > tw:
        raise ValueError(f"depth image {(h, w)} exceeds the network image size {target}")
    return np.pad(depth, ((0, 0), (0, th - h), (0, tw - w)), constant_values=fill)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    depth: np.ndarray
    params: np.ndarray  # flat 88-vector
    gender: GenderFlag
    cover: str
    domain: str
    participant: int


@dataclass
class BedDataset:
    """In-memory dataset: parallel arrays plus the generating configuration."""

    depth: np.ndarray        # (N, H, W) float32
    params: np.ndarray       # (N, 88) float32
    gender: np.ndarray       # (N, 2) uint8 one-hot
    cover: np.ndarray        # (N,) uint8 index into COVER_CONDITIONS
    domain: np.ndarray       # (N,) uint8 index into DOMAINS
    participant: np.ndarray  # (N,) int32, -1 for synthetic samples
    meta: dict

    def __post_init__(self):
        n = self.depth.shape[0]
        for name in ("params", "gender", "cover", "domain", "participant"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} length does not match depth array")

    def __len__(self) -> int:
        return self.depth.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(
            depth=self.depth[i],
            params=self.params[i],
            gender=GenderFlag(self.gender[i]),
            cover=COVER_CONDITIONS[self.cover[i]],
            domain=DOMAINS[self.domain[i]],
            participant=int(self.participant[i]),
        )

    def subset(self, indices) -> "BedDataset":
        idx = np.asarray(indices)
        return BedDataset(
            depth=self.depth[idx], params=self.params[idx], gender=self.gender[idx],
            cover=self.cover[idx], domain=self.domain[idx],
            participant=self.participant[idx],
            meta={**self.meta, "subset_of": self.meta.get("name", ""), "n": int(len(idx))},
        )


def write_dataset(path, dataset: BedDataset) -> None:
    arrays = {
        "depth": dataset.depth.astype(np.float32),
        "params": dataset.params.astype(np.float32),
        "gender": dataset.gender.astype(np.uint8),
        "cover": dataset.cover.astype(np.uint8),
        "domain": dataset.domain.astype(np.uint8),
        "participant": dataset.participant.astype(np.int32),
    }
    write_container(path, arrays, meta=dataset.meta, kind="dataset")


def read_dataset(path) -> BedDataset:
    arrays, meta = read_container(path, kind="dataset")
    return BedDataset(
        depth=arrays["depth"], params=arrays["params"], gender=arrays["gender"],
        cover=arrays["cover"], domain=arrays["domain"],
        participant=arrays["participant"], meta=meta,
    )


def _scene_meta(scene: SceneConfig) -> dict:
    return {
        "camera_height": scene.camera_height,
        "bed_extent": list(scene.bed_extent),
        "pixel_pitch": scene.pixel_pitch,
        "image_size": list(scene.image_size),
        "bed_height": scene.bed_height,
    }


def scene_from_meta(meta: dict) -> SceneConfig:
    s = meta["scene"]
    return SceneConfig(
        camera_height=s["camera_height"], bed_extent=tuple(s["bed_extent"]),
        pixel_pitch=s["pixel_pitch"], image_size=tuple(s["image_size"]),
        bed_height=s["bed_height"],
    )


def generate_synthetic(
    n: int,
    seed: int,
    scene: SceneConfig,
    ranges: ParamRanges,
    templates: TemplateSet,
) -> BedDataset:
    """Clean renders with covers cycling uncover/cover1/cover2.

    Sample i is a pure function of (seed, i), so generation order (or a
    parallel split) cannot change the content.
    """
    return _generate(n, seed, scene, ranges, templates, profile=None,
                     shift_seed=0, participants=None)


def generate_pseudo_real(
    n: int,
    seed: int,
    scene: SceneConfig,
    ranges: ParamRanges,
    templates: TemplateSet,
    profile: ShiftProfile,
    shift_seed: int,
    participants: list[int],
) -> BedDataset:
    """Domain-shifted renders, round-robin over the given participant ids."""
    if not participants:
        raise ValueError("participants must be non-empty")
    return _generate(n, seed, scene, ranges, templates, profile=profile,
                     shift_seed=shift_seed, participants=list(participants))


def _generate(n, seed, scene, ranges, templates, profile, shift_seed, participants):
    if tuple(ranges.bed_extent) != tuple(scene.bed_extent):
        raise ValueError("ranges.bed_extent must match scene.bed_extent")
    h, w = scene.image_size
    depth = np.zeros((n, h, w), dtype=np.float32)
    flat = np.zeros((n, PARAM_DIM), dtype=np.float32)
    gender = np.zeros((n, 2), dtype=np.uint8)
    cover = np.zeros(n, dtype=np.uint8)
    domain = np.zeros(n, dtype=np.uint8)
    participant = np.full(n, -1, dtype=np.int32)
    any_clipped = False

    for i in range(n):
        rng = np.random.default_rng([seed, i])
        params, g = sample_params(rng, ranges, templates)
        packed = pack(params)
        verts, joints = lbs_forward(packed[None], templates.for_gender(g))
        mesh = BodyMesh(vertices=verts[0], joints=joints[0],
                        faces=templates.for_gender(g).faces)
        img, clipped = render_depth(mesh, scene)
        any_clipped = any_clipped or clipped
        cover_idx = i % len(COVER_CONDITIONS)
        img = apply_cover(img, COVER_CONDITIONS[cover_idx], rng)
        if profile is not None:
            pid = participants[i % len(participants)]
            bias = participant_bias(profile, shift_seed, pid)
            img = domain_shift(img, rng, profile, bias=bias)
            participant[i] = pid
            domain[i] = DOMAINS.index("pseudo_real")
        depth[i] = img.astype(np.float32)
        flat[i] = packed.numpy().astype(np.float32)
        gender[i] = g.flag
        cover[i] = cover_idx

    meta = {
        "n": n,
        "seed": seed,
        "scene": _scene_meta(scene),
        "clipped_any": bool(any_clipped),
        "shift_seed": shift_seed if profile is not None else None,
        "participants": participants,
    }
    return BedDataset(depth=depth, params=flat, gender=gender, cover=cover,
                      domain=domain, participant=participant, meta=meta)


# ---------------------------------------------------------------------------
# normalization statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    """Pooled population standard deviations used for loss normalization,
    plus per-dimension latent statistics for the diffusion standardizer."""

    sigma_beta: float
    sigma_theta: float
    sigma_psi: float
    sigma_joint: float
    sigma_vertex: float
    latent_mean: np.ndarray  # (88,)
    latent_std: np.ndarray   # (88,)

    def __post_init__(self):
        for name in ("sigma_beta", "sigma_theta", "sigma_psi", "sigma_joint", "sigma_vertex"):
            object.__setattr__(self, name, float(max(getattr(self, name), STD_FLOOR)))
        object.__setattr__(self, "latent_mean", np.asarray(self.latent_mean, dtype=np.float64))
        object.__setattr__(self, "latent_std",
                           np.maximum(np.asarray(self.latent_std, dtype=np.float64), STD_FLOOR))

    def standardizer(self) -> LatentStandardizer:
        return LatentStandardizer(mean=self.latent_mean, std=self.latent_std)


def compute_norm_stats(dataset: BedDataset, templates: TemplateSet,
                       batch_size: int = 512) -> NormStats:
    """Population statistics over the full dataset (order-independent)."""
    if len(dataset) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    params = dataset.params.astype(np.float64)

    joints_all = []
    verts_all = []
    flags = dataset.gender[:, 1].astype(bool)  # [0, 1] marks female
    with torch.no_grad():
        for gender_mask, template in ((~flags, templates.male), (flags, templates.female)):
            idx = np.nonzero(gender_mask)[0]
            for k in range(0, len(idx), batch_size):
                chunk = torch.from_numpy(params[idx[k:k + batch_size]])
                verts, joints = lbs_forward(chunk, template)
                joints_all.append(joints.numpy().ravel())
                verts_all.append(verts.numpy().ravel())
    joints_pool = np.concatenate(joints_all)
    verts_pool = np.concatenate(verts_all)

    return NormStats(
        sigma_beta=params[:, :10].std(),
        sigma_theta=params[:, 10:79].std(),
        sigma_psi=params[:, 82:88].std(),
        sigma_joint=joints_pool.std(),
        sigma_vertex=verts_pool.std(),
        latent_mean=params.mean(axis=0),
        latent_std=params.std(axis=0),
    )
