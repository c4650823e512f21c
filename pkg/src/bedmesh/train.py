"""Losses, the two-stage training strategy, and checkpointing.

Stage one trains the denoiser on synthetic data alone at a fixed learning
rate; stage two fine-tunes on (pseudo-)real data under a linearly decaying
learning rate whose horizon adapts to the dataset size. Both stages
minimize the same objective: the denoiser's clean-sample prediction is
decoded through the body model and penalized with normalized parameter,
joint and vertex losses against the ground truth.

Every random draw (timesteps, noise, augmentation, batch order) comes from
a counter-based generator keyed on (seed, step), so runs are reproducible
bit-for-bit and training can resume mid-stage without drift.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch import Tensor

from .body_model import PARAM_DIM, BodyTemplate, TemplateSet, lbs_forward
from .containers import read_container, write_container
from .data import (
    AugmentPolicy,
    BedDataset,
    NormStats,
    augment,
    compute_norm_stats,
    depth_to_condition,
    fit_images,
    image_angle_to_world_rad,
    rotate_params_about_vertical,
)
from .diffusion import DiffusionSchedule, make_schedule
from .network import DenoiserConfig, DepthDenoiser

STAGES = ("synthetic", "finetune")


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss; aborts with context."""


@dataclass(frozen=True)
class LossWeights:
    """Normalization weights for the parameter/joint/vertex losses."""

    lambda_beta: float
    lambda_theta: float
    lambda_psi: float
    lambda_joint: float
    vertex_norm: float
    lambda_v2v: float = 1.0

    def __post_init__(self):
        for name in ("lambda_beta", "lambda_theta", "lambda_psi",
                     "lambda_joint", "vertex_norm"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value}")

    @staticmethod
    def from_stats(stats: NormStats, n_vertices: int, lambda_v2v: float = 1.0) -> "LossWeights":
        return LossWeights(
            lambda_beta=1.0 / (10.0 * stats.sigma_beta),
            lambda_theta=1.0 / (69.0 * stats.sigma_theta),
            lambda_psi=1.0 / (6.0 * stats.sigma_psi),
            lambda_joint=1.0 / (24.0 * stats.sigma_joint),
            vertex_norm=1.0 / (n_vertices * stats.sigma_vertex),
            lambda_v2v=lambda_v2v,
        )


def smpl_loss(pred_flat: Tensor, gt_flat: Tensor,
              pred_joints: Tensor, gt_joints: Tensor, w: LossWeights) -> Tensor:
    """Normalized L1 parameter terms plus the per-joint Euclidean term.

    Inputs are batched; the result is the batch mean.
    """
    d = (pred_flat - gt_flat).abs()
    loss = (
        w.lambda_beta * d[:, 0:10].sum(dim=1)
        + w.lambda_theta * d[:, 10:79].sum(dim=1)
        + w.lambda_psi * (d[:, 82:85].sum(dim=1) + d[:, 85:88].sum(dim=1))
        + w.lambda_joint * torch.linalg.norm(pred_joints - gt_joints, dim=2).sum(dim=1)
    )
    return loss.mean()


def v2v_loss(pred_vertices: Tensor, gt_vertices: Tensor, vertex_norm: float) -> Tensor:
    """Normalized sum of per-vertex Euclidean distances (batch mean)."""
    if pred_vertices.shape != gt_vertices.shape:
        raise ValueError(
            f"vertex count mismatch: {tuple(pred_vertices.shape)} vs {tuple(gt_vertices.shape)}"
        )
    return vertex_norm * torch.linalg.norm(pred_vertices - gt_vertices, dim=2).sum(dim=1).mean()


def total_loss(pred_flat, gt_flat, pred_joints, gt_joints,
               pred_vertices, gt_vertices, w: LossWeights) -> Tensor:
    return smpl_loss(pred_flat, gt_flat, pred_joints, gt_joints, w) \
        + w.lambda_v2v * v2v_loss(pred_vertices, gt_vertices, w.vertex_norm)


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 32
    timesteps: int = 100
    stage: str = "synthetic"
    steps_total: int = 20_000  # synthetic stage; finetune derives its own
    epochs: int = 50           # finetune: steps_total = ceil(N / batch) * epochs
    seed: int = 0
    lambda_v2v: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        for name in ("batch_size", "timesteps", "steps_total", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_init < 0 or self.weight_decay < 0:
            raise ValueError("lr_init and weight_decay must be nonnegative")


def lr_at(step: int, cfg: TrainConfig, steps_total: int | None = None) -> float:
    """Fixed rate in the synthetic stage; linear decay during fine-tuning."""
    total = cfg.steps_total if steps_total is None else steps_total
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if cfg.stage == "synthetic":
        return cfg.lr_init
    return (1.0 - step / (total + 1.0)) * cfg.lr_init


def decode_mixed(flat: Tensor, gender: np.ndarray, templates: TemplateSet) -> tuple[Tensor, Tensor]:
    """Decode a mixed-gender batch through the per-gender templates."""
    b = flat.shape[0]
    n = templates.n_vertices
    verts = torch.zeros(b, n, 3, dtype=flat.dtype)
    joints = torch.zeros(b, 24, 3, dtype=flat.dtype)
    female = np.asarray(gender)[:, 1] == 1
    for mask, template in ((~female, templates.male), (female, templates.female)):
        idx = np.nonzero(mask)[0]
        if len(idx):
            v, j = lbs_forward(flat[idx], template)
            verts[idx] = v
            joints[idx] = j
    return verts, joints


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    weights: dict               # state_dict tensors
    opt_state: dict             # name -> {exp_avg, exp_avg_sq, step}
    stats: NormStats
    schedule: DiffusionSchedule
    train_config: TrainConfig
    model_config: DenoiserConfig
    camera_height: float
    step: int


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = {}
    for name, tensor in ckpt.weights.items():
        arrays[f"weights/{name}"] = tensor.detach().numpy()
    for name, payload in ckpt.opt_state.items():
        for key, value in payload.items():
            arrays[f"opt/{name}/{key}"] = np.asarray(value)
    arrays["stats/latent_mean"] = ckpt.stats.latent_mean
    arrays["stats/latent_std"] = ckpt.stats.latent_std
    arrays["sched/alpha"] = ckpt.schedule.alpha
    arrays["sched/alpha_bar"] = ckpt.schedule.alpha_bar
    arrays["sched/sigma"] = ckpt.schedule.sigma
    meta = {
        "step": ckpt.step,
        "camera_height": ckpt.camera_height,
        "train_config": asdict(ckpt.train_config),
        "model_config": {**asdict(ckpt.model_config),
                         "image_size": list(ckpt.model_config.image_size)},
        "stats_scalars": {
            "sigma_beta": ckpt.stats.sigma_beta,
            "sigma_theta": ckpt.stats.sigma_theta,
            "sigma_psi": ckpt.stats.sigma_psi,
            "sigma_joint": ckpt.stats.sigma_joint,
            "sigma_vertex": ckpt.stats.sigma_vertex,
        },
        "timesteps": ckpt.schedule.timesteps,
    }
    write_container(path, arrays, meta=meta, kind="checkpoint")


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = read_container(path, kind="checkpoint")
    weights = {}
    opt_state: dict = {}
    for key, value in arrays.items():
        if key.startswith("weights/"):
            weights[key.removeprefix("weights/")] = torch.from_numpy(value.copy())
        elif key.startswith("opt/"):
            name, field_name = key.removeprefix("opt/").rsplit("/", 1)
            opt_state.setdefault(name, {})[field_name] = value.copy()
    scalars = meta["stats_scalars"]
    stats = NormStats(latent_mean=arrays["stats/latent_mean"],
                      latent_std=arrays["stats/latent_std"], **scalars)
    schedule = DiffusionSchedule(
        timesteps=meta["timesteps"],
        alpha=arrays["sched/alpha"],
        alpha_bar=arrays["sched/alpha_bar"],
        sigma=arrays["sched/sigma"],
    )
    mc = dict(meta["model_config"])
    mc["image_size"] = tuple(mc["image_size"])
    return Checkpoint(
        weights=weights,
        opt_state=opt_state,
        stats=stats,
        schedule=schedule,
        train_config=TrainConfig(**meta["train_config"]),
        model_config=DenoiserConfig(**mc),
        camera_height=meta["camera_height"],
        step=meta["step"],
    )


def build_model(ckpt: Checkpoint) -> DepthDenoiser:
    model = DepthDenoiser(ckpt.model_config)
    model.load_state_dict({k: v for k, v in ckpt.weights.items()})
    model.eval()
    return model


def _capture_opt_state(model: DepthDenoiser, opt: torch.optim.AdamW) -> dict:
    out = {}
    for name, param in model.named_parameters():
        state = opt.state.get(param)
        if state:
            out[name] = {
                "exp_avg": state["exp_avg"].numpy().copy(),
                "exp_avg_sq": state["exp_avg_sq"].numpy().copy(),
                "step": np.float64(state["step"].item()),
            }
    return out


def _restore_opt_state(model: DepthDenoiser, opt: torch.optim.AdamW, opt_state: dict) -> None:
    for name, param in model.named_parameters():
        if name in opt_state:
            payload = opt_state[name]
            opt.state[param] = {
                "step": torch.tensor(float(np.asarray(payload["step"]).ravel()[0])),
                "exp_avg": torch.from_numpy(np.array(payload["exp_avg"])),
                "exp_avg_sq": torch.from_numpy(np.array(payload["exp_avg_sq"])),
            }


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _noise_batch(x0_std: np.ndarray, t: np.ndarray, eps: np.ndarray,
                 sched: DiffusionSchedule) -> np.ndarray:
    ab = sched.alpha_bar[t][:, None]
    return np.sqrt(ab) * x0_std + np.sqrt(1.0 - ab) * eps


def train_step(
    model: DepthDenoiser,
    opt: torch.optim.AdamW,
    batch: dict,
    sched: DiffusionSchedule,
    stats: NormStats,
    weights: LossWeights,
    templates: TemplateSet,
    cfg: TrainConfig,
    step: int,
    steps_total: int,
    camera_height: float,
    aug: AugmentPolicy | None = None,
) -> float:
    """One optimization step; deterministic given (cfg.seed, step, batch)."""
    rng = np.random.default_rng([cfg.seed, 2718, step])
    depth = np.asarray(batch["depth"], dtype=np.float64)
    params = np.asarray(batch["params"], dtype=np.float64)
    gender = np.asarray(batch["gender"])
    b = depth.shape[0]

    if aug is not None:
        depth = depth.copy()
        params = params.copy()
        for i in range(b):
            depth[i], angle = augment(depth[i], rng, aug)
            if aug.rotate_labels and angle != 0.0:
                from .body_model import GenderFlag

                params[i] = rotate_params_about_vertical(
                    params[i], image_angle_to_world_rad(angle),
                    GenderFlag(gender[i]), templates)

    st = stats.standardizer()
    x0 = st.standardize(params)
    t = rng.integers(0, cfg.timesteps, size=b)
    eps = rng.standard_normal((b, PARAM_DIM))
    x_t = _noise_batch(x0, t, eps, sched)

    fitted = fit_images(depth, model.config.image_size, fill=camera_height)
    cond = torch.from_numpy(
        depth_to_condition(fitted, camera_height).astype(np.float32))[:, None]
    gender_t = torch.from_numpy(gender.astype(np.float32))

    model.train()
    z = model(torch.from_numpy(x_t.astype(np.float32)),
              torch.from_numpy(t), cond, gender_t)
    mean_t = torch.from_numpy(st.mean.astype(np.float32))
    std_t = torch.from_numpy(st.std.astype(np.float32))
    pred_flat = z * std_t + mean_t
    gt_flat = torch.from_numpy(params.astype(np.float32))

    pred_verts, pred_joints = decode_mixed(pred_flat, gender, templates)
    gt_verts, gt_joints = decode_mixed(gt_flat, gender, templates)
    loss = total_loss(pred_flat, gt_flat, pred_joints, gt_joints,
                      pred_verts, gt_verts, weights)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss {loss.item()} at step {step} "
            f"(stage={cfg.stage}, t range {t.min()}..{t.max()})"
        )

    lr = lr_at(step, cfg, steps_total)
    for group in opt.param_groups:
        group["lr"] = lr
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.item())


def finetune_steps(n_samples: int, cfg: TrainConfig) -> int:
    return math.ceil(n_samples / cfg.batch_size) * cfg.epochs


def run_stage(
    stage: str,
    dataset: BedDataset,
    cfg: TrainConfig,
    templates: TemplateSet,
    model_config: DenoiserConfig,
    camera_height: float,
    init: Checkpoint | None = None,
    allow_scratch: bool = False,
    aug: AugmentPolicy | None = None,
    log_path=None,
    hook=None,
    hook_every: int = 0,
    stats: NormStats | None = None,
) -> Checkpoint:
    """Run one training stage to completion and return the checkpoint.

    ``init`` resumes a checkpoint of the same stage mid-run, or seeds a
    fine-tuning stage from a synthetic-stage checkpoint. Fine-tuning
    without an initial checkpoint is the from-scratch ablation and must be
    requested explicitly. ``stats`` overrides the normalization statistics
    (by default they come from the checkpoint, or are computed from
    ``dataset`` when starting fresh).
    """
    cfg = replace(cfg, stage=stage)
    if stage == "finetune":
        steps_total = finetune_steps(len(dataset), cfg)
    else:
        steps_total = cfg.steps_total

    resuming = init is not None and init.train_config.stage == stage
    if resuming:
        if init.model_config != model_config:
            raise ValueError("checkpoint model config does not match")
        model = build_model(init)
        stats = stats if stats is not None else init.stats
        sched = init.schedule
        start_step = init.step
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr_init,
                                weight_decay=cfg.weight_decay)
        _restore_opt_state(model, opt, init.opt_state)
    elif init is not None:
        # stage transition: keep weights and frozen statistics, fresh optimizer
        if init.model_config != model_config:
            raise ValueError("checkpoint model config does not match")
        model = build_model(init)
        stats = stats if stats is not None else init.stats
        sched = init.schedule
        start_step = 0
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr_init,
                                weight_decay=cfg.weight_decay)
    else:
        if stage == "finetune" and not allow_scratch:
            raise ValueError(
                "fine-tuning requires a synthetic-stage checkpoint "
                "(pass allow_scratch=True for the ablation)"
            )
        torch.manual_seed(cfg.seed)
        model = DepthDenoiser(model_config)
        stats = stats if stats is not None else compute_norm_stats(dataset, templates)
        sched = make_schedule(cfg.timesteps)
        start_step = 0
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr_init,
                                weight_decay=cfg.weight_decay)

    weights = LossWeights.from_stats(stats, templates.n_vertices, cfg.lambda_v2v)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    log_file = open(log_path, "a") if log_path is not None else None
    try:
        for step in range(start_step, steps_total):
            epoch = step // steps_per_epoch
            slot = step % steps_per_epoch
            perm = np.random.default_rng([cfg.seed, 31415, epoch]).permutation(n)
            idx = perm[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
            batch = {
                "depth": dataset.depth[idx],
                "params": dataset.params[idx],
                "gender": dataset.gender[idx],
            }
            loss = train_step(model, opt, batch, sched, stats, weights, templates,
                              cfg, step, steps_total, camera_height, aug=aug)
            if log_file is not None:
                record = {"step": step, "lr": lr_at(step, cfg, steps_total),
                          "loss": loss, "wall_time": time.time()}
                log_file.write(json.dumps(record) + "\n")
            if hook is not None and hook_every and (step + 1) % hook_every == 0:
                hook(step + 1, model)
    finally:
        if log_file is not None:
            log_file.close()

    model.eval()
    return Checkpoint(
        weights={k: v.detach().clone() for k, v in model.state_dict().items()},
        opt_state=_capture_opt_state(model, opt),
        stats=stats,
        schedule=sched,
        train_config=cfg,
        model_config=model_config,
        camera_height=camera_height,
        step=steps_total,
    )
