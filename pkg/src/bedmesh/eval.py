"""Metrics, the inference driver, and the sim-to-real experiment harness.

MPJPE and PVE are mean Euclidean distances (millimeters) over the 24
joints and over all mesh vertices respectively, reported without any
alignment: global translation is part of the prediction. Inference runs
the deterministic strided sampler (5 steps by default) with a fixed noise
seed per sample index so that evaluation tables are reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np
import torch

from .body_model import BodyMesh, GenderFlag, SmplParams, TemplateSet, unpack
from .data import (
    COVER_CONDITIONS,
    AugmentPolicy,
    BedDataset,
    depth_to_condition,
    fit_images,
)
from .diffusion import ddim_sample
from .network import DepthDenoiser
from .train import Checkpoint, TrainConfig, build_model, decode_mixed, run_stage


def mpjpe(pred_joints, gt_joints) -> float:
    """Mean per-joint Euclidean distance, millimeters."""
    pred = np.asarray(pred_joints, dtype=np.float64)
    gt = np.asarray(gt_joints, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"joint arrays must share shape (J, 3); got {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def pve(pred_vertices, gt_vertices) -> float:
    """Mean per-vertex Euclidean distance, millimeters."""
    pred = np.asarray(pred_vertices, dtype=np.float64)
    gt = np.asarray(gt_vertices, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"vertex arrays must share shape (V, 3); got {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


@dataclass(frozen=True)
class EvalReport:
    mpjpe_mm: float
    pve_mm: float
    per_cover: dict  # cover -> {"mpjpe_mm", "pve_mm", "n"}
    n_samples: int
    config_digest: str

    def to_json(self) -> str:
        payload = {
            "mpjpe_mm": self.mpjpe_mm,
            "pve_mm": self.pve_mm,
            "per_cover": self.per_cover,
            "n_samples": self.n_samples,
            "config_digest": self.config_digest,
        }
        return json.dumps(payload, sort_keys=True, indent=1)


def save_report(path, report: EvalReport) -> None:
    with open(path, "w") as f:
        f.write(report.to_json() + "\n")


def _config_digest(ckpt: Checkpoint, n_steps: int, seed: int) -> str:
    from dataclasses import asdict

    payload = json.dumps({
        "model": {**asdict(ckpt.model_config),
                  "image_size": list(ckpt.model_config.image_size)},
        "train": asdict(ckpt.train_config),
        "step": ckpt.step,
        "n_steps": n_steps,
        "seed": seed,
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _prepare_condition(depth: np.ndarray, ckpt: Checkpoint) -> np.ndarray:
    """Scale depths to network inputs, padding up to the config size."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 2:
        depth = depth[None]
    fitted = fit_images(depth, tuple(ckpt.model_config.image_size),
                        fill=ckpt.camera_height)
    return depth_to_condition(fitted, ckpt.camera_height).astype(np.float32)


def _batched_denoiser(model: DepthDenoiser, cond: torch.Tensor, gender: torch.Tensor):
    def fn(x: np.ndarray, t: int) -> np.ndarray:
        with torch.no_grad():
            z = model(
                torch.from_numpy(np.asarray(x, dtype=np.float32)),
                torch.full((len(x),), int(t), dtype=torch.long),
                cond, gender,
            )
        return z.numpy().astype(np.float64)
    return fn


def infer(
    depth: np.ndarray,
    gender: GenderFlag,
    ckpt: Checkpoint,
    templates: TemplateSet,
    n_steps: int = 5,
    seed: int = 0,
    model: DepthDenoiser | None = None,
) -> tuple[SmplParams, BodyMesh]:
    """Recover body parameters and mesh from one depth image."""
    if model is None:
        model = build_model(ckpt)
    cond = torch.from_numpy(_prepare_condition(depth, ckpt))[:, None]
    gender_t = torch.from_numpy(gender.flag.astype(np.float32))[None]
    x_init = np.random.default_rng(seed).standard_normal((1, 88))
    st = ckpt.stats.standardizer()
    z = ddim_sample(_batched_denoiser(model, cond, gender_t), n_steps,
                    ckpt.schedule, x_init=x_init)
    flat = st.destandardize(z[0])
    template = templates.for_gender(gender)
    verts, joints = decode_mixed(torch.from_numpy(flat[None]),
                                 gender.flag[None], templates)
    mesh = BodyMesh(vertices=verts[0], joints=joints[0], faces=template.faces)
    return unpack(torch.from_numpy(flat)), mesh


def evaluate(
    dataset: BedDataset,
    ckpt: Checkpoint,
    templates: TemplateSet,
    n_steps: int = 5,
    seed: int = 0,
    batch_size: int = 64,
) -> EvalReport:
    """Metrics over a labeled dataset, overall and per cover condition.

    The starting noise for sample ``i`` comes from generator ``[seed, i]``,
    so reports are deterministic and independent of batching.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    model = build_model(ckpt)
    st = ckpt.stats.standardizer()

    sums = {c: np.zeros(3) for c in COVER_CONDITIONS}  # mpjpe, pve, count
    for lo in range(0, len(dataset), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(dataset)))
        depth = dataset.depth[idx]
        gender = dataset.gender[idx]
        cond = torch.from_numpy(_prepare_condition(depth, ckpt))[:, None]
        gender_t = torch.from_numpy(gender.astype(np.float32))
        x_init = np.stack([
            np.random.default_rng([seed, int(i)]).standard_normal(88) for i in idx
        ])
        z = ddim_sample(_batched_denoiser(model, cond, gender_t), n_steps,
                        ckpt.schedule, x_init=x_init)
        flat = st.destandardize(z)
        pred_verts, pred_joints = decode_mixed(torch.from_numpy(flat), gender, templates)
        gt_flat = torch.from_numpy(dataset.params[idx].astype(np.float64))
        gt_verts, gt_joints = decode_mixed(gt_flat, gender, templates)
        for k, i in enumerate(idx):
            cover = COVER_CONDITIONS[dataset.cover[i]]
            sums[cover] += (
                mpjpe(pred_joints[k].numpy(), gt_joints[k].numpy()),
                pve(pred_verts[k].numpy(), gt_verts[k].numpy()),
                1.0,
            )

    per_cover = {}
    total = np.zeros(3)
    for cover, acc in sums.items():
        total += acc
        if acc[2] > 0:
            per_cover[cover] = {
                "mpjpe_mm": acc[0] / acc[2],
                "pve_mm": acc[1] / acc[2],
                "n": int(acc[2]),
            }
    return EvalReport(
        mpjpe_mm=total[0] / total[2],
        pve_mm=total[1] / total[2],
        per_cover=per_cover,
        n_samples=int(total[2]),
        config_digest=_config_digest(ckpt, n_steps, seed),
    )


# ---------------------------------------------------------------------------
# sim-to-real experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    real_fractions: tuple[float, ...] = (0.1, 0.25, 0.5, 1.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    sim_steps: int = 1000
    finetune_epochs: int = 40
    eval_n_steps: int = 5
    eval_seed: int = 0


def s2r_experiment(
    synthetic: BedDataset,
    real_train: BedDataset,
    real_test: BedDataset,
    templates: TemplateSet,
    model_config,
    train_config: TrainConfig,
    exp: ExperimentConfig,
    camera_height: float,
    aug: AugmentPolicy | None = None,
    progress=None,
) -> tuple[list[dict], dict]:
    """Directional comparison: sim-only vs sim+finetune(f) vs scratch-on-f.

    Returns table rows ``{variant, fraction, seed, mpjpe_mm, pve_mm}`` plus
    the full report per (variant, fraction, seed).
    """
    rows: list[dict] = []
    reports: dict = {}

    def note(msg):
        if progress is not None:
            progress(msg)

    for seed in exp.seeds:
        sim_cfg = replace(train_config, stage="synthetic",
                          steps_total=exp.sim_steps, seed=seed)
        note(f"seed {seed}: synthetic stage ({exp.sim_steps} steps)")
        sim_ckpt = run_stage("synthetic", synthetic, sim_cfg, templates,
                             model_config, camera_height, aug=aug)
        report = evaluate(real_test, sim_ckpt, templates,
                          n_steps=exp.eval_n_steps, seed=exp.eval_seed)
        rows.append({"variant": "sim_only", "fraction": 0.0, "seed": seed,
                     "mpjpe_mm": report.mpjpe_mm, "pve_mm": report.pve_mm})
        reports[("sim_only", 0.0, seed)] = report

        for fraction in exp.real_fractions:
            n_f = int(round(fraction * len(real_train)))
            ft_cfg = replace(train_config, stage="finetune",
                             epochs=exp.finetune_epochs, seed=seed + 1000)
            if n_f == 0:
                ft_ckpt = sim_ckpt
            else:
                pick = np.random.default_rng(
                    [4242, seed, int(round(fraction * 1000))]
                ).choice(len(real_train), size=n_f, replace=False)
                subset = real_train.subset(np.sort(pick))
                note(f"seed {seed}: finetune f={fraction} ({n_f} samples)")
                ft_ckpt = run_stage("finetune", subset, ft_cfg, templates,
                                    model_config, camera_height,
                                    init=sim_ckpt, aug=aug)
            report = evaluate(real_test, ft_ckpt, templates,
                              n_steps=exp.eval_n_steps, seed=exp.eval_seed)
            rows.append({"variant": "sim_finetune", "fraction": fraction,
                         "seed": seed, "mpjpe_mm": report.mpjpe_mm,
                         "pve_mm": report.pve_mm})
            reports[("sim_finetune", fraction, seed)] = report

            if n_f > 0:
                note(f"seed {seed}: scratch f={fraction}")
                scratch_cfg = replace(ft_cfg, seed=seed + 2000)
                scratch_ckpt = run_stage("finetune", subset, scratch_cfg, templates,
                                         model_config, camera_height,
                                         allow_scratch=True, aug=aug)
                report = evaluate(real_test, scratch_ckpt, templates,
                                  n_steps=exp.eval_n_steps, seed=exp.eval_seed)
                rows.append({"variant": "scratch", "fraction": fraction,
                             "seed": seed, "mpjpe_mm": report.mpjpe_mm,
                             "pve_mm": report.pve_mm})
                reports[("scratch", fraction, seed)] = report

    return rows, reports


def summarize_rows(rows: list[dict]) -> dict:
    """Median metrics per (variant, fraction) across seeds."""
    groups: dict = {}
    for row in rows:
        groups.setdefault((row["variant"], row["fraction"]), []).append(row)
    return {
        key: {
            "mpjpe_mm": float(np.median([r["mpjpe_mm"] for r in group])),
            "pve_mm": float(np.median([r["pve_mm"] for r in group])),
            "n_seeds": len(group),
        }
        for key, group in groups.items()
    }


TABLE_COLUMNS = ("variant", "fraction", "seed", "mpjpe_mm", "pve_mm")


def write_table(path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write("\t".join(TABLE_COLUMNS) + "\n")
        for row in rows:
            f.write("\t".join(_format_cell(row[c]) for c in TABLE_COLUMNS) + "\n")


def read_table(path) -> list[dict]:
    with open(path) as f:
        header = f.readline().rstrip("\n").split("\t")
        rows = []
        for line in f:
            cells = line.rstrip("\n").split("\t")
            row = dict(zip(header, cells))
            row["fraction"] = float(row["fraction"])
            row["seed"] = int(row["seed"])
            row["mpjpe_mm"] = float(row["mpjpe_mm"])
            row["pve_mm"] = float(row["pve_mm"])
            rows.append(row)
    return rows


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
