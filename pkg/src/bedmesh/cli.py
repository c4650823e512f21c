"""Command-line entry point: data generation, training, evaluation, plots.

Commands mirror the decoupled pipeline: ``gen-data`` renders the synthetic
and pseudo-real datasets, ``train`` runs the synthetic pretraining stage,
``finetune`` adapts a checkpoint on (pseudo-)real data, ``eval`` and
``infer`` consume checkpoints, ``s2r-exp`` runs the full data-scarcity
comparison, and ``plot`` turns its table into metric-vs-fraction curves.

Every run writes a manifest (config digest, seed, artifact hashes) into
its output directory; reruns with identical seeds produce byte-identical
artifacts. Exit codes: 0 success, 2 usage/config error, 3 IO error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, Settings, load_settings, schema_keys, settings_digest
from .containers import ContainerError
from .data import generate_pseudo_real, generate_synthetic, read_dataset, write_dataset
from .eval import (
    evaluate,
    infer,
    read_table,
    s2r_experiment,
    save_report,
    summarize_rows,
    write_table,
)
from .train import (
    NonFiniteLossError,
    load_checkpoint,
    run_stage,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

OUTPUT_ROOT_ENV = "BEDMESH_OUTPUT_ROOT"


class RunConfig(argparse.Namespace):
    """Parsed invocation: command, config path, overrides, output dir, seed."""


def _schema_epilog() -> str:
    lines = ["configuration keys (defaults in parentheses):"]
    for key, _, default in schema_keys():
        lines.append(f"  {key} ({default})")
    lines.append("")
    lines.append("precedence: defaults < --config file < --seed < --set key=value")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bedmesh",
        description="In-bed body mesh recovery from overhead depth images.",
        epilog=_schema_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML settings file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a settings key")
        p.add_argument("--seed", type=int, default=None, help="top-level seed")
        p.add_argument("--out", dest="output_dir", default=None,
                       help="output directory (default: ./runs/<command>)")

    p = sub.add_parser("gen-data", help="generate synthetic + pseudo-real datasets")
    common(p)

    p = sub.add_parser("train", help="synthetic pretraining stage")
    common(p)
    p.add_argument("--data", required=True, help="synthetic dataset file")

    p = sub.add_parser("finetune", help="fine-tune on (pseudo-)real data")
    common(p)
    p.add_argument("--data", required=True, help="real-domain dataset file")
    p.add_argument("--init", required=True, help="synthetic-stage checkpoint")
    p.add_argument("--fraction", type=float, default=1.0,
                   help="fraction of the dataset to use")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("infer", help="recover a mesh for one dataset sample")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0)

    p = sub.add_parser("s2r-exp", help="run the sim-to-real scarcity experiment")
    common(p)

    p = sub.add_parser("plot", help="plot metric-vs-fraction curves from a table")
    common(p)
    p.add_argument("--table", required=True, help="table.tsv from s2r-exp")

    return parser


def parse_args(argv=None) -> RunConfig:
    parser = build_parser()
    return parser.parse_args(argv, namespace=RunConfig())


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, settings: Settings,
                   artifacts: dict[str, Path]) -> Path:
    manifest = {
        "command": command,
        "seed": settings.seed,
        "config_digest": settings_digest(settings),
        "artifacts": {name: _sha256(path) for name, path in sorted(artifacts.items())},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def _resolve_out(cfg: RunConfig) -> Path:
    import os

    if cfg.output_dir is not None:
        out = Path(cfg.output_dir)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out = root / cfg.command
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, settings: Settings, out: Path) -> int:
    scene = cfgmod.build_scene(settings)
    ranges = cfgmod.build_ranges(settings)
    templates = cfgmod.build_templates(settings)
    profile = cfgmod.build_shift(settings)
    seeds = cfgmod.dataset_seeds(settings)
    d = settings.data

    train_participants = list(range(d.n_train_participants))
    test_participants = list(range(d.n_train_participants,
                                   d.n_train_participants + d.n_test_participants))

    artifacts = {}
    synthetic = generate_synthetic(d.n_synthetic, seeds["synthetic"], scene, ranges, templates)
    write_dataset(out / "synthetic.zip", synthetic)
    artifacts["synthetic"] = out / "synthetic.zip"

    real_train = generate_pseudo_real(
        d.n_real_train, seeds["real_train"], scene, ranges, templates,
        profile, seeds["shift"], train_participants)
    write_dataset(out / "real_train.zip", real_train)
    artifacts["real_train"] = out / "real_train.zip"

    real_test = generate_pseudo_real(
        d.n_real_test, seeds["real_test"], scene, ranges, templates,
        profile, seeds["shift"], test_participants)
    write_dataset(out / "real_test.zip", real_test)
    artifacts["real_test"] = out / "real_test.zip"

    write_manifest(out, "gen-data", settings, artifacts)
    print(f"wrote {d.n_synthetic} synthetic, {d.n_real_train}+{d.n_real_test} "
          f"pseudo-real samples to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, settings: Settings, out: Path) -> int:
    dataset = read_dataset(cfg.data)
    templates = cfgmod.build_templates(settings)
    ckpt = run_stage(
        "synthetic", dataset, cfgmod.build_train_config(settings, "synthetic"),
        templates, cfgmod.build_model_config(settings),
        camera_height=settings.scene.camera_height,
        aug=cfgmod.build_augment(settings),
        log_path=out / "train_log.ndjson",
    )
    path = out / "checkpoint_synthetic.zip"
    save_checkpoint(path, ckpt)
    write_manifest(out, "train", settings, {"checkpoint": path})
    print(f"synthetic stage done ({ckpt.step} steps) -> {path}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, settings: Settings, out: Path) -> int:
    dataset = read_dataset(cfg.data)
    if not 0.0 <= cfg.fraction <= 1.0:
        raise ConfigError(f"--fraction must be in [0, 1], got {cfg.fraction}")
    n = int(round(cfg.fraction * len(dataset)))
    init = load_checkpoint(cfg.init)
    templates = cfgmod.build_templates(settings)
    if n == 0:
        ckpt = init
    else:
        pick = np.random.default_rng([4242, settings.seed,
                                      int(round(cfg.fraction * 1000))]).choice(
            len(dataset), size=n, replace=False)
        ckpt = run_stage(
            "finetune", dataset.subset(np.sort(pick)),
            cfgmod.build_train_config(settings, "finetune"),
            templates, cfgmod.build_model_config(settings),
            camera_height=settings.scene.camera_height,
            init=init, aug=cfgmod.build_augment(settings),
            log_path=out / "finetune_log.ndjson",
        )
    path = out / "checkpoint_finetune.zip"
    save_checkpoint(path, ckpt)
    write_manifest(out, "finetune", settings, {"checkpoint": path})
    print(f"fine-tuning done on {n} samples -> {path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, settings: Settings, out: Path) -> int:
    dataset = read_dataset(cfg.data)
    ckpt = load_checkpoint(cfg.checkpoint)
    templates = cfgmod.build_templates(settings)
    report = evaluate(dataset, ckpt, templates,
                      n_steps=settings.eval.n_steps,
                      seed=settings.eval.seed,
                      batch_size=settings.eval.batch_size)
    path = out / "report.json"
    save_report(path, report)
    write_manifest(out, "eval", settings, {"report": path})
    print(f"MPJPE {report.mpjpe_mm:.2f} mm  PVE {report.pve_mm:.2f} mm "
          f"({report.n_samples} samples) -> {path}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, settings: Settings, out: Path) -> int:
    from .containers import write_container

    dataset = read_dataset(cfg.data)
    if not 0 <= cfg.index < len(dataset):
        raise ConfigError(f"--index {cfg.index} outside dataset of {len(dataset)}")
    ckpt = load_checkpoint(cfg.checkpoint)
    templates = cfgmod.build_templates(settings)
    sample = dataset.sample(cfg.index)
    params, mesh = infer(sample.depth, sample.gender, ckpt, templates,
                         n_steps=settings.eval.n_steps,
                         seed=settings.eval.seed + cfg.index)
    path = out / f"prediction_{cfg.index}.zip"
    write_container(path, {
        "params": np.concatenate([
            params.beta.numpy(), params.theta.numpy().ravel(),
            params.s.numpy(), params.u.numpy(), params.v.numpy(),
        ]).astype(np.float32),
        "vertices": mesh.vertices.numpy().astype(np.float32),
        "joints": mesh.joints.numpy().astype(np.float32),
        "faces": mesh.faces.numpy().astype(np.int32),
    }, meta={"index": cfg.index, "cover": sample.cover}, kind="prediction")
    write_manifest(out, "infer", settings, {"prediction": path})
    print(f"prediction for sample {cfg.index} ({sample.cover}) -> {path}")
    return EXIT_OK


def cmd_s2r_exp(cfg: RunConfig, settings: Settings, out: Path) -> int:
    scene = cfgmod.build_scene(settings)
    ranges = cfgmod.build_ranges(settings)
    templates = cfgmod.build_templates(settings)
    profile = cfgmod.build_shift(settings)
    seeds = cfgmod.dataset_seeds(settings)
    d = settings.data

    synthetic = generate_synthetic(d.n_synthetic, seeds["synthetic"], scene, ranges, templates)
    real_train = generate_pseudo_real(
        d.n_real_train, seeds["real_train"], scene, ranges, templates,
        profile, seeds["shift"], list(range(d.n_train_participants)))
    real_test = generate_pseudo_real(
        d.n_real_test, seeds["real_test"], scene, ranges, templates,
        profile, seeds["shift"],
        list(range(d.n_train_participants,
                   d.n_train_participants + d.n_test_participants)))

    rows, reports = s2r_experiment(
        synthetic, real_train, real_test, templates,
        cfgmod.build_model_config(settings),
        cfgmod.build_train_config(settings, "synthetic"),
        cfgmod.build_experiment(settings),
        camera_height=settings.scene.camera_height,
        aug=cfgmod.build_augment(settings),
        progress=lambda msg: print(f"  {msg}", flush=True),
    )

    table_path = out / "table.tsv"
    write_table(table_path, rows)
    summary = {f"{variant}@{fraction}": value
               for (variant, fraction), value in sorted(summarize_rows(rows).items())}
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    cover_path = out / "per_cover.json"
    cover_payload = {
        f"{variant}@{fraction}@s{seed}": report.per_cover
        for (variant, fraction, seed), report in sorted(reports.items())
    }
    cover_path.write_text(json.dumps(cover_payload, sort_keys=True, indent=1) + "\n")
    write_manifest(out, "s2r-exp", settings,
                   {"table": table_path, "summary": summary_path, "per_cover": cover_path})
    print(f"experiment table ({len(rows)} rows) -> {table_path}")
    return EXIT_OK


def emit_plots(rows: list[dict], out_dir: Path) -> list[Path]:
    """Metric-vs-real-fraction curves, one line per method variant."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not rows:
        raise ConfigError("experiment table is empty")
    summary = summarize_rows(rows)
    variants = sorted({v for v, _ in summary})
    fractions = sorted({f for v, f in summary if v != "sim_only"})
    paths = []
    for metric, label in (("mpjpe_mm", "MPJPE (mm)"), ("pve_mm", "PVE (mm)")):
        fig, ax = plt.subplots(figsize=(5, 3.5), dpi=120)
        for variant in variants:
            if variant == "sim_only":
                value = summary[(variant, 0.0)][metric]
                xs = [100 * f for f in (fractions or [0.0, 1.0])]
                ax.plot(xs, [value] * len(xs), linestyle="--", label="sim only")
                continue
            xs = [100 * f for f in fractions if (variant, f) in summary]
            ys = [summary[(variant, f)][metric] for f in fractions if (variant, f) in summary]
            if xs:
                ax.plot(xs, ys, marker="o", label=variant.replace("_", "+"))
        ax.set_xlabel("real data used (%)")
        ax.set_ylabel(label)
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{metric.removesuffix('_mm')}_vs_fraction.png"
        fig.savefig(path, metadata={"Software": "bedmesh"})
        plt.close(fig)
        paths.append(path)
    return paths


def cmd_plot(cfg: RunConfig, settings: Settings, out: Path) -> int:
    rows = read_table(cfg.table)
    paths = emit_plots(rows, out)
    write_manifest(out, "plot", settings, {p.stem: p for p in paths})
    print(f"wrote {len(paths)} plots to {out}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "s2r-exp": cmd_s2r_exp,
    "plot": cmd_plot,
}


def run(cfg: RunConfig) -> int:
    try:
        settings = load_settings(cfg.config, cfg.overrides, cfg.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _resolve_out(cfg)
    try:
        return _COMMANDS[cfg.command](cfg, settings, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContainerError, FileNotFoundError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None) -> int:
    return run(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
