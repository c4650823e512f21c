import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from bedmesh.body_model import GenderFlag
from bedmesh.eval import (
    EvalReport,
    ExperimentConfig,
    evaluate,
    infer,
    mpjpe,
    pve,
    read_table,
    s2r_experiment,
    save_report,
    summarize_rows,
    write_table,
)
from bedmesh.train import TrainConfig, run_stage


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_dataset, tiny_templates, tiny_net_config):
    cfg = TrainConfig(batch_size=4, steps_total=6, seed=0)
    return run_stage("synthetic", tiny_dataset, cfg, tiny_templates,
                     tiny_net_config, camera_height=2.0)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_mpjpe_identical_zero():
    j = np.random.default_rng(0).normal(size=(24, 3))
    assert mpjpe(j, j) == 0.0


def test_mpjpe_uniform_offset():
    j = np.random.default_rng(1).normal(size=(24, 3))
    assert mpjpe(j + [0.01, 0.0, 0.0], j) == pytest.approx(10.0, rel=1e-12)


def test_mpjpe_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(24, 3)), rng.normal(size=(24, 3))
    expected = np.mean([np.sqrt(((a[i] - b[i]) ** 2).sum()) for i in range(24)]) * 1000
    assert abs(mpjpe(a, b) - expected) < 1e-9


def test_pve_identical_zero():
    v = np.random.default_rng(3).normal(size=(48, 3))
    assert pve(v, v) == 0.0


def test_pve_single_vertex_offset():
    v = np.random.default_rng(4).normal(size=(48, 3))
    moved = v.copy()
    moved[7] += [0.0, 0.048, 0.0]
    assert pve(moved, v) == pytest.approx(0.048 / 48 * 1000, rel=1e-12)


def test_pve_oracle():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(48, 3)), rng.normal(size=(48, 3))
    expected = np.mean([np.linalg.norm(a[i] - b[i]) for i in range(48)]) * 1000
    assert abs(pve(a, b) - expected) < 1e-9


def test_metrics_rigid_motion_invariant():
    rng = np.random.default_rng(6)
    pred, gt = rng.normal(size=(24, 3)), rng.normal(size=(24, 3))
    R = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
    t = rng.normal(size=3)
    before = mpjpe(pred, gt)
    after = mpjpe(pred @ R.T + t, gt @ R.T + t)
    assert abs(before - after) < 1e-9
    vp, vg = rng.normal(size=(48, 3)), rng.normal(size=(48, 3))
    assert abs(pve(vp, vg) - pve(vp @ R.T + t, vg @ R.T + t)) < 1e-9


def test_metric_shape_mismatch():
    with pytest.raises(ValueError):
        mpjpe(np.zeros((24, 3)), np.zeros((23, 3)))
    with pytest.raises(ValueError):
        pve(np.zeros((48, 3)), np.zeros((40, 3)))


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def test_infer_deterministic(tiny_ckpt, tiny_dataset, tiny_templates):
    depth = tiny_dataset.depth[0]
    gender = tiny_dataset.sample(0).gender
    p1, m1 = infer(depth, gender, tiny_ckpt, tiny_templates, seed=3)
    p2, m2 = infer(depth, gender, tiny_ckpt, tiny_templates, seed=3)
    assert torch.equal(m1.vertices, m2.vertices)
    assert torch.equal(p1.beta, p2.beta)
    p3, _ = infer(depth, gender, tiny_ckpt, tiny_templates, seed=4)
    assert not torch.equal(p1.u, p3.u)


def test_infer_single_step_boundary(tiny_ckpt, tiny_dataset, tiny_templates):
    depth = tiny_dataset.depth[1]
    gender = tiny_dataset.sample(1).gender
    params, mesh = infer(depth, gender, tiny_ckpt, tiny_templates, n_steps=1, seed=0)
    assert torch.all(torch.isfinite(mesh.vertices))
    assert torch.all(torch.isfinite(mesh.joints))


def test_infer_smoke_sweep(tiny_ckpt, tiny_templates):
    # untrained weights must still produce finite, decodable outputs
    rng = np.random.default_rng(7)
    for i in range(100):
        depth = 2.0 - np.abs(rng.normal(0.05, 0.05, size=(16, 16)))
        gender = GenderFlag.female() if i % 2 else GenderFlag.male()
        params, mesh = infer(depth, gender, tiny_ckpt, tiny_templates, seed=i)
        assert torch.all(torch.isfinite(mesh.vertices))


def test_infer_rejects_oversized_image(tiny_ckpt, tiny_templates):
    with pytest.raises(ValueError, match="exceeds"):
        infer(np.full((64, 64), 2.0), GenderFlag.male(), tiny_ckpt, tiny_templates)


def test_infer_pads_small_image(tiny_ckpt, tiny_templates):
    params, mesh = infer(np.full((12, 10), 2.0), GenderFlag.male(),
                         tiny_ckpt, tiny_templates, seed=0)
    assert torch.all(torch.isfinite(mesh.vertices))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_aggregation_identity(tiny_ckpt, tiny_dataset, tiny_templates):
    report = evaluate(tiny_dataset, tiny_ckpt, tiny_templates, n_steps=2)
    weighted = sum(v["mpjpe_mm"] * v["n"] for v in report.per_cover.values())
    n = sum(v["n"] for v in report.per_cover.values())
    assert n == report.n_samples == len(tiny_dataset)
    assert abs(weighted / n - report.mpjpe_mm) < 1e-9
    weighted_pve = sum(v["pve_mm"] * v["n"] for v in report.per_cover.values())
    assert abs(weighted_pve / n - report.pve_mm) < 1e-9


def test_evaluate_deterministic(tiny_ckpt, tiny_dataset, tiny_templates):
    a = evaluate(tiny_dataset, tiny_ckpt, tiny_templates, n_steps=2)
    b = evaluate(tiny_dataset, tiny_ckpt, tiny_templates, n_steps=2)
    assert a == b
    assert a.to_json() == b.to_json()


def test_evaluate_batch_size_invariant(tiny_ckpt, tiny_dataset, tiny_templates):
    a = evaluate(tiny_dataset, tiny_ckpt, tiny_templates, n_steps=2, batch_size=64)
    b = evaluate(tiny_dataset, tiny_ckpt, tiny_templates, n_steps=2, batch_size=5)
    assert a.mpjpe_mm == pytest.approx(b.mpjpe_mm, rel=1e-5)


def test_evaluate_empty_rejected(tiny_ckpt, tiny_dataset, tiny_templates):
    empty = tiny_dataset.subset(np.array([], dtype=int))
    with pytest.raises(ValueError, match="empty"):
        evaluate(empty, tiny_ckpt, tiny_templates)


def test_report_serialization(tmp_path, tiny_ckpt, tiny_dataset, tiny_templates):
    report = evaluate(tiny_dataset, tiny_ckpt, tiny_templates, n_steps=1)
    path = tmp_path / "report.json"
    save_report(path, report)
    import json

    payload = json.loads(path.read_text())
    assert payload["mpjpe_mm"] == report.mpjpe_mm
    assert payload["n_samples"] == report.n_samples


# ---------------------------------------------------------------------------
# sim-to-real harness
# ---------------------------------------------------------------------------

def test_s2r_zero_fraction_reduces_to_sim_only(tiny_dataset, tiny_real_dataset,
                                               tiny_templates, tiny_net_config):
    cfg = TrainConfig(batch_size=4, seed=0)
    exp = ExperimentConfig(real_fractions=(0.0,), seeds=(0,), sim_steps=3,
                           finetune_epochs=2, eval_n_steps=2)
    rows, reports = s2r_experiment(
        tiny_dataset, tiny_real_dataset, tiny_real_dataset, tiny_templates,
        tiny_net_config, cfg, exp, camera_height=2.0)
    by_variant = {r["variant"]: r for r in rows}
    assert by_variant["sim_only"]["mpjpe_mm"] == by_variant["sim_finetune"]["mpjpe_mm"]
    assert ("scratch", 0.0, 0) not in reports


def test_table_roundtrip(tmp_path):
    rows = [
        {"variant": "sim_only", "fraction": 0.0, "seed": 0, "mpjpe_mm": 120.5, "pve_mm": 130.25},
        {"variant": "scratch", "fraction": 0.25, "seed": 1, "mpjpe_mm": 90.125, "pve_mm": 95.0},
    ]
    path = tmp_path / "table.tsv"
    write_table(path, rows)
    loaded = read_table(path)
    assert loaded == rows


def test_summarize_rows_median():
    rows = [
        {"variant": "a", "fraction": 0.1, "seed": s, "mpjpe_mm": m, "pve_mm": m + 1}
        for s, m in enumerate((10.0, 30.0, 20.0))
    ]
    summary = summarize_rows(rows)
    assert summary[("a", 0.1)]["mpjpe_mm"] == 20.0
    assert summary[("a", 0.1)]["n_seeds"] == 3
