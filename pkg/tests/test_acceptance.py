"""Acceptance criteria 1-10.

Each test records a PASS/FAIL line (see the terminal summary) and then
asserts. Criteria 4-8 share one cache of training runs: five seeds, each
with one stage-1 run and up to five stage-2 variants on the desk profile.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from _helpers import gradient_check, verdict
from emma_fusion import cli, metrics, transforms
from emma_fusion.config import stage_config
from emma_fusion.imaging import build_dataset
from emma_fusion.networks import (
    ChannelAttention,
    ChannelLayerNorm,
    DoubleConv,
    FuserArch,
    GatedFeedForward,
    ResBlock,
    RestormerBlock,
    RestormerCNNBlock,
    SensorArch,
    build_fuser,
    build_sensor,
)
from emma_fusion.training import fuse_images, train_fuser_stage, train_sensing_stage
from emma_fusion.verification import exhaustive_group_check, reference_metric

pytestmark = pytest.mark.slow

_SUITE_START = time.perf_counter()
BUDGET_SECONDS = 25 * 60

SEEDS = range(5)
NUM_PAIRS, NUM_HELDOUT, SIDE = 8, 4, 64
BASELINES = ("no_sensing", "traditional", "traditional_plus_DA")


class Runs:
    """Lazily trained models, keyed by seed and ablation, reused across criteria."""

    def __init__(self):
        self.data = {}
        self.stage1 = {}
        self.stage2 = {}
        self.cpu = {}

    def dataset(self, seed):
        if seed not in self.data:
            self.data[seed] = build_dataset(seed, NUM_PAIRS, SIDE, SIDE, SIDE, num_heldout=NUM_HELDOUT)
        return self.data[seed]

    def sensing(self, seed):
        if seed not in self.stage1:
            t = time.process_time()
            self.stage1[seed] = train_sensing_stage(stage_config(1, seed=seed), self.dataset(seed))
            self.cpu[(seed, "stage1")] = time.process_time() - t
        return self.stage1[seed]

    def fuser(self, seed, ablation="none"):
        key = (seed, ablation)
        if key not in self.stage2:
            a_i, a_v, _ = self.sensing(seed)
            t = time.process_time()
            fuser, report = train_fuser_stage(stage_config(2, seed=seed, ablation=ablation), self.dataset(seed), (a_i, a_v))
            self.cpu[key] = time.process_time() - t
            held = self.dataset(seed).heldout
            fused = [fuse_images(fuser, p.modality_a, p.modality_b) for p in held]
            self.stage2[key] = {
                "report": report,
                "scd": float(np.mean([metrics.scd(f, p.modality_a, p.modality_b) for f, p in zip(fused, held)])),
                "corr": float(np.mean([metrics.truth_correlation(f, p.truth) for f, p in zip(fused, held)])),
            }
        return self.stage2[key]


@pytest.fixture(scope="session")
def runs():
    return Runs()


def test_criterion_01_group_correctness():
    t0 = time.perf_counter()
    checks = {
        "n=2": exhaustive_group_check(2),
        "n=4": exhaustive_group_check(4),
        "n=4 shifts<=1": exhaustive_group_check(4, max_shift=1),
        "n=8": exhaustive_group_check(8),
    }
    rng = np.random.default_rng(0)
    cfg = transforms.GroupConfig(max_shift=8)
    exact = 0
    for _ in range(1000):
        x = rng.random((16, 16))
        g = transforms.sample(rng, cfg)
        back = transforms.apply(transforms.inverse(g), transforms.apply(g, x))
        exact += back.tobytes() == x.tobytes()
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and exact == 1000 and elapsed < 10
    failed = [k for k, v in checks.items() if not v]
    assert verdict(1, ok, f"group checks failed={failed} round-trips exact {exact}/1000, {elapsed:.1f}s (< 10 s)")


def _seeded(shape, seed):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_criterion_02_gradient_correctness():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    c = 4
    blocks = {
        "layer_norm": (ChannelLayerNorm(c), 1),
        "channel_attention": (ChannelAttention(c), 1),
        "gated_ffn": (GatedFeedForward(c, 2), 1),
        "restormer": (RestormerBlock(c), 1),
        "resblock": (ResBlock(c), 1),
        "restormer_cnn": (RestormerCNNBlock(c, c), 1),
        "double_conv": (DoubleConv(c, c), 1),
    }
    errors = {}
    for name, (block, _) in blocks.items():
        with torch.no_grad():
            for p in block.parameters():
                p.add_(0.1 * torch.randn(p.shape))
        errors[name] = gradient_check(block, [_seeded((1, c, 16, 16), 1)], max_per_tensor=8)
    fuser = build_fuser(FuserArch(scales=2, base_channels=4), seed=0)
    errors["u_fuser"] = gradient_check(fuser, [_seeded((1, 1, 16, 16), 2), _seeded((1, 1, 16, 16), 3)], max_per_tensor=3)
    sensor = build_sensor(SensorArch(depth=3, base_channels=4), seed=0)
    errors["sensor_unet"] = gradient_check(sensor, [_seeded((1, 1, 16, 16), 4)], max_per_tensor=6)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 120
    assert verdict(2, ok, f"worst relative error {errors[worst]:.2e} ({worst}), {elapsed:.1f}s (< 1e-4, < 120 s)")


def test_criterion_03_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = {name: 0.0 for name in ("en", "sd", "sf", "ag", "scd", "vif")}
    for _ in range(100):
        f, i, v = (rng.random((16, 16)) for _ in range(3))
        for name in ("en", "sd", "sf", "ag"):
            worst[name] = max(worst[name], abs(getattr(metrics, name)(f) - reference_metric(name, [f])))
        for name in ("scd", "vif"):
            worst[name] = max(worst[name], abs(getattr(metrics, name)(f, i, v) - reference_metric(name, [f, i, v])))
    elapsed = time.perf_counter() - t0
    tol = {"vif": 1e-6}
    ok = all(err <= tol.get(name, 1e-9) for name, err in worst.items()) and elapsed < 30
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    assert verdict(3, ok, f"max deviations {detail}, {elapsed:.1f}s (< 30 s)")


def test_criterion_04_stage1_learning(runs):
    _, _, report = runs.sensing(0)
    first, last = report.epochs[0], report.epochs[-1]
    ratio_i = last["heldout_mse_i"] / first["heldout_mse_i"]
    ratio_v = last["heldout_mse_v"] / first["heldout_mse_v"]
    ok = len(report.epochs) == 30 and ratio_i <= 0.5 and ratio_v <= 0.5
    assert verdict(4, ok, f"held-out MSE final/epoch-1: A_i {ratio_i:.3f}, A_v {ratio_v:.3f} (<= 0.5)")


def test_criterion_05_stage2_learning(runs):
    report = runs.fuser(0)["report"]
    first, last = report.epochs[0]["total"], report.epochs[-1]["total"]
    finite = all(math.isfinite(v) for rec in report.epochs for v in rec.values())
    finite &= all(math.isfinite(t["error"]) for t in report.equivariance_trace)
    ok = len(report.epochs) == 40 and last < first and finite
    assert verdict(5, ok, f"epoch-mean L_total {first:.4f} -> {last:.4f}, all terms finite: {finite}")


def test_criterion_06_equivariance_efficacy(runs):
    wins = []
    for seed in SEEDS:
        full = runs.fuser(seed)["report"].equivariance_trace
        ablated = runs.fuser(seed, "no_equivariance")["report"].equivariance_trace
        wins.append(full[-1]["error"] < full[0]["error"] and full[-1]["error"] < ablated[-1]["error"])
    cpu = sum(runs.cpu[k] for k in runs.cpu if k[1] in ("stage1", "none", "no_equivariance"))
    ok = sum(wins) >= 4 and cpu < 600
    per_seed = " ".join(
        f"s{s}:{runs.fuser(s)['report'].equivariance_trace[-1]['error']:.4f}/"
        f"{runs.fuser(s, 'no_equivariance')['report'].equivariance_trace[-1]['error']:.4f}"
        for s in SEEDS
    )
    assert verdict(6, ok, f"{sum(wins)}/5 seeds (need 4); full/no_eq audit {per_seed}; {cpu / 60:.1f} CPU-min (< 10)")


def test_criterion_07_fusion_information(runs):
    wins = []
    margins = []
    for seed in SEEDS:
        held = runs.dataset(seed).heldout
        best_source = max(
            float(np.mean([metrics.truth_correlation(p.modality_a, p.truth) for p in held])),
            float(np.mean([metrics.truth_correlation(p.modality_b, p.truth) for p in held])),
        )
        fused = runs.fuser(seed)["corr"]
        wins.append(fused > best_source)
        margins.append(f"s{seed}:{fused:.3f}>{best_source:.3f}")
    assert verdict(7, sum(wins) >= 4, f"{sum(wins)}/5 seeds (need 4); {' '.join(margins)}")


def test_criterion_08_ablation_direction(runs):
    wins_scd, wins_corr, rows = [], [], []
    for seed in SEEDS:
        full = runs.fuser(seed)
        others = {ab: runs.fuser(seed, ab) for ab in BASELINES}
        wins_scd.append(all(full["scd"] > o["scd"] for o in others.values()))
        wins_corr.append(all(full["corr"] > o["corr"] for o in others.values()))
        best_scd = max(others, key=lambda ab: others[ab]["scd"])
        rows.append(f"s{seed}: scd {full['scd']:.3f} vs {others[best_scd]['scd']:.3f} ({best_scd}),"
                    f" corr {full['corr']:.3f} vs {max(o['corr'] for o in others.values()):.3f}")
    ok = sum(wins_scd) >= 4 and sum(wins_corr) >= 4
    detail = f"SCD {sum(wins_scd)}/5, truth_correlation {sum(wins_corr)}/5 (need 4 each); " + "; ".join(rows)
    assert verdict(8, ok, detail)


# short schedules keep the doubled end-to-end run inside the suite budget;
# every code path of the full pipeline is still exercised
DETERMINISM_CONFIG = {"schema": 1, "epochs": 3, "audit_samples": 4}


def _pipeline(root: Path, config: Path):
    data, s1, s2 = root / "data", root / "sensing", root / "fuser"
    steps = [
        ["synth-data", "--set", "seed=0", "--set", f"num_pairs={NUM_PAIRS}", "--set", f"num_heldout={NUM_HELDOUT}",
         "--out", data],
        ["train-sensing", "--config", config, "--data", data, "--out", s1],
        ["train-fuser", "--config", config, "--data", data, "--sensors", s1, "--out", s2],
    ]
    for k in range(NUM_HELDOUT):
        stem = data / f"heldout_{k:03d}"
        steps.append(["fuse", "--fuser", s2 / "fuser", "--i", f"{stem}_a.pgm", "--v", f"{stem}_b.pgm",
                      "--out", root / f"fused_{k}.pgm"])
        steps.append(["evaluate", "--fused", root / f"fused_{k}.pgm", "--i", f"{stem}_a.pgm", "--v", f"{stem}_b.pgm",
                      "--truth", f"{stem}_truth.pgm", "--out", root / f"metrics_{k}.json"])
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0, argv


def _artifacts(root: Path) -> dict:
    keep = (".emt", ".pgm", ".jsonl")
    names = ("report.json", "manifest.json")
    out = {}
    for path in sorted(root.rglob("*")):
        # run manifests record absolute paths, so they differ between the two roots by design
        if path.name.endswith(".manifest.json") or path.name == "run_manifest.json":
            continue
        if path.is_file() and (path.suffix in keep or path.name in names or path.name.startswith("metrics_")):
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


def test_criterion_09_determinism(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps(DETERMINISM_CONFIG))
    for run in ("a", "b"):
        _pipeline(tmp_path / run, config)
    capsys.readouterr()
    a, b = _artifacts(tmp_path / "a"), _artifacts(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    kinds = {
        "checkpoint tensors": sum(k.endswith(".emt") for k in a),
        "fused": sum(k.startswith("fused_") for k in a),
        "reports": sum(k.endswith("report.json") or k.startswith("metrics_") for k in a),
    }
    ok = set(a) == set(b) and not differing and all(kinds.values())
    counts = ", ".join(f"{v} {k}" for k, v in kinds.items())
    assert verdict(9, ok, f"{len(a)} artifacts compared ({counts}); differing: {differing[:3] or 'none'}")


def test_criterion_10_budget():
    elapsed = time.perf_counter() - _SUITE_START
    ok = elapsed < BUDGET_SECONDS
    assert verdict(10, ok, f"acceptance suite {elapsed / 60:.1f} min on {os.cpu_count()} CPU(s), "
                           f"{torch.get_num_threads()} torch thread(s) (< 25 min)")
