"""Acceptance criteria, each at its stated tolerance. Every test records one
PASS/FAIL line; the lines are repeated in the terminal summary."""

import functools
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from msan.checks import run_gradchecks
from msan.datamodel import GeneratorConfig, ValidationError, generate_synthetic, load_dataset, save_dataset
from msan.harness import VARIANTS, TrainConfig, evaluate, make_datasets, train
from msan.hrn import dot_attention
from msan.mpn import MoICandidate, coverage, label_candidates, modulate, modulate_moment_scores, temporal_iou, winner_index
from msan.tensorcore import Tensor

FIXTURES = Path(__file__).parent / "fixtures"


@functools.cache
def datasets(seed):
    return make_datasets(seed)


@functools.cache
def run_variant(seed, name):
    """Default recipe on the 2,000/400 synthetic split, one variant switched on."""
    cfg = replace(TrainConfig(seed=seed), **VARIANTS[name])
    train_set, valid_set = datasets(seed)
    start = time.perf_counter()
    res = train(cfg, train_set, valid_set)
    elapsed = time.perf_counter() - start
    report, _ = evaluate(res.params, res.model_cfg, valid_set)
    return res, report, elapsed


def test_1_gradient_integrity(verdict):
    start = time.perf_counter()
    failures, worst = [], 0.0
    for seed in (0, 1, 2):
        for name, rep in run_gradchecks(seed, tol=1e-4).items():
            worst = max(worst, rep.worst)
            if not rep.passed:
                failures.append(f"{name}@seed{seed}={rep.worst:.2e}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120.0
    verdict(1, "gradient integrity", ok,
            f"worst rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s for seeds 0-2 (limit 120s), failures {failures or 'none'}")


def test_2_attention_normalization(verdict):
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(1000):
        m, n, d = rng.integers(1, 9, size=3)
        scale = rng.choice([0.1, 1.0, 10.0])
        X, Y = rng.normal(size=(m, d)) * scale, rng.normal(size=(n, d)) * scale
        mask = rng.random(n) < 0.7
        mask[rng.integers(n)] = True
        out, w = dot_attention(Tensor(X[None]), Tensor(Y[None]), mask[None], return_weights=True)
        w, out = w.data[0], out.data[0]
        live = Y[mask]
        rows_ok = np.all(np.abs(w.sum(axis=-1) - 1.0) <= 1e-9) and np.all(w >= 0) and np.all(w[:, ~mask] == 0)
        # the convex hull is checked through its defining weights and per-coordinate bounds
        recon = np.allclose(out, w[:, mask] @ live, rtol=0, atol=1e-9)
        box = np.all(out <= live.max(axis=0) + 1e-9) and np.all(out >= live.min(axis=0) - 1e-9)
        bad += not (rows_ok and recon and box)
    verdict(2, "attention normalization", bad == 0, f"{1000 - bad}/1000 randomized calls satisfied rows=1, w>=0, hull")


def brute_interval(a, b):
    cells_a, cells_b = set(range(*a)), set(range(*b))
    inter = len(cells_a & cells_b)
    hull = max(a[1], b[1]) - min(a[0], b[0])
    return (inter / hull if inter else 0.0), (inter / len(cells_b) if inter else 0.0)


def test_3_metric_oracles(verdict):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(10_000):
        s1, s2 = rng.integers(0, 150, size=2)
        a = (int(s1), int(s1 + rng.integers(1, 60)))
        b = (int(s2), int(s2 + rng.integers(1, 60)))
        iou, cov = brute_interval(a, b)
        mismatches += temporal_iou(a, b) != iou or coverage(a, b) != cov
    cands = [MoICandidate((0.0, 2.0), (), ())]
    label_candidates(cands + [MoICandidate((5.0, 6.0), (), ())], (0.0, 4.0))
    boundary = temporal_iou((0.0, 2.0), (0.0, 4.0)) == 0.5 and cands[0].label == "positive"
    verdict(3, "metric oracles", mismatches == 0 and boundary,
            f"{mismatches} mismatches in 10,000 pairs; IoU=0.5 labelled {cands[0].label}")


def test_4_modulation_laws(verdict):
    rng = np.random.default_rng(11)
    m = rng.random(10_000) * rng.choice([1.0, 10.0, 1e-3], size=10_000)
    a = rng.random(10_000)
    mult, res, add = modulate(m, a, "multiplicative"), modulate(m, a, "residual"), modulate(m, a, "additive")
    laws = np.all((0 <= mult) & (mult <= m)) and np.all((m <= res) & (res <= 2 * m)) and np.array_equal(add, m + a)
    flips = 0
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        mv, ms, alpha, c = rng.random(n), rng.random(n), rng.random(), rng.uniform(1e-3, 1e3)
        starts = np.sort(rng.random(n))
        w0 = winner_index(*modulate_moment_scores(mv, ms, alpha, "multiplicative"), starts)
        w1 = winner_index(*modulate_moment_scores(c * mv, c * ms, alpha, "multiplicative"), starts)
        flips += w0 != w1
    verdict(4, "modulation laws", bool(laws) and flips == 0,
            f"range/additive laws {'hold' if laws else 'violated'} on 10,000 draws; {flips}/1000 winner flips under rescaling")


@pytest.mark.slow
def test_5_learnability(verdict):
    passes, rows = 0, []
    for seed in (0, 1, 2):
        res, report, elapsed = run_variant(seed, "full")
        ok = report.accuracy >= 0.8 and report.iou >= 0.4 and elapsed < 900
        passes += ok
        rows.append(f"seed {seed}: acc {report.accuracy:.3f} IoU {report.iou:.3f} {elapsed:.0f}s epoch {res.best_epoch}")
        if passes >= 2:
            break
    verdict(5, "learnability", passes >= 2, "; ".join(rows) + " (need acc>=0.8, IoU>=0.4, <900s on 2 seeds)")


@pytest.mark.slow
def test_6_ablation_directions(verdict):
    seed = 0
    reports = {name: run_variant(seed, name)[1] for name in
               ("full", "gt-moment", "no-mpn", "additive", "residual", "no-mim-mpn")}
    acc = {k: r.accuracy for k, r in reports.items()}
    iou = {k: r.iou for k, r in reports.items()}
    full = reports["full"]
    order = acc["gt-moment"] >= acc["full"] >= acc["no-mpn"]
    expansion = full.cov_expanded > full.cov and full.iou_expanded < full.iou
    modes = {"additive": iou["additive"], "multiplicative": iou["full"], "residual": iou["residual"]}
    mim = all(v > iou["no-mim-mpn"] for v in modes.values())
    detail = (
        f"acc gt {acc['gt-moment']:.3f} >= pred {acc['full']:.3f} >= no-MPN {acc['no-mpn']:.3f} [{order}]; "
        f"Cov {full.cov:.3f}->{full.cov_expanded:.3f}, IoU {full.iou:.3f}->{full.iou_expanded:.3f} [{expansion}]; "
        f"IoU {json.dumps({k: round(v, 3) for k, v in modes.items()})} vs no-MIM {iou['no-mim-mpn']:.3f} [{mim}]"
    )
    verdict(6, "ablation directions", order and expansion and mim, detail)


def test_7_determinism(verdict):
    train_set, valid_set = make_datasets(5, n_train=160, n_valid=40)
    cfg = TrainConfig(seed=5, max_epochs=2)
    outputs = []
    for _ in range(2):
        res = train(cfg, train_set, valid_set)
        report, traces = evaluate(res.params, res.model_cfg, valid_set)
        outputs.append((json.dumps(res.log), json.dumps(report.to_dict()), json.dumps(traces)))
    same = outputs[0] == outputs[1]
    verdict(7, "determinism", same, f"two runs gave {'identical' if same else 'different'} logs, reports and traces")


def test_8_dataset_round_trip(verdict, tmp_path):
    records = generate_synthetic(GeneratorConfig(n_clips=1000), seed=8)
    first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(records, first)
    save_dataset(load_dataset(first), second)
    identical = first.read_bytes() == second.read_bytes()
    manifest = json.loads((FIXTURES / "malformed" / "manifest.json").read_text())
    wrong = []
    for name, field in sorted(manifest.items()):
        try:
            load_dataset(FIXTURES / "malformed" / name)
            wrong.append(f"{name}: accepted")
        except ValidationError as exc:
            if exc.field != field:
                wrong.append(f"{name}: {exc.field} != {field}")
    verdict(8, "dataset round-trip", identical and len(manifest) == 10 and not wrong,
            f"re-saved bytes {'identical' if identical else 'differ'}; {10 - len(wrong)}/10 malformed fixtures rejected "
            f"with the right field {wrong or ''}")


@pytest.mark.parametrize("mode", ["additive", "multiplicative", "residual"])
def test_modulation_tensor_path_matches_numpy(mode):
    m, a = np.array([0.2, 0.7]), np.array([0.3, 0.9])
    np.testing.assert_array_equal(modulate(Tensor(m), Tensor(a), mode).data, modulate(m, a, mode))
