"""Acceptance checks, one test per criterion.

Each test records a one-line verdict; the lines are printed together at the
end of the pytest run (see ``conftest.py``). The last two criteria run the
default ``pipeline`` twice, which takes a few minutes.
"""

import csv
import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch
from scipy import integrate, stats
from torch.func import functional_call

from histvla import scorer as sc
from histvla.geometry import CameraIntrinsics, back_project, project
from histvla.meta_action import Trajectory, classify
from histvla.planner import (
    Planner,
    RefineConfig,
    _refine_loss_torch,
    encode_vae,
    generate_candidates,
    kl_divergence,
    latent_variance,
    refine_loss,
    refine_loss_grad,
    score_and_select,
)
from histvla.policy import confidence
from histvla.scenario import generate_corpus
from histvla.sparsifier import SparsifierConfig, TokenSet, flops_reduction, sparsify

RESULTS: list[str] = []


def report(n: int, name: str, ok: bool, detail: str) -> None:
    RESULTS.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


def test_01_geometry_round_trip():
    k = CameraIntrinsics(800.0, 780.0, 640.0, 360.0, 1280, 720)
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        uv = (rng.uniform(0, 1280), rng.uniform(0, 720))
        d = rng.uniform(0.1, 200.0)
        worst = max(worst, float(np.max(np.abs(project(back_project(uv, d, k), k) - uv))))
    elapsed = time.perf_counter() - start
    report(1, "geometry round trip", worst < 1e-9 and elapsed < 1.0,
           f"max |delta| {worst:.2e} px over 1000 samples in {elapsed:.3f} s")


def test_02_sparsifier_count_law():
    rng = np.random.default_rng(2)
    bad = []
    for n in range(1, 513):
        tokens = rng.normal(size=(n, 4))
        ts = TokenSet(tokens, np.zeros((n, 3)), np.full(n, 1.0 / n))
        attn = rng.random((n, n))
        attn /= attn.sum(axis=1, keepdims=True)
        for rate in (0.25, 0.5, 0.8, 1.0):
            out = sparsify(ts, attn, SparsifierConfig(rate))
            if len(out) != math.ceil(n * rate - 1e-9):
                bad.append((n, rate))
            if rate == 1.0 and not np.array_equal(out.tokens, tokens):
                bad.append((n, "identity"))
    v = np.array([0.4, -1.0, 2.5, 0.1])
    same = TokenSet(np.tile(v, (64, 1)), np.zeros((64, 3)), np.full(64, 1 / 64))
    attn = rng.random((64, 64))
    attn /= attn.sum(axis=1, keepdims=True)
    drift = float(np.max(np.abs(sparsify(same, attn, SparsifierConfig(0.25)).tokens - v)))
    report(2, "sparsifier count law and identity", not bad and drift < 1e-9,
           f"{512 * 4 - len(bad)}/{512 * 4} (N, rate) pairs correct, identical-token drift {drift:.1e}")


def test_03_compute_accounting():
    n, d, layers, rate = 576, 256, 4, 0.8
    full, sparse, pct = flops_reduction(n, rate, d, layers, 4)
    kept = math.ceil(n * rate)
    closed = lambda m: layers * (12 * m * d * d + 2 * m * m * d)
    ok = full == closed(n) and sparse == closed(kept) and 20.0 < pct < 36.0
    report(3, "compute accounting", ok, f"N={n} -> {kept} tokens, reduction {pct:.2f}%")


def test_04_meta_action_oracle():
    corpus = generate_corpus(1000, 404)
    agree = sum(classify(g.gt) == g.command for g in corpus)
    mirror = sum(
        classify(g.gt.mirrored()).lateral is g.command.lateral.mirrored()
        and classify(g.gt.mirrored()).longitudinal is g.command.longitudinal
        for g in corpus
    )
    report(4, "meta-action oracle round trip", agree == 1000 and mirror == 1000,
           f"{agree}/1000 labels recovered, {mirror}/1000 mirror-consistent")


def test_05_confidence_law():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        p = rng.uniform(1e-3, 1.0, rng.integers(1, 19))
        direct = float(np.prod(p)) ** (1.0 / len(p))
        worst = max(worst, abs(confidence(p) - direct))
    uniform_ok = all(confidence(np.full(18, 1.0 / v)) == 1.0 / v for v in (2, 8, 9, 61, 131))
    report(5, "confidence law", worst < 1e-12 and uniform_ok,
           f"max |delta| {worst:.1e} over 1000 lists, uniform case exact: {uniform_ok}")


def test_06_vae_variance_law():
    worst = max(abs(latent_variance(s, a) - a * (1.0 - s))
                for s in np.linspace(0.01, 1.0, 50) for a in np.linspace(0.05, 5.0, 50))
    planner = Planner(RefineConfig())
    traj = Trajectory(np.stack([5.0 * np.arange(1, 9), np.zeros(8)], 1))
    draws = [encode_vae(traj, 1.0, 0.5, planner, seed=i).z for i in range(100)]
    fixed = all(np.array_equal(z, draws[0]) for z in draws)
    report(6, "VAE variance law", worst == 0.0 and fixed,
           f"max |delta| {worst:.1e} on a 50x50 grid, s=1 deterministic over 100 seeds: {fixed}")


def test_07_kl_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        mu = rng.normal(0.0, 1.5, 4)
        s2 = float(rng.uniform(0.05, 3.0))
        sd = math.sqrt(s2)
        numeric = 0.0
        for m in mu:
            p = stats.norm(m, sd)
            f = lambda x: p.pdf(x) * (p.logpdf(x) - stats.norm.logpdf(x))
            numeric += integrate.quad(f, m - 12 * sd, m + 12 * sd, limit=200, epsabs=1e-12)[0]
        worst = max(worst, abs(kl_divergence(mu, s2) - numeric))
    report(7, "KL oracle", worst < 1e-4, f"max |closed form - quadrature| {worst:.1e} over 100 draws")


class CandidateLoss(torch.nn.Module):
    """Training loss of candidate 1 for a fixed coarse plan and command."""

    def __init__(self, planner, base, gt):
        super().__init__()
        self.planner, self.base, self.gt = planner, base, gt

    def forward(self):
        p = self.planner
        mu = p.encode(self.base)
        aligned = p.align(mu, p.command_tokens(torch.tensor([0]), torch.tensor([2])))
        cand = p.candidates(aligned, self.base, 2)[:, 1]
        return _refine_loss_torch(cand, self.gt, mu, torch.tensor([0.3], dtype=torch.float64), p.cfg)


def test_08_gradient_check():
    start = time.perf_counter()
    cfg = RefineConfig(lambda_reg=1.0, lambda_kl=0.1, d_z=4, d_cmd=4, n_heads=1, hidden=8, n_candidates=2)
    n_params = sum(p.numel() for p in Planner(cfg).parameters())
    rng = np.random.default_rng(8)
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        gt = rng.normal(0.0, 5.0, (8, 2))
        cand = gt + rng.choice([-1.0, 1.0], (8, 2)) * rng.uniform(0.1, 2.0, (8, 2))  # away from |.| kinks
        mu, s2 = rng.normal(0.0, 1.0, cfg.d_z), float(rng.uniform(0.2, 2.0))
        analytic = np.concatenate([g.ravel() for g in map(np.atleast_1d, refine_loss_grad(cand, gt, mu, s2, cfg))])
        x0 = np.concatenate([cand.ravel(), mu, [s2]])

        def f(x):
            return refine_loss(x[:16].reshape(8, 2), gt, x[16:16 + cfg.d_z], x[-1], cfg)

        numeric = np.array([(f(x0 + h * e) - f(x0 - h * e)) / (2 * h) for e in np.eye(x0.size)])
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-3))))
    # the same loss through the planner network, float64 autograd against finite differences
    p = Planner(cfg).double()
    torch.nn.init.normal_(p.decoder[-1].weight, std=0.1)
    torch.nn.init.normal_(p.attn.out_proj.weight, std=0.1)
    base = torch.tensor(np.stack([5.0 * np.arange(1, 9), np.zeros(8)], 1)[None])
    loss = CandidateLoss(p, base, base + 0.7)
    names = ("planner.decoder.4.weight", "planner.attn.out_proj.weight", "planner.encoder.0.weight")
    params = dict(loss.named_parameters())
    inputs = tuple(params[k].detach().clone().requires_grad_(True) for k in names)

    def net_loss(*tensors):
        return functional_call(loss, {**params, **dict(zip(names, tensors))}, ())

    net_ok = torch.autograd.gradcheck(net_loss, inputs, eps=1e-6, atol=1e-7, rtol=1e-4)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and net_ok and n_params <= 1000 and elapsed < 10.0
    report(8, "refinement loss gradient check", ok,
           f"max rel error {worst:.1e}, network gradcheck {net_ok}, {n_params} params, {elapsed:.2f} s")


def test_09_scorer_gates_and_monotonicity():
    t = 0.5 * np.arange(1, 9)
    corridor = np.array([[-20, -5], [120, -5], [120, 5], [-20, 5]], dtype=float)
    centerline = np.array([[-20.0, 0.0], [120.0, 0.0]])
    history = np.stack([10.0 * 0.5 * np.arange(-4, 1), np.zeros(5)], 1)
    line = Trajectory(np.stack([10.0 * t, np.zeros(8)], 1))
    crash = sc.Scene(corridor, centerline, (sc.Obstacle((20.0, 0.0), 4.0, 2.0),), "green", math.inf, 10.0, history)
    clear = sc.Scene(corridor, centerline, (), "green", math.inf, 10.0, history)
    c0, c1 = sc.score(line, crash), sc.score(line, clear)
    rng = np.random.default_rng(9)
    increases = 0
    for _ in range(2000):
        v = dict(zip(sc.METRICS, rng.random(9)))
        base = sc.epdms(**v)
        m = sc.METRICS[rng.integers(9)]
        v[m] = rng.uniform(0.0, v[m])
        increases += sc.epdms(**v) > base
    ones = dict.fromkeys(sc.METRICS, 1.0)
    worked = sc.epdms(**{**ones, "ep": 0.5})
    ok = c0.nc == 0.0 and c0.epdms == 0.0 and c1.epdms == 1.0 and increases == 0 and worked == 0.84375
    report(9, "scorer gates and monotonicity", ok,
           f"collision epdms {c0.epdms}, perfect epdms {c1.epdms}, {increases} increases in 2000 perturbations, "
           f"worked example {worked}")


def test_10_selection_optimality():
    corpus = generate_corpus(100, 1010)
    planner = Planner(RefineConfig(n_candidates=16))
    torch.nn.init.normal_(planner.decoder[-1].weight, std=0.5)
    rng = np.random.default_rng(10)
    matches = 0
    for g in corpus:
        z = rng.normal(size=planner.cfg.d_z)
        base = Trajectory(g.gt.waypoints + rng.normal(0, 1.0, (8, 2)))
        cands = generate_candidates(z, base, 16, planner)
        chosen, card = score_and_select(cands, g.scene)
        scores = [sc.score(c, g.scene).epdms for c in cands]
        best = max(range(16), key=lambda i: (scores[i], -i))
        matches += chosen is cands[best] and card.epdms == max(scores)
    report(10, "selection optimality", matches == 100, f"{matches}/100 scenes match the brute-force argmax")


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    runs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(f"pipeline_{name}")
        start = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "histvla.cli", "pipeline", "--out", str(out)],
                              capture_output=True, text=True)
        runs.append((out, proc, time.perf_counter() - start))
    return runs


@pytest.mark.slow
def test_11_refinement_dominance(pipeline_runs):
    out, proc, elapsed = pipeline_runs[0]
    assert proc.returncode == 0, proc.stderr
    with open(out / "eval.csv", newline="") as f:
        table = list(csv.DictReader(f))
    e0 = np.array([float(r["epdms_coarse"]) for r in table])
    e1 = np.array([float(r["epdms_refined"]) for r in table])
    imperfect = e0 < 1.0
    frac = float(np.mean(e1[imperfect] > e0[imperfect])) if imperfect.any() else 1.0
    ok = len(table) == 100 and e1.mean() >= e0.mean() and frac >= 0.6 and elapsed < 30 * 60
    report(11, "end-to-end refinement dominance", ok,
           f"mean EPDMS {e0.mean():.4f} -> {e1.mean():.4f}, improved on {100 * frac:.1f}% of "
           f"{int(imperfect.sum())} imperfect scenes, pipeline {elapsed:.0f} s")


@pytest.mark.slow
def test_trained_policy_command_accuracy(pipeline_runs):
    out, proc, _ = pipeline_runs[0]
    assert proc.returncode == 0, proc.stderr
    with open(out / "policy_metrics.csv", newline="") as f:
        metrics = {r["metric"]: float(r["value"]) for r in csv.DictReader(f)}
    assert metrics["command_accuracy"] > 0.9


@pytest.mark.slow
def test_12_reproducibility(pipeline_runs):
    (a, pa, _), (b, pb, _) = pipeline_runs
    assert pa.returncode == 0 and pb.returncode == 0
    csvs = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    others = sorted(p.relative_to(b) for p in b.rglob("*.csv"))
    differ = [str(p) for p in csvs if p not in others or (a / p).read_bytes() != (b / p).read_bytes()]
    same_set = csvs == others
    report(12, "reproducibility", same_set and not differ and len(csvs) > 0,
           f"{len(csvs) - len(differ)}/{len(csvs)} CSV files byte-identical across two runs")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
