"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The benchmark criteria run the full 3 policies x 10 seeds sweep on the
64x64 domains twin. Training iterations per step for that sweep come from
``NOVSCOPE_ACCEPT_ITERATIONS`` (default 10) and parallel arms from
``NOVSCOPE_ACCEPT_JOBS`` (default 1). Add ``-m "not slow"`` to skip the
sweep and the timing check.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from _helpers import class_slices, make_state, random_patches
from _oracles import central_difference, dense_posterior, ei_quadrature, sort_knn_oracle
from novscope import generate_synthetic_domains
from novscope.acquisition import beacon_score, ei_score, select_elite
from novscope.loop import ExperimentConfig, SurrogateConfig, run_benchmark, spatial_dispersion
from novscope.metrics import MetricsConfig, build_metric_models, coverage_series, coverage_step
from novscope.surrogate import Posterior, TrainSchedule, embed_batch, nll, nll_and_grad, posterior, train

BENCH_ITERATIONS = int(os.environ.get("NOVSCOPE_ACCEPT_ITERATIONS", "10"))
BENCH_JOBS = int(os.environ.get("NOVSCOPE_ACCEPT_JOBS", "1"))
BENCH_SEEDS = list(range(10))
POLICIES = ["ei", "mu", "beacon"]


@pytest.fixture
def report(capsys):
    def emit(number, passed, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {number}: {detail}", flush=True)
        assert passed, detail

    return emit


# ---------------------------------------------------------------------------
# 1-3: surrogate


def test_criterion_01_gp_oracle_equivalence(report):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n, q = int(rng.integers(1, 9)), int(rng.integers(1, 11))
        state = make_state(rng, n=n, hyper=tuple(rng.normal(scale=0.5, size=3) - [0, 0, 2]))
        cand = random_patches(rng, q, 10)
        post = posterior(state, cand)
        z_train = embed_batch(state.extractor, state.inputs.patches)
        mu, var = dense_posterior(z_train, state.targets, embed_batch(state.extractor, cand), state.kernel.as_array())
        worst = max(worst, np.abs(post.mean - mu).max(), np.abs(post.variance - var).max())
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-8 and elapsed < 5.0, f"max |diff| {worst:.2e} (tol 1e-8), {elapsed:.2f} s (limit 5 s)")


def test_criterion_02_nll_gradient_check(report):
    rng = np.random.default_rng(202)
    state = make_state(rng, n=6, hyper=(0.2, -0.3, -2.5))
    theta = state.params()
    _, grad = nll_and_grad(state)
    num = central_difference(lambda t: nll(state.with_params(t)), theta, rel=1e-5)
    errs = {}
    for name, idx in class_slices(state.arch).items():
        denom = max(np.linalg.norm(num[idx]), np.linalg.norm(grad[idx]), 1e-12)
        errs[name] = float(np.linalg.norm(num[idx] - grad[idx]) / denom)
    worst = max(errs, key=errs.get)
    report(2, max(errs.values()) <= 1e-3, f"worst class {worst} rel err {errs[worst]:.2e} (tol 1e-3)")


def test_criterion_03_training_monotonicity(report):
    violations, gains = 0, []
    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        state = make_state(rng, n=int(rng.integers(4, 12)), seed=seed, hyper=tuple(rng.normal(scale=0.5, size=3) - [0, 0, 2]))
        before = nll(state)
        after = nll(train(state, TrainSchedule(iterations=60, seed=seed)))
        violations += after > before + 1e-6
        gains.append(before - after)
    report(3, violations == 0, f"{violations}/20 runs increased the NLL; median decrease {np.median(gains):.3f}")


# ---------------------------------------------------------------------------
# 4-5: acquisition


def test_criterion_04_beacon_scoring_oracle(report):
    rng = np.random.default_rng(404)
    mismatches = 0
    for _ in range(1000):
        elite = select_elite(rng.normal(size=int(rng.integers(1, 20))) * rng.uniform(0.1, 10), float(rng.uniform(0.05, 1)))
        k = int(rng.integers(1, 10))
        sample = rng.normal(size=int(rng.integers(1, 12))) * 3
        mismatches += not np.array_equal(beacon_score(sample, elite, k), sort_knn_oracle(sample, elite, k))
    worst = 0.0
    for _ in range(200):
        y, s = rng.normal(size=15), rng.normal(size=25)
        a, b = float(np.exp(rng.uniform(-5, 5))), float(rng.uniform(-100, 100))
        base = beacon_score(s, select_elite(y, 0.3), 2)
        scaled = beacon_score(a * s + b, select_elite(a * y + b, 0.3), 2)
        worst = max(worst, np.abs(base - scaled).max())
    report(4, mismatches == 0 and worst <= 1e-9, f"{mismatches}/1000 oracle mismatches; affine max |diff| {worst:.2e} (tol 1e-9)")


def test_criterion_05_ei_quadrature(report):
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(100):
        mu, sigma, best = rng.normal(scale=2), rng.uniform(0.01, 3), rng.normal(scale=2)
        got = ei_score(Posterior(np.array([mu]), np.array([sigma**2])), best)[0]
        worst = max(worst, abs(got - ei_quadrature(mu, sigma, best)))
    report(5, worst <= 1e-6, f"max |EI - quadrature| {worst:.2e} (tol 1e-6)")


# ---------------------------------------------------------------------------
# 6: coverage


def test_criterion_06_coverage_properties(report, small_domains):
    models = build_metric_models(small_domains, MetricsConfig(clusters=12, bins=10), seed=6)
    spaces = {"patch": models.patch, "feature": models.feature, "target": models.target}
    n = small_domains.n_candidates
    rng = np.random.default_rng(606)
    failures = []
    for trial in range(60):
        traj = rng.permutation(n)[: int(rng.integers(1, n + 1))]
        for name, model in spaces.items():
            series = coverage_series(model, traj)
            if np.any(np.diff(series) < 0):
                failures.append(f"{name} not monotone (trial {trial})")
            if series[0] != 1 / model.n_regions:
                failures.append(f"{name} first value {series[0]} != 1/{model.n_regions}")
            if coverage_step(model, rng.permutation(traj)) != series[-1]:
                failures.append(f"{name} order dependent (trial {trial})")
    for name, model in spaces.items():
        if coverage_series(model, rng.permutation(n))[-1] != 1.0:
            failures.append(f"{name} does not reach 1.0")
    report(6, not failures, "; ".join(failures[:3]) or "60 fuzzed trajectories x 3 spaces hold all four properties")


# ---------------------------------------------------------------------------
# 7-8: benchmark on the domains twin


@pytest.fixture(scope="module")
def benchmark():
    ds = generate_synthetic_domains(64, 64, seed=0, patch_size=16)
    config = ExperimentConfig(budget=300, n_seed=10, surrogate=SurrogateConfig(iterations=BENCH_ITERATIONS))
    start = time.perf_counter()
    bench = run_benchmark(config, ds, POLICIES, BENCH_SEEDS, jobs=BENCH_JOBS)
    return bench, time.perf_counter() - start


def wins(bench, metric, step, rival, strict=False):
    count = 0
    for s in BENCH_SEEDS:
        ours = bench.runs[("beacon", s)].metrics.column(metric)[step - 1]
        theirs = bench.runs[(rival, s)].metrics.column(metric)[step - 1]
        count += ours > theirs if strict else ours >= theirs
    return count


@pytest.mark.slow
def test_criterion_07_coverage_ordering(report, benchmark):
    bench, elapsed = benchmark
    assert not bench.failures, bench.failures
    checks = {
        "patch@300 vs ei": wins(bench, "patch_cov", 300, "ei"),
        "patch@300 vs mu": wins(bench, "patch_cov", 300, "mu"),
        "feat@300 vs ei": wins(bench, "feat_cov", 300, "ei"),
        "feat@300 vs mu": wins(bench, "feat_cov", 300, "mu"),
        "target@150 vs ei": wins(bench, "target_cov", 150, "ei", strict=True),
    }
    med = {
        (p, m, t): bench.summary[p][m]["median"][t - 1]
        for p in POLICIES
        for m, t in (("patch_cov", 300), ("feat_cov", 300), ("target_cov", 150))
    }
    medians = " ".join(f"{p}:{med[(p, 'patch_cov', 300)]:.2f}/{med[(p, 'feat_cov', 300)]:.2f}/{med[(p, 'target_cov', 150)]:.2f}" for p in POLICIES)
    detail = (
        ", ".join(f"{k} {v}/10" for k, v in checks.items())
        + f"; medians patch/feat/target150 {medians}; {BENCH_ITERATIONS} train iterations, {elapsed / 60:.1f} min"
    )
    report(7, all(v >= 8 for v in checks.values()), detail)


@pytest.mark.slow
def test_criterion_08_ei_collapse(report, benchmark):
    bench, _ = benchmark
    final = {}
    for (policy, seed), run in bench.runs.items():
        final[(policy, seed)] = float(np.mean(spatial_dispersion(run.trajectory, 50)[-100:]))
    count = sum(final[("ei", s)] < final[("beacon", s)] for s in BENCH_SEEDS)
    ei_med = np.median([final[("ei", s)] for s in BENCH_SEEDS])
    bn_med = np.median([final[("beacon", s)] for s in BENCH_SEEDS])
    report(8, count >= 8, f"EI below BEACON in {count}/10 seeds; median dispersion EI {ei_med:.2f} vs BEACON {bn_med:.2f} px")


# ---------------------------------------------------------------------------
# 9: timing decomposition at the default surrogate profile


@pytest.mark.slow
def test_criterion_09_timing_decomposition(report):
    ds = generate_synthetic_domains(64, 64, seed=0, patch_size=16)
    config = ExperimentConfig(budget=40, n_seed=10)
    assert config.surrogate.iterations == 200
    bench = run_benchmark(config, ds, POLICIES, [0])
    train_ms, score_ms = {}, {}
    for p in POLICIES:
        traj = bench.runs[(p, 0)].trajectory
        train_ms[p] = float(np.median(traj.train_ms[10:]))
        score_ms[p] = float(np.median(traj.score_ms[10:]))
    ratio = {p: score_ms[p] / train_ms[p] for p in POLICIES}
    ok = all(r < 0.2 for r in ratio.values()) and score_ms["beacon"] > max(score_ms["ei"], score_ms["mu"])
    detail = " ".join(f"{p}: score {score_ms[p]:.3f} ms / train {train_ms[p]:.1f} ms ({100 * ratio[p]:.2f}%)" for p in POLICIES)
    report(9, ok, detail)


# ---------------------------------------------------------------------------
# 10: CLI determinism


def cli(*args, cwd):
    proc = subprocess.run([sys.executable, "-m", "novscope", *map(str, args)], cwd=cwd, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def output_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.suffix in (".csv", ".dkl", ".txt")
    }


def test_criterion_10_determinism(report, tmp_path):
    fast = ["--set", "surrogate.iterations=5", "--set", "metrics.clusters=10", "--set", "run.n_seed=4"]
    cli("generate", "--kind", "domains", "--size", 32, "--patch-size", 8, "--seed", 3, "-o", "d.mdt", cwd=tmp_path)
    for tag in ("a", "b"):
        cli("run", "--dataset", "d.mdt", "--budget", 20, "-o", f"run_{tag}", *fast, cwd=tmp_path)
        cli("bench", "--dataset", "d.mdt", "--policies", "ei,beacon", "--seeds", "0,1", "--budget", 12, "-o", f"bench_{tag}", *fast, cwd=tmp_path)
    diffs = []
    for kind in ("run", "bench"):
        a, b = output_bytes(tmp_path / f"{kind}_a"), output_bytes(tmp_path / f"{kind}_b")
        if a.keys() != b.keys():
            diffs.append(f"{kind} file sets differ")
        diffs += [f"{kind}/{name}" for name in a if a[name] != b.get(name)]
    n_files = len(output_bytes(tmp_path / "run_a")) + len(output_bytes(tmp_path / "bench_a"))
    report(10, not diffs, f"differing files: {', '.join(diffs)}" if diffs else f"{n_files} output files byte-identical across repeats")
