"""Command-line entry point.

Exit codes: 0 success, 2 configuration or validation error, 3 I/O or file
format error, 4 numerical failure, 5 benchmark finished with failed arms.
Machine-readable summaries go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from novscope import config as cfgmod
from novscope.acquisition import BudgetExceeded
from novscope.io import FormatError, read_dataset, write_bytes, write_checkpoint, write_dataset
from novscope.loop import (
    SUMMARY_METRICS,
    ConfigError,
    RunResult,
    TrajectoryLog,
    arm_config,
    replay,
    run_benchmark,
    run_experiment,
)
from novscope.metrics import fmt
from novscope.surrogate import FactorizationError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_ARMS = 0, 2, 3, 4, 5

PLOT_FILES = {
    "coverage_target.csv": "target_cov",
    "coverage_patch.csv": "patch_cov",
    "coverage_feat.csv": "feat_cov",
    "mae.csv": "mae",
    "surrogate_mean.csv": "surrogate_mean",
    "surrogate_uncertainty.csv": "surrogate_uncertainty",
    "dispersion.csv": "dispersion",
}

log = logging.getLogger("novscope")


class OutputDirError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# helpers


def prepare_outdir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise OutputDirError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputDirError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_text(path, text: str) -> None:
    write_bytes(path, text.encode())


def _resolved(args, extra: dict) -> dict:
    values = cfgmod.load(args.config)
    values.update(cfgmod.parse_overrides(args.set or []))
    values.update({k: v for k, v in extra.items() if v is not None})
    return cfgmod.resolve(values)


def load_dataset(resolved: dict):
    if resolved["dataset.path"]:
        return read_dataset(resolved["dataset.path"])
    return cfgmod.build_dataset(cfgmod.generator_spec(resolved))


def dataset_summary(ds) -> str:
    fields = [
        f"height={ds.shape[0]}",
        f"width={ds.shape[1]}",
        f"patch_size={ds.patch_size}",
        f"candidates={ds.n_candidates}",
        f"has_map={int(ds.has_map)}",
    ]
    if ds.has_map:
        fields += [f"y_min={fmt(ds.scalar_map.min())}", f"y_max={fmt(ds.scalar_map.max())}"]
    return " ".join(fields)


def write_run(out: Path, result: RunResult, record_timings: bool) -> None:
    write_text(out / "trajectory.csv", result.trajectory.to_csv(record_timings))
    write_text(out / "metrics.csv", result.metrics.to_csv())
    write_checkpoint(out / "checkpoint.dkl", result.surrogate)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    extra = {
        "dataset.kind": args.kind,
        "dataset.height": args.size if args.height is None else args.height,
        "dataset.width": args.size if args.width is None else args.width,
        "dataset.seed": args.seed,
        "dataset.n_particles": args.n,
        "dataset.patch_size": args.patch_size,
        "dataset.noise_std": args.noise_std,
    }
    resolved = _resolved(args, extra)
    spec = cfgmod.generator_spec(resolved)
    ds = cfgmod.build_dataset(spec)
    out = Path(args.out)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, ds)
    print(f"kind={spec.kind} {dataset_summary(ds)} path={out}")
    return EXIT_OK


def cmd_run(args) -> int:
    extra = {"run.policy": args.policy, "run.budget": args.budget, "seed": args.seed, "dataset.path": args.dataset}
    resolved = _resolved(args, extra)
    exp = cfgmod.experiment_config(resolved)
    out = prepare_outdir(args.out, args.force)
    write_text(out / "config.txt", cfgmod.render(resolved))
    ds = load_dataset(resolved)
    exp.validate(ds)
    log.info("running %s for %d steps on %d candidates", exp.policy, exp.budget, ds.n_candidates)
    result = run_experiment(exp, ds, keep_scores=resolved["run.export_scores"])
    write_run(out, result, resolved["run.record_timings"])
    if result.scores is not None:
        buf = io.BytesIO()
        np.save(buf, result.scores)
        write_bytes(out / "scores.npy", buf.getvalue())
    m = result.metrics
    print(
        f"candidates={ds.n_candidates} steps={len(result.trajectory)} policy={exp.policy} "
        f"patch_cov={fmt(m.patch_cov[-1])} feat_cov={fmt(m.feat_cov[-1])} "
        f"target_cov={fmt(m.target_cov[-1])} run_dir={out}"
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    extra = {
        "run.budget": args.budget,
        "seed": args.seed,
        "dataset.path": args.dataset,
        "bench.policies": args.policies.split(",") if args.policies else None,
        "bench.seeds": [int(s) for s in args.seeds.split(",")] if args.seeds else None,
        "bench.jobs": args.jobs,
    }
    resolved = _resolved(args, extra)
    exp = cfgmod.experiment_config(resolved)
    policies, seeds = resolved["bench.policies"], resolved["bench.seeds"]
    if not policies or not seeds:
        raise ConfigError("bench needs at least one policy and one seed")
    if len(set(seeds)) != len(seeds) or len(set(policies)) != len(policies):
        raise ConfigError("bench policies and seeds must not repeat")
    out = prepare_outdir(args.out, args.force)
    write_text(out / "config.txt", cfgmod.render(resolved))
    ds = load_dataset(resolved)
    record = resolved["run.record_timings"]

    def on_arm(policy, seed, result, error):
        arm_dir = out / f"{policy}_seed{seed}"
        arm_dir.mkdir(exist_ok=True)
        arm_resolved = dict(resolved, **{"run.policy": policy, "seed": seed})
        arm_resolved["metrics.seed"] = arm_config(exp, policy, seed).metrics.seed
        write_text(arm_dir / "config.txt", cfgmod.render(arm_resolved))
        if result is not None:
            write_run(arm_dir, result, record)
            print(f"arm={policy}_seed{seed} status=ok", flush=True)
        else:
            print(f"arm={policy}_seed{seed} status=failed", flush=True)

    bench = run_benchmark(exp, ds, policies, seeds, jobs=resolved["bench.jobs"], on_arm=on_arm)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("policy", "seed", "error"))
    writer.writerows(bench.failures)
    write_text(out / "failures.csv", buf.getvalue())
    write_text(out / "summary.csv", bench.summary_csv())
    print(f"arms={len(policies) * len(seeds)} failed={len(bench.failures)} steps={exp.budget} bench_dir={out}")
    for p, s, err in bench.failures:
        log.error("arm %s seed %d failed: %s", p, s, err)
    return EXIT_ARMS if bench.failures else EXIT_OK


def cmd_metrics(args) -> int:
    run_dir = Path(args.run_dir)
    values = cfgmod.parse_text((run_dir / "config.txt").read_text(), str(run_dir / "config.txt"))
    if args.dataset:
        values["dataset.path"] = args.dataset
    resolved = cfgmod.resolve(values)
    exp = cfgmod.experiment_config(resolved)
    ds = load_dataset(resolved)
    traj = TrajectoryLog.from_csv((run_dir / "trajectory.csv").read_text())
    series = replay(exp, ds, traj)
    text = series.to_csv()
    if args.out:
        write_text(args.out, text)
        print(f"steps={len(series)} metrics={args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def read_summary(path: Path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        fields = reader.fieldnames or []
    needed = ["policy", "step"] + [f"{m}_{q}" for m in SUMMARY_METRICS for q in ("median", "q25", "q75")]
    missing = [c for c in needed if c not in fields]
    if missing:
        raise ConfigError(f"{path} lacks columns: {', '.join(missing)}")
    return rows, fields


def cmd_export_plots(args) -> int:
    bench_dir = Path(args.bench_dir)
    rows, _ = read_summary(bench_dir / "summary.csv")
    policies = sorted({r["policy"] for r in rows}, key=[r["policy"] for r in rows].index)
    if not policies:
        raise ConfigError(f"{bench_dir / 'summary.csv'} holds no policies; nothing to export")
    out = prepare_outdir(args.out or bench_dir / "plots", args.force)
    for name, metric in PLOT_FILES.items():
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("policy", "step", "median", "q25", "q75"))
        for r in rows:
            writer.writerow([r["policy"], r["step"]] + [r[f"{metric}_{q}"] for q in ("median", "q25", "q75")])
        write_text(out / name, buf.getvalue())
    print(f"policies={','.join(policies)} files={len(PLOT_FILES)} plot_dir={out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="novscope", description="Novelty-driven active learning on scan twins.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", "-c", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        if out_required:
            p.add_argument("--out", "-o", required=True, help="output path")

    g = sub.add_parser("generate", help="write a synthetic MDT1 dataset")
    common(g)
    g.add_argument("--kind", choices=cfgmod.DATASET_KINDS)
    g.add_argument("--size", type=int, help="height and width")
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--seed", type=int, help="generator seed")
    g.add_argument("--n", type=int, help="particle count")
    g.add_argument("--patch-size", type=int)
    g.add_argument("--noise-std", type=float, help="oracle noise stored in the file")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run one active-learning experiment")
    common(r)
    r.add_argument("--dataset", help="MDT1 file (overrides dataset.path)")
    r.add_argument("--policy")
    r.add_argument("--budget", type=int)
    r.add_argument("--seed", type=int, help="master seed")
    r.add_argument("--force", action="store_true", help="write into a non-empty directory")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run a policy x seed benchmark sweep")
    common(b)
    b.add_argument("--dataset", help="MDT1 file (overrides dataset.path)")
    b.add_argument("--policies", help="comma-separated list, e.g. ei,mu,beacon")
    b.add_argument("--seeds", help="comma-separated master seeds")
    b.add_argument("--budget", type=int)
    b.add_argument("--seed", type=int, help="seed for the shared metric models")
    b.add_argument("--jobs", type=int, help="parallel arms")
    b.add_argument("--force", action="store_true")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("metrics", help="recompute the metric series of a run directory")
    m.add_argument("run_dir")
    m.add_argument("--dataset", help="MDT1 file (overrides the run's dataset.path)")
    m.add_argument("--out", "-o", help="write CSV here instead of stdout")
    m.set_defaults(func=cmd_metrics)

    e = sub.add_parser("export-plots", help="write per-panel plot-data CSVs from a benchmark")
    e.add_argument("bench_dir")
    e.add_argument("--out", "-o", help="output directory (default BENCH_DIR/plots)")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_export_plots)
    return parser


def configure_logging(verbose: bool) -> None:
    """Send package diagnostics to the current stderr, replacing any earlier handler."""
    for h in list(log.handlers):
        if getattr(h, "_novscope", False):
            log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    handler._novscope = True
    log.addHandler(handler)
    log.setLevel(logging.INFO if verbose else logging.WARNING)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except (FactorizationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        log.error("i/o error: %s", exc)
        return EXIT_IO
    except (ConfigError, BudgetExceeded, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
