"""Flat ``key = value`` configuration with strict keys and provenance echo.

Values are Python literals (``3``, ``0.5``, ``true``, ``[0, 1]``, ``'ei'``);
bare words are read as strings. ``#`` starts a comment.
"""

from __future__ import annotations

import ast
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional

from novscope.acquisition import NOVELTY_SPACES, POLICIES, AcquisitionConfig
from novscope.loop import ConfigError, ExperimentConfig, SurrogateConfig
from novscope.metrics import MetricsConfig

SEED_ENV = "NOVSCOPE_SEED"
DATASET_KINDS = ("domains", "particles")
PADDINGS = ("auto", "valid", "same")


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise TypeError("expected true or false")
    return v


def _str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _opt(conv):
    return lambda v: None if v is None else conv(v)


def _choice(options):
    def conv(v):
        v = _str(v).lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v

    return conv


def _list(conv):
    def inner(v):
        if isinstance(v, (str, int)) and not isinstance(v, bool):
            v = [v]
        if not isinstance(v, (list, tuple)):
            raise TypeError("expected a list")
        return [conv(x) for x in v]

    return inner


# key -> (converter, default)
SCHEMA: dict[str, tuple[Callable[[Any], Any], Any]] = {
    "seed": (_opt(_int), None),
    "dataset.path": (_opt(_str), None),
    "dataset.kind": (_choice(DATASET_KINDS), "domains"),
    "dataset.height": (_int, 64),
    "dataset.width": (_int, 64),
    "dataset.patch_size": (_int, 16),
    "dataset.noise_std": (_float, 0.0),
    "dataset.seed": (_int, 0),
    "dataset.stripe_period": (_float, 8.0),
    "dataset.wall_width": (_float, 1.0),
    "dataset.loop_contrast": (_float, 1.0),
    "dataset.n_particles": (_int, 12),
    "dataset.radius_min": (_float, 3.0),
    "dataset.radius_max": (_float, 6.0),
    "dataset.edge_decay": (_float, 3.0),
    "run.policy": (_choice(POLICIES), "beacon"),
    "run.budget": (_int, 300),
    "run.n_seed": (_int, 10),
    "run.cold_start": (_bool, False),
    "run.record_timings": (_bool, False),
    "run.export_scores": (_bool, False),
    "surrogate.c1": (_int, 8),
    "surrogate.c2": (_int, 16),
    "surrogate.latent_dim": (_int, 2),
    "surrogate.padding": (_choice(PADDINGS), "auto"),
    "surrogate.iterations": (_int, 200),
    "surrogate.step_size": (_float, 0.01),
    "acquisition.elite_fraction": (_float, 0.2),
    "acquisition.k": (_int, 1),
    "acquisition.novelty_space": (_choice(NOVELTY_SPACES), "response"),
    "metrics.clusters": (_int, 50),
    "metrics.bins": (_int, 20),
    "metrics.projection_dim": (_int, 32),
    "metrics.seed": (_opt(_int), None),
    "metrics.dispersion_window": (_int, 50),
    "bench.policies": (_list(_choice(POLICIES)), list(POLICIES)),
    "bench.seeds": (_list(_int), list(range(10))),
    "bench.jobs": (_int, 1),
}


class ConfigKeyError(ConfigError):
    pass


def parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        _check_key(key)
        out[key] = parse_value(value)
    return out


def parse_overrides(pairs: Iterable[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key=value")
        key, value = (s.strip() for s in pair.split("=", 1))
        _check_key(key)
        out[key] = parse_value(value)
    return out


def _check_key(key: str) -> None:
    if key not in SCHEMA:
        raise ConfigKeyError(f"unknown config key: {key}")


def load(path: Optional[str]) -> dict:
    if path is None:
        return {}
    return parse_text(Path(path).read_text(), str(path))


def resolve(values: Mapping[str, Any], env: Optional[Mapping[str, str]] = None) -> dict:
    """Materialize every key, validating types.

    The master seed comes from ``seed`` if set, else from the environment
    variable, else 0.
    """
    env = os.environ if env is None else env
    out = {}
    for key, (conv, default) in SCHEMA.items():
        raw = values.get(key, default)
        try:
            out[key] = conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc} (got {raw!r})") from exc
    if out["seed"] is None:
        env_seed = env.get(SEED_ENV)
        try:
            out["seed"] = int(env_seed) if env_seed not in (None, "") else 0
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
    if out["metrics.seed"] is None:
        out["metrics.seed"] = out["seed"]
    if out["dataset.radius_min"] > out["dataset.radius_max"]:
        raise ConfigError("dataset.radius_min exceeds dataset.radius_max")
    if out["bench.jobs"] < 1:
        raise ConfigError("bench.jobs must be at least 1")
    return out


def render(resolved: Mapping[str, Any]) -> str:
    """Text form of a resolved config; parsing it back reproduces the mapping."""
    lines = ["# resolved configuration"]
    for key in SCHEMA:
        lines.append(f"{key} = {resolved[key]!r}")
    return "\n".join(lines) + "\n"


def experiment_config(r: Mapping[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig(
            policy=r["run.policy"],
            budget=r["run.budget"],
            n_seed=r["run.n_seed"],
            seed=r["seed"],
            cold_start=r["run.cold_start"],
            surrogate=SurrogateConfig(
                c1=r["surrogate.c1"],
                c2=r["surrogate.c2"],
                latent_dim=r["surrogate.latent_dim"],
                padding=r["surrogate.padding"],
                iterations=r["surrogate.iterations"],
                step_size=r["surrogate.step_size"],
            ),
            acquisition=AcquisitionConfig(
                elite_fraction=r["acquisition.elite_fraction"],
                k=r["acquisition.k"],
                novelty_space=r["acquisition.novelty_space"],
            ),
            metrics=MetricsConfig(
                clusters=r["metrics.clusters"],
                bins=r["metrics.bins"],
                projection_dim=r["metrics.projection_dim"],
                seed=r["metrics.seed"],
                dispersion_window=r["metrics.dispersion_window"],
            ),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    params: dict


def generator_spec(r: Mapping[str, Any]) -> GeneratorSpec:
    common = dict(
        height=r["dataset.height"],
        width=r["dataset.width"],
        seed=r["dataset.seed"],
        patch_size=r["dataset.patch_size"],
        noise_std=r["dataset.noise_std"],
    )
    if r["dataset.kind"] == "domains":
        return GeneratorSpec(
            "domains",
            dict(
                common,
                stripe_period=r["dataset.stripe_period"],
                wall_width=r["dataset.wall_width"],
                loop_contrast=r["dataset.loop_contrast"],
            ),
        )
    return GeneratorSpec(
        "particles",
        dict(
            common,
            n_particles=r["dataset.n_particles"],
            radius_range=(r["dataset.radius_min"], r["dataset.radius_max"]),
            edge_decay=r["dataset.edge_decay"],
        ),
    )


def build_dataset(spec: GeneratorSpec):
    from novscope.synthetic import generate_synthetic_domains, generate_synthetic_particles

    gen = generate_synthetic_domains if spec.kind == "domains" else generate_synthetic_particles
    try:
        return gen(**spec.params)
    except ValueError as exc:
        raise ConfigError(f"invalid {spec.kind} generator spec: {exc}") from exc
