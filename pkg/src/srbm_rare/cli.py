"""Experiment driver: config parsing, orchestration across scales, result files.

Configs are JSON with four blocks (model, scenario, algorithm, output) plus a
seed.  A run resolves one subsolution for the model, then dispatches the
chosen estimator once per requested scale, collecting one report per scale
into a manifest that echoes the fully resolved configuration so the
experiment can be rerun bit-identically.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from datetime import datetime, timezone

import copy
import csv
import io
import json
import os
import sys
import time

import click
import numpy as np

from . import __version__
from .estimators import (
    SplitConfig,
    restart_estimate,
    splitting_estimate,
    standard_mc,
)
from .model import ModelError, Scenario, validate
from .simulate import DEFAULT_MAX_STEPS, SimConfig
from .subsolution import exact_2d_subsolution, scaled_l1_subsolution

ALGORITHMS = ("mc", "split", "restart")
FORMATS = ("json", "csv")
CSV_COLUMNS = (
    "n",
    "estimate",
    "std_error",
    "ci_lo",
    "ci_hi",
    "particles_mean",
    "particles_std",
    "particles_max",
    "timeouts",
    "wall_time",
)

THREADS_ENV = "SRBM_RARE_THREADS"


class ParseError(ValueError):
    """Malformed configuration text or structure."""


class ValidationError(ValueError):
    """Configuration parsed but failed semantic validation."""


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved experiment configuration (JSON-typed fields only)."""

    theta: tuple
    sigma: tuple
    refl: tuple
    m_matrix: bool
    epsilon: float
    start: tuple
    n_list: tuple
    algorithm: str
    split_r: int
    delta: float
    replications: int
    h_base: float
    h_fixed: float | None
    max_steps: int
    particle_cap: int
    sub_kind: str
    sub_resolution: int
    sub_refine_iters: int
    seed: int
    out_path: str
    out_format: str

    def step_size(self, n: int) -> float:
        if self.h_fixed is not None:
            return self.h_fixed
        return self.h_base / n


def _as_matrix(value, name: str) -> tuple:
    try:
        rows = tuple(tuple(float(x) for x in row) for row in value)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"field '{name}' must be a nested array of numbers") from exc
    if not rows or any(len(row) != len(rows) for row in rows):
        raise ParseError(f"field '{name}' must be a square row-major matrix")
    return rows


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON config, filling documented defaults."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ParseError("config must be a JSON object")

    model_blk = raw.get("model")
    if not isinstance(model_blk, dict):
        raise ValidationError("missing or malformed 'model' block")
    for fld in ("theta", "sigma", "refl"):
        if fld not in model_blk:
            raise ValidationError(f"model block is missing required field '{fld}'")
    try:
        theta = tuple(float(x) for x in model_blk["theta"])
    except (TypeError, ValueError) as exc:
        raise ParseError("field 'theta' must be an array of numbers") from exc
    sigma = _as_matrix(model_blk["sigma"], "sigma")
    refl = _as_matrix(model_blk["refl"], "refl")
    m_matrix = bool(model_blk.get("m_matrix", False))
    try:
        validate(theta, sigma, refl, m_matrix_required=m_matrix)
    except ModelError as exc:
        raise ValidationError(str(exc)) from exc

    scen_blk = raw.get("scenario")
    if not isinstance(scen_blk, dict):
        raise ValidationError("missing or malformed 'scenario' block")
    for fld in ("epsilon", "start", "n"):
        if fld not in scen_blk:
            raise ValidationError(f"scenario block is missing required field '{fld}'")
    epsilon = float(scen_blk["epsilon"])
    start = tuple(float(x) for x in scen_blk["start"])
    n_list = tuple(int(n) for n in scen_blk["n"])
    if not n_list:
        raise ValidationError("scenario field 'n' must list at least one scale")

    algo_blk = raw.get("algorithm")
    if not isinstance(algo_blk, dict):
        raise ValidationError("missing or malformed 'algorithm' block")
    name = algo_blk.get("name")
    if name not in ALGORITHMS:
        raise ParseError(
            f"unknown algorithm {name!r}; valid names are {', '.join(ALGORITHMS)}"
        )
    if "replications" not in algo_blk:
        raise ValidationError("algorithm block is missing required field 'replications'")
    replications = int(algo_blk["replications"])
    split_r = int(algo_blk.get("split_r", 2))
    delta = float(algo_blk.get("delta", 1.0))
    h_base = float(algo_blk.get("h_base", 1.0 / 1000.0))
    h_fixed = algo_blk.get("h_fixed")
    h_fixed = None if h_fixed is None else float(h_fixed)
    max_steps = int(algo_blk.get("max_steps", DEFAULT_MAX_STEPS))
    particle_cap = int(algo_blk.get("particle_cap", 1_000_000))
    if h_fixed is not None and h_fixed <= 0:
        raise ValidationError("h_fixed must be positive")
    if h_base <= 0:
        raise ValidationError("h_base must be positive")

    sub_blk = raw.get("subsolution", {})
    if not isinstance(sub_blk, dict):
        raise ParseError("'subsolution' block must be an object")
    sub_kind = sub_blk.get("kind", "auto")
    if sub_kind not in ("auto", "exact2d", "scaled_l1"):
        raise ParseError(
            f"unknown subsolution kind {sub_kind!r}; valid kinds are auto, exact2d, scaled_l1"
        )
    sub_resolution = int(sub_blk.get("resolution", 16))
    sub_refine_iters = int(sub_blk.get("refine_iters", 60))

    out_blk = raw.get("output", {})
    if not isinstance(out_blk, dict):
        raise ParseError("'output' block must be an object")
    out_format = out_blk.get("format", "json")
    if out_format not in FORMATS:
        raise ParseError(f"unknown output format {out_format!r}; valid formats are json, csv")
    out_path = str(out_blk.get("path", "results"))

    seed = int(raw.get("seed", 0))
    if seed < 0:
        raise ValidationError("seed must be a nonnegative integer")

    return RunConfig(
        theta=theta,
        sigma=sigma,
        refl=refl,
        m_matrix=m_matrix,
        epsilon=epsilon,
        start=start,
        n_list=n_list,
        algorithm=name,
        split_r=split_r,
        delta=delta,
        replications=replications,
        h_base=h_base,
        h_fixed=h_fixed,
        max_steps=max_steps,
        particle_cap=particle_cap,
        sub_kind=sub_kind,
        sub_resolution=sub_resolution,
        sub_refine_iters=sub_refine_iters,
        seed=seed,
        out_path=out_path,
        out_format=out_format,
    )


def config_to_dict(config: RunConfig) -> dict:
    """Manifest echo of the resolved config; reparses to an equal RunConfig."""
    return {
        "model": {
            "theta": list(config.theta),
            "sigma": [list(row) for row in config.sigma],
            "refl": [list(row) for row in config.refl],
            "m_matrix": config.m_matrix,
        },
        "scenario": {
            "epsilon": config.epsilon,
            "start": list(config.start),
            "n": list(config.n_list),
        },
        "algorithm": {
            "name": config.algorithm,
            "split_r": config.split_r,
            "delta": config.delta,
            "replications": config.replications,
            "h_base": config.h_base,
            "h_fixed": config.h_fixed,
            "max_steps": config.max_steps,
            "particle_cap": config.particle_cap,
        },
        "subsolution": {
            "kind": config.sub_kind,
            "resolution": config.sub_resolution,
            "refine_iters": config.sub_refine_iters,
        },
        "seed": config.seed,
        "output": {"path": config.out_path, "format": config.out_format},
    }


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


def _build_subsolution(config: RunConfig, params):
    kind = config.sub_kind
    if kind == "auto":
        kind = "exact2d" if params.d == 2 else "scaled_l1"
    if kind == "exact2d":
        return exact_2d_subsolution(params)
    return scaled_l1_subsolution(
        params,
        resolution=config.sub_resolution,
        refine_iters=config.sub_refine_iters,
    )


def run(config: RunConfig, threads: int | None = None) -> dict:
    """Execute the configured experiment and assemble the manifest."""
    threads = resolve_threads(threads)
    params = validate(config.theta, config.sigma, config.refl, m_matrix_required=config.m_matrix)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    sub = None
    sub_summary = None
    if config.algorithm in ("split", "restart"):
        sub = _build_subsolution(config, params)
        sub_summary = {"kind": sub.kind, "r": sub.r, "inf_b": sub.inf_b}

    results = []
    failures = []
    for n in config.n_list:
        try:
            if n < 1:
                raise ModelError(f"scale n must be a positive integer, got {n}")
            # The configured start is the unscaled anchor z; the scale-n run
            # starts the scaled process at z/n (so the start shrinks toward
            # the origin with the inner set).
            scenario = Scenario(n=n, epsilon=config.epsilon, start=np.asarray(config.start) / n)
            sim_config = SimConfig(
                h=config.step_size(n), max_steps=config.max_steps, rng_seed=config.seed
            )
            if config.algorithm == "mc":
                report = standard_mc(
                    scenario, params, sim_config, config.replications, config.seed,
                    threads=threads,
                )
            else:
                split_config = SplitConfig(
                    split_r=config.split_r,
                    delta=config.delta,
                    replications=config.replications,
                    particle_cap=config.particle_cap,
                )
                estimator = splitting_estimate if config.algorithm == "split" else restart_estimate
                report = estimator(
                    scenario, params, sim_config, split_config, sub,
                    config.replications, config.seed, threads=threads,
                )
            results.append({"n": n, **report.to_dict()})
        except Exception as exc:  # keep remaining scales running
            failures.append({"n": n, "error": f"{type(exc).__name__}: {exc}"})
    return {
        "config": config_to_dict(config),
        "subsolution": sub_summary,
        "results": results,
        "failures": failures,
        "version": __version__,
        "timing": {"started": started, "wall_time_total": time.perf_counter() - t0},
    }


def manifest_fingerprint(manifest: dict) -> str:
    """Canonical JSON with the wall-clock fields removed.

    Wall time is the only nondeterministic content of a manifest; everything
    else must be byte-identical across reruns with the same seed, whatever
    the worker count.
    """
    clone = copy.deepcopy(manifest)
    clone.pop("timing", None)
    for row in clone.get("results", []):
        row["wall_time"] = 0.0
    return json.dumps(clone, sort_keys=True, indent=None)


def render_csv(manifest: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in manifest.get("results", []):
        writer.writerow([row.get(col) for col in CSV_COLUMNS])
    return buf.getvalue()


class IoError(OSError):
    """Failed to write result files."""


def emit(manifest: dict, fmt: str, path: str) -> list[str]:
    """Write the manifest in the requested format; returns written paths."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    base, ext = os.path.splitext(path)
    if ext.lower() in (".json", ".csv"):
        path = base
    target = f"{path}.{fmt}"
    try:
        if fmt == "json":
            with open(target, "w", encoding="utf-8") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)
                fh.write("\n")
        else:
            with open(target, "w", encoding="utf-8", newline="") as fh:
                fh.write(render_csv(manifest))
    except OSError as exc:
        raise IoError(f"cannot write {target}: {exc}") from exc
    return [target]


def _print_summary(manifest: dict):
    for row in manifest.get("results", []):
        se = row.get("std_error")
        se_txt = "n/a" if se is None else f"{se:.3e}"
        click.echo(
            f"n={row['n']}: estimate={row['estimate']:.6e} se={se_txt} "
            f"particles_mean={row['particles_mean']:.2f} "
            f"timeouts={row['timeouts']} wall={row['wall_time']:.1f}s"
        )
    for failure in manifest.get("failures", []):
        click.echo(f"n={failure['n']}: FAILED ({failure['error']})", err=True)


@click.group()
@click.version_option(version=__version__)
def main():
    """Rare-event estimation for reflected diffusions in the orthant."""


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--algorithm", type=click.Choice(ALGORITHMS), default=None, help="Override the configured estimator.")
@click.option("--n", "n_override", default=None, help="Comma-separated list of scales, overriding the config.")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Override the configured seed.")
@click.option("--replications", type=click.IntRange(min=1), default=None)
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help=f"Worker processes (default: {THREADS_ENV} or all cores). Never changes results.")
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
@click.option("--format", "out_format", type=click.Choice(FORMATS), default=None)
def run_command(config_path, algorithm, n_override, seed, replications, threads, out_path, out_format):
    """Run the configured experiment and write the result files."""
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            config = parse_config(fh.read())
        overrides = {}
        if algorithm is not None:
            overrides["algorithm"] = algorithm
        if n_override is not None:
            try:
                overrides["n_list"] = tuple(int(tok) for tok in n_override.split(",") if tok.strip())
            except ValueError as exc:
                raise ParseError(f"--n expects a comma-separated integer list, got {n_override!r}") from exc
            if not overrides["n_list"]:
                raise ParseError("--n produced an empty scale list")
        if seed is not None:
            overrides["seed"] = seed
        if replications is not None:
            overrides["replications"] = replications
        if out_path is not None:
            overrides["out_path"] = out_path
        if out_format is not None:
            overrides["out_format"] = out_format
        if overrides:
            config = RunConfig(**{**asdict(config), **overrides})
    except (ParseError, ValidationError, ModelError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)

    try:
        manifest = run(config, threads=threads)
        written = emit(manifest, config.out_format, config.out_path)
        _print_summary(manifest)
        for path in written:
            click.echo(f"wrote {path}")
    except Exception as exc:
        click.echo(f"runtime failure: {type(exc).__name__}: {exc}", err=True)
        sys.exit(2)
    if manifest.get("failures"):
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
