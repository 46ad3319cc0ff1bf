"""Config-driven experiment runner and command-line interface.

A configuration is a YAML document::

    name: poisson-hier
    problem: poisson2d
    seed: 0
    repeats: 1
    samples: {interior: 400, boundary: 400}
    optimizer: {lr: 1.0e-3}
    weighting: {mode: ntk, every: 100}
    variants:
      - name: hierarchical
        levels:
          - {network: {type: fourier, sigmas: [1]}, iterations: 60000}
          - {network: {type: fourier, sigmas: [5]}, iterations: 140000}
    sweep:
      transition: [20000, 40000, 60000]
    reference: {resolution: 201}
    output: {directory: runs/poisson-hier, stride: 100}

``levels`` may be given at the top level instead of ``variants`` for a
single variant. Sweep axes multiply with variants and repeats:

``sigma``
    Values (a number or a list of numbers) replacing the embedding sigmas of
    the levels listed in ``sweep.levels`` (default ``[0]``).
``transition``
    First-level iteration counts for two-level variants; the second level
    receives the rest of the variant's total budget. Ignored by single-level
    variants.
``hidden_widths``
    Width lists for the MLP hidden layers or the Fourier extractor of every level.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import io
import itertools
import json
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .hitrain import HierarchySchedule, LevelSpec, Reference, TrainingDiverged, train
from .nets import dump_parameters, spec_from_dict
from .problems import get_problem, sample
from .refsolve import Grid2D, GridField, reference_solution

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunSpec",
    "RunSummary",
    "parse_config",
    "expand_runs",
    "run_experiments",
    "report",
    "load_summaries",
    "main",
]

log = logging.getLogger(__name__)

WORKERS_ENV = "HIPINN_WORKERS"


class ConfigError(ValueError):
    """All violations found in a configuration, each as ``path: message``."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


# ---------------------------------------------------------------------------
# schema

_TOP = {
    "name", "problem", "seed", "repeats", "samples", "optimizer", "weighting",
    "levels", "variants", "sweep", "reference", "output", "workers",
}
_SAMPLES = {"interior", "boundary", "resample"}
_OPTIMIZER = {"lr", "decay_rate", "decay_steps"}
_WEIGHTING = {"mode", "every"}
_LEVEL = {"network", "iterations", "lr", "weighting", "formulation"}
_NETWORK = {"mlp": {"type", "hidden"}, "fourier": {"type", "sigmas", "features", "extractor", "dense"}}
_SWEEP = {"sigma", "transition", "hidden_widths", "levels"}
_REFERENCE = {"resolution", "refine"}
_OUTPUT = {"directory", "stride"}

DEFAULTS = {
    "name": "experiment",
    "seed": 0,
    "repeats": 1,
    "samples": {"interior": 400, "boundary": 400, "resample": False},
    "optimizer": {"lr": 1e-3, "decay_rate": None, "decay_steps": 1000},
    "weighting": {"mode": "ntk", "every": 100},
    "sweep": {},
    "reference": {"resolution": 201, "refine": None},
    "output": {"directory": "runs", "stride": 100},
    "workers": 1,
}


class _Checker:
    def __init__(self):
        self.errors: list[str] = []

    def add(self, path, msg):
        self.errors.append(f"{path}: {msg}")

    def keys(self, d, allowed, path):
        if not isinstance(d, dict):
            self.add(path, "must be a mapping")
            return False
        for k in d:
            if k not in allowed:
                self.add(f"{path}.{k}" if path else k, "unknown key")
        return True

    def number(self, value, path, positive=True, integer=False, allow_zero=False):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and integer:
            ok = float(value).is_integer()
        if not ok:
            self.add(path, "must be an integer" if integer else "must be a number")
            return False
        if positive and not (value > 0 or (allow_zero and value == 0)):
            self.add(path, "must be non-negative" if allow_zero else "must be positive")
            return False
        return True


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_network(c: _Checker, net, path):
    if not isinstance(net, dict):
        c.add(path, "must be a mapping")
        return
    kind = net.get("type", "mlp")
    if kind not in _NETWORK:
        c.add(f"{path}.type", f"unknown network type {kind!r}")
        return
    c.keys(net, _NETWORK[kind], path)
    if kind == "mlp":
        _check_widths(c, net.get("hidden"), f"{path}.hidden", required=True)
    else:
        sig = net.get("sigmas")
        if sig is None:
            c.add(f"{path}.sigmas", "missing required field")
        else:
            _check_sigmas(c, sig, f"{path}.sigmas")
        if "features" in net:
            c.number(net["features"], f"{path}.features", integer=True)
        if "extractor" in net:
            _check_widths(c, net["extractor"], f"{path}.extractor")
        if "dense" in net:
            c.number(net["dense"], f"{path}.dense", integer=True)


def _check_sigmas(c, sig, path):
    vals = sig if isinstance(sig, list) else [sig]
    if not vals:
        c.add(path, "must not be empty")
    for i, s in enumerate(vals):
        c.number(s, f"{path}[{i}]" if isinstance(sig, list) else path)


def _check_widths(c, widths, path, required=False):
    if widths is None:
        if required:
            c.add(path, "missing required field")
        return
    if not isinstance(widths, list) or not widths:
        c.add(path, "must be a non-empty list of widths")
        return
    for i, w in enumerate(widths):
        c.number(w, f"{path}[{i}]", integer=True)


def _check_level(c, lv, path):
    if not c.keys(lv, _LEVEL, path):
        return
    if "network" not in lv:
        c.add(f"{path}.network", "missing required field")
    else:
        _check_network(c, lv["network"], f"{path}.network")
    if "iterations" not in lv:
        c.add(f"{path}.iterations", "missing required field")
    else:
        c.number(lv["iterations"], f"{path}.iterations", integer=True)
    if "lr" in lv:
        c.number(lv["lr"], f"{path}.lr")
    if "weighting" in lv and lv["weighting"] not in ("none", "ntk", "gradnorm"):
        c.add(f"{path}.weighting", "must be one of none, ntk, gradnorm")
    if "formulation" in lv and lv["formulation"] not in ("composite", "shifted"):
        c.add(f"{path}.formulation", "must be composite or shifted")


@dataclass
class ExperimentConfig:
    """Validated configuration with defaults applied (see the module docstring)."""

    data: dict

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def variants(self) -> list[dict]:
        return self.data["variants"]

    def hash(self) -> str:
        return config_hash(self.data)


def config_hash(data) -> str:
    text = json.dumps(data, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML configuration.

    Raises
    ------
    ConfigError
        Listing every violation with its field path.
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"<document>: not valid YAML ({exc})"]) from None
    c = _Checker()
    if not c.keys(raw, _TOP, ""):
        raise ConfigError(c.errors)
    if "problem" not in raw:
        c.add("problem", "missing required field")
    else:
        try:
            get_problem(str(raw["problem"]))
        except KeyError as exc:
            c.add("problem", str(exc.args[0]))
    has_levels, has_variants = "levels" in raw, "variants" in raw
    if has_levels == has_variants:
        c.add("levels", "give exactly one of levels or variants")
    data = _merge(DEFAULTS, {k: v for k, v in raw.items() if k not in ("levels", "variants")})
    if has_levels:
        variants = [{"name": "main", "levels": raw["levels"]}]
    else:
        variants = raw.get("variants") or []
        if not isinstance(variants, list) or not variants:
            c.add("variants", "must be a non-empty list")
            variants = []
    for i, var in enumerate(variants):
        vpath = "levels" if has_levels else f"variants[{i}]"
        if not has_levels:
            if not c.keys(var, {"name", "levels"}, vpath):
                continue
            var.setdefault("name", f"variant{i}")
        levels = var.get("levels")
        lpath = vpath if has_levels else f"{vpath}.levels"
        if not isinstance(levels, list) or not levels:
            c.add(lpath, "must be a non-empty list of levels")
            continue
        for j, lv in enumerate(levels):
            _check_level(c, lv, f"{lpath}[{j}]")
    names = [v.get("name") for v in variants if isinstance(v, dict)]
    if len(set(names)) != len(names):
        c.add("variants", "variant names must be unique")
    data["variants"] = variants

    for key, allowed in (
        ("samples", _SAMPLES), ("optimizer", _OPTIMIZER), ("weighting", _WEIGHTING),
        ("sweep", _SWEEP), ("reference", _REFERENCE), ("output", _OUTPUT),
    ):
        c.keys(data[key], allowed, key)
    c.number(data["seed"], "seed", positive=False, integer=True)
    c.number(data["repeats"], "repeats", integer=True)
    c.number(data["workers"], "workers", integer=True)
    s = data["samples"]
    c.number(s["interior"], "samples.interior", integer=True)
    if isinstance(s["boundary"], dict):
        for k, v in s["boundary"].items():
            c.number(v, f"samples.boundary.{k}", integer=True)
    else:
        c.number(s["boundary"], "samples.boundary", integer=True)
    o = data["optimizer"]
    c.number(o["lr"], "optimizer.lr")
    if o["decay_rate"] is not None:
        c.number(o["decay_rate"], "optimizer.decay_rate")
    c.number(o["decay_steps"], "optimizer.decay_steps", integer=True)
    w = data["weighting"]
    if w["mode"] not in ("none", "ntk", "gradnorm"):
        c.add("weighting.mode", "must be one of none, ntk, gradnorm")
    c.number(w["every"], "weighting.every", integer=True)
    c.number(data["reference"]["resolution"], "reference.resolution", integer=True)
    c.number(data["output"]["stride"], "output.stride", integer=True)
    sw = data["sweep"]
    if isinstance(sw, dict):
        for i, v in enumerate(_axis(sw, "sigma", c)):
            _check_sigmas(c, v, f"sweep.sigma[{i}]")
        for i, v in enumerate(_axis(sw, "transition", c)):
            c.number(v, f"sweep.transition[{i}]", integer=True)
        for i, v in enumerate(_axis(sw, "hidden_widths", c)):
            _check_widths(c, v, f"sweep.hidden_widths[{i}]", required=True)
        for i, v in enumerate(_axis(sw, "levels", c)):
            c.number(v, f"sweep.levels[{i}]", positive=False, integer=True)
        if "transition" in sw:
            for i, var in enumerate(variants):
                lv = var.get("levels") or []
                if len(lv) > 2:
                    c.add(f"variants[{i}]", "transition sweeps need variants with at most two levels")
                elif len(lv) == 2:
                    total = sum(int(x.get("iterations", 0)) for x in lv)
                    for t in sw.get("transition") or []:
                        if isinstance(t, (int, float)) and not 0 < t < total:
                            c.add("sweep.transition", f"{t} outside (0, {total}) for variant {var.get('name')!r}")
    if c.errors:
        raise ConfigError(c.errors)
    return ExperimentConfig(data)


def _axis(sw, key, c):
    vals = sw.get(key)
    if vals is None:
        return []
    if not isinstance(vals, list) or not vals:
        c.add(f"sweep.{key}", "must be a non-empty list")
        return []
    return vals


# ---------------------------------------------------------------------------
# run expansion


@dataclass
class RunSpec:
    index: int
    run_id: str
    variant: str
    repeat: int
    axes: dict
    levels: list
    seed: int
    sample_seed: int


def derive_seed(master: int, index: int) -> int:
    """Seed for run ``index`` hashed from the master seed."""
    digest = hashlib.sha256(f"{int(master)}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def expand_runs(config: ExperimentConfig) -> list[RunSpec]:
    """The finite run matrix: variants x applicable sweep axes x repeats."""
    data = config.data
    sw = data["sweep"]
    target_levels = sw.get("levels", [0])
    runs = []
    for repeat in range(int(data["repeats"])):
        for var in data["variants"]:
            axes = {}
            if "sigma" in sw:
                axes["sigma"] = sw["sigma"]
            if "transition" in sw and len(var["levels"]) == 2:
                axes["transition"] = sw["transition"]
            if "hidden_widths" in sw:
                axes["hidden_widths"] = sw["hidden_widths"]
            for combo in itertools.product(*axes.values()):
                values = dict(zip(axes, combo))
                levels = _apply_axes(var["levels"], values, target_levels)
                index = len(runs)
                tag = "".join(f"_{k}{_tag(v)}" for k, v in values.items())
                runs.append(
                    RunSpec(
                        index,
                        f"{index:03d}_{var['name']}{tag}_r{repeat}",
                        var["name"],
                        repeat,
                        values,
                        levels,
                        derive_seed(data["seed"], index),
                        # shared by all variants of one repeat so comparisons are paired
                        derive_seed(data["seed"], 1_000_000 + repeat),
                    )
                )
    return runs


def _tag(v):
    if isinstance(v, list):
        return "-".join(_tag(x) for x in v)
    return f"{v:g}" if isinstance(v, float) else str(v)


def _apply_axes(levels, values, target_levels):
    levels = copy.deepcopy(levels)
    if "sigma" in values:
        sig = values["sigma"] if isinstance(values["sigma"], list) else [values["sigma"]]
        for m in target_levels:
            if m < len(levels) and levels[m]["network"].get("type") == "fourier":
                levels[m]["network"]["sigmas"] = list(sig)
    if "transition" in values:
        total = sum(int(lv["iterations"]) for lv in levels)
        levels[0]["iterations"] = int(values["transition"])
        levels[1]["iterations"] = total - int(values["transition"])
    if "hidden_widths" in values:
        for lv in levels:
            key = "hidden" if lv["network"].get("type", "mlp") == "mlp" else "extractor"
            lv["network"][key] = list(values["hidden_widths"])
    return levels


def build_schedule(data: dict, levels: list, input_dim: int) -> HierarchySchedule:
    opt, w = data["optimizer"], data["weighting"]
    return HierarchySchedule(
        [
            LevelSpec(
                spec_from_dict(lv["network"], input_dim),
                int(lv["iterations"]),
                lr=float(lv.get("lr", opt["lr"])),
                decay_rate=opt["decay_rate"],
                decay_steps=int(opt["decay_steps"]),
                weighting=lv.get("weighting", w["mode"]),
                weight_every=int(w["every"]),
                formulation=lv.get("formulation", "composite"),
            )
            for lv in levels
        ]
    )


# ---------------------------------------------------------------------------
# execution


@dataclass
class RunSummary:
    run_id: str
    config_hash: str
    variant: str
    repeat: int
    axes: dict
    seed: int
    status: str
    final_error: float | None
    final_losses: dict
    wall_time: float
    message: str = ""
    files: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _reference_points(problem, resolution):
    grid = Grid2D(resolution) if problem.n == 2 else None
    if grid is not None:
        return grid, grid.points()
    pts = np.linspace(0.0, 1.0, resolution)[:, None]
    return None, pts


def compute_reference(config: ExperimentConfig):
    """Reference values on the comparison grid, computed once per problem."""
    data = config.data
    problem = get_problem(data["problem"])
    res = int(data["reference"]["resolution"])
    grid, pts = _reference_points(problem, res)
    if grid is not None:
        field_ = reference_solution(problem, res, data["reference"]["refine"])
        return pts, field_.values.ravel()
    if problem.exact is None:
        raise ValueError(f"no reference available for {problem.name!r}")
    return pts, problem.exact_values(pts)


def _execute(args) -> RunSummary:
    data, run, ref_pts, ref_vals, out_dir = args
    run_dir = Path(out_dir) / run.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in data.items() if k not in ("variants", "sweep", "repeats", "workers")}
    resolved.update(levels=run.levels, seed=run.seed, sample_seed=run.sample_seed)
    chash = config_hash(resolved)
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    files = [f"{run.run_id}/config.json"]
    t0 = time.perf_counter()
    status, message, final_error, final_losses = "ok", "", None, {}
    trace = None
    try:
        problem = get_problem(data["problem"])
        s = data["samples"]
        samples = sample(problem, int(s["interior"]), s["boundary"], run.sample_seed)
        schedule = build_schedule(data, run.levels, problem.n)
        ref = Reference(ref_pts, ref_vals)
        composite, trace = train(
            problem,
            schedule,
            samples,
            ref,
            seed=run.seed,
            stride=int(data["output"]["stride"]),
            resample=bool(s["resample"]),
        )
        last = trace.rows[-1]
        final_error = last["rel_l2_error"]
        final_losses = {k: v for k, v in last.items() if k.startswith("loss_")}
        pred = composite.predict(ref_pts)
        res = int(data["reference"]["resolution"])
        if problem.n == 2:
            grid = Grid2D(res)
            GridField(grid, pred.reshape(res, res)).to_text(run_dir / "prediction.txt")
            GridField(grid, (pred - ref_vals).reshape(res, res)).to_text(run_dir / "error.txt")
        else:
            np.savetxt(run_dir / "prediction.txt", pred, fmt="%.17g")
            np.savetxt(run_dir / "error.txt", pred - ref_vals, fmt="%.17g")
        files += [f"{run.run_id}/prediction.txt", f"{run.run_id}/error.txt"]
        for m, (net, store) in enumerate(composite.levels):
            name = f"level{m}_parameters.txt"
            (run_dir / name).write_text(dump_parameters(store, net.fixed_arrays()))
            files.append(f"{run.run_id}/{name}")
    except TrainingDiverged as exc:
        status, message, trace = "failed", str(exc), exc.trace
    except Exception as exc:  # crash isolation: one run never stops the sweep
        status, message = "failed", f"{type(exc).__name__}: {exc}"
        log.debug("run %s failed\n%s", run.run_id, traceback.format_exc())
    if trace is not None:
        trace.to_csv(run_dir / "trace.csv")
        files.append(f"{run.run_id}/trace.csv")
    summary = RunSummary(
        run.run_id, chash, run.variant, run.repeat, run.axes, run.seed, status,
        final_error, final_losses, time.perf_counter() - t0, message,
    )
    files.append(f"{run.run_id}/summary.json")
    summary.files = files
    (run_dir / "summary.json").write_text(summary.to_json())
    return summary


def worker_count(config: ExperimentConfig | None = None) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return int(config.data["workers"]) if config is not None else 1


def run_experiments(config: ExperimentConfig, out_dir=None, workers: int | None = None) -> list[RunSummary]:
    """Execute every run of the sweep and write the manifest and report.

    Failed runs are recorded with ``status="failed"`` and do not stop the sweep.
    """
    out = Path(out_dir or config.data["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    runs = expand_runs(config)
    ref_pts, ref_vals = compute_reference(config)
    jobs = [(config.data, r, ref_pts, ref_vals, str(out)) for r in runs]
    workers = workers or worker_count(config)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            summaries = list(pool.map(_execute, jobs))
    else:
        summaries = [_execute(j) for j in jobs]
    text, table = report(summaries)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(table)
    manifest = {
        "name": config.name,
        "config_hash": config.hash(),
        "runs": [{"run_id": s.run_id, "status": s.status, "files": s.files} for s in summaries],
        "files": ["report.txt", "report.csv"] + [f for s in summaries for f in s.files],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return summaries


# ---------------------------------------------------------------------------
# reporting

_REPORT_COLUMNS = ["rank", "best", "run_id", "variant", "repeat", "status", "final_error", "wall_time", "seed"]


def _sort_key(s: RunSummary):
    err = s.final_error
    return (err is None or not np.isfinite(err), err if err is not None else np.inf, s.run_id)


def report(summaries: list[RunSummary]) -> tuple[str, str]:
    """Comparison table sorted by final error, as (aligned text, CSV)."""
    if not summaries:
        raise ValueError("no runs to report")
    ordered = sorted(summaries, key=_sort_key)
    rows = []
    for rank, s in enumerate(ordered, 1):
        rows.append(
            {
                "rank": rank,
                "best": "*" if rank == 1 and s.final_error is not None else "",
                "run_id": s.run_id,
                "variant": s.variant,
                "repeat": s.repeat,
                "status": s.status,
                "final_error": "" if s.final_error is None else repr(float(s.final_error)),
                "wall_time": f"{s.wall_time:.1f}",
                "seed": s.seed,
            }
        )
    buf = io.StringIO()
    buf.write(",".join(_REPORT_COLUMNS) + "\n")
    for r in rows:
        buf.write(",".join(str(r[c]) for c in _REPORT_COLUMNS) + "\n")
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in _REPORT_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in _REPORT_COLUMNS)]
    lines += ["  ".join(str(r[c]).ljust(widths[c]) for c in _REPORT_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n", buf.getvalue()


def load_summaries(sweep_dir) -> list[RunSummary]:
    sweep_dir = Path(sweep_dir)
    manifest = sweep_dir / "manifest.json"
    if manifest.exists():
        ids = [r["run_id"] for r in json.loads(manifest.read_text())["runs"]]
        paths = [sweep_dir / i / "summary.json" for i in ids]
    else:
        paths = sorted(sweep_dir.glob("*/summary.json"))
    return [RunSummary(**json.loads(p.read_text())) for p in paths]


# ---------------------------------------------------------------------------
# command line


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hipinn", description="Hierarchical PINN experiment runner")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute every run of a configuration")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="output directory (overrides output.directory)")
    p_val = sub.add_parser("validate", help="parse and validate a configuration")
    p_val.add_argument("config")
    p_rep = sub.add_parser("report", help="regenerate the comparison table of a sweep")
    p_rep.add_argument("sweep_dir")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    if args.command == "report":
        summaries = load_summaries(args.sweep_dir)
        if not summaries:
            print(f"no run summaries under {args.sweep_dir}", file=sys.stderr)
            return 2
        text, table = report(summaries)
        Path(args.sweep_dir, "report.txt").write_text(text)
        Path(args.sweep_dir, "report.csv").write_text(table)
        print(text, end="")
        return 0

    try:
        config = parse_config(Path(args.config).read_text())
    except OSError as exc:
        print(f"cannot read {args.config}: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    runs = expand_runs(config)
    if args.command == "validate":
        print(f"{args.config}: ok ({len(runs)} runs)")
        return 0
    summaries = run_experiments(config, args.out)
    print(report(summaries)[0], end="")
    return 0 if all(s.status == "ok" for s in summaries) else 1


if __name__ == "__main__":
    sys.exit(main())
