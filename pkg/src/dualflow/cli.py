"""Batch experiment runner.

``dualflow run <config> [--check] [--parallel N] [--output-dir D]``,
``dualflow check-assumptions <config>`` and ``dualflow sweep <config>``.
Configs are JSON files validated against :data:`CONFIG_SCHEMA`.

Exit codes: 0 success, 1 invalid config or assumption violation, 2 numerical
failure, 3 failed ``--check`` assertion.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from .composed import (composed_instances, object_flow_step, parameter_flow_step,
                       rank_deficient_instance, stationary_criticality_check)
from .edi import edi_certify_limit, edi_residual
from .errors import DualFlowError, StepFailure
from .functionals import (WganFunctional, check_a1_lower_bound,
                          check_a5_lipschitz_second_arg, check_a7_double_lipschitz,
                          quadratic_energy)
from .instances import (BilinearToyInstance, DiracFitWganInstance, ModeCollapseScenario,
                        aligned_step, mode_collapse_diagnostic, run_bilinear_toy,
                        run_dirac_fit, write_json, write_series)
from .schemes import ProxConfig, compare_schemes, tau_sweep
from .spaces import EmpiricalMeasure, Grid, GridFunctionSpace, MeasureSpace

log = logging.getLogger("dualflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3

EXPERIMENTS = ("bilinear-toy", "dirac-fit", "mode-collapse", "tau-sweep", "edi-verify",
               "compare-schemes", "composed-flow")

_num_list = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_vec2 = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_grid = {"type": "array", "items": [{"type": "number"}, {"type": "number"},
                                    {"type": "integer", "minimum": 2}],
         "minItems": 3, "maxItems": 3}


def _block(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


_flow_choice = {"enum": ["quadratic", "bilinear"]}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment"],
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "output_dir": {"type": "string"},
        "inner_solver": {"enum": ["auto", "picard", "gradient-armijo"]},
        "inner_tol": {"type": "number", "exclusiveMinimum": 0},
        "bilinear": _block({"x_r": _vec2, "generator0": _vec2, "discriminator0": _vec2,
                            "box": {"type": "number", "exclusiveMinimum": 0},
                            "align": {"type": "boolean"}}),
        "dirac_fit": _block({"target": _num_list, "generator0": _num_list, "grid": _grid,
                             "K": {"type": "integer", "minimum": 3},
                             "lip_bound": {"type": "number", "exclusiveMinimum": 0},
                             "prox_metric": {"enum": ["h1", "l2"]},
                             "measure_prox": {"enum": ["W1", "W2"]},
                             "substeps": {"type": "integer", "minimum": 1}}),
        "mode_collapse": _block({"target": _num_list, "collapsed": _num_list, "grid": _grid,
                                 "perturbation_scale": {"type": "number", "minimum": 0},
                                 "discriminator_tau": {"type": "number", "exclusiveMinimum": 0},
                                 "allow_off_support": {"type": "boolean"},
                                 "measure_prox": {"enum": ["W1", "W2"]}}),
        "sweep": _block({"flow": _flow_choice, "levels": {"type": "integer", "minimum": 2},
                         "x0": _num_list, "ratio_range": _vec2}),
        "edi": _block({"flow": _flow_choice, "curve": {"enum": ["scheme", "exact", "ascent"]},
                       "levels": {"type": "integer", "minimum": 1},
                       "per_step": {"type": "integer", "minimum": 1},
                       "x0": _num_list, "s_grid": _num_list,
                       "edi_tol": {"type": "number", "minimum": 0}}),
        "compare": _block({"field": {"enum": ["neg-tanh", "neg-sin", "neg-atan"]},
                           "x0": _num_list, "taus": _num_list,
                           "L": {"type": "number", "exclusiveMinimum": 0},
                           "C_f": {"type": "number", "exclusiveMinimum": 0}}),
        "composed": _block({"instances": {"type": "integer", "minimum": 1},
                            "max_dim": {"type": "integer", "minimum": 1},
                            "h": {"type": "number", "exclusiveMinimum": 0},
                            "flow_steps": {"type": "integer", "minimum": 0}}),
        "assumptions": _block({"samples": {"type": "integer", "minimum": 2}}),
    },
    "allOf": [
        {"if": {"properties": {"experiment": {"enum": ["bilinear-toy", "dirac-fit",
                                                       "mode-collapse", "tau-sweep"]}}},
         "then": {"required": ["tau", "T"]}},
        {"if": {"properties": {"experiment": {"const": "edi-verify"}}},
         "then": {"required": ["tau"]}},
        {"if": {"properties": {"experiment": {"const": "dirac-fit"}}},
         "then": {"required": ["dirac_fit"]}},
        {"if": {"properties": {"experiment": {"const": "mode-collapse"}}},
         "then": {"required": ["mode_collapse"]}},
    ],
}


class ConfigError(DualFlowError):
    pass


class CheckFailed(DualFlowError):
    pass


def load_config(path) -> dict:
    """Parse and validate a config file; raises :class:`ConfigError` with a
    line or field diagnostic."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{path}: field {where}: {e.message}")
        raise ConfigError("\n".join(lines))
    return cfg


# --------------------------------------------------------------------------
# output bookkeeping


class Outputs:
    """Tracks every artifact written so the manifest is complete."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.root / name

    def json(self, name: str, data) -> None:
        write_json(self.path(name), data)

    def series(self, name: str, times, values, header=("t", "value")) -> None:
        write_series(self.path(name), times, values, header)

    def manifest(self, cfg: dict, extra: dict | None = None) -> None:
        data = {
            "config": cfg,
            "artifacts": sorted(self.files) + ["manifest.json"],
            "versions": {"dualflow": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "python": platform.python_version()},
        }
        if extra:
            data.update(extra)
        write_json(self.root / "manifest.json", data)


def _require(cond: bool, message: str, failures: list) -> None:
    if not cond:
        failures.append(message)


def _prox_config(cfg) -> ProxConfig:
    return ProxConfig(inner_solver=cfg.get("inner_solver", "auto"),
                      inner_tol=cfg.get("inner_tol", 1e-10))


# --------------------------------------------------------------------------
# experiments; each returns a list of failed check messages


def _bilinear_instance(cfg) -> BilinearToyInstance:
    b = cfg.get("bilinear", {})
    return BilinearToyInstance(tuple(b.get("x_r", (0.0, 0.0))),
                               tuple(b.get("generator0", (1.0, 0.0))),
                               tuple(b.get("discriminator0", (0.0, 0.0))),
                               b.get("box", 10.0))


def run_bilinear(cfg, out: Outputs, parallel: int) -> list:
    inst = _bilinear_instance(cfg)
    traj, rep = run_bilinear_toy(inst, cfg["tau"], cfg["T"], _prox_config(cfg),
                                 align=cfg.get("bilinear", {}).get("align", True))
    traj.write(out.path("trajectory.csv"), out.path("trajectory.json"))
    out.json("orbit_report.json", rep.to_dict())
    out.series("radius.csv", traj.times, rep.radii, ("t", "radius"))
    out.series("generator_distance.csv", traj.times, rep.generator_distances,
               ("t", "generator_distance"))
    failures = []
    _require(rep.return_distance <= 0.1, f"return distance {rep.return_distance} > 0.1", failures)
    _require(rep.min_radius >= 0.9 * rep.r0, f"orbit radius fell to {rep.min_radius}", failures)
    return failures


def _grid_from(block, default=None):
    if "grid" in block:
        lo, hi, K = block["grid"]
        return Grid(float(lo), float(hi), int(K))
    return default


def run_dirac(cfg, out: Outputs, parallel: int) -> list:
    b = cfg["dirac_fit"]
    inst = DiracFitWganInstance(EmpiricalMeasure(b.get("target", [0.5])),
                                EmpiricalMeasure(b.get("generator0", [0.2])),
                                grid=_grid_from(b), K=b.get("K", 101),
                                lip_bound=b.get("lip_bound", 1.0),
                                prox_metric=b.get("prox_metric", "h1"),
                                measure_prox=b.get("measure_prox", "W2"))
    traj, rep = run_dirac_fit(inst, cfg["tau"], cfg["T"], b.get("substeps", 1), _prox_config(cfg))
    traj.write(out.path("trajectory.csv"), out.path("trajectory.json"))
    out.json("fit_report.json", rep.to_dict())
    out.series("w1.csv", rep.times, rep.w1, ("t", "w1"))
    out.series("payoff.csv", rep.times, rep.payoff, ("t", "payoff"))
    failures = []
    _require(rep.sign_changes >= 2, f"only {rep.sign_changes} sign changes of the W1 increment",
             failures)
    _require(rep.max_antisymmetry_error <= 1e-15,
             f"antisymmetry error {rep.max_antisymmetry_error}", failures)
    return failures


def run_mode_collapse(cfg, out: Outputs, parallel: int) -> list:
    b = cfg["mode_collapse"]
    scen = ModeCollapseScenario(EmpiricalMeasure(b.get("target", [0.2, 0.8])),
                                EmpiricalMeasure(b.get("collapsed", [0.2, 0.2])),
                                b.get("perturbation_scale", 0.01),
                                _grid_from(b, Grid(0.0, 1.0, 101)),
                                measure_prox=b.get("measure_prox", "W2"),
                                allow_off_support=b.get("allow_off_support", False))
    rng = np.random.default_rng(cfg.get("seed", 0))
    diag = mode_collapse_diagnostic(scen, cfg["tau"], cfg["T"], b.get("discriminator_tau", 0.05),
                                    rng=rng, config=_prox_config(cfg))
    out.json("diagnosis.json", diag.to_dict())
    if diag.trajectory is not None:
        diag.trajectory.write(out.path("trajectory.csv"), out.path("trajectory.json"))
        out.series("w1.csv", diag.times, diag.w1, ("t", "w1"))
    failures = []
    if not scen.measures_equal:
        _require(diag.discriminator_slope_lower_bound >= diag.collapsed_w1 / 2,
                 f"discriminator slope {diag.discriminator_slope_lower_bound} below W1/2", failures)
        _require(diag.escaped_after_perturbation, "W1 never dropped below its collapsed value",
                 failures)
    return failures


def _flow_setup(cfg, block):
    """Functional and initial point for the quadratic or bilinear flow."""
    if block.get("flow", "quadratic") == "bilinear":
        inst = _bilinear_instance(cfg)
        d0, g0 = inst.initial
        return inst.functional, d0, g0
    x0 = np.asarray(block.get("x0", [1.0]), dtype=float)
    return quadratic_energy(x0.size), x0, np.zeros(1)


def _levels(T, tau0, levels):
    n0, _ = aligned_step(T, tau0)
    return [T / (n0 * 2 ** k) for k in range(levels)]


def run_sweep(cfg, out: Outputs, parallel: int) -> list:
    b = cfg.get("sweep", {})
    f, x0, y0 = _flow_setup(cfg, b)
    taus = _levels(cfg["T"], cfg["tau"], b.get("levels", 5))
    rep = tau_sweep(x0, y0, cfg["T"], f, taus, _prox_config(cfg), parallel=parallel)
    out.json("sweep_report.json", rep.to_dict())
    out.series("gaps.csv", rep.taus[1:], rep.gaps, ("tau", "sup_gap"))
    for k, traj in enumerate(rep.trajectories):
        traj.write(out.path(f"trajectory_level{k}.csv"), out.path(f"trajectory_level{k}.json"))
    lo, hi = b.get("ratio_range", (0.35, 0.65))
    failures = []
    _require(rep.monotone, "sweep gaps are not monotone", failures)
    _require(all(lo <= r <= hi for r in rep.ratios), f"ratios {rep.ratios} outside [{lo}, {hi}]",
             failures)
    return failures


def run_edi(cfg, out: Outputs, parallel: int) -> list:
    b = cfg.get("edi", {})
    f, x0, y0 = _flow_setup(cfg, b)
    T = cfg.get("T", 1.0)
    s_grid = b.get("s_grid", [T])
    per_step = b.get("per_step", 8)
    curve = b.get("curve", "scheme")
    levels = b.get("levels", 3)
    tol = b.get("edi_tol", 1e-3)
    taus = _levels(T, cfg["tau"], levels)
    failures = []
    if curve == "scheme":
        sweep = tau_sweep(x0, y0, T, f, taus, _prox_config(cfg), parallel=parallel)
        cert = edi_certify_limit(sweep, f, tol, s=max(s_grid), per_step=per_step)
        reports = [edi_residual(t, f, s_grid, t.tau / per_step, edi_tol=tol)
                   for t in sweep.trajectories]
    else:
        sign = -1.0 if curve == "exact" else 1.0
        fn = _exact_curve(b.get("flow", "quadratic"), x0, y0, f, sign)
        reports = [edi_residual(fn, f, s_grid, tau / per_step, edi_tol=tol) for tau in taus]
        cert = None
    for k, rep in enumerate(reports):
        rep.to_json(out.path(f"edi_level{k}.json"))
        rep.to_csv(out.path(f"edi_level{k}.csv"))
    s_end = max(s_grid)
    if cert is not None:
        out.json("certificate.json", cert.to_dict())
        _require(abs(cert.extrapolated) <= tol, f"extrapolated residual {cert.extrapolated}",
                 failures)
        for tau, rep in zip(taus, reports):
            r = rep.residual_at(s_end)
            _require(abs(r) <= 5 * tau, f"|residual| {abs(r)} > 5 tau at tau={tau}", failures)
    elif curve == "exact":
        for tau, rep in zip(taus, reports):
            _require(abs(rep.residual_at(s_end)) <= tol, "exact curve residual not ~0", failures)
    else:
        for rep in reports:
            _require(rep.residual_at(s_end) >= 0.5, "ascent curve was not refuted", failures)
    return failures


def _exact_curve(flow, x0, y0, f, sign):
    """Closed-form flow (``sign=-1``) or its time reversal (``sign=+1``)."""
    if flow == "quadratic":
        return lambda t: (x0 * math.exp(sign * t), y0)
    x_r = f.x_r
    d0, g0 = x0, y0 - x_r

    def rot(t):
        # (g - x_r, d) rotates: d' = g - x_r, g' = -d
        c, s = math.cos(-sign * t), math.sin(-sign * t)
        d = c * d0 + s * g0
        g = c * g0 - s * d0
        return d, g + x_r

    return rot


FIELDS = {
    "neg-tanh": lambda x: -np.tanh(x),
    "neg-sin": lambda x: -np.sin(x),
    "neg-atan": lambda x: -np.arctan(x),
}


def run_compare(cfg, out: Outputs, parallel: int) -> list:
    b = cfg.get("compare", {})
    field_fn = FIELDS[b.get("field", "neg-tanh")]
    x0 = np.asarray(b.get("x0", [2.0]), dtype=float)
    T = cfg.get("T", 1.0)
    taus = b.get("taus", [0.02, 0.01, 0.005])
    rng = np.random.default_rng(cfg.get("seed", 0))
    results = [compare_schemes(x0, tau, T, field_fn, b.get("L"), b.get("C_f"), rng)
               for tau in taus]
    gaps = [r.gap for r in results]
    orders = [math.log(g0 / g1) / math.log(t0 / t1)
              for g0, g1, t0, t1 in zip(gaps[:-1], gaps[1:], taus[:-1], taus[1:])]
    out.json("compare_report.json", {"runs": [r.to_dict() for r in results], "orders": orders})
    out.series("gaps.csv", taus, gaps, ("tau", "gap"))
    failures = []
    for r in results:
        _require(r.passed, f"gap {r.gap} exceeds budget {r.budget} at tau={r.tau}", failures)
    _require(all(abs(o - 1.0) <= 0.2 for o in orders), f"orders {orders} not 1 +- 0.2", failures)
    return failures


def run_composed(cfg, out: Outputs, parallel: int) -> list:
    b = cfg.get("composed", {})
    rng = np.random.default_rng(cfg.get("seed", 0))
    count, max_dim = b.get("instances", 100), b.get("max_dim", 5)
    h, steps = b.get("h", 0.01), b.get("flow_steps", 20)
    verdicts, worst_grad, worst_track = [], 0.0, 0.0
    for p, x_star in composed_instances(rng, count, max_dim):
        v = stationary_criticality_check(x_star, p, tol=1e-6, stationary_tol=1e-10,
                                         injective_tol=1e-3)
        verdicts.append(v)
        if v.is_param_stationary and v.jacobian_transpose_injective:
            worst_grad = max(worst_grad, v.grad_f_norm)
        x = x_star + rng.standard_normal(x_star.size)
        o = p.g(x)
        for _ in range(steps):
            o = object_flow_step(o, x, h, p)
            x = parameter_flow_step(x, h, p)
            worst_track = max(worst_track, float(np.max(np.abs(p.g(x) - o))))
    pd, xd = rank_deficient_instance()
    deficient = stationary_criticality_check(xd, pd, tol=1e-6)
    report = {
        "instances": count,
        "all_stationary": all(v.is_param_stationary for v in verdicts),
        "all_injective": all(v.jacobian_transpose_injective for v in verdicts),
        "implication_holds": all(v.implication_holds for v in verdicts),
        "max_grad_f_norm": worst_grad,
        "linear_tracking_error": worst_track,
        "rank_deficient": deficient.to_dict(),
    }
    out.json("composed_report.json", report)
    failures = []
    _require(report["implication_holds"] and worst_grad <= 1e-6,
             f"criticality failed (max |grad f| = {worst_grad})", failures)
    _require(not deficient.jacobian_transpose_injective and not deficient.f_critical
             and deficient.is_param_stationary, "rank-deficient instance misclassified", failures)
    return failures


RUNNERS = {
    "bilinear-toy": run_bilinear, "dirac-fit": run_dirac, "mode-collapse": run_mode_collapse,
    "tau-sweep": run_sweep, "edi-verify": run_edi, "compare-schemes": run_compare,
    "composed-flow": run_composed,
}


# --------------------------------------------------------------------------
# assumption checks


def functional_for(cfg):
    """The functional an experiment config refers to, with state samplers."""
    exp = cfg["experiment"]
    if exp == "bilinear-toy":
        return _bilinear_instance(cfg).functional
    if exp in ("tau-sweep", "edi-verify"):
        block = cfg.get("sweep" if exp == "tau-sweep" else "edi", {})
        return _flow_setup(cfg, block)[0]
    if exp == "dirac-fit":
        b = cfg["dirac_fit"]
        return DiracFitWganInstance(EmpiricalMeasure(b.get("target", [0.5])),
                                    EmpiricalMeasure(b.get("generator0", [0.2])),
                                    grid=_grid_from(b), K=b.get("K", 101)).functional
    if exp == "mode-collapse":
        b = cfg["mode_collapse"]
        grid = _grid_from(b, Grid(0.0, 1.0, 101))
        target = EmpiricalMeasure(b.get("target", [0.2, 0.8]))
        return WganFunctional(target, GridFunctionSpace(grid),
                              MeasureSpace(target.size, lo=grid.lo, hi=grid.hi))
    raise ConfigError(f"experiment {exp!r} has no bivariate functional to check")


def check_assumptions(cfg) -> list:
    f = functional_for(cfg)
    n = cfg.get("assumptions", {}).get("samples", 200)
    seed = cfg.get("seed", 0)
    bounds = f.known_bounds
    return [
        check_a1_lower_bound(f, n, np.random.default_rng(seed), c1=bounds.get("A1")),
        check_a5_lipschitz_second_arg(f, n, np.random.default_rng(seed + 1),
                                      bound=bounds.get("A5")),
        check_a7_double_lipschitz(f, n, np.random.default_rng(seed + 2), bound=bounds.get("A7")),
    ]


# --------------------------------------------------------------------------
# entry point


def _setup_logging():
    level = os.environ.get("DUALFLOW_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _output_dir(cfg, override) -> Path:
    return Path(override or cfg.get("output_dir") or f"dualflow-out/{cfg['experiment']}")


def cmd_run(args, only_sweep: bool = False) -> int:
    cfg = load_config(args.config)
    if only_sweep and cfg["experiment"] not in ("tau-sweep", "edi-verify"):
        raise ConfigError(f"{args.config}: sweep needs a tau-sweep or edi-verify config")
    out = Outputs(_output_dir(cfg, args.output_dir))
    log.info("running %s into %s", cfg["experiment"], out.root)
    failures = RUNNERS[cfg["experiment"]](cfg, out, max(1, args.parallel))
    out.manifest(cfg, {"check_failures": failures})
    for msg in failures:
        log.info("check: %s", msg)
    if args.check and failures:
        raise CheckFailed("; ".join(failures))
    return EXIT_OK


def cmd_check_assumptions(args) -> int:
    cfg = load_config(args.config)
    reports = check_assumptions(cfg)
    summary = {"experiment": cfg["experiment"], "reports": [r.to_dict() for r in reports],
               "violated": any(r.violated for r in reports)}
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.output_dir:
        out = Outputs(Path(args.output_dir))
        out.json("assumptions.json", summary)
        out.manifest(cfg)
    print(text)
    return EXIT_CONFIG if summary["violated"] else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--check", action="store_true",
                       help="turn report quantities into assertions (exit 3 on failure)")
        p.add_argument("--parallel", type=int, default=1, metavar="N")
        p.add_argument("--output-dir", default=None, metavar="D")
    p = sub.add_parser("check-assumptions")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None, metavar="D")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "check-assumptions":
            return cmd_check_assumptions(args)
        return cmd_run(args, only_sweep=args.command == "sweep")
    except ConfigError as exc:
        print(f"dualflow: invalid config\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"dualflow: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (StepFailure, DualFlowError, FloatingPointError) as exc:
        print(f"dualflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"dualflow: invalid config\n{exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
