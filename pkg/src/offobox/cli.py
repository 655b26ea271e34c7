"""Command line front end: run experiments, summarize traces, verify invariants.

Subcommands:
  run        solve one configured problem and write an NDJSON trace (+CSV)
  summarize  tabulate traces as aligned text and machine-readable rows
  verify     run the fast invariant suite, one PASS/FAIL line per check

Configuration comes from an optional JSON file plus flat flag overrides
(flags win); unknown config keys are rejected.  Exit codes: 0 converged,
1 invalid configuration, 2 stopped on the cycle budget.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .core import BoundBox, ObjectiveValueError, objective_guard
from .hybrid import HybridSolver
from .multilevel import MultilevelSolver, SingleLevelSolver, StopRule
from .noise import NoiseSchedule
from .problems import build_hierarchy, membrane, minsurf
from .schwarz import (
    VARIANTS,
    DecompositionSolver,
    bound_identity_error,
    build_block_covering,
    build_operators,
)
from .steps import StepParams, update_weights
from .trace import Trace, config_hash

__all__ = ["main"]

SOLVERS = ("adagb2", "ml", "dd", "ml-dd")

DEFAULTS = {
    "problem": "membrane",
    "n": 16,
    "solver": "ml",
    "levels": 3,
    "subdomains": 4,
    "overlap": 2,
    "variant": "wras",
    "pre": 3,
    "post": 3,
    "coarsest": 5,
    "coarse_model": "tau",
    "truncation": False,
    "coarse_iters": 10,
    "dd_iters": 10,
    "subdomain_steps": 10,
    "dd_per_taylor": 10,
    "divide_gain": True,
    "coarse_first": True,
    "init_weight": 0.01,
    "gain_fraction": 0.95,
    "scale_growth": 10.0,
    "slope_fraction": 1.0,
    "step_cap": 1.0,
    "learning_rate": 0.01,
    "first_order_only": False,
    "noise_kind": "none",
    "noise_sigma2": 0.0,
    "noise_decay": 0.0,
    "tol_abs": 1e-7,
    "tol_rel": 1e-9,
    "max_cycles": 20000,
    "seed": 0,
    "out": None,
    "record_values": False,
    "n_workers": 0,
    "sqrt_energy": False,
}


class ConfigError(Exception):
    """Invalid configuration; the message is user-facing."""


class _Parser(argparse.ArgumentParser):
    # exit code 1 for bad flags: code 2 is reserved for budget exhaustion
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def output_root():
    """Directory traces land in; override with the OFFOBOX_OUT env var."""
    return Path(os.environ.get("OFFOBOX_OUT", "."))


def load_config(path):
    """Parse a JSON config file, rejecting unknown keys."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"config {path}:{e.lineno}:{e.colno}: {e.msg}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path}: expected a JSON object")
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(
            f"config {path}: unknown keys {', '.join(unknown)}")
    return cfg


def merge_config(file_cfg, overrides):
    cfg = dict(DEFAULTS)
    cfg.update(file_cfg)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def validate_config(cfg):
    if cfg["problem"] not in ("membrane", "minsurf"):
        raise ConfigError(f"unknown problem {cfg['problem']!r}")
    if cfg["solver"] not in SOLVERS:
        raise ConfigError(f"unknown solver {cfg['solver']!r}; "
                          f"choose from {', '.join(SOLVERS)}")
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"unknown Schwarz variant {cfg['variant']!r}")
    if cfg["n"] < 2:
        raise ConfigError("mesh needs n >= 2 cells per side")
    if cfg["levels"] < 1:
        raise ConfigError("levels must be at least 1")
    if cfg["coarse_model"] not in ("tau", "galerkin"):
        raise ConfigError(f"unknown coarse model {cfg['coarse_model']!r}")
    if cfg["noise_kind"] not in ("none", "constant", "exponential"):
        raise ConfigError(f"unknown noise kind {cfg['noise_kind']!r}")
    if cfg["max_cycles"] < 1:
        raise ConfigError("max_cycles must be positive")
    return cfg


def build_solver(cfg):
    params = StepParams(
        init_weight=cfg["init_weight"],
        gain_fraction=cfg["gain_fraction"],
        scale_growth=cfg["scale_growth"],
        slope_fraction=cfg["slope_fraction"],
        step_cap=cfg["step_cap"],
        first_order_only=cfg["first_order_only"],
        learning_rate=cfg["learning_rate"],
    )
    try:
        params.validate()
    except ValueError as e:
        raise ConfigError(str(e))
    stop = StopRule(tol_abs=cfg["tol_abs"], tol_rel=cfg["tol_rel"],
                    max_cycles=cfg["max_cycles"])
    noise = NoiseSchedule(kind=cfg["noise_kind"], sigma2=cfg["noise_sigma2"],
                          decay=cfg["noise_decay"])
    shared = dict(params=params, stop=stop, noise=noise, seed=cfg["seed"],
                  record_values=cfg["record_values"])
    solver = cfg["solver"]
    if solver == "adagb2":
        return SingleLevelSolver(**shared)
    if solver == "ml":
        return MultilevelSolver(pre=cfg["pre"], post=cfg["post"],
                                coarsest=cfg["coarsest"],
                                coarse_model=cfg["coarse_model"],
                                truncation=cfg["truncation"], **shared)
    if solver == "dd":
        return DecompositionSolver(
            num_subdomains=cfg["subdomains"], overlap=cfg["overlap"],
            variant=cfg["variant"], subdomain_steps=cfg["subdomain_steps"],
            dd_per_taylor=cfg["dd_per_taylor"],
            divide_gain=cfg["divide_gain"], n_workers=cfg["n_workers"],
            **shared)
    return HybridSolver(
        num_subdomains=cfg["subdomains"], overlap=cfg["overlap"],
        variant=cfg["variant"], coarse_iters=cfg["coarse_iters"],
        dd_iters=cfg["dd_iters"], subdomain_steps=cfg["subdomain_steps"],
        divide_gain=cfg["divide_gain"], n_workers=cfg["n_workers"],
        coarse_first=cfg["coarse_first"], **shared)


def build_target(cfg):
    """The problem or hierarchy the configured solver runs on."""
    kwargs = {}
    if cfg["problem"] == "minsurf" and cfg["sqrt_energy"]:
        kwargs["sqrt_energy"] = True
    family = {"membrane": membrane, "minsurf": minsurf}[cfg["problem"]]
    solver = cfg["solver"]
    try:
        if solver == "ml":
            return build_hierarchy(cfg["problem"], cfg["n"],
                                   depth=cfg["levels"], **kwargs)
        if solver == "ml-dd":
            return build_hierarchy(cfg["problem"], cfg["n"], depth=2,
                                   coarsening=8, **kwargs)
        return family(cfg["n"], **kwargs)
    except ValueError as e:
        raise ConfigError(str(e))


def cmd_run(args):
    overrides = {
        "problem": args.problem, "n": args.n, "solver": args.solver,
        "levels": args.levels, "subdomains": args.subdomains,
        "overlap": args.overlap, "variant": args.variant,
        "pre": args.pre, "post": args.post, "coarsest": args.coarsest,
        "coarse_model": args.coarse_model, "truncation": args.truncation,
        "coarse_iters": args.coarse_iters, "dd_iters": args.dd_iters,
        "subdomain_steps": args.subdomain_steps,
        "dd_per_taylor": args.dd_per_taylor,
        "init_weight": args.init_weight,
        "gain_fraction": args.gain_fraction,
        "scale_growth": args.scale_growth,
        "slope_fraction": args.slope_fraction,
        "step_cap": args.step_cap, "learning_rate": args.learning_rate,
        "first_order_only": args.first_order,
        "noise_kind": args.noise, "noise_sigma2": args.noise_sigma2,
        "noise_decay": args.noise_decay,
        "tol_abs": args.tol_abs, "tol_rel": args.tol_rel,
        "max_cycles": args.max_cycles, "seed": args.seed, "out": args.out,
        "record_values": args.record_values, "n_workers": args.workers,
        "sqrt_energy": args.sqrt_energy,
    }
    file_cfg = load_config(args.config) if args.config else {}
    cfg = validate_config(merge_config(file_cfg, overrides))
    solver = build_solver(cfg)
    target = build_target(cfg)
    trace = solver.solve(target)
    experiment = {k: v for k, v in cfg.items() if k != "out"}
    trace.meta["experiment"] = experiment
    trace.meta["experiment_hash"] = config_hash(experiment)
    name = cfg["out"] or (f"{cfg['solver']}_{cfg['problem']}_{cfg['n']}"
                          ".ndjson")
    path = output_root() / name
    trace.write(path)
    final = trace.final
    status = "converged" if trace.converged else "budget exhausted"
    print(f"{status}: {final['cycles']} cycles, cost {final['cost']:.1f}, "
          f"||Xi|| = {final['xi']:.3e}")
    print(f"trace written to {path}")
    return 0 if trace.converged else 2


# ---------------------------------------------------------------------------
# summarize


def _summary_row(trace):
    cfg = trace.meta.get("config", {})
    exp = trace.meta.get("experiment", {})
    solver = trace.meta.get("solver", "?")
    levels = cfg.get("depth")
    if levels is None:
        levels = {"adagb2": 1, "dd": 1, "ml-dd": 2}.get(solver, "")
    final = trace.final
    return {
        "solver": solver,
        "problem": trace.meta.get("problem", "?"),
        # CLI runs key tables by the mesh parameter, not the unknown count
        "n": exp.get("n", trace.meta.get("n", "")),
        "levels": levels,
        "subdomains": cfg.get("num_subdomains", ""),
        "overlap": cfg.get("overlap", ""),
        "variant": cfg.get("variant", ""),
        "cycles": final.get("cycles", ""),
        "cost": final.get("cost", ""),
        "xi": final.get("xi", ""),
        "converged": final.get("converged", ""),
    }


_SUMMARY_FIELDS = ["solver", "problem", "n", "levels", "subdomains",
                   "overlap", "variant", "cycles", "cost", "xi", "converged"]


def _format_cell(v):
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _aligned(rows, fields):
    cells = [[f for f in fields]] + [
        [_format_cell(r[f]) for f in fields] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(fields))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _pivot_grid(rows):
    """Cost grid over subdomains x overlap (the shape of the DD tables)."""
    ms = sorted({r["subdomains"] for r in rows})
    os_ = sorted({r["overlap"] for r in rows})
    if len(ms) < 2 or len(os_) < 2:
        return None
    grid = {(r["subdomains"], r["overlap"]): r["cost"] for r in rows}
    head = ["M \\ overlap"] + [str(o) for o in os_]
    body = []
    for m in ms:
        body.append([str(m)] + [
            _format_cell(grid.get((m, o), "")) for o in os_])
    widths = [max(len(row[i]) for row in [head] + body)
              for i in range(len(head))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(head, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def cmd_summarize(args):
    traces = []
    for p in args.traces:
        try:
            traces.append(Trace.read(p))
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read trace {p}: {e}")
    problems = sorted({t.meta.get("problem", "?") for t in traces})
    if len(problems) > 1:
        raise ConfigError(
            f"refusing to summarize mixed problems: {', '.join(problems)}")
    rows = [_summary_row(t) for t in traces]
    level_rows = [r for r in rows if r["solver"] in ("adagb2", "ml")]
    domain_rows = [r for r in rows if r["solver"] in ("dd", "ml-dd")]
    sections = []
    if level_rows:
        level_rows.sort(key=lambda r: (r["solver"], r["levels"]))
        sections.append("cost by level count\n"
                        + _aligned(level_rows, _SUMMARY_FIELDS))
    if domain_rows:
        domain_rows.sort(key=lambda r: (r["solver"], r["subdomains"],
                                        r["overlap"]))
        sections.append("cost by subdomains\n"
                        + _aligned(domain_rows, _SUMMARY_FIELDS))
        grid = _pivot_grid([r for r in domain_rows if r["solver"] == "dd"])
        if grid:
            sections.append("C_DD grid\n" + grid)
    print("\n\n".join(sections))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_SUMMARY_FIELDS)
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
        print(f"\nrows written to {args.csv}")
    else:
        print()
        print(buf.getvalue(), end="")
    return 0


# ---------------------------------------------------------------------------
# verify


def _check_weight_recursion():
    w, delta = update_weights(np.array([1.0, 1.0]), np.array([3.0, 4.0]))
    assert np.allclose(w, [np.sqrt(10.0), np.sqrt(17.0)], rtol=1e-12)
    assert np.allclose(delta, [3.0 / np.sqrt(10.0), 4.0 / np.sqrt(17.0)],
                       rtol=1e-12)
    return "accumulators and scaled radii match hand values"


def _check_feasibility():
    hierarchy = build_hierarchy("membrane", 8, depth=2)
    solver = MultilevelSolver(stop=StopRule(max_cycles=8), debug_checks=True)
    trace = solver.solve(hierarchy)  # the wired watchdog raises on violation
    assert trace.cycles, "no cycles recorded"
    return "all iterates feasible to 1e-12 on a 2-level run"


def _check_bound_identity():
    rng = np.random.default_rng(7)
    worst = {v: 0.0 for v in VARIANTS}
    for _ in range(60):
        n = int(rng.integers(6, 40))
        m = int(rng.integers(1, min(n, 5) + 1))
        o = int(rng.integers(0, 3))
        cov = build_block_covering(n, m, o)
        lo = rng.normal(size=n) - rng.uniform(0.1, 2.0, n)
        hi = lo + rng.uniform(0.2, 3.0, n)
        lo[rng.random(n) < 0.2] = -np.inf
        hi[rng.random(n) < 0.2] = np.inf
        box = BoundBox(lo, hi)
        for v in VARIANTS:
            for op in build_operators(cov, v):
                worst[v] = max(worst[v], bound_identity_error(op, box))
    for v in ("as", "ras", "wras", "ash", "rash"):
        assert worst[v] == 0.0, f"{v}: gap {worst[v]:.3e}"
    assert worst["wash"] < 1e-14, f"wash: gap {worst['wash']:.3e}"
    return "direct and derived subdomain bounds coincide (6 variants)"

def _check_trace_roundtrip():
    solver = SingleLevelSolver(stop=StopRule(max_cycles=5),
                               record_values=True)
    trace = solver.solve(membrane(4))
    path = output_root() / "verify_roundtrip.ndjson"
    trace.write(path)
    back = Trace.read(path)
    assert back == trace, "trace changed across write/read"
    path.unlink(missing_ok=True)
    path.with_suffix(".csv").unlink(missing_ok=True)
    return "write/read reproduces the trace exactly"


def _check_value_guard():
    prob = membrane(4)
    raised = False
    with objective_guard():
        try:
            prob.value(prob.initial_point())
        except ObjectiveValueError:
            raised = True
    assert raised, "objective value readable from solver code"
    trace = SingleLevelSolver(stop=StopRule(max_cycles=3),
                              record_values=True).solve(prob)
    assert all(row["f"] is not None for row in trace.cycles)
    return "values blocked in solver code, served to reporting passes"


def _check_dd_determinism():
    prob = membrane(8)
    kw = dict(num_subdomains=4, overlap=1, stop=StopRule(max_cycles=12))
    serial = DecompositionSolver(n_workers=0, **kw).solve(prob)
    threaded = DecompositionSolver(n_workers=4, **kw).solve(prob)
    assert np.array_equal(serial.final["x"], threaded.final["x"])
    assert serial.series("d_norm").tolist() == \
        threaded.series("d_norm").tolist()
    return "synchronized steps identical for any worker count"


CHECKS = [
    ("weight recursion", _check_weight_recursion),
    ("iterate feasibility", _check_feasibility),
    ("restricted bound identity", _check_bound_identity),
    ("trace round-trip", _check_trace_roundtrip),
    ("objective value guard", _check_value_guard),
    ("decomposition determinism", _check_dd_determinism),
]


def cmd_verify(args):
    failures = 0
    for name, fn in CHECKS:
        try:
            detail = fn()
        except Exception as e:  # report and keep going
            failures += 1
            print(f"FAIL {name}: {e}")
        else:
            print(f"PASS {name}: {detail}")
    return 1 if failures else 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="offobox",
                     description="objective-free box-constrained solvers")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve one configured problem")
    run.add_argument("--config", help="JSON config file (flags override)")
    run.add_argument("--problem", choices=["membrane", "minsurf"])
    run.add_argument("--n", type=int, help="mesh cells per side")
    run.add_argument("--solver", choices=list(SOLVERS))
    run.add_argument("--levels", type=int)
    run.add_argument("--subdomains", type=int)
    run.add_argument("--overlap", type=int)
    run.add_argument("--variant", choices=list(VARIANTS))
    run.add_argument("--pre", type=int)
    run.add_argument("--post", type=int)
    run.add_argument("--coarsest", type=int)
    run.add_argument("--coarse-model", choices=["tau", "galerkin"])
    run.add_argument("--truncation", action="store_const", const=True)
    run.add_argument("--coarse-iters", type=int)
    run.add_argument("--dd-iters", type=int)
    run.add_argument("--subdomain-steps", type=int)
    run.add_argument("--dd-per-taylor", type=int)
    run.add_argument("--init-weight", type=float)
    run.add_argument("--gain-fraction", type=float)
    run.add_argument("--scale-growth", type=float)
    run.add_argument("--slope-fraction", type=float)
    run.add_argument("--step-cap", type=float)
    run.add_argument("--learning-rate", type=float)
    run.add_argument("--first-order", action="store_const", const=True)
    run.add_argument("--noise", choices=["none", "constant", "exponential"])
    run.add_argument("--noise-sigma2", type=float)
    run.add_argument("--noise-decay", type=float)
    run.add_argument("--tol-abs", type=float)
    run.add_argument("--tol-rel", type=float)
    run.add_argument("--max-cycles", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="trace filename under the output root")
    run.add_argument("--record-values", action="store_const", const=True)
    run.add_argument("--workers", type=int)
    run.add_argument("--sqrt-energy", action="store_const", const=True)
    run.set_defaults(func=cmd_run)

    summ = sub.add_parser("summarize", help="tabulate one or more traces")
    summ.add_argument("traces", nargs="+", help="NDJSON trace files")
    summ.add_argument("--csv", help="write machine-readable rows here")
    summ.set_defaults(func=cmd_summarize)

    ver = sub.add_parser("verify", help="run the fast invariant suite")
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
