"""Command-line front end: ``pevccp {gen,solve-central,run,replay,compare}``.

Every command is deterministic given its flags.  Failures print one line
``error kind=<kind> exit=<code> detail=<message>`` on stderr and exit with
the code listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from pevccp import io
from pevccp.distributed import SCHEDULE_NAMES, ScheduleSet, run_distributed
from pevccp.errors import (FormatError, InfeasiblePevError, InfeasibleProblemError, NonConvergenceError,
                           PevccpError, ProjectionError, ProtocolError, ScenarioError, TopologyError)
from pevccp.metrics import RunTrace, TraceEntry, cap_violation, rel_obj, uncontrolled_charging, valley_filling_report
from pevccp.model import PROFILES, generate_scenario, validate_scenario
from pevccp.netsim import FaultPlan, parse_topology
from pevccp.oracle import objective_value, solve_central

EXIT_CODES = {
    "usage": 2,
    "io": 3,
    "format": 4,
    "validation": 5,
    "infeasible": 6,
    "nonconvergence": 7,
    "topology": 8,
    "projection": 9,
    "internal": 10,
}


class UsageError(ValueError):
    pass


def _kind(exc: BaseException) -> str:
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, FormatError):
        return "format"
    if isinstance(exc, ScenarioError):
        return "validation"
    if isinstance(exc, (InfeasibleProblemError, InfeasiblePevError)):
        return "infeasible"
    if isinstance(exc, NonConvergenceError):
        return "nonconvergence"
    if isinstance(exc, (TopologyError, ProtocolError)):
        return "topology"
    if isinstance(exc, ProjectionError):
        return "projection"
    if type(exc) is ValueError:
        return "usage"
    return "internal"


def _parse_schedules(items: list[str] | None) -> dict[str, tuple[float, float]]:
    out = {}
    for item in items or []:
        name, sep, value = item.partition("=")
        parts = value.split(",")
        if not sep or name not in SCHEDULE_NAMES or len(parts) != 2:
            raise UsageError(f"--schedules expects name=r,o with name in {','.join(SCHEDULE_NAMES)}; got {item!r}")
        try:
            out[name] = (float(parts[0]), float(parts[1]))
        except ValueError:
            raise UsageError(f"--schedules {item!r}: r and o must be numbers") from None
    return out


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, str)) else format(float(v), ".17g") for v in row])


# -- commands ---------------------------------------------------------------------------

def cmd_gen(args) -> str:
    s = generate_scenario(args.seed, args.v, args.t, args.profile)
    if args.p_max is not None:
        s = s.with_p_max(args.p_max)
        report = validate_scenario(s)
        if not report.ok:
            raise ScenarioError(f"--p-max {args.p_max:g}: {report}", report)
    io.write_scenario(s, args.out)
    return f"wrote {args.out} (V={s.n_pev}, T={s.horizon_steps})"


def cmd_solve_central(args) -> str:
    s = io.read_scenario(args.scenario)
    sol = solve_central(s, tol=args.tol)
    io.write_central(sol, args.out)
    return f"wrote {args.out} objective={sol.objective:.17g} kkt={sol.kkt.worst():.3g}"


def cmd_run(args) -> str:
    s, doc_schedules, doc_topology = io.read_scenario_document(args.scenario)
    schedules = ScheduleSet.default(args.mapping)
    if doc_schedules:
        schedules = schedules.with_overrides(**{k: tuple(v) for k, v in doc_schedules.items()})
    schedules = schedules.with_overrides(**_parse_schedules(args.schedules))
    graph = parse_topology(args.topology or doc_topology or "ring", s.n_pev)
    faults = None
    if args.drop_prob or args.halt_at is not None or args.stale_replay:
        faults = FaultPlan(drop_probability=args.drop_prob, halt_at_iteration=args.halt_at,
                           rng_seed=args.seed, stale_replay=args.stale_replay)
    f_star = io.read_central(args.oracle).objective if args.oracle else None
    trace = run_distributed(s, graph, args.iters, schedules, args.record_every, faults=faults,
                            f_star=f_star, jacobi=args.jacobi, workers=args.workers)
    io.write_trace(trace, args.out, format=args.format)
    last = trace.last()
    return (f"wrote {args.out} iterations={trace.iterations} objective={last.objective:.17g} "
            f"rel_obj={last.rel_obj:.3g} cap_violation={last.cap_violation:.3g}")


def cmd_replay(args) -> str:
    """Trace with a single entry holding a stored reference solution."""
    s = io.read_scenario(args.scenario)
    sol = io.read_central(args.central)
    agg = sol.x_all.sum(axis=0)
    entry = TraceEntry(k=1, objective=objective_value(s, sol.x_all), rel_obj=0.0, max_disagreement=0.0,
                       cap_violation=cap_violation(agg, s.p_max_kw), feas_residual=sol.kkt.primal_feasibility,
                       agg_load=agg)
    trace = RunTrace([entry], final_x=sol.x_all, final_l=np.tile(agg, (s.n_pev, 1)),
                     final_lam=np.zeros_like(sol.x_all), f_star=sol.objective, iterations=1)
    io.write_trace(trace, args.out, format=args.format)
    return f"wrote {args.out}"


def cmd_compare(args) -> str:
    s = io.read_scenario(args.scenario)
    trace = io.read_trace(args.trace)
    sol = io.read_central(args.central)
    if not trace.entries:
        raise FormatError(f"{args.trace}: trace has no entries")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rels = [rel_obj(e.objective, sol.objective) for e in trace.entries]
    _write_csv(out / "rel_obj.csv", ["k", "objective", "rel_obj"],
               [(e.k, e.objective, r) for e, r in zip(trace.entries, rels)])

    final = trace.last().agg_load
    bench = uncontrolled_charging(s)
    _write_csv(out / "aggregate.csv",
               ["t", "baseline", "pev_distributed", "pev_central", "pev_uncontrolled", "p_max",
                "total_distributed", "total_uncontrolled"],
               [(t, s.baseline_load_kw[t], final[t], sol.l_agg[t], bench[t], s.p_max_kw[t],
                 s.baseline_load_kw[t] + final[t], s.baseline_load_kw[t] + bench[t])
                for t in range(s.horizon_steps)])
    _write_csv(out / "load_vs_k.csv", ["k"] + [f"load_{t}" for t in range(s.horizon_steps)],
               [[e.k] + list(e.agg_load) for e in trace.entries])

    valley = valley_filling_report(s.baseline_load_kw, final, benchmark=bench)
    summary = {
        "final_rel_obj": rels[-1],
        "max_rel_obj": max(rels),
        "final_load_gap_kw": float(np.max(np.abs(final - sol.l_agg))),
        "final_cap_violation_kw": cap_violation(final, s.p_max_kw),
        "objective_central": sol.objective,
        "objective_final": trace.last().objective,
        "valley": {
            "variance": valley.variance,
            "peak": valley.peak,
            "uncontrolled_variance": valley.benchmark_variance,
            "variance_reduction": valley.variance_reduction,
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return f"wrote {out} final_rel_obj={rels[-1]:.3g}"


# -- parser ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pevccp", description="Distributed cooperative fleet charging under a power cap.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic scenario")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--v", type=int, default=20, help="number of vehicles")
    g.add_argument("--t", type=int, default=96, help="number of time steps")
    g.add_argument("--profile", default="paperlike", choices=sorted(PROFILES))
    g.add_argument("--p-max", type=float, default=None, help="override the constant power cap (kW)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("solve-central", help="solve the fleet problem centrally")
    c.add_argument("--scenario", required=True)
    c.add_argument("--tol", type=float, default=1e-8)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_solve_central)

    r = sub.add_parser("run", help="run the distributed algorithm")
    r.add_argument("--scenario", required=True)
    r.add_argument("--topology", default=None, help="ring | star | complete | random:<seed>")
    r.add_argument("--iters", type=int, default=1000)
    r.add_argument("--record-every", type=int, default=1)
    r.add_argument("--schedules", nargs="*", metavar="NAME=R,O",
                   help="override step rules, e.g. alpha=10.0222,0.16")
    r.add_argument("--mapping", choices=("name", "order"), default="name",
                   help="assignment of the default delta/eta rules")
    r.add_argument("--drop-prob", type=float, default=0.0)
    r.add_argument("--halt-at", type=int, default=None)
    r.add_argument("--stale-replay", action="store_true")
    r.add_argument("--seed", type=int, default=0, help="fault-injection seed")
    r.add_argument("--jacobi", action="store_true", help="update every variable from round-entry values")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--oracle", default=None, help="reference solution file for inline rel_obj")
    r.add_argument("--format", choices=("csv", "json"), default="csv")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("replay", help="write a one-entry trace holding a reference solution")
    rp.add_argument("--scenario", required=True)
    rp.add_argument("--central", required=True)
    rp.add_argument("--format", choices=("csv", "json"), default="csv")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_replay)

    m = sub.add_parser("compare", help="compare a trace with the reference solution")
    m.add_argument("--scenario", required=True)
    m.add_argument("--trace", required=True)
    m.add_argument("--central", required=True)
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        print(args.func(args))
        return 0
    except (PevccpError, OSError, ValueError) as exc:
        kind = _kind(exc)
        detail = " ".join(str(exc).split())
        print(f"error kind={kind} exit={EXIT_CODES[kind]} detail={detail}", file=sys.stderr)
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
