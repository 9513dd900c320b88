"""``dealbal`` command-line runner.

    dealbal run <scenario> [--check LIST] [--max-rounds N] [--trace PATH]
    dealbal sweep <template> --grid <file> --seeds A..B [--out PATH]
    dealbal gen-graph <topology> -o <file> [--loads SPEC] [--mode MODE]

Exit codes: 0 ok, 2 parse error, 3 check violation, 4 horizon exceeded.
Traces go to ``$DEALBAL_OUTPUT_DIR`` (default: the working directory) unless
the scenario or ``--trace`` names a path; the summary sits next to the trace
as ``<stem>.summary.json``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import itertools
import json
import os
import pathlib
import sys
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .async_engine import AsyncSimulation, Schedule
from .errors import DealBalanceError, ParseError
from .graph import LoadMode, generate, save_graph
from .metrics import bound_budget, compute_metrics
from .scenario import (
    CHECK_BITS,
    Scenario,
    load_scenario,
    parse_checks,
    parse_loads,
    parse_scenario,
    parse_topology,
    validate_checks,
)
from .selfstab import FaultModel, SelfStabSimulation
from .sync import Continuous, Diffusion, Discrete, Multi, run_sync

EXIT_OK, EXIT_PARSE, EXIT_CHECK, EXIT_HORIZON = 0, 2, 3, 4
OUTPUT_DIR_ENV = "DEALBAL_OUTPUT_DIR"
TRACE_HEADER = ["idx", "l_max", "l_min", "discrepancy", "potential", "deals", "messages", "checks"]
GRID_CAP = 10_000

# violation kinds reported by the step checker, grouped by the check they break
_KIND_TO_CHECK = {
    "fairness": "fairness",
    "gap": "fairness",
    "conservation": "conservation",
}


def fmt(x) -> str:
    x = Fraction(x)
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def _bits(names) -> int:
    return sum(CHECK_BITS[n] for n in names)


def _row(idx, loads, g, deals, messages, passed) -> list:
    m = compute_metrics(g, loads)
    return [idx, fmt(m.l_max), fmt(m.l_min), fmt(m.discrepancy), fmt(m.potential), deals, messages, _bits(passed)]


@dataclass
class Outcome:
    exit_code: int
    rows: list
    summary: dict = field(default_factory=dict)


def _budget_dict(scen: Scenario) -> dict:
    g, loads = scen.graph, scen.loads
    if g.node_count < 2:
        return {}
    k = max(loads) - min(loads)
    eps = scen.eps if scen.algorithm == "continuous" else None
    b = bound_budget(g.node_count, g.diameter, k, eps)
    return {
        "continuous_rounds": b.continuous_rounds,
        "discrete_rounds": b.discrete_rounds,
        "deal_budget": fmt(b.deal_budget),
        "lemma2_floor": fmt(b.lemma2_floor),
        "lemma6_floor": fmt(b.lemma6_floor),
    }


def _run_sync(scen: Scenario) -> Outcome:
    algo = {
        "continuous": lambda: Continuous(scen.eps),
        "discrete": Discrete,
        "multi": Multi,
        "diffusion": lambda: Diffusion(scen.alpha, scen.eps),
    }[scen.algorithm]()
    res = run_sync(scen.graph, scen.loads, algo, scen.max_rounds)
    g = scen.graph
    rows = [_row(0, scen.loads, g, 0, 0, scen.checks)]
    first_violation = None
    for rep, after in zip(res.reports, _replay(scen.loads, res.reports)):
        passed = {c for c in scen.checks if rep.checks.get(c, True)}
        if passed != scen.checks and first_violation is None:
            first_violation = {"round": rep.round_index, "checks": sorted(scen.checks - passed)}
        rows.append(_row(rep.round_index, after, g, len(rep.deals), len(rep.proposals), passed))
    v = res.verdict
    summary = {
        "converged": v.converged,
        "rounds_used": v.rounds_used,
        "rounds_to_converge": v.rounds_to_converge,
        "budget": v.budget,
        "within_budget": v.within_budget,
        "deals": v.total_deals,
        "moved": fmt(v.total_moved),
        "final_loads": [fmt(x) for x in res.final],
        "conservation_drift": fmt(res.final.total() - scen.loads.total()),
        "first_violation": first_violation,
    }
    code = EXIT_CHECK if first_violation else (EXIT_OK if v.converged else EXIT_HORIZON)
    return Outcome(code, rows, summary)


def _replay(loads, reports):
    """Post-round load vectors, rebuilt from each round's deals."""
    current = list(loads)
    for rep in reports:
        for src, dst, amount in rep.deals:
            current[src] -= amount
            current[dst] += amount
        yield list(current)


def _run_message_passing(scen: Scenario) -> Outcome:
    schedule = Schedule(scen.policy, scen.seed)
    if scen.algorithm == "async":
        sim = AsyncSimulation(scen.graph, scen.loads, schedule)
    else:
        fm = FaultModel(scen.fault_seed, scen.garbage, scen.corrupt)
        sim = SelfStabSimulation(scen.graph, scen.loads, schedule, k=scen.k, fault_model=fm)
    res = sim.run(scen.max_steps)
    v = res.verdict
    g = scen.graph
    report = sim.report(v.terminated) if scen.algorithm == "selfstab" else None
    start = report.stabilization_step if report and report.stabilization_step is not None else 0

    broken_at: dict[int, set] = {}
    for viol in v.violations:
        names = {_KIND_TO_CHECK.get(k, "monotonic") for k in viol.kinds}
        broken_at.setdefault(viol.step, set()).update(names)

    rows = [_row(0, sim.initial_effective if report else scen.loads, g, 0, 0, scen.checks)]
    first_violation = None
    deals = messages = 0
    failed: set = set()
    next_row = scen.stride
    for i, t in enumerate(res.trace):
        deals += len(t.deals)
        messages += t.messages_sent
        bad = broken_at.get(t.step, set()) & scen.checks
        if bad and t.step >= start:
            failed |= bad
            if first_violation is None:
                first_violation = {"step": t.step, "checks": sorted(bad)}
        if t.step >= next_row or i == len(res.trace) - 1:
            rows.append(_row(t.step, t.loads, g, deals, messages, scen.checks - failed))
            deals = messages = 0
            failed = set()
            while next_row <= t.step:
                next_row += scen.stride

    summary = {
        "terminated": v.terminated,
        "balanced": v.balanced,
        "steps": v.steps,
        "deals": v.deals,
        "deal_budget": v.deal_budget,
        "within_budget": v.within_budget,
        "messages": v.messages,
        "max_steps_between_deals": v.max_steps_between_deals,
        "final_loads": [fmt(x) for x in res.final],
        "conservation_drift": v.conservation_drift,
        "violations": [str(x) for x in v.violations[:20]],
        "first_violation": first_violation,
        "policy": scen.policy.value,
        "seed": scen.seed,
    }
    ok_end = v.terminated and v.balanced
    if report is not None:
        rep = asdict(report)
        rep["violations"] = [str(x) for x in report.violations[:20]]
        summary["stabilization"] = rep
        suffix_ok = {"monotonic": report.suffix_monotonic, "conservation": report.suffix_conserved}
        bad = sorted(c for c, ok in suffix_ok.items() if c in scen.checks and not ok)
        if bad and first_violation is None:
            first_violation = summary["first_violation"] = {"step": start, "checks": bad}
        ok_end = ok_end and report.suffix_balanced
    code = EXIT_CHECK if first_violation else (EXIT_OK if ok_end else EXIT_HORIZON)
    return Outcome(code, rows, summary)


def execute(scen: Scenario) -> Outcome:
    """Run a parsed scenario without touching the filesystem."""
    out = _run_sync(scen) if scen.is_sync else _run_message_passing(scen)
    m0 = compute_metrics(scen.graph, scen.loads)
    out.summary.update({
        "scenario": scen.name,
        "algorithm": scen.algorithm,
        "node_count": scen.graph.node_count,
        "diameter": scen.graph.diameter,
        "initial_discrepancy": fmt(m0.discrepancy),
        "initial_potential": fmt(m0.potential),
        "final_discrepancy": out.rows[-1][3],
        "final_potential": out.rows[-1][4],
        "checks": sorted(scen.checks),
        "bound_budget": _budget_dict(scen),
        "exit_code": out.exit_code,
    })
    return out


def trace_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def summary_path(trace_path: pathlib.Path) -> pathlib.Path:
    return trace_path.with_name(trace_path.stem + ".summary.json")


def run_scenario(path, *, checks=None, max_rounds=None, trace=None, stderr=None) -> int:
    stderr = stderr or sys.stderr
    try:
        scen = load_scenario(path)
        if checks is not None:
            scen.checks = parse_checks(checks)
            validate_checks(scen.algorithm, scen.checks)
    except ParseError as exc:
        print(f"parse error: {exc}", file=stderr)
        return EXIT_PARSE
    if max_rounds is not None:
        if scen.is_sync:
            scen.max_rounds = max_rounds
        else:
            scen.max_steps = max_rounds
    if trace is not None:
        scen.trace = trace
    if scen.trace is None:
        out_dir = pathlib.Path(os.environ.get(OUTPUT_DIR_ENV, "."))
        scen.trace = str(out_dir / f"{scen.name}.trace.csv")
    out = execute(scen)
    trace_path = pathlib.Path(scen.trace)
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    trace_path.write_text(trace_text(out.rows))
    summary_path(trace_path).write_text(json.dumps(out.summary, indent=2, sort_keys=True) + "\n")
    if out.exit_code == EXIT_CHECK:
        print(f"check violation: {out.summary['first_violation']}", file=stderr)
    elif out.exit_code == EXIT_HORIZON:
        print("horizon exceeded before the termination criterion was met", file=stderr)
    return out.exit_code


# ---------------------------------------------------------------------- sweep


def parse_seeds(text: str) -> list[int]:
    lo, sep, hi = text.partition("..")
    try:
        if not sep:
            return [int(text)]
        a, b = int(lo), int(hi)
    except ValueError:
        raise ParseError(f"bad seed range {text!r}") from None
    if b < a:
        raise ParseError("seed range must be ascending")
    return list(range(a, b + 1))


def parse_grid(text: str) -> list[tuple[str, list[str]]]:
    """Lines ``section.key = v1 v2 ...``; ``#`` starts a comment."""
    axes = []
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, values = line.partition("=")
        key = key.strip()
        if not sep or "." not in key or not values.split():
            raise ParseError("expected 'section.key = v1 v2 ...'", line_no)
        axes.append((key, values.split()))
    return axes


def _apply_overrides(template: str, overrides: dict[str, str], seed: int) -> str:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.read_string(template)
    for dotted, value in overrides.items():
        section, key = dotted.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][key] = value
    for section in cp.sections():
        for key in cp[section]:
            cp[section][key] = cp[section][key].replace("{seed}", str(seed))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


SWEEP_COLUMNS = ["run", "seed", "params", "exit_code", "converged", "rounds_or_steps", "budget", "ratio", "error"]


def sweep(template_path, grid_path, seeds: list[int], *, out=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    template_path = pathlib.Path(template_path)
    try:
        template = template_path.read_text()
        axes = parse_grid(pathlib.Path(grid_path).read_text())
    except (OSError, ParseError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    combos = list(itertools.product(*(vals for _, vals in axes))) if axes else []
    if len(combos) * len(seeds) > GRID_CAP:
        print(f"parse error: grid has more than {GRID_CAP} runs", file=sys.stderr)
        return EXIT_PARSE
    rows = []
    worst = None
    for run, (combo, seed) in enumerate(itertools.product(combos, seeds)):
        overrides = {key: value for (key, _), value in zip(axes, combo)}
        params = ";".join(f"{k}={v}" for k, v in overrides.items())
        row = dict.fromkeys(SWEEP_COLUMNS, "")
        row.update(run=run, seed=seed, params=params)
        try:
            text = _apply_overrides(template, overrides, seed)
            scen = parse_scenario(text, base_dir=template_path.parent, name=f"{template_path.stem}-{run}")
            summary = execute(scen).summary
        except (DealBalanceError, ValueError, configparser.Error) as exc:
            row.update(exit_code=EXIT_PARSE, error=str(exc))
            rows.append(row)
            continue
        used = summary.get("rounds_to_converge", summary.get("deals"))
        budget = summary.get("budget", summary.get("deal_budget"))
        row.update(
            exit_code=summary["exit_code"],
            converged=summary.get("converged", summary.get("terminated")),
            rounds_or_steps=summary.get("rounds_used", summary.get("steps")),
            budget="" if budget is None else budget,
        )
        if used is not None and budget:
            ratio = Fraction(used) / Fraction(budget)
            row["ratio"] = f"{float(ratio):.6f}"
            worst = ratio if worst is None else max(worst, ratio)
        rows.append(row)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if out:
        pathlib.Path(out).write_text(buf.getvalue())
    else:
        stdout.write(buf.getvalue())
    if worst is not None:
        print(f"max observed ratio: {float(worst):.6f}", file=sys.stderr)
    return EXIT_OK


# ------------------------------------------------------------------ gen-graph


def gen_graph(topology: str, out, loads: str = "uniform:10:0", mode: str = "discrete") -> int:
    try:
        g, lv = generate(parse_topology(topology), parse_loads(loads), LoadMode(mode))
    except (DealBalanceError, ValueError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    save_graph(out, g, lv)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dealbal", description="Deal-agreement load balancing simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario file")
    p.add_argument("scenario")
    p.add_argument("--check", help="comma-separated checks, replaces the scenario's list")
    p.add_argument("--max-rounds", type=int, help="round (sync) or step (async) horizon")
    p.add_argument("--trace", help="trace CSV path")

    p = sub.add_parser("sweep", help="run a template over a parameter grid and seeds")
    p.add_argument("template")
    p.add_argument("--grid", required=True)
    p.add_argument("--seeds", default="0", help="A..B inclusive")
    p.add_argument("--out", help="write the table here instead of stdout")

    p = sub.add_parser("gen-graph", help="write a generated graph file")
    p.add_argument("spec", help="path:n | cycle:n | star:n | random:n:p:seed")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--loads", default="uniform:10:0")
    p.add_argument("--mode", choices=[m.value for m in LoadMode], default="discrete")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        if args.max_rounds is not None and args.max_rounds < 1:
            print("parse error: --max-rounds must be >= 1", file=sys.stderr)
            return EXIT_PARSE
        return run_scenario(args.scenario, checks=args.check, max_rounds=args.max_rounds, trace=args.trace)
    if args.command == "sweep":
        try:
            seeds = parse_seeds(args.seeds)
        except ParseError as exc:
            print(f"parse error: {exc}", file=sys.stderr)
            return EXIT_PARSE
        return sweep(args.template, args.grid, seeds, out=args.out)
    return gen_graph(args.spec, args.output, args.loads, args.mode)


if __name__ == "__main__":
    sys.exit(main())
