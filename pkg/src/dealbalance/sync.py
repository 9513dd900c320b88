"""Barrier-synchronised three-phase rounds: single-proposal (continuous and
discrete), multi-neighbour water-filling, and a first-order diffusion
baseline for contrast.

Every round function is pure: it reads the round-start loads only and
returns a fresh LoadVector plus a RoundReport. Ties are always broken
towards the lowest NodeId.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence, Union

from .errors import InvalidParameter
from .graph import Graph, LoadMode, LoadVector
from .metrics import (
    Metrics,
    bound_budget,
    check_matching_degree,
    check_monotonic_step,
    check_no_join_extremes,
    compute_metrics,
    is_eps_balanced,
    lemma2_floor,
    lemma6_floor,
)


@dataclass(frozen=True)
class Proposal:
    src: int
    dst: int
    amount: object
    tentative_load: object = None


@dataclass(frozen=True)
class NeighborhoodSets:
    v_less: tuple[int, ...]
    v_more: tuple[int, ...]


@dataclass
class RoundReport:
    round_index: int
    proposals: list[Proposal]
    deals: list[tuple[int, int, object]]
    metrics_before: Metrics
    metrics_after: Metrics
    lemma_floor_satisfied: bool = True
    checks: dict[str, bool] = field(default_factory=dict)

    @property
    def potential_drop(self) -> Fraction:
        return self.metrics_before.potential - self.metrics_after.potential


def neighborhood_sets(g: Graph, loads: Sequence, p: int) -> NeighborhoodSets:
    less = tuple(q for q in g.neighbors(p) if loads[q] < loads[p])
    more = tuple(q for q in g.neighbors(p) if loads[q] > loads[p])
    return NeighborhoodSets(less, more)


def _apply(loads: LoadVector, deals) -> LoadVector:
    values = list(loads.values)
    for src, dst, amount in deals:
        values[src] -= amount
        values[dst] += amount
    return loads.replace(values)


def _single_proposal(g: Graph, loads: LoadVector, round_index: int, discrete: bool):
    x = loads.values
    proposals = []
    for u in range(g.node_count):
        best, best_gap = None, 0
        for v in g.neighbors(u):
            gap = x[u] - x[v]
            if gap > best_gap:
                best, best_gap = v, gap
        if best is None or (discrete and best_gap < 2):
            continue
        amount = best_gap // 2 if discrete else Fraction(best_gap) / 2
        proposals.append(Proposal(u, best, amount))

    accepted: dict[int, Proposal] = {}
    for prop in proposals:  # proposals are in ascending src order
        cur = accepted.get(prop.dst)
        if cur is None or prop.amount > cur.amount:
            accepted[prop.dst] = prop
    deals = [(p.src, p.dst, p.amount) for p in sorted(accepted.values(), key=lambda p: p.src)]
    after = _apply(loads, deals)
    report = RoundReport(round_index, proposals, deals, compute_metrics(g, loads), compute_metrics(g, after))
    return after, report


def round_continuous(g: Graph, loads: LoadVector, round_index: int = 0):
    if loads.mode is not LoadMode.CONTINUOUS:
        raise InvalidParameter("round_continuous needs continuous loads")
    after, report = _single_proposal(g, loads, round_index, discrete=False)
    k = report.metrics_before.discrepancy
    report.lemma_floor_satisfied = report.potential_drop >= lemma2_floor(k, g.diameter)
    return after, report


def round_discrete(g: Graph, loads: LoadVector, round_index: int = 0):
    if loads.mode is not LoadMode.DISCRETE:
        raise InvalidParameter("round_discrete needs discrete loads")
    after, report = _single_proposal(g, loads, round_index, discrete=True)
    k = report.metrics_before.discrepancy
    if k >= 2 * g.diameter:
        report.lemma_floor_satisfied = report.potential_drop >= lemma6_floor(k, g.diameter)
    return after, report


# ------------------------------------------------------------ water-filling


def plan_waterfill(p_load: int, v_less_loads: Sequence[int]) -> tuple[list[int], int]:
    """Unit-by-unit neighbourhood equalisation for one proposer.

    ``v_less_loads`` must be sorted non-decreasing and strictly below
    ``p_load``. Returns ``(props, tentative_load)`` where ``props[i]`` is the
    amount planned for the i-th neighbour.
    """
    loads = list(v_less_loads)
    q = len(loads)
    if any(a > b for a, b in zip(loads, loads[1:])):
        raise InvalidParameter("v_less_loads must be sorted non-decreasing")
    if any(x >= p_load for x in loads):
        raise InvalidParameter("v_less_loads must all be below p_load")
    tentative = p_load
    prop = [0] * q
    if q == 0:
        return prop, tentative
    i = 0
    while tentative >= loads[i] + prop[i] + 2:
        tentative -= 1
        prop[i] += 1
        if i < q - 1 and loads[i] + prop[i] > loads[i + 1] + prop[i + 1]:
            i += 1
        else:
            i = 0
    # The loop only inspects the cursor; the whole neighbourhood must be settled.
    for j in range(q):
        if tentative >= loads[j] + prop[j] + 2:
            raise AssertionError(f"waterfill exited with neighbour {j} still fillable")
    return prop, tentative


def accept_round_robin(receiver_load: int, offers: Sequence[tuple[int, int, int]]) -> dict[int, int]:
    """Unit round-robin acceptance of several proposals at one receiver.

    ``offers`` holds ``(proposer, amount, tentative_load)``. Proposers are
    served in order of tentative load descending (ties: lowest id); a unit is
    taken from ``q`` only while fewer than ``amount`` were taken and the
    receiver's running load is still below ``q``'s tentative load.
    """
    order = sorted(offers, key=lambda o: (-o[2], o[0]))
    taken = {q: 0 for q, _, _ in order}
    cur = receiver_load
    active = list(order)
    while active:
        still = []
        for q, amount, tentative in active:
            if taken[q] < amount and cur < tentative:
                taken[q] += 1
                cur += 1
                still.append((q, amount, tentative))
        active = still
    return taken


def round_multi(g: Graph, loads: LoadVector, round_index: int = 0):
    # Acceptance here is a reconstruction; the published pseudocode for the
    # receive side reads:
    #   MaxLoad = max load in V_more; LoadToReceive = MaxLoad - load(p) - 1
    #   sort V_more non-increasing
    #   while |V_more| > 0 and LoadToReceive > 0:
    #     ProposeToReceive = floor(LoadToReceive / |V_more|)
    #     receive round-robin from V_more, dropping a node once its load
    #       equals TentativeLoad
    #     Deal = min(ProposeToTransfer, ProposeToReceive)
    #     load(p) += Deal; load(q) -= Deal
    if loads.mode is not LoadMode.DISCRETE:
        raise InvalidParameter("round_multi needs discrete loads")
    x = loads.values
    proposals = []
    for p in range(g.node_count):
        less = sorted(neighborhood_sets(g, x, p).v_less, key=lambda q: (x[q], q))
        if not less:
            continue
        props, tentative = plan_waterfill(x[p], [x[q] for q in less])
        for q, amount in zip(less, props):
            if amount > 0:
                proposals.append(Proposal(p, q, amount, tentative))

    incoming: dict[int, list] = {}
    for prop in proposals:
        incoming.setdefault(prop.dst, []).append((prop.src, prop.amount, prop.tentative_load))
    deals = []
    for receiver in sorted(incoming):
        taken = accept_round_robin(x[receiver], incoming[receiver])
        deals += [(q, receiver, n) for q, n in taken.items() if n > 0]
    deals.sort()
    after = _apply(loads, deals)
    report = RoundReport(round_index, proposals, deals, compute_metrics(g, loads), compute_metrics(g, after))
    return after, report


def round_diffusion(g: Graph, loads: LoadVector, alpha=Fraction(1, 2), round_index: int = 0):
    """Every node ships ``alpha * load / deg`` to each neighbour at once."""
    alpha = Fraction(alpha)
    if not 0 < alpha <= 1:
        raise InvalidParameter("alpha must lie in (0, 1]")
    if loads.mode is not LoadMode.CONTINUOUS:
        raise InvalidParameter("diffusion needs continuous loads")
    x = loads.values
    transfers = []
    for u in range(g.node_count):
        share = alpha * x[u] / len(g.neighbors(u))
        if share > 0:
            transfers += [(u, v, share) for v in g.neighbors(u)]
    after = _apply(loads, transfers)
    report = RoundReport(round_index, [Proposal(*t) for t in transfers], transfers,
                         compute_metrics(g, loads), compute_metrics(g, after))
    return after, report


# ------------------------------------------------------------------- driver


@dataclass(frozen=True)
class Continuous:
    eps: object = 1


@dataclass(frozen=True)
class Discrete:
    pass


@dataclass(frozen=True)
class Multi:
    pass


@dataclass(frozen=True)
class Diffusion:
    alpha: object = Fraction(1, 2)
    eps: object = 1


SyncAlgorithm = Union[Continuous, Discrete, Multi, Diffusion]


@dataclass
class SyncVerdict:
    converged: bool
    rounds_used: int
    rounds_to_converge: int | None
    budget: int | None
    within_budget: bool | None
    horizon_exceeded: bool
    total_deals: int
    total_moved: object


@dataclass
class SyncResult:
    final: LoadVector
    reports: list[RoundReport]
    verdict: SyncVerdict


def audit_round(g: Graph, algo: SyncAlgorithm, before: LoadVector, after: LoadVector,
                report: RoundReport) -> dict[str, bool]:
    """Evaluate every per-round invariant that applies to ``algo``."""
    mono = check_monotonic_step(before, after, report.deals, fairness=False)
    fair = check_monotonic_step(before, after, report.deals, fairness=True)
    checks = {
        "monotonic": mono.ok,
        "fairness": "fairness" not in fair.kinds(),
        "conservation": "conservation" not in mono.kinds(),
    }
    k = report.metrics_before.discrepancy
    if isinstance(algo, (Continuous, Discrete)):
        checks["matching_degree"] = check_matching_degree(report.deals)
    if isinstance(algo, Continuous):
        checks["lemma2"] = report.lemma_floor_satisfied
        if k > 0:
            lo_b, hi_b = report.metrics_before.l_min, report.metrics_before.l_max
            gained = any(b == lo_b and a > b for b, a in zip(before, after))
            lost = any(b == hi_b and a < b for b, a in zip(before, after))
            checks["extremes_progress"] = gained and lost
    if isinstance(algo, Discrete):
        checks["lemma6"] = report.lemma_floor_satisfied
    if isinstance(algo, Multi):
        checks["no_join"] = check_no_join_extremes(before.values, after.values)
        units = sum(d[2] for d in report.deals)
        checks["unit_drop"] = report.potential_drop >= 2 * units
    return checks


def _converged(g, algo, loads) -> bool:
    if isinstance(algo, (Continuous, Diffusion)):
        return max(loads) - min(loads) <= algo.eps
    return is_eps_balanced(g, loads, 1)


def run_sync(g: Graph, loads: LoadVector, algo: SyncAlgorithm, max_rounds: int) -> SyncResult:
    """Iterate rounds until the algorithm's stopping rule or ``max_rounds``.

    Continuous and diffusion runs stop as soon as the global discrepancy is
    at most ``eps``. Discrete and multi-neighbour runs stop after the first
    round without deals (the fixed point); ``rounds_to_converge`` is the
    number of rounds after which the state was first 1-Balanced.
    """
    if max_rounds < 1:
        raise InvalidParameter("max_rounds must be >= 1")
    step = {
        Continuous: lambda lv, i: round_continuous(g, lv, i),
        Discrete: lambda lv, i: round_discrete(g, lv, i),
        Multi: lambda lv, i: round_multi(g, lv, i),
        Diffusion: lambda lv, i: round_diffusion(g, lv, algo.alpha, i),
    }[type(algo)]
    k0 = max(loads) - min(loads)
    budget = None
    if isinstance(algo, Continuous):
        budget = bound_budget(g.node_count, g.diameter, k0, algo.eps, LoadMode.CONTINUOUS).continuous_rounds
    elif isinstance(algo, Discrete):
        budget = bound_budget(g.node_count, g.diameter, k0).discrete_rounds
    elif isinstance(algo, Multi):
        budget = g.node_count * k0 * k0

    reports: list[RoundReport] = []
    current = loads
    converged_at = 0 if _converged(g, algo, current) else None
    fixed = False
    while len(reports) < max_rounds:
        if isinstance(algo, (Continuous, Diffusion)) and converged_at is not None:
            break
        after, report = step(current, len(reports) + 1)
        report.checks = audit_round(g, algo, current, after, report)
        reports.append(report)
        current = after
        if converged_at is None and _converged(g, algo, current):
            converged_at = len(reports)
        if isinstance(algo, (Discrete, Multi)) and not report.deals:
            fixed = True
            break

    if isinstance(algo, (Discrete, Multi)):
        converged = fixed
    else:
        converged = converged_at is not None
    within = None
    if budget is not None and converged_at is not None:
        within = converged_at <= budget
    return SyncResult(
        final=current,
        reports=reports,
        verdict=SyncVerdict(
            converged=converged,
            rounds_used=len(reports),
            rounds_to_converge=converged_at,
            budget=budget,
            within_budget=within,
            horizon_exceeded=not converged,
            total_deals=sum(len(r.deals) for r in reports),
            total_moved=sum((d[2] for r in reports for d in r.deals), 0),
        ),
    )
