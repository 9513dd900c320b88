"""Global metrics, balance predicates, per-step invariant checks, the
theoretical round budgets and a brute-force reachability oracle.

Everything here is exact: loads are ints or Fractions and the potential is
returned as a Fraction.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_CEILING, Decimal, localcontext
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import BudgetExceeded, InvalidParameter
from .graph import Graph, LoadMode, LoadVector


@dataclass(frozen=True)
class Metrics:
    discrepancy: Fraction
    potential: Fraction
    l_max: Fraction
    l_min: Fraction
    l_avg: Fraction
    max_local_diff: Fraction


def potential_of(values: Sequence) -> Fraction:
    """Sum of squared deviations from the mean, i.e. ``sum(x^2) - S^2/n``."""
    n = len(values)
    s = sum(values)
    sq = sum(x * x for x in values)
    return Fraction(sq) - Fraction(s) * Fraction(s) / n


def compute_metrics(g: Graph, loads: Sequence) -> Metrics:
    values = list(loads)
    hi = max(values)
    lo = min(values)
    local = max((abs(values[u] - values[v]) for u, v in g.edges()), default=0)
    return Metrics(
        discrepancy=Fraction(hi - lo),
        potential=potential_of(values),
        l_max=Fraction(hi),
        l_min=Fraction(lo),
        l_avg=Fraction(sum(values)) / len(values),
        max_local_diff=Fraction(local),
    )


def is_eps_balanced(g: Graph, loads: Sequence, eps) -> bool:
    if eps < 0:
        raise InvalidParameter("eps must be >= 0")
    values = loads.values if isinstance(loads, LoadVector) else loads
    return all(abs(values[u] - values[v]) <= eps for u, v in g.edges())


def is_fair_transfer(load_u, load_v, amount) -> bool:
    if amount < 0:
        raise InvalidParameter("amount must be >= 0")
    return load_u - load_v >= 2 * amount


# ------------------------------------------------------------- step checking


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str


@dataclass
class CheckResult:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def __bool__(self):
        return self.ok


def check_monotonic_step(
    before: Sequence,
    after: Sequence,
    transfers: Iterable[tuple[int, int, object]],
    *,
    fairness: bool = True,
    conserved: bool = True,
) -> CheckResult:
    """Validate one round or atomic step against the anytime contract.

    Rules: every transfer goes from a strictly higher to a strictly lower
    pre-step load (and is fair when ``fairness``); the maximum never rises;
    the minimum never falls; the total is unchanged; no load is negative;
    ``after`` equals ``before`` with the transfers applied.
    Never raises; all problems are collected.
    """
    before = list(before.values if isinstance(before, LoadVector) else before)
    after = list(after.values if isinstance(after, LoadVector) else after)
    res = CheckResult()
    add = res.violations.append
    expected = list(before)
    for src, dst, amount in transfers:
        if not before[src] > before[dst]:
            add(Violation("direction", f"{src}->{dst}: {before[src]} !> {before[dst]}"))
        if fairness and not before[src] - before[dst] >= 2 * amount:
            add(Violation("fairness", f"{src}->{dst} amount {amount} exceeds half of gap"))
        expected[src] -= amount
        expected[dst] += amount
    if expected != after:
        add(Violation("transfer_mismatch", "post-state is not pre-state plus reported transfers"))
    if max(after) > max(before):
        add(Violation("max_increased", f"{max(before)} -> {max(after)}"))
    if min(after) < min(before):
        add(Violation("min_decreased", f"{min(before)} -> {min(after)}"))
    if conserved and sum(after) != sum(before):
        add(Violation("conservation", f"sum {sum(before)} -> {sum(after)}"))
    if any(x < 0 for x in after):
        add(Violation("negative_load", "some load is below zero"))
    return res


def check_matching_degree(deals: Iterable[tuple[int, int, object]]) -> bool:
    """At most one outgoing and one incoming deal per node."""
    deals = list(deals)
    outs = Counter(d[0] for d in deals)
    ins = Counter(d[1] for d in deals)
    return all(c <= 1 for c in outs.values()) and all(c <= 1 for c in ins.values())


def extremal_sets(values: Sequence) -> tuple[set[int], set[int]]:
    lo, hi = min(values), max(values)
    return ({i for i, x in enumerate(values) if x == lo}, {i for i, x in enumerate(values) if x == hi})


def check_no_join_extremes(before: Sequence, after: Sequence) -> bool:
    """No node newly attains the global minimum or maximum value.

    Only meaningful while the extreme value itself is unchanged; when the
    minimum (maximum) moves the set is redefined and nothing is asserted.
    """
    min_b, max_b = extremal_sets(before)
    min_a, max_a = extremal_sets(after)
    ok = True
    if min(after) == min(before):
        ok &= min_a <= min_b
    if max(after) == max(before):
        ok &= max_a <= max_b
    return ok


# -------------------------------------------------------------------- budgets


def lemma2_floor(k, d) -> Fraction:
    return Fraction(k) ** 2 / (2 * d)


def lemma6_floor(k, d) -> Fraction:
    return Fraction(k) ** 2 / (8 * d)


@dataclass(frozen=True)
class BoundBudget:
    continuous_rounds: int | None
    discrete_rounds: int
    deal_budget: int | Fraction
    lemma2_floor: Fraction
    lemma6_floor: Fraction


def _ceil_frac(x: Fraction) -> int:
    return -((-x.numerator) // x.denominator)


def _ceil_coeff_ln(coeff: int, m: int) -> int:
    """``ceil(coeff * ln(m))`` evaluated with 60 significant digits."""
    if m <= 1:
        return 0
    with localcontext() as ctx:
        ctx.prec = 60
        val = Decimal(coeff) * Decimal(m).ln()
        return int(val.to_integral_value(rounding=ROUND_CEILING))


def bound_budget(n: int, d: int, k, eps=None, mode: LoadMode | None = None) -> BoundBudget:
    """Round budgets of the single-proposal algorithms.

    continuous: ``ceil((6n+3) D ln(ceil(n K^2 / (eps^2/2))))``
    discrete:   ``ceil((24n+3) D ln(ceil(n K^2 / (2 D^2)))) + 6 n D^2``
    deal_budget: ``n K^2`` (deal count allowed to the asynchronous engine).
    """
    if n < 2 or d < 1 or k < 0:
        raise InvalidParameter("need n >= 2, D >= 1, K >= 0")
    if mode is LoadMode.CONTINUOUS and (eps is None or eps <= 0):
        raise InvalidParameter("continuous budget needs eps > 0")
    k = Fraction(k)
    if k == 0:
        return BoundBudget(0 if eps is not None else None, 0, 0, Fraction(0), Fraction(0))
    cont = None
    if eps is not None:
        if eps <= 0:
            raise InvalidParameter("eps must be > 0")
        m = _ceil_frac(n * k * k / (Fraction(eps) ** 2 / 2))
        cont = _ceil_coeff_ln((6 * n + 3) * d, m)
    m = _ceil_frac(n * k * k / (2 * d * d))
    disc = _ceil_coeff_ln((24 * n + 3) * d, m) + 6 * n * d * d
    deal = n * k * k
    if deal.denominator == 1:
        deal = int(deal)
    return BoundBudget(cont, disc, deal, lemma2_floor(k, d), lemma6_floor(k, d))


# --------------------------------------------------------------------- oracle


@dataclass(frozen=True)
class OracleReport:
    min_potential: Fraction
    balanced_reachable: bool
    balanced_potentials: frozenset
    balanced_states: frozenset
    states_explored: int


def _fair_moves(g: Graph, state: tuple):
    for u, v in g.directed_edges():
        gap = state[u] - state[v]
        for amount in range(1, gap // 2 + 1):
            nxt = list(state)
            nxt[u] -= amount
            nxt[v] += amount
            yield tuple(nxt)


def brute_force_reachable_check(
    g: Graph,
    loads: Sequence[int],
    horizon: int,
    *,
    max_nodes: int = 5,
    max_sum: int = 12,
    max_horizon: int = 6,
    state_cap: int = 200_000,
) -> OracleReport:
    """Enumerate every state reachable by up to ``horizon`` fair transfers.

    A move is any integer amount ``l >= 1`` from ``u`` to a neighbour ``v``
    with ``load(u) - load(v) >= 2l``. Distinct states are deduplicated per
    depth, which visits the same set as enumerating raw sequences.
    """
    start = tuple(int(x) for x in loads)
    if g.node_count > max_nodes or sum(start) > max_sum or horizon > max_horizon:
        raise InvalidParameter("instance exceeds oracle limits")
    if horizon < 0:
        raise InvalidParameter("horizon must be >= 0")
    seen = {start}
    frontier = [start]
    for _ in range(horizon):
        nxt = []
        for state in frontier:
            for s in _fair_moves(g, state):
                if s not in seen:
                    seen.add(s)
                    nxt.append(s)
                    if len(seen) > state_cap:
                        raise BudgetExceeded(f"more than {state_cap} states")
        frontier = nxt
        if not frontier:
            break
    balanced = frozenset(s for s in seen if is_eps_balanced(g, s, 1))
    return OracleReport(
        min_potential=min(potential_of(s) for s in seen),
        balanced_reachable=bool(balanced),
        balanced_potentials=frozenset(potential_of(s) for s in balanced),
        balanced_states=balanced,
        states_explored=len(seen),
    )
