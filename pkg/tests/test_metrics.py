import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dealbalance.errors import BudgetExceeded, InvalidParameter
from dealbalance.graph import Cycle, Graph, LoadMode, LoadVector, Path, Star, Uniform, generate
from dealbalance.metrics import (
    bound_budget,
    brute_force_reachable_check,
    check_matching_degree,
    check_monotonic_step,
    check_no_join_extremes,
    compute_metrics,
    is_eps_balanced,
    is_fair_transfer,
    lemma2_floor,
    lemma6_floor,
    potential_of,
)

EDGE = Graph.from_edges(2, [(0, 1)])
TRIANGLE = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
PATH3 = Graph.from_edges(3, [(0, 1), (1, 2)])


def topology(kind):
    return generate(kind, Uniform(0, 0))[0]


def naive_potential(values):
    avg = Fraction(sum(values), len(values))
    return sum((Fraction(x) - avg) ** 2 for x in values)


def test_edge_metrics():
    m = compute_metrics(EDGE, [10, 0])
    assert (m.discrepancy, m.l_avg, m.potential) == (10, 5, 50)


def test_uniform_and_path_metrics():
    m = compute_metrics(topology(Cycle(5)), [7] * 5)
    assert m.potential == 0 and m.discrepancy == 0
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    m = compute_metrics(g, [0, 1, 1, 2])
    assert (m.max_local_diff, m.discrepancy) == (1, 2)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.fractions(min_value=0, max_value=1000, max_denominator=50), min_size=1, max_size=20))
def test_potential_matches_definition(values):
    assert potential_of(values) == naive_potential(values)


def test_eps_balanced():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    assert is_eps_balanced(g, [0, 1, 1, 2], 1)
    assert not is_eps_balanced(EDGE, [7, 0], 1)
    assert is_eps_balanced(g, LoadVector.discrete([9, 0, 4, 2]), 9)
    with pytest.raises(InvalidParameter):
        is_eps_balanced(EDGE, [1, 0], -1)


def test_fair_transfer():
    assert is_fair_transfer(10, 0, 5)
    assert not is_fair_transfer(10, 0, 6)
    assert is_fair_transfer(7, 0, 7 // 2)
    with pytest.raises(InvalidParameter):
        is_fair_transfer(1, 0, -1)


def test_monotonic_step_examples():
    assert check_monotonic_step([8, 0, 4], [4, 4, 4], [(0, 1, 4)]).ok
    res = check_monotonic_step([5, 5], [6, 4], [(1, 0, 1)])
    assert "direction" in res.kinds()
    res = check_monotonic_step([10, 0], [4, 6], [(0, 1, 6)])
    assert "fairness" in res.kinds()
    assert "max_increased" not in res.kinds()


def test_monotonic_step_catches_each_rule():
    assert "conservation" in check_monotonic_step([3, 1], [3, 2], []).kinds()
    assert "transfer_mismatch" in check_monotonic_step([3, 1], [2, 2], []).kinds()
    assert "max_increased" in check_monotonic_step([3, 1, 0], [4, 0, 0], [(1, 0, 1)]).kinds()
    assert "min_decreased" in check_monotonic_step([3, 1], [4, 0], [(1, 0, 1)]).kinds()
    assert "negative_load" in check_monotonic_step([0, 0], [-1, 1], [(0, 1, 1)]).kinds()
    # unfair transfers still pass when fairness is switched off
    assert check_monotonic_step([10, 0], [4, 6], [(0, 1, 6)], fairness=False).ok


def test_matching_degree_and_extremes():
    assert check_matching_degree([(0, 1, 1), (1, 2, 1)])
    assert not check_matching_degree([(0, 1, 1), (0, 2, 1)])
    assert not check_matching_degree([(0, 2, 1), (1, 2, 1)])
    assert check_no_join_extremes([5, 3, 1], [4, 3, 2])
    assert not check_no_join_extremes([5, 3, 1, 1], [5, 1, 2, 2])


# -------------------------------------------------------------------- budgets


def float_budget(n, d, k, eps):
    """Independent evaluation with floats; only trusted away from integers."""
    m_cont = math.ceil(n * k * k / (eps * eps / 2))
    cont = (6 * n + 3) * d * math.log(m_cont)
    m_disc = math.ceil(n * k * k / (2 * d * d))
    disc = (24 * n + 3) * d * math.log(m_disc) if m_disc > 1 else 0.0
    return cont, disc


def test_budget_reference_values():
    b = bound_budget(2, 1, 10, 1, LoadMode.CONTINUOUS)
    assert b.continuous_rounds == 90  # ceil(15 * ln 400)
    assert b.discrete_rounds == math.ceil(51 * math.log(100)) + 12
    assert b.deal_budget == 200
    assert lemma2_floor(10, 2) == 25
    assert lemma6_floor(10, 2) == Fraction(25, 4)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(2, 64), d=st.integers(1, 20), k=st.integers(1, 5000), eps=st.sampled_from([1, 2, Fraction(1, 2)]))
def test_budget_matches_float_reference(n, d, k, eps):
    b = bound_budget(n, d, k, eps)
    cont, disc = float_budget(n, d, k, float(eps))
    if abs(cont - round(cont)) > 1e-6:
        assert b.continuous_rounds == math.ceil(cont)
    if abs(disc - round(disc)) > 1e-6:
        assert b.discrete_rounds == math.ceil(disc) + 6 * n * d * d


def test_budget_zero_discrepancy_and_errors():
    b = bound_budget(5, 2, 0, 1)
    assert (b.continuous_rounds, b.discrete_rounds, b.deal_budget) == (0, 0, 0)
    for args in [(1, 1, 3), (3, 0, 3), (3, 1, -1)]:
        with pytest.raises(InvalidParameter):
            bound_budget(*args)
    with pytest.raises(InvalidParameter):
        bound_budget(3, 1, 3, None, LoadMode.CONTINUOUS)
    with pytest.raises(InvalidParameter):
        bound_budget(3, 1, 3, 0)


# --------------------------------------------------------------------- oracle


def naive_reachable(g, start, horizon):
    """Enumerate raw transfer sequences without any deduplication."""
    found = {tuple(start)}

    def walk(state, depth):
        if depth == horizon:
            return
        for u, v in g.directed_edges():
            for amount in range(1, (state[u] - state[v]) // 2 + 1):
                nxt = list(state)
                nxt[u] -= amount
                nxt[v] += amount
                found.add(tuple(nxt))
                walk(nxt, depth + 1)

    walk(list(start), 0)
    return found


def test_oracle_examples():
    rep = brute_force_reachable_check(TRIANGLE, [3, 0, 0], 2)
    assert rep.balanced_reachable
    assert (1, 1, 1) in rep.balanced_states
    rep = brute_force_reachable_check(EDGE, [1, 0], 3)
    assert rep.states_explored == 1
    assert rep.min_potential == Fraction(1, 2)
    rep = brute_force_reachable_check(EDGE, [4, 0], 1)
    assert rep.min_potential == 0


@pytest.mark.parametrize(
    "g, loads, horizon",
    [(TRIANGLE, [6, 0, 1], 3), (PATH3, [7, 0, 3], 3), (topology(Star(4)), [6, 0, 2, 1], 3)],
)
def test_oracle_agrees_with_naive_enumeration(g, loads, horizon):
    rep = brute_force_reachable_check(g, loads, horizon)
    states = naive_reachable(g, loads, horizon)
    assert rep.states_explored == len(states)
    assert rep.min_potential == min(naive_potential(s) for s in states)
    assert rep.balanced_states == {s for s in states if all(abs(s[u] - s[v]) <= 1 for u, v in g.edges())}


def test_oracle_limits():
    big = topology(Path(6))
    with pytest.raises(InvalidParameter):
        brute_force_reachable_check(big, [0] * 6, 1)
    with pytest.raises(InvalidParameter):
        brute_force_reachable_check(EDGE, [13, 0], 1)
    with pytest.raises(InvalidParameter):
        brute_force_reachable_check(EDGE, [1, 0], 7)
    with pytest.raises(BudgetExceeded):
        brute_force_reachable_check(PATH3, [12, 0, 0], 6, state_cap=5)
