"""Acceptance suite: one test per criterion, tagged with its number so the
terminal summary prints a pass/fail line for each."""

import itertools
import random
import time

import pytest

from dealbalance.async_engine import Policy, Schedule, run_async
from dealbalance.cli import execute, trace_text
from dealbalance.errors import ValidationError
from dealbalance.graph import (
    Graph,
    LoadMode,
    LoadVector,
    Path,
    RandomConnected,
    Star,
    Uniform,
    generate,
    path_fixture,
)
from dealbalance.metrics import (
    brute_force_reachable_check,
    check_matching_degree,
    check_monotonic_step,
    compute_metrics,
    is_eps_balanced,
    lemma2_floor,
    lemma6_floor,
    potential_of,
)
from dealbalance.scenario import parse_scenario
from dealbalance.selfstab import FaultModel, run_selfstab
from dealbalance.sync import (
    Continuous,
    Discrete,
    Multi,
    plan_waterfill,
    round_diffusion,
    round_discrete,
    round_multi,
    run_sync,
)

SWEEP_SEEDS = range(50)


def sweep_instance(seed):
    """Connected graph with n <= 32 and integer loads with K <= 1000."""
    rng = random.Random(seed)
    n = rng.randint(2, 32)
    p = rng.choice([0.08, 0.15, 0.3, 0.6])
    return RandomConnected(n, p, seed), Uniform(rng.randint(1, 1000), seed)


def replay(loads, reports):
    current = list(loads)
    for rep in reports:
        before = list(current)
        for src, dst, amount in rep.deals:
            current[src] -= amount
            current[dst] += amount
        yield rep, before, list(current)


@pytest.fixture(scope="module")
def continuous_sweep():
    start = time.perf_counter()
    runs = []
    for seed in SWEEP_SEEDS:
        g, lv = generate(*sweep_instance(seed), LoadMode.CONTINUOUS)
        runs.append((g, lv, run_sync(g, lv, Continuous(1), 100_000)))
    return runs, time.perf_counter() - start


@pytest.fixture(scope="module")
def discrete_sweep():
    start = time.perf_counter()
    runs = []
    for seed in SWEEP_SEEDS:
        g, lv = generate(*sweep_instance(seed), LoadMode.DISCRETE)
        res = run_sync(g, lv, Discrete(), 100_000)
        current, extra_deals = res.final, 0
        for _ in range(10):
            current, rep = round_discrete(g, current)
            extra_deals += len(rep.deals)
        runs.append((g, lv, res, current, extra_deals))
    return runs, time.perf_counter() - start


@pytest.mark.criterion(1, "continuous rounds within the eps-balance budget (50 graphs, < 30 s)")
def test_continuous_sweep_within_budget(continuous_sweep):
    runs, elapsed = continuous_sweep
    assert len(runs) == 50
    for g, lv, res in runs:
        v = res.verdict
        assert g.node_count <= 32 and max(lv) - min(lv) <= 1000
        assert v.converged and compute_metrics(g, res.final).discrepancy <= 1
        assert v.rounds_to_converge <= v.budget
    assert elapsed < 30


@pytest.mark.criterion(2, "discrete runs reach a 1-Balanced fixed point within budget (< 60 s)")
def test_discrete_sweep_reaches_fixed_point(discrete_sweep):
    runs, elapsed = discrete_sweep
    assert len(runs) == 50
    for g, lv, res, after_extra, extra_deals in runs:
        v = res.verdict
        assert v.converged and v.rounds_to_converge <= v.budget
        assert is_eps_balanced(g, res.final, 1)
        assert extra_deals == 0 and after_extra == res.final
        assert res.final.total() == lv.total()
    assert elapsed < 60


@pytest.mark.criterion(3, "per-round potential drop meets the lemma floors exactly")
def test_lemma_floors(continuous_sweep, discrete_sweep):
    checked_discrete = 0
    for g, _, res in continuous_sweep[0]:
        d = g.diameter
        for rep in res.reports:
            k = rep.metrics_before.discrepancy
            assert rep.potential_drop >= lemma2_floor(k, d)
    for g, _, res, _, _ in discrete_sweep[0]:
        d = g.diameter
        for rep in res.reports:
            k = rep.metrics_before.discrepancy
            if k >= 2 * d:
                checked_discrete += 1
                assert rep.potential_drop >= lemma6_floor(k, d)
    assert checked_discrete > 0


@pytest.mark.criterion(4, "fair transfers drop the potential by at least 2l^2")
def test_fair_transfer_drop():
    rng = random.Random(2024)
    for _ in range(10_000):
        n = rng.randint(2, 8)
        values = [rng.randint(0, 500) for _ in range(n)]
        u, v = rng.sample(range(n), 2)
        amount = rng.randint(1, 60)
        values[u] = values[v] + 2 * amount + rng.randint(0, 100)
        after = list(values)
        after[u] -= amount
        after[v] += amount
        assert potential_of(values) - potential_of(after) >= 2 * amount**2
    before, after = [10, 0], [5, 5]
    assert potential_of(before) - potential_of(after) == 2 * 5**2


def sync_round_checks(g, lv, res):
    after = list(lv)
    for rep, before, after in replay(lv, res.reports):
        assert check_monotonic_step(before, after, rep.deals).ok
    assert tuple(after) == res.final.values


@pytest.mark.criterion(5, "every round and step is monotonic; diffusion fails on the star overshoot")
def test_monotonic_everywhere(continuous_sweep, discrete_sweep):
    for g, lv, res in continuous_sweep[0]:
        sync_round_checks(g, lv, res)
    for g, lv, res, _, _ in discrete_sweep[0]:
        sync_round_checks(g, lv, res)
    for seed in range(20):
        g, lv = generate(*sweep_instance(seed))
        sync_round_checks(g, lv, run_sync(g, lv, Multi(), 100_000))
    for seed in range(20):
        g, lv = generate(RandomConnected(2 + seed % 10, 0.3, seed), Uniform(120, seed))
        res = run_async(g, lv, Schedule(list(Policy)[seed % 3], seed))
        assert not res.verdict.violations
        loads = [lv.values] + [t.loads for t in res.trace]
        for a, b in zip(loads, loads[1:]):
            assert max(b) <= max(a) and min(b) >= min(a) and min(b) >= 0 and sum(a) == sum(b)
    star = Graph.from_edges(4, [(0, 1), (0, 2), (0, 3)])
    start = LoadVector.continuous([0, 8, 8, 8])
    after, rep = round_diffusion(star, start, alpha=1)
    assert not check_monotonic_step(start, after, rep.deals).ok


@pytest.mark.criterion(6, "at most one incoming and one outgoing deal per node per round")
def test_matching_degree(continuous_sweep, discrete_sweep):
    reports = [r for _, _, res in continuous_sweep[0] for r in res.reports]
    reports += [r for _, _, res, _, _ in discrete_sweep[0] for r in res.reports]
    assert reports
    assert all(check_matching_degree(r.deals) for r in reports)


@pytest.mark.criterion(7, "the staircase path is a fixed point with discrepancy n and local difference 1")
def test_path_fixture_is_fixed():
    n = 8
    g, _ = generate(Path(2 * n), Uniform(0, 0))
    lv = LoadVector.discrete(path_fixture(n))
    for step in (round_discrete, round_multi):
        after, rep = step(g, lv)
        assert rep.deals == [] and after == lv
    m = compute_metrics(g, lv)
    assert m.discrepancy == n and m.max_local_diff == 1


@pytest.mark.criterion(8, "star with a heavy centre: one planning pass levels within 1, balanced in <= 3 rounds")
@pytest.mark.parametrize("seed", range(10))
def test_star_heavy_centre(seed):
    n = 10
    rng = random.Random(seed)
    leaves = [rng.randint(0, n) for _ in range(n - 1)]
    g, _ = generate(Star(n), Uniform(0, 0))
    lv = LoadVector.discrete([n * n] + leaves)
    order = sorted(range(1, n), key=lambda q: (lv[q], q))
    props, tentative = plan_waterfill(lv[0], [lv[q] for q in order])
    planned = [lv[q] + d for q, d in zip(order, props)] + [tentative]
    assert max(planned) - min(planned) <= 1
    res = run_sync(g, lv, Multi(), 3)
    assert res.verdict.converged and res.verdict.rounds_to_converge <= 3
    assert is_eps_balanced(g, res.final, 1)


@pytest.mark.criterion(9, "100 asynchronous runs converge with gap-checked deals within n*K^2 (< 120 s)")
def test_async_convergence():
    start = time.perf_counter()
    for seed in range(100):
        rng = random.Random(7000 + seed)
        n = rng.randint(2, 16)
        g, lv = generate(RandomConnected(n, rng.choice([0.1, 0.3, 0.6]), seed), Uniform(rng.randint(1, 200), seed))
        policy = list(Policy)[seed % 3]
        res = run_async(g, lv, Schedule(policy, seed), max_steps=2_000_000, record_loads=False)
        v = res.verdict
        assert v.terminated and v.balanced, (seed, v)
        assert not v.violations, (seed, v.violations[:3])
        k = max(lv) - min(lv)
        assert v.deals <= n * k * k
        assert res.final.total() == lv.total()
    assert time.perf_counter() - start < 120


def connected_graphs(n):
    pairs = list(itertools.combinations(range(n), 2))
    for r in range(n - 1, len(pairs) + 1):
        for edges in itertools.combinations(pairs, r):
            try:
                yield Graph.from_edges(n, edges)
            except ValidationError:
                continue


def load_vectors(n, total):
    if n == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in load_vectors(n - 1, total - first):
            yield (first,) + rest


@pytest.mark.criterion(10, "exhaustive oracle: discrete final potentials are reachable balanced potentials (< 60 s)")
def test_exhaustive_oracle_equivalence():
    start = time.perf_counter()
    instances = 0
    for n in (2, 3, 4):
        for g in connected_graphs(n):
            for total in range(11):
                for values in load_vectors(n, total):
                    res = run_sync(g, LoadVector.discrete(values), Discrete(), 100)
                    horizon = res.verdict.total_deals
                    rep = brute_force_reachable_check(g, values, horizon, max_horizon=horizon)
                    assert potential_of(res.final.values) in rep.balanced_potentials, (g, values)
                    instances += 1
    assert instances > 10_000
    assert time.perf_counter() - start < 60


def fault_instance(seed):
    rng = random.Random(1000 + seed)
    g, lv = generate(RandomConnected(rng.randint(2, 8), 0.4, seed), Uniform(rng.randint(0, 50), seed))
    return g, lv, Schedule(list(Policy)[seed % 3], seed)


@pytest.mark.criterion(11, "50 fault scenarios stabilize; fault-free runs match the asynchronous engine (< 120 s)")
def test_self_stabilization():
    start = time.perf_counter()
    for seed in range(50):
        g, lv, schedule = fault_instance(seed)
        final, trace, rep = run_selfstab(g, lv, FaultModel(seed, 3, True), schedule, k=3)
        assert rep.terminated and rep.stabilization_step is not None, seed
        assert rep.suffix_monotonic and rep.suffix_conserved, seed
        assert rep.suffix_balanced and is_eps_balanced(g, final, 1), seed
        assert rep.max_channel_occupancy <= 3
        assert all(t.ok for t in trace if t.step >= rep.stabilization_step)
    for seed in range(50):
        g, lv, _ = fault_instance(seed)
        plain = run_async(g, lv, Schedule(list(Policy)[seed % 3], seed))
        final, _, rep = run_selfstab(g, lv, FaultModel(), Schedule(list(Policy)[seed % 3], seed))
        assert final == plain.final and rep.stabilization_step == 0
    assert time.perf_counter() - start < 120


DETERMINISM_SCENARIOS = {
    "continuous": "algorithm = continuous\n[graph]\ntopology = random:20:0.15:{s}\nloads = uniform:1000:{s}\n",
    "discrete": "algorithm = discrete\n[graph]\ntopology = random:20:0.15:{s}\nloads = uniform:1000:{s}\n",
    "multi": "algorithm = multi\n[graph]\ntopology = star:10\nloads = point:0:100\n",
    "async": "algorithm = async\nstride = 7\n[graph]\ntopology = random:12:0.3:{s}\nloads = uniform:200:{s}\n"
             "[async]\npolicy = adversarial\nseed = {s}\n",
    "selfstab": "algorithm = selfstab\nstride = 50\n[graph]\ntopology = random:6:0.4:{s}\nloads = uniform:50:{s}\n"
                "[selfstab]\nk = 3\ngarbage = 3\ncorrupt = true\nfault_seed = {s}\npolicy = random\nseed = {s}\n",
}


@pytest.mark.criterion(12, "repeated runs produce byte-identical traces")
@pytest.mark.parametrize("kind", sorted(DETERMINISM_SCENARIOS))
def test_byte_identical_traces(kind):
    for seed in (1, 2):
        text = "[scenario]\n" + DETERMINISM_SCENARIOS[kind].replace("{s}", str(seed))
        first = trace_text(execute(parse_scenario(text)).rows).encode()
        second = trace_text(execute(parse_scenario(text)).rows).encode()
        assert first == second
        assert len(first.splitlines()) > 2

