"""Asynchronous deal-agreement balancing under an atomic-step interleaving
model with per-edge FIFO channels and pluggable delivery schedules.

Nodes read neighbour loads with LoadQuery/LoadReply pairs, plan a cycle of
proposals with round-robin splitting, and settle each proposal with an Ack
carrying the accepted deal. The harness keeps an *effective* load per node,
``load + last_received - last_gave - owed``, where ``owed`` is the sum of
deals already accepted on the node's proposals whose Ack has not been
processed yet. Every invariant is asserted on that vector.
"""

from __future__ import annotations

import enum
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

from .errors import InvalidParameter, UnexpectedAck
from .graph import Graph, LoadMode, LoadVector
from .metrics import Violation, check_monotonic_step, is_eps_balanced

# ------------------------------------------------------------------ messages


@dataclass(frozen=True)
class LoadQuery:
    qid: int


@dataclass(frozen=True)
class LoadReply:
    load: int
    qid: int


@dataclass(frozen=True)
class Propose:
    amount: int
    tentative_load: int
    cycle: int


@dataclass(frozen=True)
class Ack:
    deal: int
    cycle: int


AsyncMessage = Union[LoadQuery, LoadReply, Propose, Ack]


@dataclass
class Envelope:
    seq: int
    src: int
    dst: int
    msg: object
    sent_tick: int
    garbage: bool = False
    step: int = 0


# ---------------------------------------------------------------- node logic


class Phase(enum.Enum):
    IDLE = "idle"
    QUERYING = "querying"
    AWAITING_ACKS = "awaiting_acks"


def rr_proposal(load_to_transfer: int, pv_less: Sequence[tuple[int, int]], tentative_load: int) -> dict[int, int]:
    """Split ``load_to_transfer`` over ``pv_less`` without lifting anyone
    above ``tentative_load``.

    While budget remains: if lifting every member by ``tentative - m``
    (``m`` the highest current member) fits the budget, do so and drop the
    members that reached the tentative level; otherwise hand out the rest
    one unit at a time, ascending NodeId, starting at the lowest member.
    """
    if load_to_transfer < 0:
        raise InvalidParameter("load_to_transfer must be >= 0")
    level = {q: load for q, load in pv_less}
    amounts = {q: 0 for q in level}
    members = sorted(level)
    left = load_to_transfer
    while members and left > 0:
        m = max(level[q] for q in members)
        lift = tentative_load - m
        if lift <= 0:
            break
        if lift * len(members) <= left:
            for q in members:
                amounts[q] += lift
                level[q] += lift
            left -= lift * len(members)
            members = [q for q in members if level[q] != tentative_load]
            continue
        idx = members.index(min(members, key=lambda q: (level[q], q)))
        while left > 0:
            open_ = [q for q in members if level[q] < tentative_load]
            if not open_:
                break
            q = members[idx % len(members)]
            idx += 1
            if level[q] < tentative_load:
                amounts[q] += 1
                level[q] += 1
                left -= 1
        break
    return amounts


@dataclass
class AsyncNodeState:
    """Local state of one node. Handlers mutate in place and return the
    messages to send as ``(dst, msg)`` pairs."""

    node: int
    neighbors: tuple[int, ...]
    load: int
    t_load: int = 0
    last_received_load: int = 0
    last_gave_load: int = 0
    neighbor_cache: dict[int, int] = field(default_factory=dict)
    pending_acks: dict[int, tuple[int, int]] = field(default_factory=dict)
    phase: Phase = Phase.IDLE
    cycle: int = 0
    qid: int = 0
    fresh: set[int] = field(default_factory=set)
    tentative_load: int = 0
    answered: dict[int, tuple[int, int]] = field(default_factory=dict)
    strict: bool = True
    clamped: int = 0

    def __post_init__(self):
        self.t_load = self.load

    def local_load(self) -> int:
        return self.load + self.last_received_load - self.last_gave_load

    def begin_query(self) -> list:
        self.qid += 1
        self.phase = Phase.QUERYING
        self.fresh = set()
        return [(q, LoadQuery(self.qid)) for q in self.neighbors]

    def on_query(self, src: int, msg: LoadQuery) -> list:
        return [(src, LoadReply(self.local_load(), msg.qid))]

    def on_reply(self, src: int, msg: LoadReply) -> list:
        if self.phase is not Phase.QUERYING or msg.qid != self.qid or src not in self.neighbors:
            return []
        self.neighbor_cache[src] = msg.load
        self.fresh.add(src)
        if len(self.fresh) == len(self.neighbors):
            return self.start_cycle()
        return []

    def start_cycle(self) -> list:
        folded = self.load + self.last_received_load - self.last_gave_load
        if folded < 0:
            self.clamped += -folded
            folded = 0
        self.load = folded
        self.last_received_load = 0
        self.last_gave_load = 0
        self.t_load = self.load
        self.pending_acks = {}
        v_less = [q for q in self.neighbors if self.neighbor_cache.get(q, self.t_load) < self.t_load]
        if not v_less:
            self.phase = Phase.IDLE
            return []
        min_load = min(self.neighbor_cache[q] for q in v_less)
        to_transfer = (self.t_load - min_load) // 2
        self.tentative_load = self.t_load - to_transfer
        pv_less = [(q, self.neighbor_cache[q]) for q in v_less if self.neighbor_cache[q] < self.tentative_load]
        amounts = rr_proposal(to_transfer, pv_less, self.tentative_load)
        self.cycle += 1
        out = []
        for q, amount in sorted(amounts.items()):
            if amount > 0:
                self.pending_acks[q] = (amount, self.cycle)
                out.append((q, Propose(amount, self.tentative_load, self.cycle)))
        self.phase = Phase.AWAITING_ACKS if out else Phase.IDLE
        return out

    def on_proposal(self, src: int, msg: Propose) -> tuple[list, int, bool]:
        """Returns ``(out, deal, duplicate)``."""
        prev = self.answered.get(src)
        if prev is not None and prev[0] == msg.cycle:
            return [(src, Ack(prev[1], msg.cycle))], 0, True
        gap = msg.tentative_load - self.t_load
        deal = min(gap, msg.amount) if gap > 0 else 0
        deal = max(deal, 0)
        if deal:
            self.last_received_load += deal
            self.t_load += deal
        self.answered[src] = (msg.cycle, deal)
        return [(src, Ack(deal, msg.cycle))], deal, False

    def on_ack(self, src: int, msg: Ack) -> bool:
        """Apply an Ack; returns whether it matched an outstanding proposal."""
        expected = self.pending_acks.get(src)
        if expected is None or expected[1] != msg.cycle or not 0 <= msg.deal:
            if self.strict:
                raise UnexpectedAck(f"node {self.node}: unexpected ack {msg} from {src}")
            return False
        deal = msg.deal
        if deal > expected[0]:
            if self.strict:
                raise UnexpectedAck(f"node {self.node}: ack {msg} exceeds proposal {expected[0]}")
            deal = expected[0]
        self.last_gave_load += deal
        del self.pending_acks[src]
        if not self.pending_acks:
            self.phase = Phase.IDLE
        return True

    def awaited(self) -> list[int]:
        """Neighbours this node is currently waiting on."""
        if self.phase is Phase.QUERYING:
            return [q for q in self.neighbors if q not in self.fresh]
        if self.phase is Phase.AWAITING_ACKS:
            return sorted(self.pending_acks)
        return []

    def on_timer(self, targets: Iterable[int]) -> list:
        """Retry requests towards ``targets``; resets a wait that can never
        complete (no neighbour left to hear from)."""
        targets = set(targets)
        if self.phase is Phase.QUERYING:
            if all(q in self.fresh for q in self.neighbors):
                return self.begin_query()
            return [(q, LoadQuery(self.qid)) for q in self.neighbors if q in targets and q not in self.fresh]
        if self.phase is Phase.AWAITING_ACKS:
            if not self.pending_acks:
                self.phase = Phase.IDLE
                return []
            return [(q, Propose(a, self.tentative_load, c))
                    for q, (a, c) in sorted(self.pending_acks.items()) if q in targets]
        return []


def node_start_cycle(state: AsyncNodeState, neighbor_cache: dict[int, int] | None = None) -> list:
    if neighbor_cache is not None:
        state.neighbor_cache = dict(neighbor_cache)
    return state.start_cycle()


def node_on_proposal(state: AsyncNodeState, src: int, msg: Propose):
    out, _, _ = state.on_proposal(src, msg)
    return out[0][1]


def node_on_ack(state: AsyncNodeState, src: int, msg: Ack) -> AsyncNodeState:
    state.on_ack(src, msg)
    return state


# ------------------------------------------------------------------ schedule


class Policy(enum.Enum):
    ROUND_ROBIN = "round_robin"
    RANDOM = "random"
    ADVERSARIAL = "adversarial"


@dataclass
class Schedule:
    """Chooses which non-empty channel delivers next.

    Fairness: once some head message has waited more than
    ``node_count * queued_total`` ticks, the oldest head is delivered first
    regardless of policy.
    """

    policy: Policy = Policy.RANDOM
    seed: int = 0
    step_counter: int = 0
    _cursor: int = -1
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self):
        self.policy = Policy(self.policy)
        self._rng = random.Random(self.seed & ((1 << 64) - 1))

    def choose(self, candidates: Sequence[tuple], node_count: int, tick: int, order: Sequence) -> object:
        """``candidates`` are ``(key, length, head_sent_tick)`` in key order;
        ``order`` is the full key ordering used by round-robin."""
        self.step_counter += 1
        total = sum(c[1] for c in candidates)
        cap = node_count * total
        oldest = min(candidates, key=lambda c: (c[2], order.index(c[0])))
        if tick - oldest[2] > cap:
            return oldest[0]
        if self.policy is Policy.ROUND_ROBIN:
            live = {c[0] for c in candidates}
            for off in range(1, len(order) + 1):
                idx = (self._cursor + off) % len(order)
                if order[idx] in live:
                    self._cursor = idx
                    return order[idx]
        if self.policy is Policy.RANDOM:
            return self._rng.choice(candidates)[0]
        longest = max(c[1] for c in candidates)
        return self._rng.choice([c for c in candidates if c[1] == longest])[0]


# ------------------------------------------------------------------- harness


@dataclass(frozen=True)
class StepViolation:
    step: int
    where: str
    kinds: frozenset

    def __str__(self):
        return f"step {self.step}: {self.where}: {', '.join(sorted(self.kinds))}"


@dataclass
class StepTrace:
    step: int
    kind: str
    src: int
    dst: int
    deals: list
    messages_sent: int
    loads: tuple
    ok: bool = True


@dataclass
class AsyncVerdict:
    terminated: bool
    balanced: bool
    steps: int
    deals: int
    deal_budget: int
    within_budget: bool
    horizon_exceeded: bool
    messages: int
    violations: list
    max_steps_between_deals: int
    conservation_drift: int


@dataclass
class AsyncResult:
    final: LoadVector
    trace: list[StepTrace]
    verdict: AsyncVerdict


class AsyncSimulation:
    """Single-threaded interleaving of atomic delivery steps.

    One step delivers the head of one channel and runs the receiving
    handler, including any follow-up sends and a new load query when the
    node went idle. Once the effective loads are 1-Balanced the run drains:
    idle nodes stop querying and the run ends when every channel is empty.
    """

    strict = True

    def __init__(self, g: Graph, loads: LoadVector, schedule: Schedule, *, record_loads: bool = True):
        if loads.mode is not LoadMode.DISCRETE:
            raise InvalidParameter("the asynchronous engine runs on discrete loads")
        self.g = g
        self.schedule = schedule
        self.record_loads = record_loads
        self.nodes = [AsyncNodeState(u, g.neighbors(u), loads[u], strict=self.strict) for u in range(g.node_count)]
        self.owed: dict[tuple[int, int, int], int] = {}
        self.order = g.directed_edges()
        self.channels = {e: deque() for e in self.order}
        self.seq = {e: 0 for e in self.order}
        self.last_seq = {e: -1 for e in self.order}
        self.tick = 0
        self.step = 0
        self.messages = 0
        self.deals = 0
        self.draining = False
        self.trace: list[StepTrace] = []
        self.violations: list[StepViolation] = []
        self.initial_total = sum(loads)
        self.initial_discrepancy = max(loads) - min(loads)
        self.effective = self.compute_effective()

    # -- accounting --------------------------------------------------------
    def compute_effective(self) -> list[int]:
        eff = [n.local_load() for n in self.nodes]
        for (p, _, _), d in self.owed.items():
            eff[p] -= d
        return eff

    # -- transport ---------------------------------------------------------
    def send(self, src: int, dst: int, msg) -> None:
        key = (src, dst)
        self.channels[key].append(Envelope(self.seq[key], src, dst, msg, self.tick))
        self.seq[key] += 1
        self.messages += 1

    def candidates(self) -> list[tuple]:
        return [(k, len(q), q[0].sent_tick) for k, q in self.channels.items() if q]

    def transmit(self, key) -> list[Envelope]:
        env = self.channels[key].popleft()
        if env.seq <= self.last_seq[key]:
            self.violations.append(StepViolation(self.step, f"channel {key}", frozenset({"fifo"})))
        self.last_seq[key] = env.seq
        self.step += 1
        env.step = self.step
        return [env]

    def fire_timers(self) -> None:
        """Hook run before every scheduling decision; channels here never
        lose messages so no timer is needed."""

    def quiescent_fallback(self) -> list[Envelope] | None:
        """Called when no channel holds a message.

        Returns deliveries produced while making progress, or None when the
        system is truly quiescent.
        """
        if self.draining:
            return None
        woke = False
        for u in range(self.g.node_count):
            for dst, msg in self.wake(u):
                self.send(u, dst, msg)
                woke = True
        return [] if woke else None

    # -- delivery ----------------------------------------------------------
    def dispatch(self, env: Envelope) -> tuple[list, list, str]:
        node = self.nodes[env.dst]
        msg = env.msg
        deals: list = []
        if isinstance(msg, LoadQuery):
            out = node.on_query(env.src, msg)
        elif isinstance(msg, LoadReply):
            out = node.on_reply(env.src, msg)
        elif isinstance(msg, Propose):
            before_tload = node.t_load
            out, deal, dup = node.on_proposal(env.src, msg)
            if deal > 0:
                if not env.garbage:
                    self.owed[(env.src, env.dst, msg.cycle)] = deal
                deals.append((env.src, env.dst, deal, msg.tentative_load, before_tload, env.garbage))
        elif isinstance(msg, Ack):
            key = (env.dst, env.src, msg.cycle)
            applied = node.on_ack(env.src, msg)
            if not env.garbage and key in self.owed:
                if not applied:
                    self.on_lost_debit(key, self.owed[key])
                del self.owed[key]
            out = []
        else:
            self.on_unparsable(env)
            out = []
        kind = type(msg).__name__
        return out, deals, kind

    def on_lost_debit(self, key, deal: int) -> None:
        """A real Ack reached a proposer that no longer expects it."""

    def on_unparsable(self, env: Envelope) -> None:
        raise InvalidParameter(f"unparsable payload {env.msg!r}")

    def wake(self, u: int) -> list:
        node = self.nodes[u]
        if node.phase is Phase.IDLE and not self.draining:
            return node.begin_query()
        return []

    def balanced(self, eff: Sequence[int]) -> bool:
        return is_eps_balanced(self.g, eff, 1)

    def after_step(self, env: Envelope, kind: str, deals: list, sent: int, before: list, after: list) -> None:
        transfers = [(p, q, d) for p, q, d, _, _, _ in deals]
        ok = True
        if deals or before != after:
            res = check_monotonic_step(before, after, transfers, fairness=True)
            for p, q, d, tentative, tload, _ in deals:
                if not (tentative > tload and after[p] >= after[q]):
                    res.violations.append(Violation("gap", f"deal {p}->{q} {d}"))
            if not res.ok:
                ok = False
                self.violations.append(StepViolation(env.step, f"{kind} {env.src}->{env.dst}",
                                                     frozenset(res.kinds())))
        self.trace.append(StepTrace(env.step, kind, env.src, env.dst, transfers, sent,
                                    tuple(after) if self.record_loads else (), ok))

    def run(self, max_steps: int) -> AsyncResult:
        if max_steps < 1:
            raise InvalidParameter("max_steps must be >= 1")
        for u in range(self.g.node_count):
            for dst, msg in self.wake(u):
                self.send(u, dst, msg)
        last_deal_step = 0
        max_gap = 0
        terminated = False
        while self.step < max_steps:
            bal = self.balanced(self.effective)
            if bal and not self.draining:
                self.draining = True
            elif not bal and self.draining:
                self.draining = False
                for u in range(self.g.node_count):
                    for dst, msg in self.wake(u):
                        self.send(u, dst, msg)
            self.fire_timers()
            cands = self.candidates()
            if cands:
                key = self.schedule.choose(cands, self.g.node_count, self.tick, self.order)
                envs = self.transmit(key)
            else:
                envs = self.quiescent_fallback()
                if envs is None:
                    terminated = self.draining
                    break
            for env in envs:
                self.tick += 1
                before = self.effective
                sent_before = self.messages
                out, deals, kind = self.dispatch(env)
                for dst, msg in out:
                    self.send(env.dst, dst, msg)
                for dst, msg in self.wake(env.dst):
                    self.send(env.dst, dst, msg)
                self.effective = self.compute_effective()
                if deals:
                    self.deals += len(deals)
                    if not bal:
                        max_gap = max(max_gap, self.step - last_deal_step)
                    last_deal_step = self.step
                self.after_step(env, kind, deals, self.messages - sent_before, before, self.effective)
        return self.result(terminated, max_gap)

    def final_loads(self) -> LoadVector:
        return LoadVector.discrete(max(x, 0) for x in self.effective)

    def result(self, terminated: bool, max_gap: int) -> AsyncResult:
        eff = self.effective
        k0 = self.initial_discrepancy
        budget = self.g.node_count * k0 * k0
        return AsyncResult(
            final=self.final_loads(),
            trace=self.trace,
            verdict=AsyncVerdict(
                terminated=terminated,
                balanced=self.balanced(eff),
                steps=self.step,
                deals=self.deals,
                deal_budget=budget,
                within_budget=self.deals <= budget,
                horizon_exceeded=not terminated,
                messages=self.messages,
                violations=list(self.violations),
                max_steps_between_deals=max_gap,
                conservation_drift=sum(eff) - self.initial_total,
            ),
        )


def run_async(g: Graph, loads: LoadVector, schedule: Schedule | None = None, max_steps: int = 1_000_000,
              *, record_loads: bool = True) -> AsyncResult:
    sim = AsyncSimulation(g, loads, schedule or Schedule(), record_loads=record_loads)
    return sim.run(max_steps)
