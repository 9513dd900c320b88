"""Self-stabilizing alternating-bit data link wrapped around the
asynchronous balancing protocol, plus transient-fault injection.

Every directed edge ``p -> q`` owns one :class:`DataLink`: a sender at
``p``, a receiver at ``q``, a data channel ``p -> q`` and an ack channel
``q -> p``, each holding at most ``max(k, 1)`` frames. A payload is sent as
``<m, 0>`` until ``2k+1`` acks arrive, then as ``<m, 1>`` until another
``2k+1`` acks arrive. The receiver delivers on a 0 -> 1 transition of the
observed bit and then discards the next ``k`` frames.

Frames and payloads carry a provenance tag that only the harness reads; the
node logic never sees it. It is what lets the report say when the last
fault-born frame left the system.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field

from .async_engine import (
    Ack,
    AsyncSimulation,
    Envelope,
    LoadQuery,
    LoadReply,
    Phase,
    Propose,
    Schedule,
    StepTrace,
    StepViolation,
)
from .errors import InvalidParameter
from .graph import Graph, LoadVector
from .metrics import is_eps_balanced

FAULT = "fault"
PROTOCOL = "protocol"


@dataclass
class DataLinkFrame:
    payload: object
    alt_bit: int
    is_ack: bool
    # harness-only provenance: FAULT frames were planted at step 0
    origin: str = field(default=PROTOCOL, compare=False)
    pid: int | None = field(default=None, compare=False)


@dataclass
class LinkSenderState:
    k: int
    current_message: object = None
    current_bit: int = 0
    ack_count: int = 0
    current_pid: int | None = None

    @property
    def acks_needed(self) -> int:
        return 2 * self.k + 1

    def frame(self) -> DataLinkFrame:
        return DataLinkFrame(self.current_message, self.current_bit, False, PROTOCOL, self.current_pid)


@dataclass
class LinkReceiverState:
    k: int
    last_bit: int = 1
    swallow_remaining: int = 0


def link_send(state: LinkSenderState, payload, pid: int | None = None) -> LinkSenderState:
    """Load ``payload`` into an idle sender; frames are ``state.frame()``."""
    if state.current_message is not None:
        raise InvalidParameter("sender is still busy with another payload")
    state.current_message = payload
    state.current_pid = pid
    state.current_bit = 0
    state.ack_count = 0
    return state


def link_on_ack(state: LinkSenderState) -> tuple[LinkSenderState, bool]:
    """Count one ack. Returns whether the current payload just completed."""
    if state.current_message is None:
        return state, False
    state.ack_count += 1
    if state.ack_count < state.acks_needed:
        return state, False
    state.ack_count = 0
    if state.current_bit == 0:
        state.current_bit = 1
        return state, False
    state.current_bit = 0
    state.current_message = None
    state.current_pid = None
    return state, True


def link_receive(state: LinkReceiverState, frame: DataLinkFrame):
    """Returns ``(state, delivered_frame_or_None, ack_frame)``."""
    ack = DataLinkFrame(None, 0, True, PROTOCOL)
    if state.swallow_remaining > 0:
        state.swallow_remaining -= 1
        return state, None, ack
    delivered = None
    if state.last_bit == 0 and frame.alt_bit == 1:
        delivered = frame
        state.swallow_remaining = state.k
    state.last_bit = frame.alt_bit
    return state, delivered, ack


class DataLink:
    """One direction of a link together with its reverse ack channel."""

    def __init__(self, k: int):
        if k < 0:
            raise InvalidParameter("k must be >= 0")
        self.k = k
        self.cap = max(k, 1)
        self.sender = LinkSenderState(k)
        self.receiver = LinkReceiverState(k)
        self.outbox: deque = deque()  # (payload, pid, enqueue_tick)
        self.data: deque[DataLinkFrame] = deque()
        self.acks: deque[DataLinkFrame] = deque()
        self.max_occupancy = 0

    def pending(self) -> int:
        return len(self.outbox) + (self.sender.current_message is not None)

    def head_tick(self, default: int) -> int:
        return self.outbox[0][2] if self.outbox else default

    def has_frames(self) -> bool:
        return bool(self.data or self.acks)

    def can_send(self) -> bool:
        """At most ``k`` frames in flight; ``k = 0`` degrades to
        stop-and-wait (both channels empty)."""
        if self.sender.current_message is None:
            return False
        if self.k == 0:
            return not (self.data or self.acks)
        return len(self.data) < self.k

    def _note(self):
        self.max_occupancy = max(self.max_occupancy, len(self.data), len(self.acks))

    def event_send(self):
        self.data.append(self.sender.frame())
        self._note()

    def event_ack(self) -> tuple[DataLinkFrame, bool]:
        frame = self.acks.popleft()
        _, done = link_on_ack(self.sender)
        return frame, done

    def event_data(self) -> tuple[DataLinkFrame, DataLinkFrame | None]:
        frame = self.data.popleft()
        _, delivered, ack = link_receive(self.receiver, frame)
        self.acks.append(ack)
        self._note()
        return frame, delivered


@dataclass
class FaultModel:
    """Transient faults applied once, before the first step.

    ``garbage_per_channel`` bounds the frames planted in every data and ack
    channel (the count per channel is drawn from ``0..garbage``).
    ``corrupt_state`` scrambles link and node bookkeeping; node loads stay
    intact. ``targeted`` overrides node fields deterministically, e.g.
    ``{2: {"last_gave_load": 7}}``.
    """

    seed: int = 0
    garbage_per_channel: int = 0
    corrupt_state: bool = False
    targeted: dict = field(default_factory=dict)
    value_range: int = 16

    def is_clean(self) -> bool:
        return not (self.garbage_per_channel or self.corrupt_state or self.targeted)


def _garbage_payload(rng: random.Random, span: int):
    if rng.random() < 0.2:
        return bytes(rng.getrandbits(8) for _ in range(rng.randint(1, 6)))
    kind = rng.randrange(4)

    def small():  # tiny ids so garbage collides with live cycles and queries
        return rng.randint(0, 3)

    if kind == 0:
        return LoadQuery(small())
    if kind == 1:
        return LoadReply(rng.randint(0, span), small())
    if kind == 2:
        return Propose(rng.randint(1, span), rng.randint(0, span), small())
    return Ack(rng.randint(0, span), small())


@dataclass
class StabilizationReport:
    stabilization_step: int | None
    terminated: bool
    steps: int
    suffix_monotonic: bool
    suffix_conserved: bool
    suffix_balanced: bool
    anomalies: int
    phantom_deals: int
    garbage_delivered: int
    garbage_discarded: int
    unparsable_payloads: int
    lost_payloads: int
    ignored_acks: int
    clamped_total: int
    conservation_drift: int
    max_channel_occupancy: int
    channel_cap: int
    deals: int
    payloads: int
    frames: int
    violations: list

    @property
    def stabilized(self) -> bool:
        return (self.terminated and self.stabilization_step is not None
                and self.suffix_monotonic and self.suffix_conserved and self.suffix_balanced)


class SelfStabSimulation(AsyncSimulation):
    """The asynchronous protocol with every payload routed through a
    :class:`DataLink`.

    Scheduling works per payload: the schedule picks a link with queued
    payloads, and that link runs frame events until its current payload is
    fully acknowledged. ``step`` counts frame events. Without faults this
    delivers payloads in exactly the order the plain engine would, so the
    final loads coincide.
    """

    strict = False

    def __init__(self, g: Graph, loads: LoadVector, schedule: Schedule, *, k: int = 3,
                 fault_model: FaultModel | None = None):
        super().__init__(g, loads, schedule, record_loads=True)
        self.k = k
        self.links = {e: DataLink(k) for e in self.order}
        self.next_pid = 0
        self.delivered_pids: set[int] = set()
        self.last_pid = {e: -1 for e in self.order}
        self.anomaly_steps: list[int] = []
        self.counts = dict(phantom=0, garbage_delivered=0, garbage_discarded=0, unparsable=0, lost=0,
                           ignored_acks=0, frames=0)
        fault_model = fault_model or FaultModel()
        if fault_model.garbage_per_channel > k:
            raise InvalidParameter("garbage per channel must not exceed k")
        if not fault_model.is_clean():
            self._inject(fault_model)
            self.anomaly_steps.append(0)
        self.effective = self.compute_effective()
        self.initial_effective = list(self.effective)

    # -- faults --------------------------------------------------------------
    def _inject(self, fm: FaultModel) -> None:
        rng = random.Random(fm.seed & ((1 << 64) - 1))
        span = fm.value_range
        for key in self.order:
            link = self.links[key]
            for chan in (link.data, link.acks):
                for _ in range(rng.randint(0, fm.garbage_per_channel)):
                    if chan is link.acks:
                        chan.append(DataLinkFrame(None, 0, True, FAULT))
                    else:
                        chan.append(DataLinkFrame(_garbage_payload(rng, span), rng.randint(0, 1), False, FAULT))
            link._note()
            if fm.corrupt_state:
                link.receiver.last_bit = rng.randint(0, 1)
                link.receiver.swallow_remaining = rng.randint(0, self.k)
                if rng.random() < 0.5:
                    link.sender.current_message = _garbage_payload(rng, span)
                    link.sender.current_bit = rng.randint(0, 1)
                    link.sender.ack_count = rng.randint(0, 2 * self.k)
        if fm.corrupt_state:
            for node in self.nodes:
                nbrs = list(node.neighbors)
                node.last_received_load = rng.randint(0, span)
                node.last_gave_load = rng.randint(0, span)
                node.t_load = rng.randint(0, 2 * span)
                node.phase = rng.choice(list(Phase))
                node.cycle = rng.randint(0, 3)
                node.qid = rng.randint(0, 3)
                node.tentative_load = rng.randint(0, 2 * span)
                node.fresh = {q for q in nbrs if rng.random() < 0.5}
                node.neighbor_cache = {q: rng.randint(0, 2 * span) for q in nbrs}
                node.pending_acks = {q: (rng.randint(1, span), rng.randint(0, 3)) for q in nbrs if rng.random() < 0.5}
                node.answered = {q: (rng.randint(0, 3), rng.randint(0, span)) for q in nbrs if rng.random() < 0.5}
        for u, fields_ in fm.targeted.items():
            for name, value in fields_.items():
                if name == "load" or not hasattr(self.nodes[u], name):
                    raise InvalidParameter(f"cannot corrupt field {name!r}")
                setattr(self.nodes[u], name, value)

    def anomaly(self, step: int | None = None) -> None:
        self.anomaly_steps.append(self.step if step is None else step)

    # -- transport -------------------------------------------------------------
    def send(self, src: int, dst: int, msg) -> None:
        self.links[(src, dst)].outbox.append((msg, self.next_pid, self.tick))
        self.next_pid += 1
        self.messages += 1

    def candidates(self) -> list[tuple]:
        out = []
        for key in self.order:
            link = self.links[key]
            n = link.pending()
            if n:
                out.append((key, n, link.head_tick(self.tick)))
        return out

    def _queued(self, key):
        link = self.links[key]
        if link.sender.current_message is not None:
            yield link.sender.current_message
        for msg, _, _ in link.outbox:
            yield msg

    def _in_flight(self, u: int, q: int) -> bool:
        """Whether a request of ``u``'s current wait on ``q``, or its answer,
        is still queued on the link."""
        node = self.nodes[u]
        if node.phase is Phase.QUERYING:
            req, ans, attr, want = LoadQuery, LoadReply, "qid", node.qid
        else:
            req, ans, attr, want = Propose, Ack, "cycle", node.pending_acks[q][1]
        if any(isinstance(m, req) and getattr(m, attr) == want for m in self._queued((u, q))):
            return True
        return any(isinstance(m, ans) and getattr(m, attr) == want for m in self._queued((q, u)))

    def fire_timers(self) -> None:
        """Idealised timeout: retry exactly the waits that nothing queued can
        still satisfy (lost or swallowed payloads)."""
        for u, node in enumerate(self.nodes):
            if node.phase is Phase.IDLE:
                continue
            awaited = node.awaited()
            stalled = [q for q in awaited if not self._in_flight(u, q)]
            if awaited and not stalled:
                continue
            for dst, msg in node.on_timer(stalled):
                self.send(u, dst, msg)
            for dst, msg in self.wake(u):
                self.send(u, dst, msg)

    def _frame_event(self, key, link: DataLink, out: list) -> bool:
        """Run one frame event on ``link``; returns whether the sender just
        finished its payload."""
        sender = link.sender
        self.step += 1
        self.counts["frames"] += 1
        if link.can_send():
            link.event_send()
            return False
        if link.acks:
            pid = sender.current_pid
            frame, done = link.event_ack()
            if frame.origin == FAULT:
                self.counts["garbage_discarded"] += 1
                self.anomaly()
            if done and pid is not None and pid not in self.delivered_pids:
                self.counts["lost"] += 1
                self.anomaly()
            return done
        frame, delivered = link.event_data()
        if frame.origin == FAULT and delivered is None:
            self.counts["garbage_discarded"] += 1
            self.anomaly()
        if delivered is not None:
            garbage = delivered.pid is None
            if garbage:
                self.counts["garbage_delivered"] += 1
                self.anomaly()
            else:
                if delivered.pid in self.delivered_pids or delivered.pid <= self.last_pid[key]:
                    self.violations.append(StepViolation(self.step, f"link {key}", frozenset({"fifo"})))
                    self.anomaly()
                self.delivered_pids.add(delivered.pid)
                self.last_pid[key] = delivered.pid
            out.append(Envelope(delivered.pid if delivered.pid is not None else -1, key[0], key[1],
                                delivered.payload, self.tick, garbage=garbage, step=self.step))
        return False

    def transmit(self, key) -> list[Envelope]:
        link = self.links[key]
        if link.sender.current_message is None:
            msg, pid, _ = link.outbox.popleft()
            link_send(link.sender, msg, pid)
        out: list[Envelope] = []
        while not self._frame_event(key, link, out):
            pass
        return out

    def quiescent_fallback(self) -> list[Envelope] | None:
        out: list[Envelope] = []
        flushed = False
        for key in self.order:
            link = self.links[key]
            while link.has_frames():
                flushed = True
                self._frame_event(key, link, out)
        if flushed:
            return out
        return super().quiescent_fallback()

    # -- delivery --------------------------------------------------------------
    def dispatch(self, env: Envelope):
        clamped = sum(n.clamped for n in self.nodes)
        out, deals, kind = super().dispatch(env)
        if env.garbage:
            self.counts["phantom"] += len(deals)
        if sum(n.clamped for n in self.nodes) != clamped:
            self.anomaly(env.step)
        return out, deals, kind

    def on_lost_debit(self, key, deal: int) -> None:
        self.counts["ignored_acks"] += 1
        self.anomaly()

    def on_unparsable(self, env: Envelope) -> None:
        self.counts["unparsable"] += 1
        self.anomaly(env.step)

    def after_step(self, env, kind, deals, sent, before, after) -> None:
        n_before = len(self.violations)
        super().after_step(env, kind, deals, sent, before, after)
        if len(self.violations) != n_before:
            self.anomaly(env.step)

    # -- report ----------------------------------------------------------------
    def report(self, terminated: bool) -> StabilizationReport:
        stab = max(self.anomaly_steps) + 1 if self.anomaly_steps else 0
        stab_step = stab if terminated else None
        prev = list(self.initial_effective)
        for t in self.trace:
            if t.step < stab:
                prev = list(t.loads)
        suffix = [list(t.loads) for t in self.trace if t.step >= stab]
        mono = conserved = True
        for cur in suffix:
            mono &= max(cur) <= max(prev) and min(cur) >= min(prev) and min(cur) >= 0
            conserved &= sum(cur) == sum(prev)
            prev = cur
        return StabilizationReport(
            stabilization_step=stab_step,
            terminated=terminated,
            steps=self.step,
            suffix_monotonic=mono,
            suffix_conserved=conserved,
            suffix_balanced=is_eps_balanced(self.g, prev, 1),
            anomalies=len(self.anomaly_steps),
            phantom_deals=self.counts["phantom"],
            garbage_delivered=self.counts["garbage_delivered"],
            garbage_discarded=self.counts["garbage_discarded"],
            unparsable_payloads=self.counts["unparsable"],
            lost_payloads=self.counts["lost"],
            ignored_acks=self.counts["ignored_acks"],
            clamped_total=sum(n.clamped for n in self.nodes),
            conservation_drift=sum(self.effective) - self.initial_total,
            max_channel_occupancy=max(link.max_occupancy for link in self.links.values()),
            channel_cap=max(self.k, 1),
            deals=self.deals,
            payloads=self.messages,
            frames=self.counts["frames"],
            violations=list(self.violations),
        )


def run_selfstab(g: Graph, loads: LoadVector, fault_model: FaultModel | None = None,
                 schedule: Schedule | None = None, max_steps: int = 20_000_000, *,
                 k: int = 3) -> tuple[LoadVector, list[StepTrace], StabilizationReport]:
    sim = SelfStabSimulation(g, loads, schedule or Schedule(), k=k, fault_model=fault_model)
    res = sim.run(max_steps)
    return res.final, res.trace, sim.report(res.verdict.terminated)
