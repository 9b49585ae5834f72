"""Deterministic scenario runner with fault injection.

A scenario drives one engine through a virtual-time event loop: producers
publish flows of sequenced messages, consumers drain them, and a fault plan
crashes nodes, drops or delays acknowledgments, duplicates deliveries or
crashes consumers at chosen points.  Everything — scheduling jitter,
backoff, fault timing — comes from the scenario seed and a logical clock,
so the same (scenario, seed) pair always yields byte-identical journals.

The run records the ownership-transfer timeline per message: produced,
handled by the broker, confirmed to the producer, delivered to a consumer,
and finally acknowledged (exchange engine) or retained until expiry (log
engine, which keeps no consumer state).
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .bench import WorkloadSpec
from .core import (
    BrokerDown,
    CorrectnessReport,
    Delivery,
    FlushPolicy,
    Journal,
    JournalEvent,
    Message,
    Ordering,
    QoSConfig,
    check_correctness,
)
from .exchbroker import (
    BindingSpec,
    ConsumeMode,
    ExchEngine,
    ExchangeKind,
    ExchangeSpec,
    OverflowPolicy,
    QueueSpec,
)
from .logbroker import LogAckMode, LogEngine, OffsetOutOfRange, TopicConfig, partition_for


class ScenarioInvalid(ValueError):
    pass


class NondeterminismDetected(RuntimeError):
    pass


# -- virtual time costs (ns); arbitrary but fixed ---------------------------

T_PRODUCE_GAP = 200_000
T_HANDLE = 50_000
T_CONFIRM_TRAVEL = 100_000
T_POLL_INTERVAL = 400_000
T_PROCESS = 20_000
T_RETRY_BASE = 3_000_000
JITTER_NS = 10_000


class FaultKind(Enum):
    CRASH_NODE = "crash_node"
    DROP_ACK = "drop_ack"
    DELAY_ACK = "delay_ack"
    DUPLICATE_DELIVER = "duplicate_deliver"
    CRASH_CONSUMER = "crash_consumer"


@dataclass(frozen=True)
class FaultEvent:
    """One injected fault.  `on` is the trigger domain: the n-th produce
    attempt, the n-th delivery, or a point in virtual time."""

    kind: FaultKind
    on: str = "produce"              # produce | deliver | time
    index: int = 0                   # attempt / delivery counter trigger
    at_ms: Optional[int] = None      # for on == "time"
    target: Optional[str] = None     # node id / consumer id, engine-dependent
    delay_ms: int = 5                # DELAY_ACK
    down_ms: int = 20                # CRASH_NODE / CRASH_CONSUMER outage

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "on": self.on,
            "index": self.index,
            "at_ms": self.at_ms,
            "target": self.target,
            "delay_ms": self.delay_ms,
            "down_ms": self.down_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaultEvent":
        return cls(
            kind=FaultKind(d["kind"]),
            on=d.get("on", "produce"),
            index=d.get("index", 0),
            at_ms=d.get("at_ms"),
            target=d.get("target"),
            delay_ms=d.get("delay_ms", 5),
            down_ms=d.get("down_ms", 20),
        )


@dataclass(frozen=True)
class FaultPlan:
    events: tuple = ()

    def to_list(self) -> list:
        return [e.to_dict() for e in self.events]

    @classmethod
    def from_list(cls, items: list) -> "FaultPlan":
        return cls(events=tuple(FaultEvent.from_dict(d) for d in items))


class Phase(Enum):
    T1_PRODUCED = 1
    T2_HANDLED = 2
    T3_CONFIRMED = 3
    T4_DELIVERED = 4
    T5_ACKED_OR_RETAINED = 5


@dataclass(frozen=True)
class PhaseEvent:
    phase: Phase
    flow: str
    seq: int
    at_ns: int


@dataclass(frozen=True)
class Scenario:
    """A reproducible run: engine, topology, workload, QoS, faults, seed."""

    engine: str                      # "log" | "exch"
    workload: WorkloadSpec
    qos: QoSConfig
    topology: dict = field(default_factory=dict)
    faults: FaultPlan = FaultPlan()
    seed: int = 0
    drain_deadline_ms: int = 5000
    retry_limit: int = 5
    defects: tuple = ()

    def validate(self) -> None:
        if self.engine not in ("log", "exch"):
            raise ScenarioInvalid(f"unknown engine {self.engine!r}")
        if self.workload.messages_per_producer is None:
            raise ScenarioInvalid("scenario workloads need messages_per_producer")
        if self.qos.ordering is Ordering.GLOBAL_SINGLE_LANE:
            if self.engine == "log" and self.topology.get("partitions", 1) != 1:
                raise ScenarioInvalid("global single lane needs exactly one partition")
            if self.engine == "exch" and self.workload.producers != 1:
                raise ScenarioInvalid("global single lane needs one channel feeding one queue")
        for ev in self.faults.events:
            if ev.on not in ("produce", "deliver", "time"):
                raise ScenarioInvalid(f"unresolvable fault trigger {ev.on!r}")

    def to_dict(self) -> dict:
        return {
            "engine": self.engine,
            "seed": self.seed,
            "drain_deadline_ms": self.drain_deadline_ms,
            "retry_limit": self.retry_limit,
            "defects": list(self.defects),
            "topology": self.topology,
            "workload": {
                "producers": self.workload.producers,
                "consumers": self.workload.consumers,
                "record_size_bytes": self.workload.record_size_bytes,
                "messages_per_producer": self.workload.messages_per_producer,
            },
            "qos": {
                "delivery": self.qos.delivery.value,
                "ordering": self.qos.ordering.value,
                "replication_factor": self.qos.replication_factor,
                "ack_mode": self.topology.get("ack_mode", "1"),
            },
            "faults": self.faults.to_list(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        w = d.get("workload", {})
        q = d.get("qos", {})
        topology = dict(d.get("topology", {}))
        if "ack_mode" in q:
            topology.setdefault("ack_mode", q["ack_mode"])
        return cls(
            engine=d["engine"],
            workload=WorkloadSpec(
                producers=w.get("producers", 1),
                consumers=w.get("consumers", 1),
                record_size_bytes=w.get("record_size_bytes", 16),
                messages_per_producer=w.get("messages_per_producer", 10),
            ),
            qos=QoSConfig(
                delivery=Delivery(q.get("delivery", "at_least_once")),
                ordering=Ordering(q.get("ordering", "none")),
                replication_factor=q.get("replication_factor", 1),
            ),
            topology=topology,
            faults=FaultPlan.from_list(d.get("faults", [])),
            seed=d.get("seed", 0),
            drain_deadline_ms=d.get("drain_deadline_ms", 5000),
            retry_limit=d.get("retry_limit", 5),
            defects=tuple(d.get("defects", ())),
        )


@dataclass
class ScenarioResult:
    produced: Journal
    consumed: Journal
    phases: list
    report: CorrectnessReport

    def journals_blob(self) -> str:
        return self.produced.to_jsonl() + "--\n" + self.consumed.to_jsonl()


@dataclass(frozen=True)
class Verdict:
    passed: bool
    reason: Optional[str] = None


def verdict(report: CorrectnessReport, qos: QoSConfig) -> Verdict:
    """At-most-once must not duplicate, at-least-once must not lose; order
    matters only when the QoS asks for it."""
    if qos.delivery is Delivery.AT_LEAST_ONCE and not report.no_loss:
        return Verdict(False, "loss")
    if qos.delivery is Delivery.AT_MOST_ONCE and not report.no_duplication:
        return Verdict(False, "duplication")
    if qos.ordering is not Ordering.NONE and not report.no_disorder:
        return Verdict(False, "disorder")
    return Verdict(True)


# --------------------------------------------------------------------------
# the event loop
# --------------------------------------------------------------------------

class _VirtualClock:
    __slots__ = ("t",)

    def __init__(self) -> None:
        self.t = 1

    def now(self) -> int:
        return self.t


class _Run:
    def __init__(self, scenario: Scenario, clock_skew: Optional[Callable[[], int]] = None):
        scenario.validate()
        self.s = scenario
        self.rng = random.Random(scenario.seed)
        self.clock = _VirtualClock()
        self._skew = clock_skew
        self.heap: list = []
        self._seq = itertools.count()
        self.produced = Journal()
        self.consumed = Journal()
        self.phases: list[PhaseEvent] = []
        self._phase_seen: set = set()
        self.produce_attempts = 0
        self.deliveries = 0
        self.producers_done = False
        self.drain_deadline: Optional[int] = None
        self._confirmed: set = set()
        self._delivered_once: set = set()
        self._fired: set = set()

    # -- scheduling --------------------------------------------------------

    def at(self, delay_ns: int, fn, *args) -> None:
        t = self.clock.t + delay_ns + self.rng.randrange(JITTER_NS)
        if self._skew is not None:
            t += abs(self._skew()) % 1000
        heapq.heappush(self.heap, (t, next(self._seq), fn, args))

    def run_loop(self) -> None:
        while self.heap:
            t, _, fn, args = heapq.heappop(self.heap)
            self.clock.t = max(self.clock.t, t)
            fn(*args)

    # -- recording ----------------------------------------------------------

    def now(self) -> int:
        return self.clock.t

    def phase(self, phase: Phase, flow: str, seq: int) -> None:
        key = (phase, flow, seq)
        if key in self._phase_seen:
            return
        self._phase_seen.add(key)
        self.phases.append(PhaseEvent(phase, flow, seq, self.now()))

    def record_produced(self, msg: Message) -> None:
        self.produced.append(msg.flow_id, msg.seq_no, JournalEvent.PRODUCED, self.now())
        self.phase(Phase.T1_PRODUCED, msg.flow_id, msg.seq_no)

    def record_handled(self, msg: Message) -> None:
        self.phase(Phase.T2_HANDLED, msg.flow_id, msg.seq_no)

    def record_confirmed(self, msg: Message) -> None:
        if (msg.flow_id, msg.seq_no) in self._confirmed:
            return
        self._confirmed.add((msg.flow_id, msg.seq_no))
        self.produced.append(msg.flow_id, msg.seq_no, JournalEvent.CONFIRMED, self.now())
        self.phase(Phase.T3_CONFIRMED, msg.flow_id, msg.seq_no)

    def record_delivered(self, flow: str, seq: int) -> None:
        self.deliveries += 1
        self.consumed.append(flow, seq, JournalEvent.DELIVERED, self.now())
        # a delivery proves the broker handled the message and that its ack
        # condition held by now, even if the producer never saw the ack
        # (e.g. a quorum formed by follower catch-up after a failed attempt):
        # backfill those milestones at this instant if they are missing
        self.phase(Phase.T2_HANDLED, flow, seq)
        self.phase(Phase.T3_CONFIRMED, flow, seq)
        self.phase(Phase.T4_DELIVERED, flow, seq)
        self._delivered_once.add((flow, seq))

    def record_acked(self, flow: str, seq: int) -> None:
        self.consumed.append(flow, seq, JournalEvent.ACKED, self.now())
        self.phase(Phase.T5_ACKED_OR_RETAINED, flow, seq)

    # -- faults --------------------------------------------------------------

    def schedule_time_faults(self, apply: Callable[[FaultEvent], None]) -> None:
        for i, ev in enumerate(self.s.faults.events):
            if ev.on == "time" and ev.at_ms is not None:
                self.at(ev.at_ms * 1_000_000, apply, ev)
                self._fired.add(i)

    def due(self, on: str, counter: int, kinds: Optional[set] = None) -> list[FaultEvent]:
        out = []
        for i, ev in enumerate(self.s.faults.events):
            if i in self._fired or ev.on != on:
                continue
            if kinds is not None and ev.kind not in kinds:
                continue
            if counter >= ev.index:
                self._fired.add(i)
                out.append(ev)
        return out


# --------------------------------------------------------------------------
# log engine scenario
# --------------------------------------------------------------------------

class _LogScenario:
    def __init__(self, run: _Run):
        self.run = run
        s = run.s
        topo = s.topology
        self.partitions = topo.get("partitions", 1)
        self.ack_mode = {
            "0": LogAckMode.ACKS_0, "1": LogAckMode.ACKS_1, "quorum": LogAckMode.ACKS_QUORUM,
        }[str(topo.get("ack_mode", "1"))]
        rf = s.qos.replication_factor
        flush = FlushPolicy(
            flush_interval_messages=topo.get("flush_messages", 1000),
            flush_interval_ms=topo.get("flush_ms", 50),
        )
        self.engine = LogEngine(
            max(3, rf), clock=run.clock.now, defects=s.defects
        )
        self.topic = "t"
        self.engine.create_topic(
            TopicConfig(
                self.topic,
                partitions=self.partitions,
                replication_factor=rf,
                flush=flush,
                segment_bytes=topo.get("segment_bytes", 1 << 20),
            )
        )
        self.at_least_once = s.qos.delivery is Delivery.AT_LEAST_ONCE
        self.stop_and_wait = s.qos.ordering is not Ordering.NONE
        self.batch_size = topo.get("producer_batch", 3)
        w = s.workload
        self.payload = b"\x00" * w.record_size_bytes
        self.producers = [
            _LogProducer(self, i, w.messages_per_producer) for i in range(w.producers)
        ]
        members = [f"c{i}" for i in range(w.consumers)]
        self.group = "g"
        self.assignment = self.engine.assign_partitions(self.group, self.topic, members)
        self.members = {
            m: _LogMember(self, m, [p for p, owner in self.assignment.items() if owner == m])
            for m in members
        }
        self._rotor = 0

    def start(self) -> None:
        run = self.run
        run.schedule_time_faults(self.apply_fault)
        for p in self.producers:
            run.at(T_PRODUCE_GAP, p.step)
        for m in self.members.values():
            run.at(T_POLL_INTERVAL, m.poll)

    def apply_fault(self, ev: FaultEvent) -> None:
        run = self.run
        if ev.kind is FaultKind.CRASH_NODE:
            target = ev.target or next(
                (n for n in self.engine.node_ids() if self.engine.nodes[n].alive), None
            )
            if target is not None and target in self.engine.nodes:
                self.engine.crash_node(target)
                run.at(ev.down_ms * 1_000_000, self.engine.restart_node, target)
        elif ev.kind is FaultKind.CRASH_CONSUMER:
            member = self.members.get(ev.target or "") or next(iter(self.members.values()))
            member.crash(ev.down_ms)
        elif ev.kind is FaultKind.DUPLICATE_DELIVER and self.at_least_once:
            member = self.members.get(ev.target or "") or next(iter(self.members.values()))
            member.rewind_once = True
        # DROP_ACK / DELAY_ACK are consulted at confirm time via run.due()

    def partition_of(self, msg: Message) -> int:
        if msg.key is not None:
            return partition_for(msg.key, self.partitions)
        self._rotor += 1
        return partition_for(None, self.partitions, rotation=self._rotor - 1)

    def producers_all_done(self) -> bool:
        return all(p.done for p in self.producers)

    def drained(self) -> bool:
        for m in self.members.values():
            if m.crashed:
                return False
            for p in m.partitions:
                try:
                    hw = self.engine.high_watermark(self.topic, p)
                except BrokerDown:
                    return False
                if m.positions.get(p, 0) < hw:
                    return False
        return True


class _LogProducer:
    def __init__(self, scn: _LogScenario, idx: int, total: int):
        self.scn = scn
        self.flow = f"f{idx}"
        self.total = total
        self.sent = 0
        self.outstanding = 0
        self.done = False
        keyed = scn.run.s.qos.ordering in (Ordering.PER_PARTITION, Ordering.GLOBAL_SINGLE_LANE)
        self.key = self.flow.encode() if keyed else None

    def step(self) -> None:
        run = self.scn.run
        if self.sent >= self.total:
            self._maybe_done()
            return
        if self.scn.stop_and_wait and self.outstanding:
            return  # confirm or retry events drive progress
        n = min(self.scn.batch_size, self.total - self.sent)
        now = run.now()
        batch = [
            Message(
                self.flow, self.sent + i, payload=self.scn.payload,
                key=self.key, produced_at=now,
            )
            for i in range(n)
        ]
        self.sent += n
        for m in batch:
            run.record_produced(m)
        self.outstanding += 1
        self.attempt(batch, 1)
        if not self.scn.stop_and_wait:
            run.at(T_PRODUCE_GAP, self.step)

    def attempt(self, batch: list[Message], attempt: int) -> None:
        run = self.scn.run
        run.produce_attempts += 1
        for ev in run.due("produce", run.produce_attempts, kinds={FaultKind.CRASH_NODE}):
            self.scn.apply_fault(ev)
        partition = self.scn.partition_of(batch[0])
        run.clock.t += T_HANDLE
        try:
            self.scn.engine.append_batch(self.scn.topic, partition, batch, self.scn.ack_mode)
        except BrokerDown:
            self._handle_no_ack(batch, attempt)
            return
        for m in batch:
            run.record_handled(m)
            # t3 is when the broker emits the ack; the producer may see it
            # later (or, under ack faults, never)
            run.phase(Phase.T3_CONFIRMED, m.flow_id, m.seq_no)
        if run.due("produce", run.produce_attempts, kinds={FaultKind.DROP_ACK}):
            self._handle_no_ack(batch, attempt)
            return
        delays = run.due("produce", run.produce_attempts, kinds={FaultKind.DELAY_ACK})
        travel = T_CONFIRM_TRAVEL + (delays[0].delay_ms * 1_000_000 if delays else 0)
        run.at(travel, self.confirm, tuple(batch))
        if delays and self.scn.at_least_once:
            run.at(self._backoff(attempt), self.retry, tuple(batch), attempt)

    def _backoff(self, attempt: int) -> int:
        return T_RETRY_BASE * (2 ** (attempt - 1))

    def _handle_no_ack(self, batch: list[Message], attempt: int) -> None:
        run = self.scn.run
        if not self.scn.at_least_once or attempt > run.s.retry_limit:
            self._resolve_batch()  # fire-and-forget or retries exhausted
            return
        run.at(self._backoff(attempt), self.retry, tuple(batch), attempt)

    def retry(self, batch: tuple, attempt: int) -> None:
        if all((m.flow_id, m.seq_no) in self.scn.run._confirmed for m in batch):
            return
        if attempt >= self.scn.run.s.retry_limit:
            self._resolve_batch()
            return
        self.attempt(list(batch), attempt + 1)

    def confirm(self, batch: tuple) -> None:
        run = self.scn.run
        newly = [m for m in batch if (m.flow_id, m.seq_no) not in run._confirmed]
        if not newly:
            return
        for m in batch:
            run.record_confirmed(m)
        self._resolve_batch()

    def _resolve_batch(self) -> None:
        self.outstanding = max(0, self.outstanding - 1)
        self.scn.run.at(T_PRODUCE_GAP, self.step)
        self._maybe_done()

    def _maybe_done(self) -> None:
        if self.sent >= self.total and self.outstanding <= 0:
            self.done = True


class _LogMember:
    def __init__(self, scn: _LogScenario, member_id: str, partitions: list[int]):
        self.scn = scn
        self.member_id = member_id
        self.partitions = partitions
        self.positions = {p: 0 for p in partitions}
        self.crashed = False
        self.rewind_once = False

    def crash(self, down_ms: int) -> None:
        self.crashed = True
        self.scn.run.at(down_ms * 1_000_000, self.restart)

    def restart(self) -> None:
        self.crashed = False
        for p in self.partitions:
            self.positions[p] = self.scn.engine.committed(self.scn.group, self.scn.topic, p)

    def poll(self) -> None:
        run = self.scn.run
        if self.crashed:
            run.at(T_POLL_INTERVAL, self.poll)
            return
        at_most_once = not self.scn.at_least_once
        if self.rewind_once:
            self.rewind_once = False
            for p in self.partitions:
                self.positions[p] = self.scn.engine.committed(self.scn.group, self.scn.topic, p)
        for p in self.partitions:
            pos = self.positions[p]
            try:
                msgs, _ = self.scn.engine.fetch(self.scn.topic, p, pos, 1 << 20)
            except OffsetOutOfRange:
                next_off = self.scn.engine.next_offset(self.scn.topic, p)
                self.positions[p] = min(pos, next_off)
                continue
            except BrokerDown:
                continue
            if not msgs:
                continue
            new_pos = pos + len(msgs)
            if at_most_once:
                # commit ahead, then process: a crash loses, never duplicates
                self.scn.engine.commit_offset(
                    self.scn.group, self.member_id, self.scn.topic, p, new_pos
                )
            self.positions[p] = new_pos
            interrupted = False
            for m in msgs:
                run.clock.t += T_PROCESS
                for ev in run.due("deliver", run.deliveries + 1):
                    self.scn.apply_fault(ev)
                if self.crashed:
                    interrupted = True
                    break
                run.record_delivered(m.flow_id, m.seq_no)
            if interrupted and at_most_once:
                break
            if self.scn.at_least_once and not interrupted:
                self.scn.engine.commit_offset(
                    self.scn.group, self.member_id, self.scn.topic, p, new_pos
                )
            if interrupted:
                break
        self._reschedule()

    def _reschedule(self) -> None:
        run = self.scn.run
        if self.scn.producers_all_done():
            if run.drain_deadline is None:
                run.drain_deadline = run.now() + self.scn.run.s.drain_deadline_ms * 1_000_000
            if self.scn.drained() or run.now() > run.drain_deadline:
                return
        run.at(T_POLL_INTERVAL, self.poll)


# --------------------------------------------------------------------------
# exchange engine scenario
# --------------------------------------------------------------------------

class _ExchScenario:
    def __init__(self, run: _Run):
        self.run = run
        s = run.s
        topo = s.topology
        self.at_least_once = s.qos.delivery is Delivery.AT_LEAST_ONCE
        self.stop_and_wait = s.qos.ordering is not Ordering.NONE
        mirrors = tuple(topo.get("mirrors", ()))
        durable = topo.get("durable", self.at_least_once and not mirrors)
        self.engine = ExchEngine(
            3, clock=run.clock.now, latency_mode="none", defects=s.defects
        )
        self.engine.declare_exchange(ExchangeSpec("x", ExchangeKind.DIRECT))
        self.queue = "q"
        self.engine.declare_queue(
            QueueSpec(
                self.queue,
                durable=durable,
                mirrors=mirrors,
                max_length=topo.get("max_length"),
                overflow=OverflowPolicy(topo.get("overflow", "drop_oldest")),
                memory_cap_bytes=topo.get("memory_cap_bytes"),
                spill_to_disk=topo.get("spill_to_disk", False),
            )
        )
        self.engine.bind(BindingSpec("x", self.queue, key="k"))
        w = s.workload
        self.payload = b"\x00" * w.record_size_bytes
        self.producers = [
            _ExchProducer(self, i, w.messages_per_producer) for i in range(w.producers)
        ]
        self.consumers = [_ExchConsumer(self, f"c{i}") for i in range(w.consumers)]

    def start(self) -> None:
        run = self.run
        run.schedule_time_faults(self.apply_fault)
        for p in self.producers:
            run.at(T_PRODUCE_GAP, p.step)
        for c in self.consumers:
            run.at(T_POLL_INTERVAL, c.poll)

    def apply_fault(self, ev: FaultEvent) -> None:
        run = self.run
        if ev.kind is FaultKind.CRASH_NODE:
            target = ev.target or self.engine._queue("/", self.queue).home_node
            if target in self.engine.nodes:
                self.engine.crash_node(target)
                run.at(ev.down_ms * 1_000_000, self.engine.restart_node, target)
        elif ev.kind is FaultKind.CRASH_CONSUMER:
            cons = next(
                (c for c in self.consumers if c.consumer_id == ev.target),
                self.consumers[0],
            )
            cons.crash(ev.down_ms)
        # DUPLICATE_DELIVER / DROP_ACK / DELAY_ACK are handled at their sites

    def producers_all_done(self) -> bool:
        return all(p.done for p in self.producers)

    def drained(self) -> bool:
        try:
            return (
                self.engine.queue_depth(self.queue) == 0
                and self.engine.unacked_count(self.queue) == 0
            )
        except Exception:
            return False


class _ExchProducer:
    def __init__(self, scn: _ExchScenario, idx: int, total: int):
        self.scn = scn
        self.flow = f"f{idx}"
        self.total = total
        self.sent = 0
        self.outstanding = 0
        self.done = False
        self.channel = scn.engine.channel()

    def step(self) -> None:
        run = self.scn.run
        if self.sent >= self.total:
            self._maybe_done()
            return
        if self.scn.stop_and_wait and self.outstanding:
            return
        now = run.now()
        msg = Message(
            self.flow, self.sent, payload=self.scn.payload,
            routing_key="k", produced_at=now,
        )
        self.sent += 1
        run.record_produced(msg)
        self.outstanding += 1
        self.attempt(msg, 1)
        if not self.scn.stop_and_wait:
            run.at(T_PRODUCE_GAP, self.step)

    def attempt(self, msg: Message, attempt: int) -> None:
        run = self.scn.run
        run.produce_attempts += 1
        for ev in run.due("produce", run.produce_attempts, kinds={FaultKind.CRASH_NODE}):
            self.scn.apply_fault(ev)
        run.clock.t += T_HANDLE
        try:
            confirm = self.scn.engine.publish(
                self.channel, "x", msg, persistent=self.scn.at_least_once
            )
        except BrokerDown:
            self._handle_no_ack(msg, attempt)
            return
        run.record_handled(msg)
        if not confirm.ack:
            self._handle_no_ack(msg, attempt)
            return
        run.phase(Phase.T3_CONFIRMED, msg.flow_id, msg.seq_no)
        if run.due("produce", run.produce_attempts, kinds={FaultKind.DROP_ACK}):
            self._handle_no_ack(msg, attempt)
            return
        delays = run.due("produce", run.produce_attempts, kinds={FaultKind.DELAY_ACK})
        travel = T_CONFIRM_TRAVEL + (delays[0].delay_ms * 1_000_000 if delays else 0)
        run.at(travel, self.confirm, msg)
        if delays and self.scn.at_least_once:
            run.at(self._backoff(attempt), self.retry, msg, attempt)

    def _handle_no_ack(self, msg: Message, attempt: int) -> None:
        run = self.scn.run
        if not self.scn.at_least_once or attempt > run.s.retry_limit:
            self._resolve()
            return
        run.at(self._backoff(attempt), self.retry, msg, attempt)

    def retry(self, msg: Message, attempt: int) -> None:
        if (msg.flow_id, msg.seq_no) in self.scn.run._confirmed:
            return
        if attempt >= self.scn.run.s.retry_limit:
            self._resolve()
            return
        self.attempt(msg, attempt + 1)

    def confirm(self, msg: Message) -> None:
        run = self.scn.run
        if (msg.flow_id, msg.seq_no) in run._confirmed:
            return
        run.record_confirmed(msg)
        self._resolve()

    def _resolve(self) -> None:
        self.outstanding = max(0, self.outstanding - 1)
        self.scn.run.at(T_PRODUCE_GAP, self.step)
        self._maybe_done()

    def _backoff(self, attempt: int) -> int:
        return T_RETRY_BASE * (2 ** (attempt - 1))

    def _maybe_done(self) -> None:
        if self.sent >= self.total and self.outstanding <= 0:
            self.done = True


class _ExchConsumer:
    def __init__(self, scn: _ExchScenario, consumer_id: str):
        self.scn = scn
        self.consumer_id = consumer_id
        self.crashed = False
        self.handle = scn.engine.consume(
            scn.queue,
            consumer_id,
            ConsumeMode.PULL,
            prefetch=20,
            auto_ack=not scn.at_least_once,
        )

    def crash(self, down_ms: int) -> None:
        if self.crashed:
            return
        self.crashed = True
        self.scn.engine.cancel_consumer(self.handle, requeue_unacked=True)
        self.scn.run.at(down_ms * 1_000_000, self.restart)

    def restart(self) -> None:
        self.crashed = False
        self.handle = self.scn.engine.consume(
            self.scn.queue,
            self.consumer_id,
            ConsumeMode.PULL,
            prefetch=20,
            auto_ack=not self.scn.at_least_once,
        )

    def poll(self) -> None:
        run = self.scn.run
        if self.crashed:
            run.at(T_POLL_INTERVAL, self.poll)
            return
        try:
            got = self.handle.pull(10)
        except BrokerDown:
            got = []
        for d in got:
            run.clock.t += T_PROCESS
            flow, seq = d.message.flow_id, d.message.seq_no
            if self.scn.at_least_once:
                fired = run.due("deliver", run.deliveries + 1)
                run.record_delivered(flow, seq)
                crashed_here = False
                for ev in fired:
                    if ev.kind is FaultKind.DUPLICATE_DELIVER:
                        dup = self.scn.engine.redeliver_unacked(self.scn.queue, d.tag)
                        if dup is not None:
                            run.record_delivered(flow, seq)
                    else:
                        self.scn.apply_fault(ev)
                        if ev.kind is FaultKind.CRASH_CONSUMER and self.crashed:
                            crashed_here = True
                if crashed_here or self.crashed:
                    break  # unacked deliveries were requeued by the crash
                self.handle.ack(d.tag)
                run.record_acked(flow, seq)
            else:
                # auto-acked at pull: ownership moved before processing
                run.record_acked(flow, seq)
                fired = run.due("deliver", run.deliveries + 1)
                crashed_here = False
                for ev in fired:
                    self.scn.apply_fault(ev)
                    if ev.kind is FaultKind.CRASH_CONSUMER and self.crashed:
                        crashed_here = True
                if crashed_here or self.crashed:
                    break  # the in-flight remainder is lost
                run.record_delivered(flow, seq)
        self._reschedule()

    def _reschedule(self) -> None:
        run = self.scn.run
        if self.scn.producers_all_done():
            if run.drain_deadline is None:
                run.drain_deadline = run.now() + run.s.drain_deadline_ms * 1_000_000
            if (self.scn.drained() and not self.crashed) or run.now() > run.drain_deadline:
                return
        run.at(T_POLL_INTERVAL, self.poll)


# --------------------------------------------------------------------------
# entry points
# --------------------------------------------------------------------------

def run_scenario(
    s: Scenario, _clock_skew: Optional[Callable[[], int]] = None
) -> ScenarioResult:
    """Run a scenario to completion (including the drain window) and check
    the journals.  Deterministic under a fixed seed unless `_clock_skew`
    (a self-test hook) injects outside state."""
    run = _Run(s, clock_skew=_clock_skew)
    scenario = _LogScenario(run) if s.engine == "log" else _ExchScenario(run)
    scenario.start()
    run.run_loop()
    report = check_correctness(run.produced, run.consumed, s.qos)
    return ScenarioResult(
        produced=run.produced, consumed=run.consumed, phases=run.phases, report=report
    )


def replay(
    s: Scenario, _clock_skew: Optional[Callable[[], int]] = None
) -> ScenarioResult:
    """Run the scenario twice and demand byte-identical journals."""
    first = run_scenario(s, _clock_skew)
    second = run_scenario(s, _clock_skew)
    if first.journals_blob() != second.journals_blob():
        raise NondeterminismDetected(
            f"replay of seed {s.seed} diverged; the run depends on outside state"
        )
    return first


# --------------------------------------------------------------------------
# random scenario generation
# --------------------------------------------------------------------------

def random_scenario(engine: str, seed: int) -> Scenario:
    """A randomized workload + fault plan whose configuration keeps the
    engine's delivery promise satisfiable: at-least-once runs use
    configurations where a confirm implies survivability (quorum acks with
    replicas, or flush-per-append), and faults stay within what those
    configurations tolerate (single-node crashes with restart)."""
    rng = random.Random(seed)
    delivery = rng.choice([Delivery.AT_MOST_ONCE, Delivery.AT_LEAST_ONCE])
    at_least_once = delivery is Delivery.AT_LEAST_ONCE
    producers = rng.randint(1, 3)
    consumers = rng.randint(1, 2)
    messages = rng.randint(6, 16)
    workload = WorkloadSpec(
        producers=producers,
        consumers=consumers,
        record_size_bytes=rng.choice([8, 32, 128]),
        messages_per_producer=messages,
        seed=seed,
    )

    faults = []
    n_faults = rng.randint(0, 3)
    total_attempt_guess = producers * messages
    kinds_common = [FaultKind.DROP_ACK, FaultKind.DELAY_ACK, FaultKind.CRASH_CONSUMER]
    if at_least_once:
        kinds_common.append(FaultKind.DUPLICATE_DELIVER)
    crash_used = False
    for _ in range(n_faults):
        kind = rng.choice(kinds_common + ([FaultKind.CRASH_NODE] if not crash_used else []))
        if kind is FaultKind.CRASH_NODE:
            crash_used = True
            faults.append(
                FaultEvent(
                    kind,
                    on="produce",
                    index=rng.randint(1, max(1, total_attempt_guess // 2)),
                    down_ms=rng.randint(5, 25),
                )
            )
        elif kind is FaultKind.CRASH_CONSUMER:
            faults.append(
                FaultEvent(
                    kind,
                    on="deliver",
                    index=rng.randint(1, max(1, total_attempt_guess // 2)),
                    target=f"c{rng.randrange(consumers)}",
                    down_ms=rng.randint(5, 20),
                )
            )
        elif kind is FaultKind.DUPLICATE_DELIVER:
            faults.append(
                FaultEvent(kind, on="deliver", index=rng.randint(1, total_attempt_guess))
            )
        else:
            faults.append(
                FaultEvent(
                    kind,
                    on="produce",
                    index=rng.randint(1, total_attempt_guess),
                    delay_ms=rng.randint(4, 9),
                )
            )

    if engine == "log":
        ordering = rng.choice([Ordering.NONE, Ordering.PER_PARTITION])
        partitions = 1 if ordering is Ordering.GLOBAL_SINGLE_LANE else rng.randint(1, 3)
        if at_least_once:
            if rng.random() < 0.5:
                rf, ack_mode = rng.choice([(2, "quorum"), (3, "quorum")])
                flush_messages = rng.choice([2, 5, 1000])
            else:
                rf, ack_mode = 1, "1"
                flush_messages = 1  # flush per append: a confirm implies durability
        else:
            rf = rng.choice([1, 2])
            ack_mode = rng.choice(["0", "1"])
            flush_messages = rng.choice([4, 1000])
        qos = QoSConfig(delivery=delivery, ordering=ordering, replication_factor=rf)
        topology = {
            "partitions": partitions,
            "ack_mode": ack_mode,
            "flush_messages": flush_messages,
            "flush_ms": 40,
            "producer_batch": rng.choice([1, 2, 4]),
        }
    else:
        ordering = rng.choice([Ordering.NONE, Ordering.PER_CHANNEL])
        mirrors: tuple = ()
        if at_least_once and rng.random() < 0.4:
            mirrors = ("n1",) if rng.random() < 0.7 else ("n1", "n2")
        topology = {"mirrors": list(mirrors), "durable": at_least_once and not mirrors}
        if not at_least_once and rng.random() < 0.3:
            topology["max_length"] = rng.randint(4, 12)
        qos = QoSConfig(delivery=delivery, ordering=ordering, replication_factor=1 + len(mirrors))

    return Scenario(
        engine=engine,
        workload=workload,
        qos=qos,
        topology=topology,
        faults=FaultPlan(events=tuple(faults)),
        seed=seed,
    )
