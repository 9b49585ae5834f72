"""Shared domain types, the common broker contract, and the journal
correctness checker.

Both engines move `Message` values and report what happened through
`Journal` objects (one for the producing side, one for the consuming side).
`check_correctness` turns a journal pair into a `CorrectnessReport` over the
three primitives: no-loss, no-duplication, no-disorder.  The report is
advisory; whether a false flag is a failure depends on the delivery mode and
is decided by the harness.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Iterator, Optional


# --------------------------------------------------------------------------
# enums and errors
# --------------------------------------------------------------------------

class Delivery(Enum):
    AT_MOST_ONCE = "at_most_once"
    AT_LEAST_ONCE = "at_least_once"


class Ordering(Enum):
    NONE = "none"
    PER_PARTITION = "per_partition"
    PER_CHANNEL = "per_channel"
    GLOBAL_SINGLE_LANE = "global_single_lane"


class JournalEvent(Enum):
    PRODUCED = "Produced"
    CONFIRMED = "Confirmed"
    DELIVERED = "Delivered"
    ACKED = "Acked"


class BrokerError(Exception):
    """Base class for engine-level failures."""


class BrokerDown(BrokerError):
    """The node (or quorum of nodes) needed for the operation is down."""


class ValidationError(ValueError):
    """A message field violates its invariant."""

    field_name: str = "message"


class EmptyRoutingSegment(ValidationError):
    field_name = "routing_key"


class NegativeTtl(ValidationError):
    field_name = "ttl_ms"


class MismatchedFlows(ValueError):
    """The consumed journal mentions flows the produced journal does not."""


# --------------------------------------------------------------------------
# messages and QoS
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Message:
    """The unit of transfer.

    `seq_no` values are unique and dense per `flow_id` at production time
    (0, 1, 2, ...).  `key` selects a log partition; `routing_key` drives
    exchange routing and must be dot-separated non-empty segments.
    `produced_at` is a monotonic timestamp in nanoseconds; `ttl_ms` is an
    optional time-to-live in milliseconds.
    """

    flow_id: str
    seq_no: int
    payload: bytes = b""
    key: Optional[bytes] = None
    routing_key: Optional[str] = None
    headers: dict = field(default_factory=dict)
    produced_at: int = 0
    ttl_ms: Optional[int] = None


def validate_message(msg: Message) -> None:
    """Raise a `ValidationError` naming the violated field, or return None."""
    if not isinstance(msg.flow_id, str) or not msg.flow_id:
        err = ValidationError("flow_id must be a non-empty string")
        err.field_name = "flow_id"
        raise err
    if not isinstance(msg.seq_no, int) or msg.seq_no < 0:
        err = ValidationError("seq_no must be a non-negative integer")
        err.field_name = "seq_no"
        raise err
    if not isinstance(msg.payload, (bytes, bytearray)):
        err = ValidationError("payload must be bytes")
        err.field_name = "payload"
        raise err
    if msg.routing_key is not None:
        if msg.routing_key == "" or any(
            seg == "" for seg in msg.routing_key.split(".")
        ):
            raise EmptyRoutingSegment(
                f"routing_key {msg.routing_key!r} contains an empty segment"
            )
    if msg.ttl_ms is not None and msg.ttl_ms < 0:
        raise NegativeTtl(f"ttl_ms {msg.ttl_ms} is negative")


@dataclass(frozen=True)
class FlushPolicy:
    """Bounds on how long appended data may stay unpersisted.

    At least one bound must be finite: a count of unflushed messages or an
    age in milliseconds.
    """

    flush_interval_messages: Optional[int] = 1000
    flush_interval_ms: Optional[int] = 100

    def __post_init__(self) -> None:
        if self.flush_interval_messages is None and self.flush_interval_ms is None:
            raise ValueError("at least one flush bound must be set")
        if self.flush_interval_messages is not None and self.flush_interval_messages < 1:
            raise ValueError("flush_interval_messages must be >= 1")
        if self.flush_interval_ms is not None and self.flush_interval_ms < 0:
            raise ValueError("flush_interval_ms must be >= 0")

    def due(self, unflushed: int, elapsed_ns: int) -> bool:
        if self.flush_interval_messages is not None and unflushed >= self.flush_interval_messages:
            return True
        if self.flush_interval_ms is not None and elapsed_ns >= self.flush_interval_ms * 1_000_000:
            return True
        return False


FLUSH_EVERY_MESSAGE = FlushPolicy(flush_interval_messages=1, flush_interval_ms=None)


@dataclass(frozen=True)
class QoSConfig:
    """Delivery mode, ordering scope and durability knobs for a scenario.

    `ack_policy` is engine specific: a `logbroker.LogAckMode` for the log
    engine, an `exchbroker.ConfirmPolicy` for the exchange engine, or None
    for engine defaults.  `GLOBAL_SINGLE_LANE` implies exactly one partition
    (log engine) or one channel feeding one queue (exchange engine); that
    cross-field constraint is validated against the topology by the harness.
    """

    delivery: Delivery = Delivery.AT_LEAST_ONCE
    ordering: Ordering = Ordering.NONE
    replication_factor: int = 1
    ack_policy: object = None
    flush: FlushPolicy = FlushPolicy()

    def __post_init__(self) -> None:
        if self.replication_factor < 1:
            raise ValueError("replication_factor must be >= 1")


# --------------------------------------------------------------------------
# journals
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class JournalEntry:
    flow: str
    seq: int
    event: JournalEvent
    at_ns: int


class Journal:
    """Append-only event journal, safe for concurrent appenders.

    Timestamps must be non-decreasing per flow; engines serialize their own
    appends, the lock here covers multi-worker benchmark use.
    """

    def __init__(self, entries: Iterable[JournalEntry] = ()) -> None:
        self._entries: list[JournalEntry] = []
        self._last_at: dict[str, int] = {}
        self._lock = threading.Lock()
        for e in entries:
            self.append(e.flow, e.seq, e.event, e.at_ns)

    def append(self, flow: str, seq: int, event: JournalEvent, at_ns: int) -> None:
        with self._lock:
            last = self._last_at.get(flow)
            if last is not None and at_ns < last:
                raise ValueError(
                    f"journal timestamps must be non-decreasing per flow "
                    f"({flow}: {at_ns} < {last})"
                )
            self._last_at[flow] = at_ns
            self._entries.append(JournalEntry(flow, seq, event, at_ns))

    @property
    def entries(self) -> tuple[JournalEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def flows(self) -> set[str]:
        return {e.flow for e in self.entries}

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[JournalEntry]:
        return iter(self.entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Journal):
            return NotImplemented
        return self.entries == other.entries

    def to_jsonl(self) -> str:
        """One event per line: {"flow":…,"seq":…,"event":…,"at_ns":…}."""
        lines = [
            json.dumps(
                {"flow": e.flow, "seq": e.seq, "event": e.event.value, "at_ns": e.at_ns},
                separators=(",", ":"),
            )
            for e in self.entries
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str) -> "Journal":
        j = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            j.append(obj["flow"], obj["seq"], JournalEvent(obj["event"]), obj["at_ns"])
        return j


# --------------------------------------------------------------------------
# correctness checking
# --------------------------------------------------------------------------

class ViolationKind(Enum):
    LOSS = "loss"
    DUPLICATION = "duplication"
    DISORDER = "disorder"


@dataclass(frozen=True)
class Violation:
    flow: str
    seq: int
    kind: ViolationKind
    detail: str


@dataclass(frozen=True)
class CorrectnessReport:
    no_loss: bool
    no_duplication: bool
    no_disorder: bool
    violations: tuple[Violation, ...]

    @classmethod
    def from_violations(cls, violations: Iterable[Violation]) -> "CorrectnessReport":
        vs = tuple(violations)
        kinds = {v.kind for v in vs}
        return cls(
            no_loss=ViolationKind.LOSS not in kinds,
            no_duplication=ViolationKind.DUPLICATION not in kinds,
            no_disorder=ViolationKind.DISORDER not in kinds,
            violations=vs,
        )

    def to_dict(self) -> dict:
        return {
            "no_loss": self.no_loss,
            "no_duplication": self.no_duplication,
            "no_disorder": self.no_disorder,
            "violations": [
                {"flow": v.flow, "seq": v.seq, "kind": v.kind.value, "detail": v.detail}
                for v in self.violations
            ],
        }


def check_correctness(produced: Journal, consumed: Journal, qos: QoSConfig) -> CorrectnessReport:
    """Check a journal pair against the three correctness primitives.

    - no_loss: every produced (flow, seq) that was confirmed appears
      delivered at least once.  Messages produced but never confirmed carry
      no delivery obligation (ownership never transferred to the broker).
    - no_duplication: no (flow, seq) is delivered more than once.
    - no_disorder: per ordering lane, first deliveries of each seq are
      monotonically increasing; duplicate deliveries of an already-seen seq
      do not count as disorder.  With `Ordering.NONE` there are no lanes and
      the flag is vacuously true.

    Pure function: same journals in, same report out.  Raises
    `MismatchedFlows` if the consumed journal mentions flows the produced
    journal does not (flows produced but never delivered are loss evidence,
    not an input error).
    """
    produced_entries = produced.entries
    consumed_entries = consumed.entries

    produced_flows = {e.flow for e in produced_entries}
    stray = {e.flow for e in consumed_entries} - produced_flows
    if stray:
        raise MismatchedFlows(f"consumed journal has unknown flows: {sorted(stray)}")

    produced_set: set[tuple[str, int]] = set()
    confirmed: set[tuple[str, int]] = set()
    for e in produced_entries:
        if e.event is JournalEvent.PRODUCED:
            if (e.flow, e.seq) in produced_set:
                raise ValueError(
                    f"production journal must be duplicate-free, saw {(e.flow, e.seq)} twice"
                )
            produced_set.add((e.flow, e.seq))
        elif e.event is JournalEvent.CONFIRMED:
            confirmed.add((e.flow, e.seq))

    delivered_count: dict[tuple[str, int], int] = {}
    for e in consumed_entries:
        if e.event is JournalEvent.DELIVERED:
            delivered_count[(e.flow, e.seq)] = delivered_count.get((e.flow, e.seq), 0) + 1

    violations: list[Violation] = []

    for flow, seq in sorted(produced_set & confirmed):
        if delivered_count.get((flow, seq), 0) == 0:
            violations.append(
                Violation(flow, seq, ViolationKind.LOSS, "confirmed but never delivered")
            )

    for (flow, seq), n in sorted(delivered_count.items()):
        if n > 1:
            violations.append(
                Violation(flow, seq, ViolationKind.DUPLICATION, f"delivered {n} times")
            )

    if qos.ordering is not Ordering.NONE:
        seen: dict[str, set[int]] = {}
        max_first: dict[str, int] = {}
        for e in consumed_entries:
            if e.event is not JournalEvent.DELIVERED:
                continue
            flow_seen = seen.setdefault(e.flow, set())
            if e.seq in flow_seen:
                continue
            flow_seen.add(e.seq)
            prev = max_first.get(e.flow)
            if prev is not None and e.seq < prev:
                violations.append(
                    Violation(
                        e.flow,
                        e.seq,
                        ViolationKind.DISORDER,
                        f"first delivery after seq {prev} was already seen",
                    )
                )
            else:
                max_first[e.flow] = e.seq

    return CorrectnessReport.from_violations(violations)


# --------------------------------------------------------------------------
# the contract both engines implement
# --------------------------------------------------------------------------

class BrokerContract:
    """Lifecycle surface shared by both engines.

    Engines are in-process objects over a set of simulated nodes; crash and
    restart model volatile-state loss and recovery.  Payload accounting
    backs the multicast storage checks.
    """

    name: str = "broker"

    def node_ids(self) -> list[str]:
        raise NotImplementedError

    def crash_node(self, node_id: str) -> None:
        raise NotImplementedError

    def restart_node(self, node_id: str) -> None:
        raise NotImplementedError

    def payload_bytes(self) -> int:
        raise NotImplementedError


Clock = Callable[[], int]
