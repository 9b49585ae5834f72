"""Exchange/binding/queue engine.

Messages enter through channels and exchanges, get routed to bound queues,
and leave through per-consumer deliveries that are acknowledged explicitly.
Publisher confirms follow the earliest applicable acceptance point:
unroutable messages confirm immediately, routable ones once every routed
queue accepted, persistent ones after the durable store write, mirrored ones
after all mirrors accepted.

Queues keep entries in per-flow sequence order at all times: retransmitted
messages are insertion-sorted back into place, so a consumer never needs to
resequence.  One payload copy is shared across all queues a message routes
to; queues hold per-entry index state only.

A memory cap with spill moves the oldest entries into a penalized secondary
tier, reproducing the latency cliff of a broker that outgrows DRAM.
"""

from __future__ import annotations

import itertools
import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional

from .core import BrokerContract, BrokerDown, Clock, Message, validate_message
from .hashing import stable_hash64


# --------------------------------------------------------------------------
# errors
# --------------------------------------------------------------------------

class ExchError(Exception):
    pass


class SpecConflict(ExchError):
    pass


class UnknownEntity(ExchError):
    pass


class UnknownExchange(UnknownEntity):
    pass


class UnknownQueue(UnknownEntity):
    pass


class UnknownTag(ExchError):
    pass


class NotInTx(ExchError):
    pass


class Unroutable(ExchError):
    def __init__(self, exchange: str, routing_key: Optional[str]) -> None:
        super().__init__(f"{exchange} cannot route {routing_key!r}")
        self.exchange = exchange
        self.routing_key = routing_key


# --------------------------------------------------------------------------
# declaration types
# --------------------------------------------------------------------------

class ExchangeKind(Enum):
    DIRECT = "direct"
    FANOUT = "fanout"
    TOPIC = "topic"
    HEADERS = "headers"
    CONSISTENT_HASH = "consistent_hash"


class MatchMode(Enum):
    ALL = "all"
    ANY = "any"


class OverflowPolicy(Enum):
    DROP_OLDEST = "drop_oldest"
    REJECT_PUBLISH = "reject_publish"


class ConsumeMode(Enum):
    PUSH = "push"
    PULL = "pull"


@dataclass(frozen=True)
class ExchangeSpec:
    name: str
    kind: ExchangeKind
    vhost: str = "/"
    alternate: Optional[str] = None


@dataclass(frozen=True)
class QueueSpec:
    name: str
    vhost: str = "/"
    max_length: Optional[int] = None
    default_ttl: Optional[int] = None        # milliseconds
    memory_cap_bytes: Optional[int] = None
    spill_to_disk: bool = False
    mirrors: tuple = ()
    durable: bool = False
    overflow: OverflowPolicy = OverflowPolicy.DROP_OLDEST

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("queue name must be non-empty")
        if self.max_length is not None and self.max_length < 1:
            raise ValueError("max_length must be >= 1")
        if self.default_ttl is not None and self.default_ttl < 0:
            raise ValueError("default_ttl must be >= 0")


@dataclass(frozen=True)
class BindingSpec:
    exchange: str
    queue: str
    vhost: str = "/"
    key: Optional[str] = None            # direct
    pattern: Optional[str] = None        # topic
    header_match: Optional[dict] = None  # headers
    match_mode: MatchMode = MatchMode.ALL
    weight: int = 1

    def __post_init__(self) -> None:
        if self.weight < 1:
            raise ValueError("weight must be >= 1")


@dataclass(frozen=True)
class ConfirmPolicy:
    """When a publish is confirmed: after the durable write for persistent
    messages, and only once all mirrors accepted for mirrored queues."""

    persistent: bool = False
    mirrored: bool = False


@dataclass(frozen=True)
class Confirm:
    ack: bool
    publish_seq: int
    routed_count: int
    reason: Optional[str] = None


@dataclass(frozen=True)
class Delivery:
    tag: int
    queue: str
    consumer_id: str
    message: Message
    redelivered: bool
    from_spill: bool


@dataclass(frozen=True)
class LimitAction:
    dropped: int = 0
    spilled: int = 0
    flow_control: str = "none"  # none | engaged | released


@dataclass(frozen=True)
class TxResult:
    applied: int
    total: int
    complete: bool


# --------------------------------------------------------------------------
# topic pattern matching
# --------------------------------------------------------------------------

def match_topic(pattern: str, routing_key: str) -> bool:
    """AMQP-style wildcard match over dot-separated segments.

    A literal segment matches itself, "*" matches exactly one segment and
    "#" matches zero or more segments.
    """
    p = pattern.split(".") if pattern else []
    k = routing_key.split(".") if routing_key else []
    # dp[i][j]: does p[i:] match k[j:]
    np, nk = len(p), len(k)
    dp = [[False] * (nk + 1) for _ in range(np + 1)]
    dp[np][nk] = True
    for i in range(np - 1, -1, -1):
        for j in range(nk, -1, -1):
            if p[i] == "#":
                dp[i][j] = dp[i + 1][j] or (j < nk and dp[i][j + 1])
            elif j < nk and (p[i] == "*" or p[i] == k[j]):
                dp[i][j] = dp[i + 1][j + 1]
            else:
                dp[i][j] = False
    return dp[0][0]


# --------------------------------------------------------------------------
# runtime state
# --------------------------------------------------------------------------

class _Body:
    __slots__ = ("data", "refs", "spilled_blob")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.refs = 0
        self.spilled_blob: Optional[bytes] = None


class _BodyStore:
    """One shared copy of each published payload, reference counted by the
    queue entries that point at it."""

    def __init__(self) -> None:
        self._bodies: dict[int, _Body] = {}
        self._next = 0
        self._lock = threading.Lock()

    def put(self, data: bytes) -> int:
        with self._lock:
            bid = self._next
            self._next += 1
            # ingest a real copy of the frame (bytes(b) would alias)
            body = _Body(memoryview(data).tobytes())
            body.refs = 1  # the publisher's staging reference
            self._bodies[bid] = body
            return bid

    def retain(self, bid: int) -> None:
        with self._lock:
            self._bodies[bid].refs += 1

    def release(self, bid: int) -> None:
        with self._lock:
            body = self._bodies[bid]
            body.refs -= 1
            if body.refs <= 0:
                del self._bodies[bid]

    def get(self, bid: int) -> bytes:
        with self._lock:
            return self._bodies[bid].data

    def spill(self, bid: int) -> int:
        """Move the body to the secondary tier; returns bytes moved."""
        with self._lock:
            body = self._bodies[bid]
            if body.spilled_blob is None:
                body.spilled_blob = body.data
                body.data = b""
                return len(body.spilled_blob)
            return 0

    def unspill(self, bid: int) -> bytes:
        with self._lock:
            body = self._bodies[bid]
            if body.spilled_blob is not None:
                body.data = bytes(body.spilled_blob)  # read back from the slow tier
                body.spilled_blob = None
            return body.data

    def live_payload_bytes(self) -> int:
        with self._lock:
            return sum(len(b.data) for b in self._bodies.values())

    def spilled_bytes(self) -> int:
        with self._lock:
            return sum(len(b.spilled_blob) for b in self._bodies.values() if b.spilled_blob)

    def count(self) -> int:
        with self._lock:
            return len(self._bodies)


class _Entry:
    __slots__ = (
        "flow", "seq", "body_id", "size", "headers", "routing_key",
        "produced_at", "ttl_ms", "persistent", "fsynced", "mirrored_on",
        "spilled", "delivery_count",
    )

    def __init__(self, msg: Message, body_id: int, size: int, persistent: bool) -> None:
        self.flow = msg.flow_id
        self.seq = msg.seq_no
        self.body_id = body_id
        self.size = size
        self.headers = msg.headers
        self.routing_key = msg.routing_key
        self.produced_at = msg.produced_at
        self.ttl_ms = msg.ttl_ms
        self.persistent = persistent
        self.fsynced = False
        self.mirrored_on: set[str] = set()
        self.spilled = False
        self.delivery_count = 0


class _Consumer:
    __slots__ = ("consumer_id", "mode", "prefetch", "auto_ack", "unacked", "inbox")

    def __init__(self, consumer_id: str, mode: ConsumeMode, prefetch: int, auto_ack: bool) -> None:
        self.consumer_id = consumer_id
        self.mode = mode
        self.prefetch = prefetch
        self.auto_ack = auto_ack
        self.unacked = 0
        self.inbox: list[Delivery] = []


class _Queue:
    def __init__(self, spec: QueueSpec, home_node: str) -> None:
        self.spec = spec
        self.home_node = home_node
        self.entries: list[_Entry] = []
        self.unacked: dict[int, tuple[_Entry, str]] = {}
        self.consumers: dict[str, _Consumer] = {}
        self._rr: int = 0
        self.lock = threading.RLock()
        self.spilled_ever = False
        self.available = True

    def live_keys(self) -> set[tuple[str, int]]:
        return {(e.flow, e.seq) for e in self.entries}

    def insert(self, entry: _Entry) -> bool:
        """Insert in per-flow seq order; duplicate live (flow, seq) keys are
        absorbed (the retransmit carries the same content)."""
        for e in self.entries:
            if e.flow == entry.flow and e.seq == entry.seq:
                return False
        idx = len(self.entries)
        for i, e in enumerate(self.entries):
            if e.flow == entry.flow and e.seq > entry.seq:
                idx = i
                break
        self.entries.insert(idx, entry)
        return True

    def memory_bytes(self) -> int:
        return sum(e.size for e in self.entries if not e.spilled)


@dataclass
class _VHost:
    exchanges: dict = field(default_factory=dict)
    queues: dict = field(default_factory=dict)
    bindings: list = field(default_factory=list)


class Channel:
    """Publish ordering scope.  Single-threaded by contract: one caller at a
    time per channel; distinct channels may run concurrently."""

    _ids = itertools.count(1)

    def __init__(self, engine: "ExchEngine", vhost: str, confirm_window: int) -> None:
        self.id = next(Channel._ids)
        self.engine = engine
        self.vhost = vhost
        self.confirm_window = confirm_window
        self.next_publish_seq = 1
        self.outstanding = 0
        self.tx_mode = False
        self.tx_buffer: list[tuple] = []

    def tx_select(self) -> None:
        self.tx_mode = True
        self.tx_buffer = []


@dataclass
class _SimNode:
    node_id: str
    alive: bool = True


# --------------------------------------------------------------------------
# the engine
# --------------------------------------------------------------------------

# nominal cost of one in-memory delivery through the full pull path,
# the yardstick for the spill read penalty multiplier
NOMINAL_READ_NS = 50_000


class ExchEngine(BrokerContract):
    """In-process exchange/queue broker over simulated nodes.

    Each queue is its own serialization domain; exchanges and binding tables
    are read-mostly.  Simulated disk latency applies to durable writes and
    spill reads when `latency_mode="real"`; the harness runs engines with
    `latency_mode="none"` and accounts costs on its own virtual clock.
    """

    name = "exch"

    def __init__(
        self,
        nodes: int | Iterable[str] = 3,
        *,
        clock: Clock = time.monotonic_ns,
        latency_mode: str = "real",
        fsync_latency_ns: int = 40_000,
        mirror_sync_ns: int = 20_000,
        spill_read_penalty: float = 10.0,
        spill_read_ns: Optional[int] = None,
        memory_budget_bytes: Optional[int] = None,
        defects: Iterable[str] = (),
    ) -> None:
        if isinstance(nodes, int):
            node_ids = [f"n{i}" for i in range(nodes)]
        else:
            node_ids = list(nodes)
        if not node_ids:
            raise ValueError("need at least one node")
        self.nodes: dict[str, _SimNode] = {nid: _SimNode(nid) for nid in node_ids}
        self.vhosts: dict[str, _VHost] = {}
        self.bodies = _BodyStore()
        self.clock = clock
        self.latency_mode = latency_mode
        self.fsync_latency_ns = fsync_latency_ns if latency_mode == "real" else 0
        self.mirror_sync_ns = mirror_sync_ns if latency_mode == "real" else 0
        self.memory_budget_bytes = memory_budget_bytes
        self.defects = frozenset(defects)
        self._defect_armed = "lose_confirmed" in self.defects
        self._next_tag = 1
        self._next_queue_node = 0
        self._lock = threading.RLock()
        self._flow_cond = threading.Condition(self._lock)
        self._flow_blocked = False
        self.fault_hook: Optional[Callable[[str, str], None]] = None
        if spill_read_ns is not None:
            self.spill_read_ns = spill_read_ns
        elif latency_mode == "real":
            # the slow tier costs a multiple of the nominal in-memory
            # delivery path (~50us in-process at desk scale)
            self.spill_read_ns = int(spill_read_penalty * NOMINAL_READ_NS)
        else:
            self.spill_read_ns = 0

    # -- contract ------------------------------------------------------------

    def node_ids(self) -> list[str]:
        return list(self.nodes)

    def crash_node(self, node_id: str) -> None:
        node = self._node(node_id)
        node.alive = False
        with self._lock:
            for vh in self.vhosts.values():
                for q in vh.queues.values():
                    with q.lock:
                        if q.home_node != node_id:
                            continue
                        promoted = next(
                            (m for m in q.spec.mirrors if self.nodes[m].alive), None
                        )
                        # in-flight deliveries die with their consumers' tags
                        requeued = [e for e, _ in q.unacked.values()]
                        q.unacked.clear()
                        for cons in q.consumers.values():
                            cons.unacked = 0
                            cons.inbox = []
                        for e in requeued:
                            e.delivery_count += 1
                            if not q.insert(e):
                                self.bodies.release(e.body_id)
                        if promoted is not None:
                            survivors = [e for e in q.entries if promoted in e.mirrored_on]
                            for e in q.entries:
                                if promoted not in e.mirrored_on:
                                    self.bodies.release(e.body_id)
                            q.entries = survivors
                            q.home_node = promoted
                        else:
                            q.available = False

    def restart_node(self, node_id: str) -> None:
        node = self._node(node_id)
        node.alive = True
        with self._lock:
            for vh in self.vhosts.values():
                for q in vh.queues.values():
                    with q.lock:
                        if q.home_node != node_id or q.available:
                            continue
                        survivors = []
                        for e in q.entries:
                            if q.spec.durable and e.fsynced:
                                survivors.append(e)
                            else:
                                self.bodies.release(e.body_id)
                        q.entries = survivors
                        q.available = True

    def payload_bytes(self) -> int:
        return self.bodies.live_payload_bytes() + self.bodies.spilled_bytes()

    def total_entries(self) -> int:
        n = 0
        with self._lock:
            for vh in self.vhosts.values():
                for q in vh.queues.values():
                    with q.lock:
                        n += len(q.entries) + len(q.unacked)
        return n

    # -- declarations ----------------------------------------------------------

    def declare_exchange(self, spec: ExchangeSpec) -> ExchangeSpec:
        with self._lock:
            vh = self.vhosts.setdefault(spec.vhost, _VHost())
            existing = vh.exchanges.get(spec.name)
            if existing is not None:
                if existing != spec:
                    raise SpecConflict(f"exchange {spec.vhost}{spec.name} redeclared differently")
                return existing
            vh.exchanges[spec.name] = spec
            return spec

    def declare_queue(self, spec: QueueSpec) -> QueueSpec:
        for m in spec.mirrors:
            self._node(m)
        with self._lock:
            vh = self.vhosts.setdefault(spec.vhost, _VHost())
            existing = vh.queues.get(spec.name)
            if existing is not None:
                if existing.spec != spec:
                    raise SpecConflict(f"queue {spec.vhost}{spec.name} redeclared differently")
                return existing.spec
            home = list(self.nodes)[self._next_queue_node % len(self.nodes)]
            self._next_queue_node += 1
            vh.queues[spec.name] = _Queue(spec, home)
            return spec

    def bind(self, b: BindingSpec) -> None:
        with self._lock:
            vh = self.vhosts.get(b.vhost)
            if vh is None or b.exchange not in vh.exchanges:
                raise UnknownEntity(f"exchange {b.vhost}{b.exchange}")
            if b.queue not in vh.queues:
                raise UnknownEntity(f"queue {b.vhost}{b.queue}")
            if b not in vh.bindings:
                vh.bindings.append(b)

    def load_topology(self, topology: dict) -> None:
        """Declare exchanges, queues and bindings from a topology mapping
        (the JSON file schema)."""
        vhost = topology.get("vhost", "/")
        for ex in topology.get("exchanges", ()):
            self.declare_exchange(
                ExchangeSpec(
                    name=ex["name"],
                    kind=ExchangeKind(ex["kind"]),
                    vhost=ex.get("vhost", vhost),
                    alternate=ex.get("alternate"),
                )
            )
        for q in topology.get("queues", ()):
            self.declare_queue(
                QueueSpec(
                    name=q["name"],
                    vhost=q.get("vhost", vhost),
                    max_length=q.get("max_length"),
                    default_ttl=q.get("default_ttl"),
                    memory_cap_bytes=q.get("memory_cap_bytes"),
                    spill_to_disk=q.get("spill_to_disk", False),
                    mirrors=tuple(q.get("mirrors", ())),
                    durable=q.get("durable", False),
                    overflow=OverflowPolicy(q.get("overflow", "drop_oldest")),
                )
            )
        for b in topology.get("bindings", ()):
            self.bind(
                BindingSpec(
                    exchange=b["exchange"],
                    queue=b["queue"],
                    vhost=b.get("vhost", vhost),
                    key=b.get("key"),
                    pattern=b.get("pattern"),
                    header_match=b.get("header_match"),
                    match_mode=MatchMode(b.get("match_mode", "all")),
                    weight=b.get("weight", 1),
                )
            )

    # -- routing ------------------------------------------------------------

    def route(self, exchange: str, msg: Message, vhost: str = "/") -> frozenset:
        """Queue names the message routes to; `Unroutable` if none, after
        giving the alternate exchange one chance."""
        vh = self._vhost(vhost)
        ex = vh.exchanges.get(exchange)
        if ex is None:
            raise UnknownExchange(f"{vhost}{exchange}")
        queues = self._match_queues(vh, ex, msg)
        if not queues and ex.alternate is not None:
            alt = vh.exchanges.get(ex.alternate)
            if alt is not None:
                queues = self._match_queues(vh, alt, msg)
        if not queues:
            raise Unroutable(exchange, msg.routing_key)
        return frozenset(queues)

    def _match_queues(self, vh: _VHost, ex: ExchangeSpec, msg: Message) -> list[str]:
        bindings = [b for b in vh.bindings if b.exchange == ex.name]
        if ex.kind is ExchangeKind.FANOUT:
            return sorted({b.queue for b in bindings})
        if ex.kind is ExchangeKind.DIRECT:
            return sorted({b.queue for b in bindings if b.key == msg.routing_key})
        if ex.kind is ExchangeKind.TOPIC:
            rk = msg.routing_key or ""
            return sorted(
                {b.queue for b in bindings if b.pattern is not None and match_topic(b.pattern, rk)}
            )
        if ex.kind is ExchangeKind.HEADERS:
            out = set()
            for b in bindings:
                if not b.header_match:
                    continue
                hits = [msg.headers.get(k) == v for k, v in b.header_match.items()]
                if (b.match_mode is MatchMode.ALL and all(hits)) or (
                    b.match_mode is MatchMode.ANY and any(hits)
                ):
                    out.add(b.queue)
            return sorted(out)
        if ex.kind is ExchangeKind.CONSISTENT_HASH:
            if not bindings:
                return []
            slots: list[str] = []
            for b in sorted(bindings, key=lambda b: b.queue):
                slots.extend([b.queue] * b.weight)
            key = (msg.routing_key or "").encode()
            return [slots[stable_hash64(key) % len(slots)]]
        raise ExchError(f"unhandled exchange kind {ex.kind}")

    # -- channels and publishing ------------------------------------------------

    def channel(self, vhost: str = "/", confirm_window: int = -1) -> Channel:
        self._vhost_or_create(vhost)
        return Channel(self, vhost, confirm_window)

    def publish(
        self,
        channel: Channel,
        exchange: str,
        msg: Message,
        persistent: bool = False,
    ) -> Optional[Confirm]:
        """Publish on a channel; returns the publisher confirm, or None when
        the channel is in transaction mode (the publish is buffered)."""
        if channel.tx_mode:
            channel.tx_buffer.append(("publish", exchange, msg, persistent))
            return None
        return self._do_publish(channel, exchange, msg, persistent)

    def tx_publish(self, channel: Channel, exchange: str, msg: Message, persistent: bool = False) -> None:
        if not channel.tx_mode:
            raise NotInTx("tx_publish before tx_select")
        channel.tx_buffer.append(("publish", exchange, msg, persistent))

    def tx_ack(self, channel: Channel, queue: str, tag: int) -> None:
        if not channel.tx_mode:
            raise NotInTx("tx_ack before tx_select")
        channel.tx_buffer.append(("ack", queue, tag))

    def tx_commit(self, channel: Channel) -> TxResult:
        """Apply buffered publishes and acks in order.  An injected crash
        mid-commit leaves a strict prefix applied; there is no atomicity."""
        if not channel.tx_mode:
            raise NotInTx("tx_commit before tx_select")
        ops = channel.tx_buffer
        applied = 0
        try:
            for op in ops:
                self._fire_fault("tx_commit_op", channel.vhost)
                if op[0] == "publish":
                    self._do_publish(channel, op[1], op[2], op[3])
                else:
                    self.ack(op[1], op[2], vhost=channel.vhost)
                applied += 1
        except BrokerDown:
            channel.tx_buffer = []
            channel.tx_mode = False
            return TxResult(applied=applied, total=len(ops), complete=False)
        channel.tx_buffer = []
        channel.tx_mode = False
        return TxResult(applied=applied, total=len(ops), complete=True)

    def _do_publish(
        self, channel: Channel, exchange: str, msg: Message, persistent: bool
    ) -> Confirm:
        validate_message(msg)
        seq = channel.next_publish_seq
        channel.next_publish_seq += 1

        self._flow_gate()

        try:
            queues = self.route(exchange, msg, vhost=channel.vhost)
        except Unroutable:
            # the broker verified the message routes nowhere: confirm now
            return Confirm(ack=True, publish_seq=seq, routed_count=0, reason="unroutable")

        vh = self._vhost(channel.vhost)
        body_id = self.bodies.put(msg.payload)
        accepted = 0
        rejected = False
        try:
            for qname in sorted(queues):
                q: _Queue = vh.queues[qname]
                with q.lock:
                    if not q.available or not self.nodes[q.home_node].alive:
                        raise BrokerDown(f"queue {qname} is down")
                    self._expire_entries(q)
                    if q.spec.max_length is not None and len(q.entries) >= q.spec.max_length:
                        if q.spec.overflow is OverflowPolicy.REJECT_PUBLISH:
                            rejected = True
                            continue
                        oldest = q.entries.pop(0)
                        self.bodies.release(oldest.body_id)
                    entry = _Entry(msg, body_id, len(msg.payload), persistent)
                    if not q.insert(entry):
                        accepted += 1  # duplicate retransmit absorbed in place
                        continue
                    self.bodies.retain(body_id)
                    if persistent and q.spec.durable:
                        self._fire_fault("before_fsync", qname)
                        entry.fsynced = True
                        if self.fsync_latency_ns:
                            _spin_ns(self.fsync_latency_ns)
                    for m in q.spec.mirrors:
                        if self.nodes[m].alive:
                            entry.mirrored_on.add(m)
                            if self.mirror_sync_ns:
                                _spin_ns(self.mirror_sync_ns)
                    if q.spec.mirrors and set(q.spec.mirrors) - entry.mirrored_on:
                        raise BrokerDown(f"mirror of {qname} is down")
                    self._enforce_spill(q)
                    accepted += 1
        finally:
            self.bodies.release(body_id)  # drop the staging reference

        if self._defect_armed and accepted and msg.seq_no >= 2:
            # deliberately broken build: confirm, then silently delete the
            # entry again (mutation-testing hook)
            self._defect_armed = False
            for qname in sorted(queues):
                q = vh.queues[qname]
                with q.lock:
                    for i, e in enumerate(q.entries):
                        if e.flow == msg.flow_id and e.seq == msg.seq_no:
                            q.entries.pop(i)
                            self.bodies.release(e.body_id)
                            break

        self._flow_update()
        for qname in sorted(queues):
            self._pump(vh.queues[qname])
        if rejected:
            return Confirm(ack=False, publish_seq=seq, routed_count=accepted, reason="queue full")
        return Confirm(ack=True, publish_seq=seq, routed_count=accepted)

    # -- consumption ----------------------------------------------------------

    def consume(
        self,
        queue: str,
        consumer_id: str,
        mode: ConsumeMode = ConsumeMode.PULL,
        prefetch: int = 1,
        auto_ack: bool = False,
        vhost: str = "/",
    ) -> "ConsumerHandle":
        q = self._queue(vhost, queue)
        with q.lock:
            if consumer_id in q.consumers:
                raise ExchError(f"consumer {consumer_id} already attached to {queue}")
            q.consumers[consumer_id] = _Consumer(consumer_id, mode, prefetch, auto_ack)
        handle = ConsumerHandle(self, vhost, queue, consumer_id)
        if mode is ConsumeMode.PUSH:
            self._pump(q)
        return handle

    def cancel_consumer(self, handle: "ConsumerHandle", requeue_unacked: bool = True) -> None:
        q = self._queue(handle.vhost, handle.queue)
        with q.lock:
            q.consumers.pop(handle.consumer_id, None)
            doomed = [tag for tag, (_, cid) in q.unacked.items() if cid == handle.consumer_id]
            for tag in doomed:
                entry, _ = q.unacked.pop(tag)
                if requeue_unacked:
                    entry.delivery_count += 1
                    if not q.insert(entry):
                        self.bodies.release(entry.body_id)
                else:
                    self.bodies.release(entry.body_id)

    def pull(self, queue: str, consumer_id: str, max_n: int = 1, vhost: str = "/") -> list[Delivery]:
        """Demand-driven delivery; empty list when the queue has nothing."""
        q = self._queue(vhost, queue)
        out: list[Delivery] = []
        with q.lock:
            if not q.available or not self.nodes[q.home_node].alive:
                raise BrokerDown(f"queue {queue} is down")
            cons = q.consumers.get(consumer_id)
            if cons is None:
                raise ExchError(f"consumer {consumer_id} not attached to {queue}")
            for _ in range(max_n):
                if not cons.auto_ack and cons.unacked >= cons.prefetch:
                    break
                d = self._deliver_next(q, cons)
                if d is None:
                    break
                out.append(d)
        return out

    def drain_pushed(self, queue: str, consumer_id: str, vhost: str = "/") -> list[Delivery]:
        """Take whatever the broker pushed into this consumer's inbox."""
        q = self._queue(vhost, queue)
        with q.lock:
            cons = q.consumers.get(consumer_id)
            if cons is None:
                raise ExchError(f"consumer {consumer_id} not attached to {queue}")
            out, cons.inbox = cons.inbox, []
            return out

    def ack(self, queue: str, tag: int, vhost: str = "/") -> None:
        q = self._queue(vhost, queue)
        with q.lock:
            if tag not in q.unacked:
                raise UnknownTag(str(tag))
            entry, cid = q.unacked.pop(tag)
            cons = q.consumers.get(cid)
            if cons is not None and cons.unacked > 0:
                cons.unacked -= 1
            self.bodies.release(entry.body_id)
        self._flow_update()
        self._pump(q)

    def nack(self, queue: str, tag: int, requeue: bool = True, vhost: str = "/") -> None:
        q = self._queue(vhost, queue)
        with q.lock:
            if tag not in q.unacked:
                raise UnknownTag(str(tag))
            entry, cid = q.unacked.pop(tag)
            cons = q.consumers.get(cid)
            if cons is not None and cons.unacked > 0:
                cons.unacked -= 1
            if requeue:
                entry.delivery_count += 1
                if not q.insert(entry):
                    self.bodies.release(entry.body_id)
            else:
                self.bodies.release(entry.body_id)
        self._pump(q)

    def redeliver_unacked(self, queue: str, tag: int, vhost: str = "/") -> Optional[Delivery]:
        """Deliver a second copy of an unacked entry (delivery-timeout
        behavior, used by fault injection)."""
        q = self._queue(vhost, queue)
        with q.lock:
            if tag not in q.unacked:
                return None
            entry, cid = q.unacked[tag]
            cons = q.consumers.get(cid)
            if cons is None:
                return None
            payload = self.bodies.get(entry.body_id)
            dup = Delivery(
                tag=tag,
                queue=q.spec.name,
                consumer_id=cid,
                message=self._entry_message(entry, payload),
                redelivered=True,
                from_spill=False,
            )
            return dup

    # -- TTL and limits ----------------------------------------------------------

    def expire_ttl(self, queue: str, now: Optional[int] = None, vhost: str = "/") -> int:
        q = self._queue(vhost, queue)
        with q.lock:
            return self._expire_entries(q, now)

    def enforce_limits(self, queue: str, vhost: str = "/") -> LimitAction:
        q = self._queue(vhost, queue)
        dropped = spilled = 0
        with q.lock:
            if q.spec.max_length is not None:
                while len(q.entries) > q.spec.max_length:
                    if q.spec.overflow is OverflowPolicy.REJECT_PUBLISH:
                        break
                    oldest = q.entries.pop(0)
                    self.bodies.release(oldest.body_id)
                    dropped += 1
            spilled = self._enforce_spill(q)
        state = self._flow_update()
        return LimitAction(dropped=dropped, spilled=spilled, flow_control=state)

    def queue_depth(self, queue: str, vhost: str = "/") -> int:
        q = self._queue(vhost, queue)
        with q.lock:
            return len(q.entries)

    def unacked_count(self, queue: str, vhost: str = "/") -> int:
        q = self._queue(vhost, queue)
        with q.lock:
            return len(q.unacked)

    def spilled_entry_count(self, queue: str, vhost: str = "/") -> int:
        q = self._queue(vhost, queue)
        with q.lock:
            return sum(1 for e in q.entries if e.spilled)

    def has_spilled(self, queue: str, vhost: str = "/") -> bool:
        q = self._queue(vhost, queue)
        return q.spilled_ever

    # -- internals ----------------------------------------------------------

    def _deliver_next(self, q: _Queue, cons: _Consumer) -> Optional[Delivery]:
        self._expire_entries(q)
        if not q.entries:
            return None
        entry = q.entries.pop(0)
        from_spill = entry.spilled
        if from_spill:
            payload = self.bodies.unspill(entry.body_id)
            entry.spilled = False
            if self.spill_read_ns:
                _spin_ns(self.spill_read_ns)
        else:
            payload = self.bodies.get(entry.body_id)
        tag = self._next_tag
        self._next_tag += 1
        entry.delivery_count += 1
        delivery = Delivery(
            tag=tag,
            queue=q.spec.name,
            consumer_id=cons.consumer_id,
            message=self._entry_message(entry, payload),
            redelivered=entry.delivery_count > 1,
            from_spill=from_spill,
        )
        if cons.auto_ack:
            self.bodies.release(entry.body_id)
        else:
            q.unacked[tag] = (entry, cons.consumer_id)
            cons.unacked += 1
        return delivery

    def _entry_message(self, entry: _Entry, payload: bytes) -> Message:
        return Message(
            flow_id=entry.flow,
            seq_no=entry.seq,
            # the consumer gets its own frame copy off the shared body
            payload=memoryview(payload).tobytes(),
            routing_key=entry.routing_key,
            headers=entry.headers,
            produced_at=entry.produced_at,
            ttl_ms=entry.ttl_ms,
        )

    def _pump(self, q: _Queue) -> None:
        """Push eager deliveries to PUSH consumers, round-robin, up to each
        consumer's prefetch."""
        with q.lock:
            pushers = [c for c in q.consumers.values() if c.mode is ConsumeMode.PUSH]
            if not pushers:
                return
            progress = True
            while progress and q.entries:
                progress = False
                for i in range(len(pushers)):
                    cons = pushers[(q._rr + i) % len(pushers)]
                    if not cons.auto_ack and cons.unacked >= cons.prefetch:
                        continue
                    d = self._deliver_next(q, cons)
                    if d is not None:
                        cons.inbox.append(d)
                        q._rr = (q._rr + i + 1) % len(pushers)
                        progress = True
                        break

    def _expire_entries(self, q: _Queue, now: Optional[int] = None) -> int:
        now = self.clock() if now is None else now
        kept: list[_Entry] = []
        expired = 0
        for e in q.entries:
            ttl = e.ttl_ms if e.ttl_ms is not None else q.spec.default_ttl
            if ttl is not None and e.produced_at + ttl * 1_000_000 < now:
                self.bodies.release(e.body_id)
                expired += 1
            else:
                kept.append(e)
        if expired:
            q.entries = kept
        return expired

    def _enforce_spill(self, q: _Queue) -> int:
        cap = q.spec.memory_cap_bytes
        if cap is None or not q.spec.spill_to_disk:
            return 0
        spilled = 0
        mem = q.memory_bytes()
        for e in q.entries:
            if mem <= cap:
                break
            if e.spilled:
                continue
            moved = self.bodies.spill(e.body_id)
            e.spilled = True
            q.spilled_ever = True
            mem -= moved
            spilled += 1
        return spilled

    def _flow_gate(self) -> None:
        if self.memory_budget_bytes is None:
            return
        with self._flow_cond:
            while self._flow_blocked:
                self._flow_cond.wait(timeout=0.05)
                self._flow_refresh()

    def _flow_update(self) -> str:
        if self.memory_budget_bytes is None:
            return "none"
        with self._flow_cond:
            return self._flow_refresh()

    def _flow_refresh(self) -> str:
        used = self.bodies.live_payload_bytes()
        high = 0.8 * self.memory_budget_bytes
        low = 0.6 * self.memory_budget_bytes
        if not self._flow_blocked and used > high:
            self._flow_blocked = True
            return "engaged"
        if self._flow_blocked and used < low:
            self._flow_blocked = False
            self._flow_cond.notify_all()
            return "released"
        return "engaged" if self._flow_blocked else "none"

    def flow_control_engaged(self) -> bool:
        return self._flow_blocked

    def _vhost(self, vhost: str) -> _VHost:
        vh = self.vhosts.get(vhost)
        if vh is None:
            raise UnknownEntity(f"vhost {vhost}")
        return vh

    def _vhost_or_create(self, vhost: str) -> _VHost:
        with self._lock:
            return self.vhosts.setdefault(vhost, _VHost())

    def _queue(self, vhost: str, name: str) -> _Queue:
        vh = self._vhost(vhost)
        q = vh.queues.get(name)
        if q is None:
            raise UnknownQueue(f"{vhost}{name}")
        return q

    def _node(self, node_id: str) -> _SimNode:
        node = self.nodes.get(node_id)
        if node is None:
            raise UnknownEntity(f"node {node_id}")
        return node

    def _fire_fault(self, phase: str, target: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(phase, target)


class ConsumerHandle:
    """A consumer attached to one queue.

    `pull`/`drain` hand out deliveries; `ack`/`nack` settle them by delivery
    tag.  Acking the last owner of an entry lets the broker delete the
    shared message body.
    """

    def __init__(self, engine: ExchEngine, vhost: str, queue: str, consumer_id: str) -> None:
        self.engine = engine
        self.vhost = vhost
        self.queue = queue
        self.consumer_id = consumer_id

    def pull(self, max_n: int = 1) -> list[Delivery]:
        return self.engine.pull(self.queue, self.consumer_id, max_n, vhost=self.vhost)

    def drain(self) -> list[Delivery]:
        return self.engine.drain_pushed(self.queue, self.consumer_id, vhost=self.vhost)

    def ack(self, tag: int) -> None:
        self.engine.ack(self.queue, tag, vhost=self.vhost)

    def nack(self, tag: int, requeue: bool = True) -> None:
        self.engine.nack(self.queue, tag, requeue=requeue, vhost=self.vhost)


def load_topology_file(engine: ExchEngine, path: Path) -> None:
    engine.load_topology(json.loads(Path(path).read_text()))


def validate_topology(topology: dict) -> list[str]:
    """Schema-level validation of a topology mapping; returns problems."""
    problems: list[str] = []
    if not isinstance(topology, dict):
        return ["topology must be a JSON object"]
    names = set()
    for ex in topology.get("exchanges", ()):
        if "name" not in ex or "kind" not in ex:
            problems.append(f"exchange missing name/kind: {ex!r}")
            continue
        try:
            ExchangeKind(ex["kind"])
        except ValueError:
            problems.append(f"exchange {ex['name']}: unknown kind {ex['kind']!r}")
        names.add(ex["name"])
    qnames = set()
    for q in topology.get("queues", ()):
        if "name" not in q:
            problems.append(f"queue missing name: {q!r}")
            continue
        qnames.add(q["name"])
    for b in topology.get("bindings", ()):
        if b.get("exchange") not in names:
            problems.append(f"binding references unknown exchange {b.get('exchange')!r}")
        if b.get("queue") not in qnames:
            problems.append(f"binding references unknown queue {b.get('queue')!r}")
    return problems


def _spin_ns(ns: int) -> None:
    if ns >= 20_000:
        time.sleep(ns / 1e9)
    else:
        deadline = time.perf_counter_ns() + ns
        while time.perf_counter_ns() < deadline:
            pass
