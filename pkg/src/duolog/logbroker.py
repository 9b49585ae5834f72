"""Partitioned append-log engine.

Topics are split into partitions; each partition is an offset-indexed log of
segments replicated over simulated nodes.  Consumption is pull-based through
consumer groups that track committed offsets themselves.  Retention drops
whole segments, compaction keeps the newest record per key, and partition
replicas can be moved between nodes online.

Simulated nodes are in-process storage domains with a volatile and a durable
region: a crash discards everything above the flushed watermark, which is
what reproduces fsync-window loss without real disks.

Segment layout (both the in-memory buffers and the optional `.seg` files):
little-endian, length-prefixed records of

    u32 payload length | u32 header-block length | u64 offset |
    u64 produced_at_ns | header-block bytes | payload bytes

where the header block is compact JSON carrying flow id, sequence number,
key, routing key, headers and TTL.  One file per segment, named
`<base_offset>.seg`.
"""

from __future__ import annotations

import base64
import json
import struct
import threading
import time
from bisect import bisect_left
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

from .core import BrokerContract, BrokerDown, Clock, FlushPolicy, Message
from .hashing import stable_hash64


# --------------------------------------------------------------------------
# errors
# --------------------------------------------------------------------------

class LogError(Exception):
    pass


class DuplicateTopic(LogError):
    pass


class UnknownTopic(LogError):
    pass


class UnknownPartition(LogError):
    pass


class UnknownNode(LogError):
    pass


class UnknownGroup(LogError):
    pass


class NotEnoughNodes(LogError):
    pass


class OffsetOutOfRange(LogError):
    pass


class NotAssigned(LogError):
    pass


class ReplicaExists(LogError):
    pass


class ReplicaMissing(LogError):
    pass


class KeylessMessage(LogError):
    pass


# --------------------------------------------------------------------------
# configuration types
# --------------------------------------------------------------------------

class LogAckMode(Enum):
    ACKS_0 = 0        # fire and forget: acknowledged on enqueue
    ACKS_1 = 1        # acknowledged once the leader holds the batch
    ACKS_QUORUM = -1  # acknowledged once a majority of replicas hold it


@dataclass(frozen=True)
class RetentionPolicy:
    """At least one retention bound: age, message count or byte quota."""

    max_age_ms: Optional[int] = 7 * 24 * 3600 * 1000
    max_messages: Optional[int] = None
    max_bytes: Optional[int] = None

    def __post_init__(self) -> None:
        if self.max_age_ms is None and self.max_messages is None and self.max_bytes is None:
            raise ValueError("at least one retention bound must be set")


@dataclass(frozen=True)
class TopicConfig:
    name: str
    partitions: int = 1
    replication_factor: int = 1
    retention: RetentionPolicy = RetentionPolicy()
    segment_bytes: int = 1 << 20
    flush: FlushPolicy = FlushPolicy()

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("topic name must be non-empty")
        if self.partitions < 1:
            raise ValueError("partitions must be >= 1")
        if self.replication_factor < 1:
            raise ValueError("replication_factor must be >= 1")
        if self.segment_bytes < 1:
            raise ValueError("segment_bytes must be >= 1")


@dataclass(frozen=True)
class BatchingConfig:
    """Pipeline batching thresholds; the stock defaults are deliberately
    large, desk-scale workloads override them downward."""

    producer_batch_messages: int = 200
    producer_batch_max_delay_s: float = 30.0
    broker_batch_messages: int = 50_000
    broker_batch_max_delay_s: float = 30.0
    consumer_fetch_bytes: int = 1 << 20

    def __post_init__(self) -> None:
        for name in (
            "producer_batch_messages",
            "producer_batch_max_delay_s",
            "broker_batch_messages",
            "broker_batch_max_delay_s",
            "consumer_fetch_bytes",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


class AckPhase(Enum):
    ENQUEUED = "enqueued"
    LEADER = "leader"
    QUORUM = "quorum"


@dataclass(frozen=True)
class AppendReceipt:
    base_offset: int
    count: int
    acked_at_phase: AckPhase


@dataclass(frozen=True)
class PurgeReport:
    removed_per_partition: dict


@dataclass(frozen=True)
class CompactReport:
    partition: int
    removed: int
    retained: int


# --------------------------------------------------------------------------
# record codec
# --------------------------------------------------------------------------

_RECORD_HEADER = struct.Struct("<IIQQ")


def encode_record(offset: int, msg: Message) -> bytes:
    meta = {
        "flow": msg.flow_id,
        "seq": msg.seq_no,
        "headers": msg.headers,
    }
    if msg.key is not None:
        meta["key"] = base64.b64encode(msg.key).decode("ascii")
    if msg.routing_key is not None:
        meta["rk"] = msg.routing_key
    if msg.ttl_ms is not None:
        meta["ttl_ms"] = msg.ttl_ms
    header_block = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return (
        _RECORD_HEADER.pack(len(msg.payload), len(header_block), offset, msg.produced_at)
        + header_block
        + bytes(msg.payload)
    )


def decode_record(buf: bytes, pos: int = 0) -> tuple[int, Message, int]:
    """Decode one record at `pos`; returns (offset, message, next_pos)."""
    payload_len, header_len, offset, produced_at = _RECORD_HEADER.unpack_from(buf, pos)
    pos += _RECORD_HEADER.size
    meta = json.loads(bytes(buf[pos:pos + header_len]))
    pos += header_len
    payload = bytes(buf[pos:pos + payload_len])
    pos += payload_len
    msg = Message(
        flow_id=meta["flow"],
        seq_no=meta["seq"],
        payload=payload,
        key=base64.b64decode(meta["key"]) if "key" in meta else None,
        routing_key=meta.get("rk"),
        headers=meta.get("headers", {}),
        produced_at=produced_at,
        ttl_ms=meta.get("ttl_ms"),
    )
    return offset, msg, pos


def iter_records(buf: bytes) -> Iterator[tuple[int, Message]]:
    pos = 0
    while pos < len(buf):
        offset, msg, pos = decode_record(buf, pos)
        yield offset, msg


def record_key(buf: bytes, pos: int) -> tuple[int, Optional[bytes], int]:
    """Offset, key and next_pos of the record at `pos`, without a full decode."""
    payload_len, header_len, offset, _ = _RECORD_HEADER.unpack_from(buf, pos)
    pos += _RECORD_HEADER.size
    meta = json.loads(bytes(buf[pos:pos + header_len]))
    key = base64.b64decode(meta["key"]) if "key" in meta else None
    return offset, key, pos + header_len + payload_len


# --------------------------------------------------------------------------
# storage
# --------------------------------------------------------------------------

class Segment:
    """One contiguous buffer region of a partition log.

    Offsets may be sparse after compaction, so each record's offset is kept
    alongside its byte position.
    """

    __slots__ = ("base_offset", "buf", "offsets", "positions")

    def __init__(self, base_offset: int) -> None:
        self.base_offset = base_offset
        self.buf = bytearray()
        self.offsets: list[int] = []
        self.positions: list[int] = []

    def append_encoded(self, offset: int, rec: bytes) -> None:
        self.offsets.append(offset)
        self.positions.append(len(self.buf))
        self.buf += rec

    @property
    def count(self) -> int:
        return len(self.offsets)

    @property
    def size_bytes(self) -> int:
        return len(self.buf)

    @property
    def last_offset(self) -> int:
        return self.offsets[-1]

    def record_bytes(self, i: int) -> bytes:
        end = self.positions[i + 1] if i + 1 < len(self.positions) else len(self.buf)
        return bytes(self.buf[self.positions[i]:end])

    def truncate_from(self, offset: int) -> int:
        """Drop records with offset >= `offset`; returns how many were cut."""
        i = bisect_left(self.offsets, offset)
        cut = len(self.offsets) - i
        if cut:
            del self.buf[self.positions[i]:]
            del self.offsets[i:]
            del self.positions[i:]
        return cut

    def clone(self) -> "Segment":
        s = Segment(self.base_offset)
        s.buf = bytearray(self.buf)
        s.offsets = list(self.offsets)
        s.positions = list(self.positions)
        return s


@dataclass
class SimNode:
    node_id: str
    alive: bool = True


class Replica:
    """One node's copy of a partition log."""

    __slots__ = (
        "node_id", "topic", "partition",
        "segments", "next_offset", "flushed_up_to", "last_flush_ns", "start_offset",
    )

    def __init__(self, node_id: str, topic: str = "", partition: int = 0) -> None:
        self.node_id = node_id
        self.topic = topic
        self.partition = partition
        self.segments: list[Segment] = []
        self.next_offset = 0
        self.flushed_up_to = 0
        self.last_flush_ns = 0
        # first offset still covered by the log; advanced by retention only,
        # compaction leaves it alone and merely makes the log sparse
        self.start_offset = 0

    def append_encoded(self, records: list[tuple[int, bytes]], segment_bytes: int) -> None:
        for offset, rec in records:
            tail = self.segments[-1] if self.segments else None
            if tail is None or (tail.count > 0 and tail.size_bytes + len(rec) > segment_bytes):
                tail = Segment(offset)
                self.segments.append(tail)
            tail.append_encoded(offset, rec)
            self.next_offset = offset + 1

    def log_start_offset(self) -> int:
        return self.start_offset

    def total_messages(self) -> int:
        return sum(seg.count for seg in self.segments)

    def total_bytes(self) -> int:
        return sum(seg.size_bytes for seg in self.segments)

    def records_from(self, offset: int) -> Iterator[tuple[int, bytes]]:
        for seg in self.segments:
            if seg.count == 0 or seg.last_offset < offset:
                continue
            i = bisect_left(seg.offsets, offset)
            while i < len(seg.offsets):
                yield seg.offsets[i], seg.record_bytes(i)
                i += 1

    def truncate_to_flushed(self) -> int:
        """Discard the volatile region (offsets >= flushed_up_to)."""
        lost = 0
        keep: list[Segment] = []
        for seg in self.segments:
            if seg.count == 0:
                continue
            if seg.last_offset < self.flushed_up_to:
                keep.append(seg)
            else:
                lost += seg.truncate_from(self.flushed_up_to)
                if seg.count:
                    keep.append(seg)
        self.segments = keep
        self.next_offset = self.flushed_up_to
        return lost


class Partition:
    def __init__(self, topic: str, index: int, replicas: list[Replica]) -> None:
        self.topic = topic
        self.index = index
        self.replicas = replicas
        self.lock = threading.RLock()

    def replica_on(self, node_id: str) -> Optional[Replica]:
        for r in self.replicas:
            if r.node_id == node_id:
                return r
        return None


@dataclass
class Topic:
    config: TopicConfig
    partitions: list[Partition]


@dataclass
class ConsumerGroup:
    group_id: str
    members: list[str] = field(default_factory=list)
    assignment: dict = field(default_factory=dict)   # (topic, partition) -> member
    committed: dict = field(default_factory=dict)    # (topic, partition) -> offset


# --------------------------------------------------------------------------
# partitioner
# --------------------------------------------------------------------------

Partitioner = Callable[[Optional[bytes], int], int]


def partition_for(
    key: Optional[bytes],
    n_partitions: int,
    override: Optional[Partitioner] = None,
    rotation: int = 0,
) -> int:
    """Pick a partition for a message key.

    Keyed messages hash deterministically (seed-stable across runs and
    processes); keyless messages rotate round-robin using the caller-held
    `rotation` counter.  An `override` partitioner wins when given.
    """
    if n_partitions < 1:
        raise ValueError("n_partitions must be >= 1")
    if override is not None:
        idx = override(key, n_partitions)
        if not 0 <= idx < n_partitions:
            raise ValueError(f"override partitioner returned {idx} for {n_partitions} partitions")
        return idx
    if key is None:
        return rotation % n_partitions
    return stable_hash64(bytes(key)) % n_partitions


# --------------------------------------------------------------------------
# the engine
# --------------------------------------------------------------------------

def quorum_size(replication_factor: int) -> int:
    return (replication_factor + 1 + 1) // 2  # ceil((rf + 1) / 2)


class LogEngine(BrokerContract):
    """In-process partitioned log broker over simulated nodes.

    One logical writer per partition (appends are serialized per partition),
    fetches take the same per-partition lock, control operations take the
    engine lock.  Safe for concurrent use by many producer/consumer threads.
    """

    name = "log"

    def __init__(
        self,
        nodes: int | Iterable[str] = 3,
        *,
        clock: Clock = time.monotonic_ns,
        data_dir: Optional[Path] = None,
        fsync_latency_ns: int = 0,
        replica_ack_rtt_ns: int = 0,
        defects: Iterable[str] = (),
    ) -> None:
        if isinstance(nodes, int):
            node_ids = [f"n{i}" for i in range(nodes)]
        else:
            node_ids = list(nodes)
        if not node_ids:
            raise ValueError("need at least one node")
        self.nodes: dict[str, SimNode] = {nid: SimNode(nid) for nid in node_ids}
        self.topics: dict[str, Topic] = {}
        self.groups: dict[str, ConsumerGroup] = {}
        self.clock = clock
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.fsync_latency_ns = fsync_latency_ns
        # waiting on a follower acknowledgment costs a second round trip
        self.replica_ack_rtt_ns = replica_ack_rtt_ns
        self.defects = frozenset(defects)
        self._defect_armed = "lose_confirmed" in self.defects
        self._rotors: dict[str, int] = {}
        self._lock = threading.RLock()
        self.fault_hook: Optional[Callable[[str, str, int], None]] = None

    # -- contract ----------------------------------------------------------

    def node_ids(self) -> list[str]:
        return list(self.nodes)

    def crash_node(self, node_id: str) -> None:
        node = self._node(node_id)
        node.alive = False
        with self._lock:
            for topic in self.topics.values():
                for part in topic.partitions:
                    with part.lock:
                        rep = part.replica_on(node_id)
                        if rep is not None:
                            rep.truncate_to_flushed()

    def restart_node(self, node_id: str) -> None:
        node = self._node(node_id)
        node.alive = True
        with self._lock:
            for topic in self.topics.values():
                for part in topic.partitions:
                    with part.lock:
                        rep = part.replica_on(node_id)
                        if rep is None:
                            continue
                        try:
                            leader = self._leader(part)
                        except BrokerDown:
                            continue
                        if leader is not rep:
                            self._catch_up(rep, leader, topic.config)

    def payload_bytes(self) -> int:
        total = 0
        with self._lock:
            for topic in self.topics.values():
                for part in topic.partitions:
                    with part.lock:
                        for rep in part.replicas:
                            total += rep.total_bytes()
        return total

    # -- topics ------------------------------------------------------------

    def create_topic(self, cfg: TopicConfig) -> Topic:
        with self._lock:
            if cfg.name in self.topics:
                raise DuplicateTopic(cfg.name)
            if cfg.replication_factor > len(self.nodes):
                raise NotEnoughNodes(
                    f"replication_factor {cfg.replication_factor} > {len(self.nodes)} nodes"
                )
            node_ids = list(self.nodes)
            now = self.clock()
            partitions = []
            for p in range(cfg.partitions):
                replicas = [
                    Replica(node_ids[(p + i) % len(node_ids)], cfg.name, p)
                    for i in range(cfg.replication_factor)
                ]
                for rep in replicas:
                    rep.last_flush_ns = now
                partitions.append(Partition(cfg.name, p, replicas))
            topic = Topic(cfg, partitions)
            self.topics[cfg.name] = topic
            self._rotors[cfg.name] = 0
            return topic

    def partition_for(
        self,
        topic: str,
        key: Optional[bytes],
        override: Optional[Partitioner] = None,
    ) -> int:
        t = self._topic(topic)
        n = t.config.partitions
        if key is None and override is None:
            with self._lock:
                rotation = self._rotors[topic]
                self._rotors[topic] = rotation + 1
            return partition_for(None, n, rotation=rotation)
        return partition_for(key, n, override=override)

    # -- append / fetch ------------------------------------------------------

    def append_batch(
        self,
        topic: str,
        partition: int,
        msgs: list[Message],
        acks: LogAckMode = LogAckMode.ACKS_1,
    ) -> AppendReceipt:
        if not msgs:
            raise ValueError("append_batch needs at least one message")
        t = self._topic(topic)
        part = self._partition(t, partition)
        rf = t.config.replication_factor
        with part.lock:
            leader = self._leader(part)
            self._fire_fault("pre_commit", topic, partition)
            base = leader.next_offset
            records = [
                (base + i, encode_record(base + i, msg)) for i, msg in enumerate(msgs)
            ]
            if self._defect_armed and base >= 3:
                # deliberately broken build: silently drop one record of the
                # batch after confirming it (mutation-testing hook)
                self._defect_armed = False
                leader.append_encoded(records[:-1], t.config.segment_bytes)
                leader.next_offset = records[-1][0] + 1
            else:
                leader.append_encoded(records, t.config.segment_bytes)
            self._maybe_flush(leader, t.config, len(records))
            self._fire_fault("post_leader", topic, partition)
            acceptors = 1
            for rep in part.replicas:
                if rep is leader or not self.nodes[rep.node_id].alive:
                    continue
                if rep.next_offset < base:
                    self._catch_up(rep, leader, t.config)
                if rep.next_offset == base:
                    rep.append_encoded(records, t.config.segment_bytes)
                    self._maybe_flush(rep, t.config, len(records))
                if rep.next_offset >= base + len(records):
                    acceptors += 1
            if acks is LogAckMode.ACKS_QUORUM and acceptors < quorum_size(rf):
                raise BrokerDown(
                    f"quorum {quorum_size(rf)} unavailable ({acceptors} acceptors)"
                )
            if acks is LogAckMode.ACKS_QUORUM and rf >= 2 and self.replica_ack_rtt_ns:
                _spin_ns(self.replica_ack_rtt_ns)
            phase = {
                LogAckMode.ACKS_0: AckPhase.ENQUEUED,
                LogAckMode.ACKS_1: AckPhase.LEADER,
                LogAckMode.ACKS_QUORUM: AckPhase.QUORUM,
            }[acks]
            return AppendReceipt(base_offset=base, count=len(msgs), acked_at_phase=phase)

    def fetch(
        self,
        topic: str,
        partition: int,
        offset: int,
        max_bytes: int = 1 << 20,
    ) -> tuple[list[Message], int]:
        """Messages with offsets >= `offset` up to `max_bytes`, plus the
        high watermark.  Under replication only quorum-held offsets are
        visible."""
        if offset < 0:
            raise OffsetOutOfRange(f"offset {offset} < 0")
        t = self._topic(topic)
        part = self._partition(t, partition)
        with part.lock:
            leader = self._leader(part)
            hw = self._high_watermark(part, t.config.replication_factor)
            start = leader.log_start_offset()
            if offset < start:
                raise OffsetOutOfRange(f"offset {offset} < oldest retained {start}")
            if offset > leader.next_offset:
                raise OffsetOutOfRange(f"offset {offset} > next offset {leader.next_offset}")
            out: list[Message] = []
            used = 0
            for off, rec in leader.records_from(offset):
                if off >= hw:
                    break
                if out and used + len(rec) > max_bytes:
                    break
                _, msg, _ = decode_record(rec)
                out.append(msg)
                used += len(rec)
            return out, hw

    def flush_all(self, topic: str) -> None:
        t = self._topic(topic)
        for part in t.partitions:
            with part.lock:
                for rep in part.replicas:
                    if self.nodes[rep.node_id].alive:
                        self._flush(rep, t.config)

    def next_offset(self, topic: str, partition: int) -> int:
        t = self._topic(topic)
        part = self._partition(t, partition)
        with part.lock:
            return self._leader(part).next_offset

    def high_watermark(self, topic: str, partition: int) -> int:
        t = self._topic(topic)
        part = self._partition(t, partition)
        with part.lock:
            return self._high_watermark(part, t.config.replication_factor)

    # -- consumer groups -----------------------------------------------------

    def assign_partitions(self, group_id: str, topic: str, member_ids: list[str]) -> dict[int, str]:
        """Deterministic balanced assignment: sorted partitions dealt
        round-robin over sorted members; extra members idle."""
        if not member_ids:
            raise ValueError("need at least one member")
        t = self._topic(topic)
        members = sorted(member_ids)
        with self._lock:
            group = self.groups.setdefault(group_id, ConsumerGroup(group_id))
            group.members = members
            assignment = {}
            for p in range(t.config.partitions):
                owner = members[p % len(members)]
                assignment[p] = owner
                group.assignment[(topic, p)] = owner
            return assignment

    def commit_offset(
        self, group_id: str, member_id: str, topic: str, partition: int, offset: int
    ) -> None:
        t = self._topic(topic)
        part = self._partition(t, partition)
        with self._lock:
            group = self.groups.get(group_id)
            if group is None or group.assignment.get((topic, partition)) != member_id:
                raise NotAssigned(f"{member_id} does not own {topic}/{partition} in {group_id}")
            with part.lock:
                limit = self._leader(part).next_offset
            if offset < 0 or offset > limit:
                raise OffsetOutOfRange(f"commit {offset} outside [0, {limit}]")
            group.committed[(topic, partition)] = offset

    def committed(self, group_id: str, topic: str, partition: int) -> int:
        with self._lock:
            group = self.groups.get(group_id)
            if group is None:
                raise UnknownGroup(group_id)
            return group.committed.get((topic, partition), 0)

    # -- retention / compaction ----------------------------------------------

    def purge(self, topic: str, now_ns: Optional[int] = None) -> PurgeReport:
        """Drop oldest whole segments until every active retention bound
        holds; the tail segment's unflushed region is never dropped."""
        t = self._topic(topic)
        now = self.clock() if now_ns is None else now_ns
        removed: dict[int, int] = {}
        for part in t.partitions:
            with part.lock:
                leader = self._leader(part)
                n = 0
                while leader.segments:
                    seg = leader.segments[0]
                    if seg.count == 0:
                        leader.segments.pop(0)
                        continue
                    if seg.last_offset >= leader.flushed_up_to:
                        break  # protects the unflushed tail region
                    if not self._retention_violated(leader, t.config.retention, now):
                        break
                    n += seg.count
                    self._drop_segment(part, seg.base_offset)
                removed[part.index] = n
        return PurgeReport(removed_per_partition=removed)

    def compact(self, topic: str, partition: int) -> CompactReport:
        """Keep only the highest-offset record per key; survivor offsets are
        unchanged, so the log becomes sparse."""
        t = self._topic(topic)
        part = self._partition(t, partition)
        with part.lock:
            leader = self._leader(part)
            for rep in part.replicas:
                if rep is not leader and self.nodes[rep.node_id].alive:
                    self._catch_up(rep, leader, t.config)
            last_per_key: dict[bytes, int] = {}
            total = 0
            for seg in leader.segments:
                pos = 0
                while pos < len(seg.buf):
                    off, key, pos = record_key(seg.buf, pos)
                    if key is None:
                        raise KeylessMessage(f"offset {off} has no key")
                    last_per_key[key] = off
                    total += 1
            survivors = set(last_per_key.values())
            for rep in part.replicas:
                self._rewrite_with(rep, survivors, t.config.segment_bytes)
            retained = len(survivors)
            return CompactReport(partition=partition, removed=total - retained, retained=retained)

    # -- partition movement ----------------------------------------------------

    def move_partition(self, topic: str, partition: int, from_node: str, to_node: str) -> None:
        """Create a caught-up replica on `to_node`, then delete the old one.
        Appends and fetches keep working throughout."""
        t = self._topic(topic)
        part = self._partition(t, partition)
        self._node(from_node)
        dest = self._node(to_node)
        if not dest.alive:
            raise BrokerDown(f"{to_node} is down")
        with part.lock:
            if part.replica_on(to_node) is not None:
                raise ReplicaExists(f"{to_node} already hosts {topic}/{partition}")
            src = part.replica_on(from_node)
            if src is None:
                raise ReplicaMissing(f"{from_node} hosts no replica of {topic}/{partition}")
            if not self.nodes[from_node].alive:
                src = self._leader(part)
            new = Replica(to_node, topic, partition)
            new.segments = [seg.clone() for seg in src.segments]
            new.next_offset = src.next_offset
            new.flushed_up_to = src.next_offset  # materialized on arrival
            new.start_offset = src.start_offset
            new.last_flush_ns = self.clock()
            idx = part.replicas.index(part.replica_on(from_node))
            part.replicas[idx] = new

    # -- persistence --------------------------------------------------------

    def segment_paths(self, topic: str, partition: int, node_id: str) -> list[Path]:
        if self.data_dir is None:
            return []
        d = self.data_dir / node_id / topic / str(partition)
        return sorted(d.glob("*.seg")) if d.exists() else []

    # -- internals ----------------------------------------------------------

    def _node(self, node_id: str) -> SimNode:
        node = self.nodes.get(node_id)
        if node is None:
            raise UnknownNode(node_id)
        return node

    def _topic(self, name: str) -> Topic:
        t = self.topics.get(name)
        if t is None:
            raise UnknownTopic(name)
        return t

    def _partition(self, topic: Topic, index: int) -> Partition:
        if not 0 <= index < len(topic.partitions):
            raise UnknownPartition(f"{topic.config.name}/{index}")
        return topic.partitions[index]

    def _leader(self, part: Partition) -> Replica:
        best: Optional[Replica] = None
        for rep in part.replicas:
            if not self.nodes[rep.node_id].alive:
                continue
            if best is None or rep.next_offset > best.next_offset:
                best = rep
        if best is None:
            raise BrokerDown(f"all replicas of {part.topic}/{part.index} down")
        return best

    def _high_watermark(self, part: Partition, rf: int) -> int:
        if rf == 1:
            return self._leader(part).next_offset
        tops = sorted((r.next_offset for r in part.replicas), reverse=True)
        return tops[quorum_size(rf) - 1]

    def _catch_up(self, rep: Replica, leader: Replica, cfg: TopicConfig) -> None:
        missing = list(leader.records_from(rep.next_offset))
        if missing:
            rep.append_encoded(missing, cfg.segment_bytes)

    def _maybe_flush(self, rep: Replica, cfg: TopicConfig, _just_appended: int) -> None:
        unflushed = rep.next_offset - rep.flushed_up_to
        elapsed = self.clock() - rep.last_flush_ns
        if cfg.flush.due(unflushed, elapsed):
            self._flush(rep, cfg)

    def _flush(self, rep: Replica, cfg: TopicConfig) -> None:
        if rep.flushed_up_to == rep.next_offset:
            return
        rep.flushed_up_to = rep.next_offset
        rep.last_flush_ns = self.clock()
        if self.fsync_latency_ns:
            _spin_ns(self.fsync_latency_ns)
        if self.data_dir is not None:
            self._persist(rep, cfg)

    def _persist(self, rep: Replica, cfg: TopicConfig) -> None:
        d = self.data_dir / rep.node_id / rep.topic / str(rep.partition)
        d.mkdir(parents=True, exist_ok=True)
        for seg in rep.segments:
            if seg.count == 0:
                continue
            tmp = d / f".{seg.base_offset:020d}.seg.tmp"
            tmp.write_bytes(bytes(seg.buf))
            tmp.replace(d / f"{seg.base_offset:020d}.seg")

    def _retention_violated(self, rep: Replica, pol: RetentionPolicy, now: int) -> bool:
        if not rep.segments or rep.segments[0].count == 0:
            return False
        if pol.max_messages is not None and rep.total_messages() > pol.max_messages:
            return True
        if pol.max_bytes is not None and rep.total_bytes() > pol.max_bytes:
            return True
        if pol.max_age_ms is not None:
            seg = rep.segments[0]
            _, _, oldest_off, produced_at = _RECORD_HEADER.unpack_from(seg.buf, 0)
            if produced_at + pol.max_age_ms * 1_000_000 < now:
                return True
        return False

    def _drop_segment(self, part: Partition, base_offset: int) -> None:
        for rep in part.replicas:
            for i, seg in enumerate(rep.segments):
                if seg.base_offset == base_offset:
                    if seg.count:
                        rep.start_offset = max(rep.start_offset, seg.last_offset + 1)
                    rep.segments.pop(i)
                    break

    def _rewrite_with(self, rep: Replica, survivors: set[int], segment_bytes: int) -> None:
        kept: list[tuple[int, bytes]] = []
        for seg in rep.segments:
            for i, off in enumerate(seg.offsets):
                if off in survivors:
                    kept.append((off, seg.record_bytes(i)))
        next_off, flushed = rep.next_offset, rep.flushed_up_to
        rep.segments = []
        rep.append_encoded(kept, segment_bytes)
        rep.next_offset, rep.flushed_up_to = next_off, flushed

    def _fire_fault(self, phase: str, topic: str, partition: int) -> None:
        if self.fault_hook is not None:
            self.fault_hook(phase, topic, partition)


def _spin_ns(ns: int) -> None:
    if ns >= 20_000:
        time.sleep(ns / 1e9)
    else:
        deadline = time.perf_counter_ns() + ns
        while time.perf_counter_ns() < deadline:
            pass
