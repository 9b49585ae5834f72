"""Concurrent load generation and measurement.

Workloads run real producer and consumer threads against an engine's public
thread-safe surface; per-worker counters and latency samples are merged only
after the workers join.  Latency is measured per message from production to
delivery; only samples landing after the warmup window count.  Percentiles
use the nearest-rank method.

The measurement defaults come from the DUOLOG_PROFILE environment variable:
the `desk` profile (default) runs 10 s with a 5 s warmup per point, `full`
runs 60 s with a 30 s warmup.
"""

from __future__ import annotations

import csv
import json
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from .core import Delivery, FlushPolicy, Message
from .exchbroker import (
    BindingSpec,
    ConsumeMode,
    ExchEngine,
    ExchangeKind,
    ExchangeSpec,
    QueueSpec,
)
from .logbroker import BatchingConfig, LogAckMode, LogEngine, TopicConfig


class BenchError(Exception):
    pass


class NoSamples(BenchError):
    pass


class EngineStartFailure(BenchError):
    pass


SWEEP_PARAMS = (
    "record_size",
    "topics",
    "partitions",
    "replication",
    "ack_mode",
    "confirm_window",
)

EXPORT_COLUMNS = (
    "engine", "sweep_param", "sweep_value", "pps", "bps",
    "mean_ms", "p50_ms", "p999_ms", "max_ms", "seed",
)


def profile_defaults() -> tuple[float, float]:
    """(duration_s, warmup_s) for the selected DUOLOG_PROFILE."""
    profile = os.environ.get("DUOLOG_PROFILE", "desk").lower()
    if profile == "full":
        return 60.0, 30.0
    return 10.0, 5.0


@dataclass(frozen=True)
class WorkloadSpec:
    """What to run: worker counts, record size, topology scale, delivery
    knobs and the measurement window."""

    producers: int = 2
    consumers: int = 2
    record_size_bytes: int = 100
    topics: int = 1
    partitions: int = 1
    replication_factor: int = 1
    delivery: Delivery = Delivery.AT_MOST_ONCE
    ack_mode: str = "1"           # log engine: "0" | "1" | "quorum"
    confirm_window: int = -1
    duration_s: Optional[float] = None
    warmup_s: Optional[float] = None
    batching: BatchingConfig = field(
        default_factory=lambda: BatchingConfig(
            producer_batch_messages=10,
            producer_batch_max_delay_s=1.0,
            broker_batch_messages=1000,
            broker_batch_max_delay_s=1.0,
        )
    )
    messages_per_producer: Optional[int] = None  # used by deterministic mode
    seed: int = 1

    def resolved(self) -> "WorkloadSpec":
        duration, warmup = self.duration_s, self.warmup_s
        d_default, w_default = profile_defaults()
        if duration is None:
            duration = d_default
        if warmup is None:
            warmup = w_default
        spec = replace(self, duration_s=duration, warmup_s=warmup)
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.record_size_bytes < 1:
            raise ValueError("record_size_bytes must be >= 1")
        if self.producers < 1 or self.consumers < 1:
            raise ValueError("need at least one producer and one consumer")
        if self.duration_s is not None and self.warmup_s is not None:
            if self.duration_s <= self.warmup_s:
                raise ValueError("duration must exceed warmup")

    def config_snapshot(self) -> dict:
        return {
            "producers": self.producers,
            "consumers": self.consumers,
            "record_size_bytes": self.record_size_bytes,
            "topics": self.topics,
            "partitions": self.partitions,
            "replication_factor": self.replication_factor,
            "delivery": self.delivery.value,
            "ack_mode": self.ack_mode,
            "confirm_window": self.confirm_window,
            "duration_s": self.duration_s,
            "warmup_s": self.warmup_s,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class LatencySummary:
    mean_ms: float
    max_ms: float
    p50_ms: float
    p999_ms: float
    sample_count: int


def nearest_rank(sorted_samples: list, q: float):
    """Nearest-rank percentile: the ceil(q*N)-th smallest sample."""
    n = len(sorted_samples)
    if n == 0:
        raise NoSamples("no samples to rank")
    rank = -(-int(q * n * 1_000_000) // 1_000_000)  # ceil without float drift
    rank = max(1, min(n, rank))
    return sorted_samples[rank - 1]


def summarize_latencies(samples_ns: Iterable[int]) -> LatencySummary:
    samples = sorted(samples_ns)
    if not samples:
        raise NoSamples("no post-warmup latency samples")
    to_ms = 1 / 1e6
    return LatencySummary(
        mean_ms=sum(samples) / len(samples) * to_ms,
        max_ms=samples[-1] * to_ms,
        p50_ms=nearest_rank(samples, 0.50) * to_ms,
        p999_ms=nearest_rank(samples, 0.999) * to_ms,
        sample_count=len(samples),
    )


@dataclass(frozen=True)
class ThroughputSample:
    engine: str
    sweep_param: str
    sweep_value: object
    pps: float
    bps: float
    latency: LatencySummary
    config: dict
    seed: int

    def row(self) -> dict:
        return {
            "engine": self.engine,
            "sweep_param": self.sweep_param,
            "sweep_value": self.sweep_value,
            "pps": round(self.pps, 3),
            "bps": round(self.bps, 3),
            "mean_ms": round(self.latency.mean_ms, 6),
            "p50_ms": round(self.latency.p50_ms, 6),
            "p999_ms": round(self.latency.p999_ms, 6),
            "max_ms": round(self.latency.max_ms, 6),
            "seed": self.seed,
        }


# --------------------------------------------------------------------------
# engine drivers
# --------------------------------------------------------------------------

class LogDriver:
    """Runs workloads against the partitioned log engine."""

    name = "log"

    def start(self, spec: WorkloadSpec) -> "_LogCtx":
        return _LogCtx(spec)


class _LogCtx:
    def __init__(self, spec: WorkloadSpec) -> None:
        self.spec = spec
        at_least_once = spec.delivery is Delivery.AT_LEAST_ONCE
        flush = (
            FlushPolicy(flush_interval_messages=1, flush_interval_ms=None)
            if at_least_once
            else FlushPolicy(flush_interval_messages=10_000, flush_interval_ms=1000)
        )
        self.engine = LogEngine(
            max(3, spec.replication_factor),
            fsync_latency_ns=30_000 if at_least_once else 0,
            replica_ack_rtt_ns=100_000,
        )
        self.topics = []
        for t in range(spec.topics):
            name = f"bench-{t}"
            self.engine.create_topic(
                TopicConfig(
                    name,
                    partitions=spec.partitions,
                    replication_factor=spec.replication_factor,
                    flush=flush,
                )
            )
            self.topics.append(name)
        if spec.replication_factor >= 2:
            # replication is only meaningful when acks wait on the replicas
            self.acks = LogAckMode.ACKS_QUORUM
        else:
            self.acks = {
                "0": LogAckMode.ACKS_0,
                "1": LogAckMode.ACKS_1,
                "quorum": LogAckMode.ACKS_QUORUM,
            }.get(spec.ack_mode, LogAckMode.ACKS_1)
        lanes = [(t, p) for t in self.topics for p in range(spec.partitions)]
        self._producer_lane = [
            [lanes[i % len(lanes)] for i in range(w, w + len(lanes))]
            for w in range(spec.producers)
        ]
        self._producer_rotor = [0] * spec.producers
        # partitions dealt round-robin over consumer workers
        self._consumer_lanes: list[list[tuple[str, int, list[int]]]] = [
            [] for _ in range(spec.consumers)
        ]
        for i, (t, p) in enumerate(lanes):
            self._consumer_lanes[i % spec.consumers].append((t, p, [0]))

    def publish_batch(self, worker: int, batch: list[Message]) -> None:
        rotor = self._producer_rotor[worker]
        self._producer_rotor[worker] += 1
        lanes = self._producer_lane[worker]
        topic, partition = lanes[rotor % len(lanes)]
        self.engine.append_batch(topic, partition, batch, self.acks)

    def poll(self, worker: int) -> list[tuple[int, int]]:
        out = []
        for topic, partition, pos in self._consumer_lanes[worker]:
            msgs, _ = self.engine.fetch(
                topic, partition, pos[0], self.spec.batching.consumer_fetch_bytes
            )
            pos[0] += len(msgs)
            out.extend((m.produced_at, len(m.payload)) for m in msgs)
        return out

    def stop(self) -> None:
        pass


class ExchDriver:
    """Runs workloads against the exchange engine."""

    name = "exch"

    def start(self, spec: WorkloadSpec) -> "_ExchCtx":
        return _ExchCtx(spec)


class _ExchCtx:
    def __init__(self, spec: WorkloadSpec) -> None:
        self.spec = spec
        self.at_least_once = spec.delivery is Delivery.AT_LEAST_ONCE
        self.engine = ExchEngine(max(3, spec.replication_factor), latency_mode="real")
        mirrors = tuple(f"n{i}" for i in range(1, spec.replication_factor))
        self.queues = []
        for x in range(spec.topics):
            ex = f"bench-x{x}"
            self.engine.declare_exchange(ExchangeSpec(ex, ExchangeKind.DIRECT))
            for qi in range(spec.partitions):
                qname = f"{ex}-q{qi}"
                self.engine.declare_queue(
                    QueueSpec(qname, durable=self.at_least_once, mirrors=mirrors)
                )
                self.engine.bind(BindingSpec(ex, qname, key=f"k{qi}"))
                self.queues.append((ex, f"k{qi}", qname))
        self.channels = [
            self.engine.channel(confirm_window=spec.confirm_window)
            for _ in range(spec.producers)
        ]
        self._rotor = [0] * spec.producers
        self.consumers = []
        for w in range(spec.consumers):
            handles = []
            for i, (_, _, qname) in enumerate(self.queues):
                if i % spec.consumers == w:
                    handles.append(
                        self.engine.consume(
                            qname,
                            f"c{w}",
                            ConsumeMode.PULL,
                            prefetch=1000,
                            auto_ack=not self.at_least_once,
                        )
                    )
            self.consumers.append(handles)

    def publish_batch(self, worker: int, batch: list[Message]) -> None:
        chan = self.channels[worker]
        rotor = self._rotor[worker]
        self._rotor[worker] += 1
        ex, key, _ = self.queues[rotor % len(self.queues)]
        for msg in batch:
            routed = replace(msg, routing_key=key)
            self.engine.publish(chan, ex, routed, persistent=self.at_least_once)

    def poll(self, worker: int) -> list[tuple[int, int]]:
        out = []
        for handle in self.consumers[worker]:
            for d in handle.pull(200):
                if self.at_least_once:
                    handle.ack(d.tag)
                out.append((d.message.produced_at, len(d.message.payload)))
        return out

    def stop(self) -> None:
        pass


DRIVERS = {"log": LogDriver(), "exch": ExchDriver()}


def _resolve_driver(engine):
    if isinstance(engine, str):
        try:
            return DRIVERS[engine]
        except KeyError:
            raise EngineStartFailure(f"unknown engine {engine!r}") from None
    return engine


# --------------------------------------------------------------------------
# the measurement loop
# --------------------------------------------------------------------------

@dataclass
class RunStats:
    samples_ns: list
    delivered: int
    delivered_bytes: int
    produced: int
    window_s: float

    def pps(self) -> float:
        return self.delivered / self.window_s

    def bps(self) -> float:
        return self.delivered_bytes / self.window_s


def _run_once(driver, spec: WorkloadSpec) -> RunStats:
    spec = spec.resolved()
    try:
        ctx = driver.start(spec)
    except Exception as e:  # engine-level setup problems surface uniformly
        raise EngineStartFailure(str(e)) from e

    t0 = time.monotonic_ns()
    warmup_end = t0 + int(spec.warmup_s * 1e9)
    end = t0 + int(spec.duration_s * 1e9)
    payload = b"\x00" * spec.record_size_bytes
    batch_size = spec.batching.producer_batch_messages
    produced_counts = [0] * spec.producers
    worker_samples: list[list[int]] = [[] for _ in range(spec.consumers)]
    worker_delivered = [0] * spec.consumers
    worker_bytes = [0] * spec.consumers
    start_gate = threading.Barrier(spec.producers + spec.consumers)

    def producer(w: int) -> None:
        start_gate.wait()
        seq = 0
        flow = f"p{w}"
        cap = spec.messages_per_producer
        while time.monotonic_ns() < end and (cap is None or seq < cap):
            n = batch_size if cap is None else min(batch_size, cap - seq)
            now = time.monotonic_ns()
            batch = [
                Message(flow, seq + i, payload=payload, produced_at=now)
                for i in range(n)
            ]
            seq += n
            ctx.publish_batch(w, batch)
            produced_counts[w] = seq

    def consumer(w: int) -> None:
        start_gate.wait()
        samples = worker_samples[w]
        while True:
            now = time.monotonic_ns()
            if now >= end:
                break
            got = ctx.poll(w)
            if not got:
                time.sleep(0.0002)
                continue
            t_deliver = time.monotonic_ns()
            if t_deliver >= warmup_end:
                for produced_at, nbytes in got:
                    samples.append(t_deliver - produced_at)
                    worker_delivered[w] += 1
                    worker_bytes[w] += nbytes

    threads = [
        threading.Thread(target=producer, args=(w,), daemon=True)
        for w in range(spec.producers)
    ] + [
        threading.Thread(target=consumer, args=(w,), daemon=True)
        for w in range(spec.consumers)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    ctx.stop()

    window_s = (end - warmup_end) / 1e9
    merged: list[int] = []
    for s in worker_samples:
        merged.extend(s)
    return RunStats(
        samples_ns=merged,
        delivered=sum(worker_delivered),
        delivered_bytes=sum(worker_bytes),
        produced=sum(produced_counts),
        window_s=window_s,
    )


def run_latency(engine, spec: WorkloadSpec) -> LatencySummary:
    """Per-message latency (production to delivery) over the post-warmup
    window; raises NoSamples when nothing was delivered in it."""
    driver = _resolve_driver(engine)
    stats = _run_once(driver, spec)
    return summarize_latencies(stats.samples_ns)


def _apply_sweep(spec: WorkloadSpec, param: str, value) -> WorkloadSpec:
    if param == "record_size":
        return replace(spec, record_size_bytes=int(value))
    if param == "topics":
        return replace(spec, topics=int(value))
    if param == "partitions":
        return replace(spec, partitions=int(value))
    if param == "replication":
        return replace(spec, replication_factor=int(value))
    if param == "ack_mode":
        value = str(value)
        if value in ("at_most_once", "at_least_once"):
            return replace(spec, delivery=Delivery(value))
        return replace(spec, ack_mode=value)
    if param == "confirm_window":
        return replace(spec, confirm_window=int(value))
    raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")


def run_throughput(engine, spec: WorkloadSpec, sweep: tuple[str, list]) -> list[ThroughputSample]:
    """One sample per sweep point, each from an independent run with a fresh
    engine; producers run saturating loops."""
    param, values = sweep
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    driver = _resolve_driver(engine)
    out = []
    for value in values:
        point = _apply_sweep(spec, param, value).resolved()
        stats = _run_once(driver, point)
        try:
            latency = summarize_latencies(stats.samples_ns)
        except NoSamples:
            latency = LatencySummary(0.0, 0.0, 0.0, 0.0, 0)
        reported_pps = min(stats.pps(), stats.produced / stats.window_s)
        out.append(
            ThroughputSample(
                engine=getattr(driver, "name", str(engine)),
                sweep_param=param,
                sweep_value=value,
                pps=reported_pps,
                bps=stats.bps(),
                latency=latency,
                config=point.config_snapshot(),
                seed=spec.seed,
            )
        )
    return out


# --------------------------------------------------------------------------
# spill degradation comparison
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SpillComparison:
    uncapped_p50_ms: float
    capped_p50_ms: float
    spill_read_fraction: float
    spill_read_ns: int

    def slowdown(self) -> float:
        return self.capped_p50_ms / self.uncapped_p50_ms


def run_spill_comparison(
    n_messages: int = 600,
    backlog: int = 150,
    payload_bytes: int = 256,
    spill_penalty: float = 10.0,
) -> SpillComparison:
    """Steady-state latency with a standing backlog, without and with a
    memory cap that keeps the backlog's head in the spill tier.

    The uncapped run measures the engine's actual in-memory per-delivery
    cost; the capped run then pays `spill_penalty` times that cost on every
    spill read, which inflates each delivery's queue wait by the penalty.
    """

    def one(spill_read_ns: Optional[int]) -> tuple[float, float, int]:
        capped = spill_read_ns is not None
        engine = ExchEngine(
            1, latency_mode="real", spill_read_ns=spill_read_ns or 0
        )
        engine.declare_exchange(ExchangeSpec("x", ExchangeKind.DIRECT))
        engine.declare_queue(
            QueueSpec(
                "q",
                memory_cap_bytes=(backlog * payload_bytes) // 8 if capped else None,
                spill_to_disk=capped,
            )
        )
        engine.bind(BindingSpec("x", "q", key="k"))
        chan = engine.channel()
        payload = b"\x00" * payload_bytes

        def publish(i: int) -> None:
            msg = Message(
                "steady", i, payload=payload,
                routing_key="k", produced_at=time.monotonic_ns(),
            )
            engine.publish(chan, "x", msg)

        for i in range(backlog):
            publish(i)
        cons = engine.consume("q", "c", ConsumeMode.PULL, prefetch=10, auto_ack=True)
        latencies = []
        from_spill = 0
        t0 = time.monotonic_ns()
        for i in range(backlog, backlog + n_messages):
            publish(i)
            for d in cons.pull(1):
                latencies.append(time.monotonic_ns() - d.message.produced_at)
                from_spill += d.from_spill
        per_op = (time.monotonic_ns() - t0) // max(1, len(latencies))
        return summarize_latencies(latencies).p50_ms, from_spill / n_messages, per_op

    uncapped_p50, _, per_op = one(None)
    penalty_ns = int(spill_penalty * per_op)
    capped_p50, fraction, _ = one(penalty_ns)
    return SpillComparison(uncapped_p50, capped_p50, fraction, penalty_ns)


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def export(results: list[ThroughputSample], path, format: str = "CSV") -> None:
    """Write results with the stable column order; refuses empty inputs and
    never leaves a partial file behind (temp + rename)."""
    if not results:
        raise ValueError("refusing to export empty results")
    fmt = format.upper()
    if fmt not in ("CSV", "JSONL"):
        raise ValueError(f"format must be CSV or JSONL, got {format!r}")
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        with open(tmp, "w", newline="") as fh:
            if fmt == "CSV":
                writer = csv.DictWriter(fh, fieldnames=EXPORT_COLUMNS)
                writer.writeheader()
                for sample in results:
                    writer.writerow(sample.row())
            else:
                for sample in results:
                    fh.write(json.dumps(sample.row()) + "\n")
        tmp.replace(path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise
