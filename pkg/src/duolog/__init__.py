"""duolog: an in-process, dual-paradigm publish/subscribe broker kit.

Two engines behind one domain model: a partitioned append-log broker
(`duolog.logbroker`) and an exchange/binding/queue broker
(`duolog.exchbroker`), plus a deterministic fault-injection harness
(`duolog.harness`), a threaded benchmark harness (`duolog.bench`), analytic
throughput models with fitting (`duolog.model`) and an architecture advisor
(`duolog.advisor`).
"""

__version__ = "0.1.0"

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
    validate_message,
)

__all__ = [
    "BrokerDown",
    "CorrectnessReport",
    "Delivery",
    "FlushPolicy",
    "Journal",
    "JournalEvent",
    "Message",
    "Ordering",
    "QoSConfig",
    "check_correctness",
    "validate_message",
    "__version__",
]
