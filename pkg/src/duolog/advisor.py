"""Architecture determination table.

Nine requirement features map to broker architecture recommendations.  Eight
Y/N features plus a two-level system-throughput feature (L or XL); table
cells may hold a wildcard that matches both Y and N, the throughput cell is
always matched exactly.  A query returns every matching row in table order —
overlapping wildcard regions are deliberate and no priority is imposed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, fields


FEATURES = (
    "predictable_latency",
    "complex_routing",
    "long_term_storage",
    "very_large_throughput_per_topic",
    "packet_order_important",
    "dynamic_elasticity",
    "system_throughput",
    "at_least_once",
    "high_availability",
)

THROUGHPUT_LEVELS = ("L", "XL")


@dataclass(frozen=True)
class FeatureVector:
    """A concrete requirement profile: all nine features set, no wildcards."""

    predictable_latency: str
    complex_routing: str
    long_term_storage: str
    very_large_throughput_per_topic: str
    packet_order_important: str
    dynamic_elasticity: str
    system_throughput: str
    at_least_once: str
    high_availability: str

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "system_throughput":
                if value not in THROUGHPUT_LEVELS:
                    raise ValueError(f"{f.name} must be L or XL, got {value!r}")
            elif value not in ("Y", "N"):
                raise ValueError(f"{f.name} must be Y or N, got {value!r}")

    def cells(self) -> tuple:
        return tuple(getattr(self, name) for name in FEATURES)

    @classmethod
    def from_cells(cls, cells) -> "FeatureVector":
        return cls(*cells)


@dataclass(frozen=True)
class TableRow:
    """Nine cells in {Y, N, *} (throughput cell in {L, XL}), plus the
    recommendation the row maps to."""

    cells: tuple
    recommendation: str

    def __post_init__(self) -> None:
        if len(self.cells) != 9:
            raise ValueError("a row has exactly nine cells")
        if not self.recommendation:
            raise ValueError("recommendation must be non-empty")
        for i, cell in enumerate(self.cells):
            if FEATURES[i] == "system_throughput":
                if cell not in THROUGHPUT_LEVELS:
                    raise ValueError("the throughput cell must be L or XL")
            elif cell not in ("Y", "N", "*"):
                raise ValueError(f"cell {i} must be Y, N or *, got {cell!r}")

    def matches(self, fv: FeatureVector) -> bool:
        for cell, value in zip(self.cells, fv.cells()):
            if cell != "*" and cell != value:
                return False
        return True


DETERMINATION_TABLE: tuple[TableRow, ...] = (
    TableRow(("N", "N", "*", "*", "N", "N", "XL", "N", "N"),
             "Kafka with multiple partitions"),
    TableRow(("N", "N", "*", "*", "N", "N", "XL", "Y", "Y"),
             "Kafka with replication and multiple partitions"),
    TableRow(("N", "N", "*", "*", "Y", "N", "L", "N", "N"),
             "single partition Kafka"),
    TableRow(("N", "N", "*", "*", "Y", "N", "L", "Y", "Y"),
             "single partition Kafka with replication"),
    TableRow(("*", "*", "N", "N", "*", "*", "L", "*", "N"),
             "RabbitMQ"),
    TableRow(("*", "*", "N", "N", "*", "*", "L", "*", "Y"),
             "RabbitMQ with queue replication"),
    TableRow(("*", "*", "Y", "N", "*", "*", "L", "*", "*"),
             "RabbitMQ with Kafka long term storage"),
    TableRow(("N", "Y", "*", "*", "N", "N", "XL", "N", "*"),
             "Kafka with selected RabbitMQ routing"),
)


def recommend(fv: FeatureVector, table: tuple = DETERMINATION_TABLE) -> list[str]:
    """All recommendations whose row matches, in table order; empty when the
    profile falls outside the table."""
    return [row.recommendation for row in table if row.matches(fv)]


def all_vectors():
    """Every concrete profile, in a fixed enumeration order (2^8 x 2 = 512)."""
    domains = [
        THROUGHPUT_LEVELS if name == "system_throughput" else ("Y", "N")
        for name in FEATURES
    ]
    for cells in itertools.product(*domains):
        yield FeatureVector.from_cells(cells)


def coverage_report(table: tuple = DETERMINATION_TABLE) -> list[FeatureVector]:
    """The concrete profiles no row matches; deterministic order."""
    return [fv for fv in all_vectors() if not recommend(fv, table)]


def expand_wildcards(table: tuple = DETERMINATION_TABLE) -> tuple[TableRow, ...]:
    """Replace every * by its two expansions; recommend() over the expanded
    table must behave identically."""
    out = []
    for row in table:
        stars = [i for i, c in enumerate(row.cells) if c == "*"]
        for combo in itertools.product("YN", repeat=len(stars)):
            cells = list(row.cells)
            for i, v in zip(stars, combo):
                cells[i] = v
            out.append(TableRow(tuple(cells), row.recommendation))
    return tuple(out)
