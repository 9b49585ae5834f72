"""Determination table: golden rows, wildcard semantics, coverage."""

import pytest

from duolog.advisor import (
    DETERMINATION_TABLE,
    FeatureVector,
    TableRow,
    all_vectors,
    coverage_report,
    expand_wildcards,
    recommend,
)


def fv(*cells):
    return FeatureVector(*cells)


# --------------------------------------------------------------------------
# golden rows
# --------------------------------------------------------------------------

EXPECTED_TABLE = [
    (("N", "N", "*", "*", "N", "N", "XL", "N", "N"), "Kafka with multiple partitions"),
    (("N", "N", "*", "*", "N", "N", "XL", "Y", "Y"), "Kafka with replication and multiple partitions"),
    (("N", "N", "*", "*", "Y", "N", "L", "N", "N"), "single partition Kafka"),
    (("N", "N", "*", "*", "Y", "N", "L", "Y", "Y"), "single partition Kafka with replication"),
    (("*", "*", "N", "N", "*", "*", "L", "*", "N"), "RabbitMQ"),
    (("*", "*", "N", "N", "*", "*", "L", "*", "Y"), "RabbitMQ with queue replication"),
    (("*", "*", "Y", "N", "*", "*", "L", "*", "*"), "RabbitMQ with Kafka long term storage"),
    (("N", "Y", "*", "*", "N", "N", "XL", "N", "*"), "Kafka with selected RabbitMQ routing"),
]


def test_table_is_exactly_the_eight_rows():
    assert [(r.cells, r.recommendation) for r in DETERMINATION_TABLE] == EXPECTED_TABLE


def test_reference_queries():
    assert recommend(fv("N", "N", "N", "N", "N", "N", "XL", "N", "N")) == [
        "Kafka with multiple partitions"
    ]
    assert recommend(fv("Y", "Y", "N", "N", "Y", "Y", "L", "Y", "N")) == ["RabbitMQ"]
    assert recommend(fv("N", "Y", "N", "N", "N", "N", "XL", "N", "Y")) == [
        "Kafka with selected RabbitMQ routing"
    ]


def test_multiple_matches_returned_in_table_order():
    # long-term storage N + L + HA N: both the plain RabbitMQ row and no other
    hits = recommend(fv("N", "N", "N", "N", "Y", "N", "L", "N", "N"))
    assert hits == ["single partition Kafka", "RabbitMQ"]


def test_no_match_returns_empty():
    assert recommend(fv("Y", "Y", "Y", "Y", "Y", "Y", "XL", "Y", "Y")) == []


def test_throughput_levels_match_exactly():
    # an XL query must not satisfy an L row
    assert "RabbitMQ" not in recommend(fv("N", "N", "N", "N", "N", "N", "XL", "N", "N"))


def test_vector_validation():
    with pytest.raises(ValueError):
        fv("Y", "N", "N", "N", "N", "N", "M", "N", "N")   # bad throughput level
    with pytest.raises(ValueError):
        fv("*", "N", "N", "N", "N", "N", "L", "N", "N")   # wildcards live in rows only


def test_row_validation():
    with pytest.raises(ValueError):
        TableRow(("Y",) * 9, "x")  # throughput cell must be L/XL
    with pytest.raises(ValueError):
        TableRow(("Y", "N", "*", "*", "N", "N", "L", "N", "N"), "")


# --------------------------------------------------------------------------
# properties
# --------------------------------------------------------------------------

def test_wildcard_expansion_equivalence():
    expanded = expand_wildcards()
    for v in all_vectors():
        assert recommend(v) == recommend(v, expanded)


def test_every_row_reachable_as_sole_match():
    for row in DETERMINATION_TABLE:
        sole = [
            v for v in all_vectors()
            if row.matches(v) and recommend(v) == [row.recommendation]
        ]
        assert sole, row.recommendation


def test_coverage_report_golden_count():
    unmatched = coverage_report()
    assert len(unmatched) == 364  # frozen after the first computation
    assert all(recommend(v) == [] for v in unmatched[:10])


def test_coverage_report_deterministic():
    assert coverage_report() == coverage_report()


def test_single_wildcard_row_covers_everything():
    catch_all_l = TableRow(("*",) * 6 + ("L",) + ("*",) * 2, "anything")
    catch_all_xl = TableRow(("*",) * 6 + ("XL",) + ("*",) * 2, "anything")
    assert coverage_report((catch_all_l, catch_all_xl)) == []


def test_empty_table_misses_all_512():
    assert len(coverage_report(())) == 512
