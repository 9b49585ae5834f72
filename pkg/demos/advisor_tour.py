#!/usr/bin/env python3
"""Tour of the determination-table advisor: requirement profiles in,
architecture recommendations out."""

from duolog.advisor import (
    DETERMINATION_TABLE,
    FEATURES,
    FeatureVector,
    coverage_report,
    recommend,
)

print("=== the determination table ===")
header = ["lat", "rout", "store", "topicXL", "order", "elast", "thru", "alo", "ha"]
print("  " + "  ".join(f"{h:>7}" for h in header))
for row in DETERMINATION_TABLE:
    print("  " + "  ".join(f"{c:>7}" for c in row.cells) + "  -> " + row.recommendation)

print("\n=== example profiles ===")
profiles = {
    "event firehose, nothing fancy":
        FeatureVector("N", "N", "N", "N", "N", "N", "XL", "N", "N"),
    "ordered low-rate feed, must not lose":
        FeatureVector("N", "N", "N", "N", "Y", "N", "L", "Y", "Y"),
    "latency-sensitive router with elastic consumers":
        FeatureVector("Y", "Y", "N", "N", "Y", "Y", "L", "Y", "N"),
    "change feed needing long-term storage":
        FeatureVector("N", "N", "Y", "N", "N", "N", "L", "Y", "N"),
    "huge throughput but routing too complex for topics alone":
        FeatureVector("N", "Y", "N", "N", "N", "N", "XL", "N", "Y"),
}
for label, fv in profiles.items():
    hits = recommend(fv)
    print(f"  {label}:")
    print(f"    -> {hits if hits else 'no row matches; weigh the trade-offs manually'}")

print("\n=== coverage: how much of the requirement space the table decides ===")
unmatched = coverage_report()
print(f"  {512 - len(unmatched)} of 512 concrete profiles match at least one row")
print(f"  {len(unmatched)} fall outside the table (it is a deliberate simplification)")
sample = unmatched[0]
print("  e.g. unmatched:", dict(zip(FEATURES, sample.cells())))
