"""Timing observations and their CSV form.

A block is identified by ``(source, repetition)``: in simulation the
repetition index, for recorded logs the ordinal of the block among those
first announced by that source.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Hashable, Iterable

CSV_HEADER = ["source", "relay", "block_size_bytes", "delta_ms", "repetition", "true_hops"]


@dataclass(frozen=True)
class Observation:
    source: Hashable
    relay: Hashable
    block_size: int
    delta: float
    repetition: int = 0
    true_hops: int | None = None

    @property
    def block(self) -> tuple:
        return (self.source, self.repetition)

    @property
    def suspicious(self) -> bool:
        """Non-positive delta only happens through measurement noise."""
        return self.delta <= 0


def write_observations(path, observations: Iterable[Observation]) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for o in observations:
            w.writerow([
                o.source, o.relay, o.block_size, repr(float(o.delta)), o.repetition,
                "" if o.true_hops is None else o.true_hops,
            ])
            n += 1
    return n


def read_observations(path) -> list[Observation]:
    """Read observations; peer ids stay strings."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            hops = row["true_hops"].strip()
            out.append(Observation(
                source=row["source"],
                relay=row["relay"],
                block_size=int(row["block_size_bytes"]),
                delta=float(row["delta_ms"]),
                repetition=int(row["repetition"]),
                true_hops=int(hops) if hops else None,
            ))
    return out
