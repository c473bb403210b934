"""Recorded announcement logs to adjusted timing observations.

The log is newline-delimited JSON mixing two record kinds in capture order::

    {"kind": "announce", "peer": "p1", "block": "00ab..", "ts_ms": 1000.0, "size_bytes": 15678}
    {"kind": "rtt_sample", "peer": "p1", "rtt_ms": 61.5, "ts_ms": 990.0}

RTT samples feed a per-peer smoothed RTT (RFC 6298 SRTT, alpha = 1/8).
Each announcement is shifted back by half the announcer's smoothed RTT;
the earliest adjusted announcer of a block is taken as its source (miner).
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping

from .observations import Observation

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 1 / 8
DEFAULT_MIN_BLOCKS = 5


@dataclass(frozen=True)
class AnnouncementRecord:
    peer: Hashable
    block_hash: str
    arrival_time: float
    block_size: int
    # smoothed RTT of the peer when the record was captured, if known
    rtt_ms: float | None = None


class RttEstimator:
    """Per-peer exponentially weighted moving average of RTT samples."""

    def __init__(self, alpha: float = DEFAULT_ALPHA):
        if not 0 < alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        self.alpha = alpha
        self.smoothed: dict[Hashable, float] = {}

    def update(self, peer: Hashable, sample: float) -> "RttEstimator":
        if not sample > 0:
            raise ValueError(f"RTT sample must be > 0, got {sample} for peer {peer!r}")
        prev = self.smoothed.get(peer)
        if prev is None:
            self.smoothed[peer] = float(sample)
        else:
            self.smoothed[peer] = (1 - self.alpha) * prev + self.alpha * sample
        return self

    def get(self, peer: Hashable) -> float | None:
        return self.smoothed.get(peer)

    def __contains__(self, peer) -> bool:
        return peer in self.smoothed


def update_rtt(est: RttEstimator, peer: Hashable, sample: float) -> RttEstimator:
    return est.update(peer, sample)


def build_observations(records: Iterable[AnnouncementRecord], rtt: RttEstimator | Mapping | None = None,
                       *, order_by: str = "adjusted", diagnostics: Counter | None = None) -> list[Observation]:
    """Half-RTT-adjusted arrival differences relative to each block's source.

    A record's own ``rtt_ms`` snapshot takes precedence over ``rtt``; peers
    with neither are skipped.  ``order_by="raw"`` picks the source on raw
    arrival times instead of adjusted ones.
    """
    if order_by not in ("adjusted", "raw"):
        raise ValueError(f"order_by must be 'adjusted' or 'raw', got {order_by!r}")
    diag = diagnostics if diagnostics is not None else Counter()
    lookup = rtt.get if rtt is not None else (lambda _peer: None)

    # block -> peer -> (adjusted, raw, size); a peer's repeat announcements keep the earliest
    blocks: dict[str, dict] = defaultdict(dict)
    for rec in records:
        smoothed = rec.rtt_ms if rec.rtt_ms is not None else lookup(rec.peer)
        if smoothed is None:
            diag["no_rtt"] += 1
            continue
        entry = (rec.arrival_time - smoothed / 2.0, rec.arrival_time, rec.block_size)
        seen = blocks[rec.block_hash].get(rec.peer)
        if seen is None or entry[0] < seen[0]:
            blocks[rec.block_hash][rec.peer] = entry

    key_idx = 0 if order_by == "adjusted" else 1
    sourced = []
    for block, peers in blocks.items():
        if len(peers) < 2:
            diag["single_announcer"] += 1
            continue
        source = min(peers, key=lambda p: (peers[p][key_idx], str(p)))
        sourced.append((peers[source][0], str(block), block, source))
    sourced.sort()

    ordinal: Counter = Counter()
    out = []
    for _, _, block, source in sourced:
        peers = blocks[block]
        s_adj, _, size = peers[source]
        rep = ordinal[source]
        ordinal[source] += 1
        for relay in sorted(peers, key=str):
            if relay == source:
                continue
            delta = peers[relay][0] - s_adj
            if delta <= 0:
                diag["non_positive_delta"] += 1
            out.append(Observation(source, relay, size, delta, rep))
    return out


def filter_miners(observations: Iterable[Observation], min_blocks: int = DEFAULT_MIN_BLOCKS) -> set:
    """Peers that are the source of at least ``min_blocks`` distinct blocks."""
    if min_blocks < 1:
        raise ValueError(f"min_blocks must be >= 1, got {min_blocks}")
    blocks = defaultdict(set)
    for o in observations:
        blocks[o.source].add(o.block)
    return {peer for peer, bs in blocks.items() if len(bs) >= min_blocks}


def parse_log(lines: Iterable[str], *, alpha: float = DEFAULT_ALPHA,
              diagnostics: Counter | None = None) -> tuple[list[AnnouncementRecord], RttEstimator]:
    """Single pass over an NDJSON log.

    Announcements snapshot the announcer's smoothed RTT at capture time.  A
    peer whose first RTT sample only arrives later gets the final estimate.
    Records whose timestamp goes backwards are skipped.
    """
    diag = diagnostics if diagnostics is not None else Counter()
    est = RttEstimator(alpha)
    records = []
    last_ts = float("-inf")
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
            kind = doc["kind"]
            ts = float(doc["ts_ms"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"line {lineno}: malformed record ({exc})") from None
        if ts < last_ts:
            diag["clock_order"] += 1
            log.warning("line %d: timestamp %s precedes %s, skipped", lineno, ts, last_ts)
            continue
        last_ts = ts
        peer = str(doc["peer"])
        if kind == "rtt_sample":
            sample = float(doc["rtt_ms"])
            if sample <= 0:
                diag["bad_rtt"] += 1
                continue
            est.update(peer, sample)
        elif kind == "announce":
            records.append(AnnouncementRecord(
                peer, str(doc["block"]), ts, int(doc["size_bytes"]), est.get(peer),
            ))
        else:
            raise ValueError(f"line {lineno}: unknown record kind {kind!r}")
    return records, est


def ingest_log(path, *, alpha: float = DEFAULT_ALPHA, order_by: str = "adjusted",
               diagnostics: Counter | None = None) -> list[Observation]:
    diag = diagnostics if diagnostics is not None else Counter()
    with open(path) as fh:
        records, est = parse_log(fh, alpha=alpha, diagnostics=diag)
    return build_observations(records, est, order_by=order_by, diagnostics=diag)


def synthetic_log(observations: Iterable[Observation], rtts: Mapping, *,
                  spacing_ms: float = 600_000.0) -> list[dict]:
    """NDJSON records that replay simulated observations through a vantage point.

    Every peer first reports its constant RTT; block ``k`` is mined at
    ``k * spacing_ms`` and each announcement arrives half an RTT after the
    peer received the block.  Records come out sorted by timestamp.
    """
    by_block = defaultdict(list)
    for o in observations:
        by_block[o.block].append(o)
    out = [
        {"kind": "rtt_sample", "peer": str(p), "rtt_ms": float(rtts[p]), "ts_ms": 0.0}
        for p in sorted(rtts, key=str)
    ]
    for k, block in enumerate(sorted(by_block, key=lambda b: (b[1], str(b[0])))):
        source, rep = block
        name = f"blk-{source}-{rep}"
        mined = (k + 1) * spacing_ms
        obs = by_block[block]
        size = obs[0].block_size
        out.append({"kind": "announce", "peer": str(source), "block": name,
                    "ts_ms": mined + rtts[source] / 2.0, "size_bytes": size})
        for o in obs:
            out.append({"kind": "announce", "peer": str(o.relay), "block": name,
                        "ts_ms": mined + o.delta + rtts[o.relay] / 2.0, "size_bytes": size})
    out.sort(key=lambda d: d["ts_ms"])
    return out


def write_log(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
