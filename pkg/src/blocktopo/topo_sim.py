"""Random country-tagged overlays and synthetic block-arrival timings.

Every node opens ``out_degree`` connections to distinct random peers, the
way a reference client fills its outbound slots.  A block mined at a source
floods the overlay; a node first hears of it along the cheapest path, where
traversing an edge costs the relay latency of the edge plus the processing
(validation) delay of the receiving node.  The measurement node is linked to
everyone but never relays, and the half-RTT adjustment removes its links
from the measured difference, so the synthetic delta for ``(S, R)`` is just
that cheapest path cost.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .observations import Observation
from .param_fit import RELAY_FACTOR, LatencyModel, ProcessingModel, processing_params
from .prob_core import NormalParams

log = logging.getLogger(__name__)

SyntheticObservation = Observation

MIN_LATENCY_MS = 1.0
MIN_PROCESSING_MS = 0.0


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) stream."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class CountryDistribution:
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        entries = tuple((str(c), float(s)) for c, s in self.entries)
        object.__setattr__(self, "entries", entries)
        if not entries:
            raise ValueError("country distribution is empty")
        if any(s <= 0 for _, s in entries):
            raise ValueError("every country share must be > 0")
        if abs(sum(s for _, s in entries) - 1.0) > 1e-9:
            raise ValueError(f"country shares sum to {sum(s for _, s in entries)}, not 1")
        if len({c for c, _ in entries}) != len(entries):
            raise ValueError("duplicate country in distribution")

    @property
    def countries(self) -> list[str]:
        return [c for c, _ in self.entries]

    @property
    def shares(self) -> list[float]:
        return [s for _, s in self.entries]

    @classmethod
    def single(cls, country: str) -> "CountryDistribution":
        return cls(((country, 1.0),))

    @classmethod
    def from_mapping(cls, mapping: dict) -> "CountryDistribution":
        return cls(tuple(mapping.items()))


# northern-hemisphere mix used for the 300-node experiments
DEFAULT_COUNTRIES = CountryDistribution((
    ("US", 0.30), ("RU", 0.20), ("CA", 0.10), ("CN", 0.10),
    ("FR", 0.10), ("DE", 0.10), ("JP", 0.10),
))


@dataclass
class Topology:
    """Undirected simple graph; node ids are ``0..n-1`` and index ``countries``.

    ``edges`` maps ``(a, b)`` with ``a < b`` to a weight in ms.  Freshly
    generated topologies carry unit weights until latencies are assigned.
    """

    countries: list[str]
    edges: dict[tuple[int, int], float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        n = len(self.countries)
        for (a, b), w in self.edges.items():
            if not (0 <= a < b < n):
                raise ValueError(f"bad edge ({a}, {b}) for {n} nodes")
            if not w > 0:
                raise ValueError(f"edge ({a}, {b}) has non-positive weight {w}")

    @property
    def n(self) -> int:
        return len(self.countries)

    def mean_degree(self) -> float:
        return 2.0 * len(self.edges) / self.n

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        keys = sorted(self.edges)
        a = np.array([k[0] for k in keys], dtype=np.int64)
        b = np.array([k[1] for k in keys], dtype=np.int64)
        w = np.array([self.edges[k] for k in keys], dtype=float)
        return a, b, w

    def hop_distances(self, sources: Sequence[int] | None = None) -> np.ndarray:
        """Unweighted hop counts; unreachable pairs are -1."""
        a, b, _ = self.edge_arrays()
        g = csr_matrix((np.ones(len(a)), (a, b)), shape=(self.n, self.n))
        d = shortest_path(g, directed=False, unweighted=True, indices=sources)
        return np.where(np.isinf(d), -1, d).astype(np.int64)

    def to_json(self) -> dict:
        return {
            "nodes": [{"id": i, "country": c} for i, c in enumerate(self.countries)],
            "edges": [{"a": a, "b": b, "weight_ms": w} for (a, b), w in sorted(self.edges.items())],
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Topology":
        nodes = sorted(doc["nodes"], key=lambda x: int(x["id"]))
        if [int(x["id"]) for x in nodes] != list(range(len(nodes))):
            raise ValueError("node ids must be dense 0..N-1")
        edges = {}
        for e in doc["edges"]:
            a, b = int(e["a"]), int(e["b"])
            if a == b:
                raise ValueError(f"self-loop at node {a}")
            key = (min(a, b), max(a, b))
            if key in edges:
                raise ValueError(f"duplicate edge {key}")
            edges[key] = float(e["weight_ms"])
        return cls([str(x["country"]) for x in nodes], edges, int(doc.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Topology":
        return cls.from_json(json.loads(Path(path).read_text()))


def generate_topology(n: int, out_degree: int, dist: CountryDistribution, seed: int) -> Topology:
    if out_degree < 1:
        raise ValueError(f"out_degree must be >= 1, got {out_degree}")
    if out_degree >= n:
        raise ValueError(f"out_degree {out_degree} needs at least {out_degree + 1} nodes, got {n}")
    rng = derive_rng(seed, 0)
    idx = rng.choice(len(dist.entries), size=n, p=dist.shares)
    countries = [dist.countries[i] for i in idx]
    edges: dict[tuple[int, int], float] = {}
    for u in range(n):
        # sample among the n-1 other nodes, skipping u itself
        targets = rng.choice(n - 1, size=out_degree, replace=False)
        for t in targets:
            v = int(t) if t < u else int(t) + 1
            edges[(min(u, v), max(u, v))] = 1.0
    return Topology(countries, edges, seed)


def _edge_params(topo: Topology, latency_model: LatencyModel, a, b) -> tuple[np.ndarray, np.ndarray]:
    cache: dict[tuple[str, str], NormalParams] = {}
    means = np.empty(len(a))
    stds = np.empty(len(a))
    for i, (u, v) in enumerate(zip(a, b)):
        pair = (topo.countries[u], topo.countries[v])
        if pair not in cache:
            try:
                cache[pair] = latency_model.lookup(*pair)
            except KeyError:
                raise ValueError(f"latency model has no entry for country pair {pair[0]}-{pair[1]}") from None
        means[i] = cache[pair].mean
        stds[i] = cache[pair].std
    return means, stds


def _draw_weights(means, stds, relay_factor: float, rng: np.random.Generator) -> np.ndarray:
    draws = rng.normal(means, stds)
    return np.maximum(draws, MIN_LATENCY_MS) * relay_factor


def assign_edge_latencies(topo: Topology, latency_model: LatencyModel, seed: int,
                          relay_factor: float = RELAY_FACTOR) -> Topology:
    """Draw one relay latency per edge from its country-pair normal.

    ``latency_model`` holds one-way latencies; draws are clamped at 1 ms and
    then scaled by ``relay_factor``.
    """
    a, b, _ = topo.edge_arrays()
    means, stds = _edge_params(topo, latency_model, a, b)
    w = _draw_weights(means, stds, relay_factor, derive_rng(seed, 1))
    edges = {(int(u), int(v)): float(x) for u, v, x in zip(a, b, w)}
    return replace(topo, edges=edges)


def propagation_delays(n: int, a: np.ndarray, b: np.ndarray, weights: np.ndarray,
                       node_delay: np.ndarray, sources: Sequence[int]) -> np.ndarray:
    """Cheapest arrival time at every node, for each source.

    ``node_delay`` has shape ``(len(sources), n)``: the processing delay of
    each node for the block originating at that source.  Entering node ``v``
    over edge ``(u, v)`` costs ``weight + node_delay[v]``.  The source itself
    gets 0 and unreachable nodes ``inf``.  Relaxation runs in synchronous
    rounds over all sources at once until nothing improves.
    """
    sources = np.asarray(sources, dtype=np.int64)
    k = len(sources)
    # both arc directions, grouped by head node for reduceat
    tail = np.concatenate([a, b])
    head = np.concatenate([b, a])
    w = np.concatenate([weights, weights])
    order = np.argsort(head, kind="stable")
    tail, head, w = tail[order], head[order], w[order]
    heads, starts = np.unique(head, return_index=True)

    arc_cost = w[None, :] + node_delay[:, head]
    dist = np.full((k, n), np.inf)
    dist[np.arange(k), sources] = 0.0
    if len(tail) == 0:
        return dist
    for _ in range(n):
        cand = dist[:, tail] + arc_cost
        best = np.minimum.reduceat(cand, starts, axis=1)
        improved = best < dist[:, heads]
        if not improved.any():
            break
        dist[:, heads] = np.where(improved, best, dist[:, heads])
    return dist


def simulate_deltas(topo: Topology, processing: NormalParams, sources: Sequence[int],
                    repetitions: int, seed: int, *, latency_model: LatencyModel | None = None,
                    relay_factor: float = RELAY_FACTOR) -> np.ndarray:
    """Delta matrix of shape ``(repetitions, len(sources), n)``.

    With ``latency_model`` the edge weights are redrawn every repetition;
    without it the topology's own weights are reused.  Processing delays are
    drawn per block (source, repetition) and node, clamped at 0.
    """
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    sources = list(sources)
    for s in sources:
        if not 0 <= s < topo.n:
            raise ValueError(f"source {s} not in topology")
    a, b, fixed = topo.edge_arrays()
    if latency_model is not None:
        means, stds = _edge_params(topo, latency_model, a, b)
    out = np.empty((repetitions, len(sources), topo.n))
    for r in range(repetitions):
        rng = derive_rng(seed, 2, r)
        if latency_model is not None:
            w = _draw_weights(means, stds, relay_factor, rng)
        else:
            w = fixed
        if processing.variance > 0:
            node_delay = rng.normal(processing.mean, processing.std, size=(len(sources), topo.n))
            node_delay = np.maximum(node_delay, MIN_PROCESSING_MS)
        else:
            node_delay = np.full((len(sources), topo.n), max(processing.mean, MIN_PROCESSING_MS))
        out[r] = propagation_delays(topo.n, a, b, w, node_delay, sources)
    return out


def synthesize_observations(topo: Topology, processing: ProcessingModel | None, block_size: int,
                            sources: Iterable[int] | None = None, repetitions: int = 1,
                            seed: int = 0, *, latency_model: LatencyModel | None = None,
                            relay_factor: float = RELAY_FACTOR, include_processing: bool = True,
                            diagnostics: dict | None = None) -> list[Observation]:
    """Observations for every (source, relay) pair and repetition.

    Disconnected pairs are omitted and counted under
    ``diagnostics["disconnected"]``.
    """
    sources = list(range(topo.n)) if sources is None else sorted(set(sources))
    if processing is None or not include_processing:
        proc = NormalParams(0.0, 0.0)
    else:
        proc = processing_params(processing, block_size)
    deltas = simulate_deltas(topo, proc, sources, repetitions, seed,
                             latency_model=latency_model, relay_factor=relay_factor)
    hops = topo.hop_distances(sources)
    obs = []
    missing = 0
    for r in range(repetitions):
        for i, s in enumerate(sources):
            for v in range(topo.n):
                if v == s:
                    continue
                d = deltas[r, i, v]
                if not np.isfinite(d):
                    missing += 1
                    continue
                obs.append(Observation(s, v, block_size, float(d), r, int(hops[i, v])))
    if missing:
        log.info("omitted %d disconnected (source, relay) observations", missing)
    if diagnostics is not None:
        diagnostics["disconnected"] = diagnostics.get("disconnected", 0) + missing
    return obs
