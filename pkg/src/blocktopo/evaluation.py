"""Scoring against ground truth and the simulation experiment matrix."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .inference import VARIANCE_FLOOR_MS2, aggregate_matrix, bayes_matrix, decide_matrix, MODES
from .param_fit import (
    LatencyDataset,
    ProcessingModel,
    VarianceScenario,
    build_pack,
    default_dataset,
    fit_latency_model,
    preset,
    processing_params,
)
from .prob_core import NormalParams, likelihood_matrix, posterior_matrix, prior_vector
from .topo_sim import DEFAULT_COUNTRIES, CountryDistribution, Topology, generate_topology, simulate_deltas

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError(f"confusion counts must be >= 0, got {self}")

    @property
    def precision(self) -> float | None:
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def recall(self) -> float | None:
        d = self.tp + self.fn
        return self.tp / d if d else None


def confusion_arrays(est: np.ndarray, truth: np.ndarray, up_to: int) -> dict[int, ConfusionCounts]:
    """Per-class counts; an estimate of 0 means no decision was made."""
    out = {}
    for c in range(1, up_to + 1):
        pe, pt = est == c, truth == c
        out[c] = ConfusionCounts(int(np.sum(pe & pt)), int(np.sum(pe & ~pt)), int(np.sum(~pe & pt)))
    return out


def score(estimates: Mapping, truth: Mapping, up_to: int = 3) -> dict[int, ConfusionCounts]:
    """Per-distance confusion counts for classes ``1..up_to``.

    Estimates beyond ``up_to`` are never a true positive and still count as
    a miss for the true class.  Use ``up_to=1`` for the direct-connection task.
    """
    if up_to < 1:
        raise ValueError(f"up_to must be >= 1, got {up_to}")
    if set(estimates) != set(truth):
        extra = len(set(estimates) - set(truth))
        missing = len(set(truth) - set(estimates))
        raise ValueError(f"estimate/truth keys differ ({extra} extra, {missing} missing)")
    keys = list(truth)
    est = np.array([estimates[k] or 0 for k in keys], dtype=np.int64)
    tru = np.array([truth[k] for k in keys], dtype=np.int64)
    return confusion_arrays(est, tru, up_to)


def binomial_stderr(p: float | None, n: int) -> float | None:
    if p is None or n == 0:
        return None
    return math.sqrt(p * (1.0 - p) / n)


@dataclass
class ExperimentConfig:
    n_nodes: int = 300
    out_degree: int = 8
    countries: dict = field(default_factory=lambda: dict(DEFAULT_COUNTRIES.entries))
    block_sizes: list = field(default_factory=lambda: [1630, 1_000_000, 2_000_000])
    scenarios: list = field(default_factory=lambda: ["small", "medium", "large"])
    repetitions: int = 50
    epsilon_ms: float = 5.0
    max_hops: int = 9
    preset: str = "gervais"
    k_mu: float | None = None        # overrides the preset when set
    k_sigma2: float | None = None
    seed: int = 0
    up_to: int = 3
    relay_factor: float = 1.5
    rtt_basis: str = "one_way"
    include_processing: bool = True
    mode: str = "posterior"
    dataset: str | None = None       # latency CSV; bundled approximation when None
    sources: int | None = None       # evaluate the first k nodes as sources; all when None
    workers: int = 1

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not self.block_sizes:
            raise ValueError("block_sizes must not be empty")
        if not self.scenarios:
            raise ValueError("scenarios must not be empty")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        CountryDistribution.from_mapping(self.countries)
        for s in self.scenarios:
            VarianceScenario.named(s)
        self.processing_model()

    def processing_model(self) -> ProcessingModel:
        base = preset(self.preset)
        return ProcessingModel(
            base.k_mu if self.k_mu is None else self.k_mu,
            base.k_sigma2 if self.k_sigma2 is None else self.k_sigma2,
        )

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


REPORT_HEADER = ["block_size", "scenario", "distance", "precision", "recall", "stderr",
                 "recall_stderr", "tp", "fp", "fn", "error"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


@dataclass
class ExperimentReport:
    rows: list[dict] = field(default_factory=list)

    def cell(self, block_size: int, scenario: str) -> dict[int, dict]:
        return {
            r["distance"]: r for r in self.rows
            if r["block_size"] == block_size and r["scenario"] == scenario and r["distance"] is not None
        }

    @property
    def errors(self) -> list[dict]:
        return [r for r in self.rows if r["error"]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in REPORT_HEADER])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def estimate_matrix(deltas: np.ndarray, sources, countries: list[str], pack, block_size: int,
                    mode: str = "posterior", chunk: int = 32) -> np.ndarray:
    """Hop estimates of shape ``(len(sources), n)`` from a delta tensor.

    ``deltas`` is ``(repetitions, len(sources), n)``; non-finite deltas
    (self and unreachable) are ignored.  0 marks pairs without a decision.
    """
    n = len(countries)
    codes = sorted(set(countries))
    cidx = np.array([codes.index(c) for c in countries])
    proc = processing_params(pack.processing, block_size)
    lat_mean = np.empty((len(codes), len(codes)))
    lat_var = np.empty_like(lat_mean)
    for i, a in enumerate(codes):
        for j, b in enumerate(codes):
            p = pack.latency.lookup(a, b)
            lat_mean[i, j], lat_var[i, j] = p.mean, p.variance
    hop_mean = lat_mean + proc.mean
    hop_var = lat_var + proc.variance
    hop_var = np.where(hop_var > 0, hop_var, VARIANCE_FLOOR_MS2)
    prior = pack.prior
    log_prior = np.log(prior_vector(prior, pack.max_hops))

    sources = np.asarray(sources)
    out = np.zeros((len(sources), n), dtype=np.int64)
    for lo in range(0, len(sources), chunk):
        hi = min(lo + chunk, len(sources))
        t = deltas[:, lo:hi, :]
        finite = np.isfinite(t)
        t = np.where(finite, t, 0.0)
        pair = (cidx[sources[lo:hi]][:, None], cidx[None, :])
        m, v = hop_mean[pair], hop_var[pair]
        if mode == "posterior":
            post, informative = posterior_matrix(t, m, v, prior, pack.epsilon_ms, pack.max_hops)
            agg, count = aggregate_matrix(post, informative & finite, axis=0)
        else:
            lik = likelihood_matrix(t, m, v, pack.epsilon_ms, pack.max_hops)
            informative = (lik.sum(axis=-1) > 0) & finite
            with np.errstate(divide="ignore"):
                loglik = np.where(informative[..., None], np.log(lik), 0.0)
            agg, ok = bayes_matrix(loglik.sum(axis=0), log_prior)
            count = np.where(ok, informative.sum(axis=0), 0)
        out[lo:hi] = decide_matrix(agg, count)
    return out


def _run_cell(cfg: ExperimentConfig, topo: Topology, truth: np.ndarray, sources: list[int],
              dataset: LatencyDataset, si: int, bi: int) -> list[dict]:
    scenario = cfg.scenarios[si]
    block_size = int(cfg.block_sizes[bi])
    base = {"block_size": block_size, "scenario": scenario}
    try:
        cs = sorted(set(topo.countries))
        required = [(a, b) for i, a in enumerate(cs) for b in cs[i:]]
        one_way = fit_latency_model(dataset, VarianceScenario.named(scenario),
                                    required=required, rtt_basis=cfg.rtt_basis)
        pack = build_pack(one_way, cfg.processing_model(), relay_factor=cfg.relay_factor,
                          epsilon_ms=cfg.epsilon_ms, max_hops=cfg.max_hops,
                          mean_degree=2.0 * cfg.out_degree, node_count=cfg.n_nodes)
        if cfg.include_processing:
            proc = processing_params(pack.processing, block_size)
        else:
            proc = NormalParams(0.0, 0.0)
        cell_seed = int(np.random.SeedSequence([cfg.seed, si, bi]).generate_state(1, np.uint64)[0])
        deltas = simulate_deltas(topo, proc, sources, cfg.repetitions, cell_seed,
                                 latency_model=one_way, relay_factor=cfg.relay_factor)
        est = estimate_matrix(deltas, sources, topo.countries, pack, block_size, cfg.mode)
        mask = truth > 0   # drops self pairs and unreachable relays
        counts = confusion_arrays(est[mask], truth[mask], cfg.up_to)
    except Exception as exc:  # a failing cell must not sink the whole matrix
        log.exception("cell %s/%s failed", block_size, scenario)
        return [{**base, "distance": None, "precision": None, "recall": None, "stderr": None,
                 "recall_stderr": None, "tp": None, "fp": None, "fn": None,
                 "error": f"{type(exc).__name__}: {exc}"}]
    rows = []
    for c, cc in counts.items():
        rows.append({
            **base, "distance": c, "precision": cc.precision, "recall": cc.recall,
            "stderr": binomial_stderr(cc.precision, cc.tp + cc.fp),
            "recall_stderr": binomial_stderr(cc.recall, cc.tp + cc.fn),
            "tp": cc.tp, "fp": cc.fp, "fn": cc.fn, "error": "",
        })
    return rows


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Generate one topology, then simulate, infer and score every (block size, scenario) cell."""
    dataset = LatencyDataset.from_csv(cfg.dataset) if cfg.dataset else default_dataset()
    dist = CountryDistribution.from_mapping(cfg.countries)
    topo = generate_topology(cfg.n_nodes, cfg.out_degree, dist, cfg.seed)
    sources = list(range(cfg.n_nodes if cfg.sources is None else min(cfg.sources, cfg.n_nodes)))
    truth = topo.hop_distances(sources)

    jobs = [(si, bi) for bi in range(len(cfg.block_sizes)) for si in range(len(cfg.scenarios))]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_run_cell, cfg, topo, truth, sources, dataset, si, bi) for si, bi in jobs]
            results = [f.result() for f in futures]
    else:
        results = [_run_cell(cfg, topo, truth, sources, dataset, si, bi) for si, bi in jobs]
    report = ExperimentReport()
    for rows in results:
        report.rows.extend(rows)
    return report
