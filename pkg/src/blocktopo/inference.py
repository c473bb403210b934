"""Hop-distance decisions for (source, relay) pairs.

Each observation yields a posterior over hop counts.  A pair's posteriors
are averaged per hop count and the hop count with the highest mean wins;
ties go to the smaller hop count.  ``mode="bayes"`` instead multiplies the
likelihoods of all observations of a pair and applies the prior once.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .ingest import DEFAULT_MIN_BLOCKS, filter_miners
from .observations import Observation
from .param_fit import ParameterPack, processing_params
from .prob_core import (
    LikelihoodParams,
    NormalParams,
    PosteriorVector,
    likelihood_matrix,
    posterior,
    posterior_matrix,
    prior_vector,
)

# stands in for an exactly zero per-hop variance so that noise-free setups
# collapse to a point mass instead of a degenerate density
VARIANCE_FLOOR_MS2 = 1e-9
LOW_CONFIDENCE_ABOVE = 3
MODES = ("posterior", "bayes")


def _floored(params: LikelihoodParams) -> LikelihoodParams:
    if params.hop_variance > 0:
        return params
    return LikelihoodParams(
        NormalParams(params.latency.mean, VARIANCE_FLOOR_MS2),
        params.processing, params.tolerance_eps, params.max_hops,
    )


def observation_posterior(obs: Observation, pack: ParameterPack, countries: Mapping) -> PosteriorVector:
    """Posterior for one observation; raises UninformativeObservation on zero evidence."""
    params = pack.likelihood_params(countries[obs.source], countries[obs.relay], obs.block_size)
    return posterior(pack.prior, _floored(params), obs.delta)


def aggregate(posteriors: Sequence[PosteriorVector]) -> PosteriorVector:
    posteriors = list(posteriors)
    if not posteriors:
        raise ValueError("cannot aggregate an empty list of posteriors")
    size = posteriors[0].max_hops
    if any(p.max_hops != size for p in posteriors):
        raise ValueError("posteriors disagree on max_hops")
    means = [math.fsum(p.probs[i] for p in posteriors) / len(posteriors) for i in range(size)]
    total = math.fsum(means)
    return PosteriorVector(tuple(m / total for m in means))


def decide_distance(agg: PosteriorVector) -> int:
    return agg.argmax()


# -- array forms ------------------------------------------------------------


def aggregate_matrix(post: np.ndarray, informative: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Mean posterior over informative entries along ``axis``.

    Returns ``(mean, count)``; positions with no informative entry get an
    all-zero mean and count 0.
    """
    count = informative.sum(axis=axis)
    total = np.where(informative[..., None], post, 0.0).sum(axis=axis)
    mean = total / np.maximum(count, 1)[..., None]
    norm = mean.sum(axis=-1, keepdims=True)
    mean = np.where(norm > 0, mean / np.where(norm > 0, norm, 1.0), 0.0)
    return mean, count


def bayes_matrix(loglik_sum: np.ndarray, log_prior: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior from summed log-likelihoods; rows that are all -inf are uninformative."""
    logp = loglik_sum + log_prior
    top = logp.max(axis=-1, keepdims=True)
    ok = np.isfinite(top[..., 0])
    shifted = np.exp(logp - np.where(np.isfinite(top), top, 0.0))
    shifted = np.where(ok[..., None], shifted, 0.0)
    norm = shifted.sum(axis=-1, keepdims=True)
    return shifted / np.where(norm > 0, norm, 1.0), ok


def decide_matrix(agg: np.ndarray, count: np.ndarray) -> np.ndarray:
    """Argmax hop count per row (first max wins); 0 where nothing was informative."""
    return np.where(count > 0, np.argmax(agg, axis=-1) + 1, 0)


# -- pair classification ----------------------------------------------------


@dataclass(frozen=True)
class PairEstimate:
    source: Hashable
    relay: Hashable
    estimated_hops: int | None
    confidence: float | None   # aggregated posterior at the chosen hop count
    observation_count: int
    informative_count: int

    @property
    def flag(self) -> str:
        if self.estimated_hops is None:
            return "uninformative"
        if self.estimated_hops > LOW_CONFIDENCE_ABOVE:
            return "low_confidence"
        return ""


@dataclass
class InferenceResult:
    estimates: dict[tuple, PairEstimate] = field(default_factory=dict)

    @property
    def edges(self) -> set[tuple]:
        return {k for k, e in self.estimates.items() if e.estimated_hops == 1}

    @property
    def uninformative(self) -> list[tuple]:
        return sorted((k for k, e in self.estimates.items() if e.estimated_hops is None), key=_pair_sort_key)

    def hops(self) -> dict[tuple, int]:
        """Pair -> estimated hop count, 0 for uninformative pairs."""
        return {k: e.estimated_hops or 0 for k, e in self.estimates.items()}


def _pair_sort_key(pair):
    return tuple((0, x) if isinstance(x, (int, np.integer)) else (1, str(x)) for x in pair)


def _hop_params(pack: ParameterPack, countries: Mapping, observations: Sequence[Observation]):
    cache: dict = {}
    mean = np.empty(len(observations))
    var = np.empty(len(observations))
    for i, o in enumerate(observations):
        key = (countries[o.source], countries[o.relay], o.block_size)
        if key not in cache:
            lat = pack.latency.lookup(key[0], key[1])
            proc = processing_params(pack.processing, o.block_size)
            v = lat.variance + proc.variance
            cache[key] = (lat.mean + proc.mean, v if v > 0 else VARIANCE_FLOOR_MS2)
        mean[i], var[i] = cache[key]
    return mean, var


def estimate_pairs(observations: Iterable[Observation], pack: ParameterPack, countries: Mapping,
                   min_blocks: int = DEFAULT_MIN_BLOCKS, mode: str = "posterior") -> InferenceResult:
    """Hop-count estimate for every (source, relay) pair whose source qualifies as a miner."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    observations = list(observations)
    miners = filter_miners(observations, min_blocks)
    obs = sorted(
        (o for o in observations if o.source in miners),
        key=lambda o: (_pair_sort_key((o.source, o.relay)), o.repetition, o.delta),
    )
    result = InferenceResult()
    if not obs:
        return result

    pairs = []
    pair_idx = np.empty(len(obs), dtype=np.int64)
    for i, o in enumerate(obs):
        if not pairs or pairs[-1] != (o.source, o.relay):
            pairs.append((o.source, o.relay))
        pair_idx[i] = len(pairs) - 1
    starts = np.flatnonzero(np.r_[True, pair_idx[1:] != pair_idx[:-1]])
    n_obs = np.diff(np.r_[starts, len(obs)])

    t = np.array([o.delta for o in obs])
    mean, var = _hop_params(pack, countries, obs)
    if mode == "posterior":
        post, informative = posterior_matrix(t, mean, var, pack.prior, pack.epsilon_ms, pack.max_hops)
        post = np.where(informative[:, None], post, 0.0)
        total = np.add.reduceat(post, starts, axis=0)
        count = np.add.reduceat(informative.astype(np.int64), starts)
        agg = total / np.maximum(count, 1)[:, None]
        norm = agg.sum(axis=1, keepdims=True)
        agg = np.where(norm > 0, agg / np.where(norm > 0, norm, 1.0), 0.0)
    else:
        lik = likelihood_matrix(t, mean, var, pack.epsilon_ms, pack.max_hops)
        informative = lik.sum(axis=1) > 0
        with np.errstate(divide="ignore"):
            # uninformative observations are skipped, as in posterior mode
            loglik = np.where(informative[:, None], np.log(lik), 0.0)
            log_prior = np.log(prior_vector(pack.prior, pack.max_hops))
        agg, ok = bayes_matrix(np.add.reduceat(loglik, starts, axis=0), log_prior)
        count = np.add.reduceat(informative.astype(np.int64), starts)
        count = np.where(ok, count, 0)
    hops = decide_matrix(agg, count)

    for k, pair in enumerate(pairs):
        h = int(hops[k])
        result.estimates[pair] = PairEstimate(
            pair[0], pair[1],
            h if h > 0 else None,
            float(agg[k, h - 1]) if h > 0 else None,
            int(n_obs[k]), int(count[k]),
        )
    return result


def infer_edges(observations: Iterable[Observation], pack: ParameterPack, countries: Mapping,
                min_blocks: int = DEFAULT_MIN_BLOCKS, mode: str = "posterior") -> set[tuple]:
    """(source, relay) pairs classified as directly connected."""
    return estimate_pairs(observations, pack, countries, min_blocks, mode).edges


EDGES_HEADER = ["source", "relay", "estimated_hops", "mean_posterior_at_argmax", "observation_count", "flag"]


def write_inferred_edges(path, result: InferenceResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EDGES_HEADER)
        for pair in sorted(result.estimates, key=_pair_sort_key):
            e = result.estimates[pair]
            w.writerow([
                e.source, e.relay,
                "" if e.estimated_hops is None else e.estimated_hops,
                "" if e.confidence is None else repr(e.confidence),
                e.observation_count, e.flag,
            ])


def read_inferred_edges(path) -> dict[tuple[str, str], int]:
    """Pair -> estimated hops (0 where the pair was uninformative)."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            h = row["estimated_hops"].strip()
            out[(row["source"], row["relay"])] = int(h) if h else 0
    return out
