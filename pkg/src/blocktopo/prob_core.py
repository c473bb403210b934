"""Hop-count probability engine.

Given the time difference between the announcements of a block by its
source and by a relay, estimate how many overlay edges separate the two.
One-hop relay latency and per-node processing delay are both modeled as
normals, so the h-fold convolution is again a normal with h times the mean
and h times the variance.  The likelihood of a measured difference ``t`` is
the mass of that normal inside ``[t - eps, t + eps]``; the prior over hop
counts is the geometric law of an Erdos-Renyi graph.

All durations are milliseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import ndtr

__all__ = [
    "NormalParams",
    "HopPrior",
    "LikelihoodParams",
    "PosteriorVector",
    "UninformativeObservation",
    "UNDERFLOW",
    "hop_prior_prob",
    "hop_likelihood",
    "evidence",
    "posterior",
    "prior_vector",
    "likelihood_matrix",
    "posterior_matrix",
]

# likelihood terms below this are treated as exactly zero
UNDERFLOW = 1e-300

DEFAULT_MAX_HOPS = 9
DEFAULT_EPSILON_MS = 5.0


class UninformativeObservation(ValueError):
    """Raised when a time difference has zero evidence under every hop count."""

    def __init__(self, t: float):
        super().__init__(f"observation t={t!r} ms has zero evidence for every hop count")
        self.t = t


@dataclass(frozen=True)
class NormalParams:
    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)):
            raise ValueError(f"normal parameters must be finite, got {self}")
        if self.variance < 0:
            raise ValueError(f"variance must be >= 0, got {self.variance}")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def scaled(self, factor: float) -> "NormalParams":
        """Parameters of ``factor * X``."""
        return NormalParams(self.mean * factor, self.variance * factor * factor)


@dataclass(frozen=True)
class HopPrior:
    """Geometric hop-count prior of an Erdos-Renyi graph."""

    mean_degree: float
    node_count: int

    def __post_init__(self):
        if self.node_count < 3:
            raise ValueError(f"node_count must be >= 3, got {self.node_count}")
        if not 0 < self.mean_degree < self.node_count - 1:
            raise ValueError(
                f"mean_degree must lie in (0, {self.node_count - 1}), got {self.mean_degree}"
            )

    @property
    def edge_prob(self) -> float:
        return self.mean_degree / (self.node_count - 1)


@dataclass(frozen=True)
class LikelihoodParams:
    latency: NormalParams
    processing: NormalParams
    tolerance_eps: float = DEFAULT_EPSILON_MS
    max_hops: int = DEFAULT_MAX_HOPS

    def __post_init__(self):
        if self.tolerance_eps < 0:
            raise ValueError(f"tolerance_eps must be >= 0, got {self.tolerance_eps}")
        if self.max_hops < 1:
            raise ValueError(f"max_hops must be >= 1, got {self.max_hops}")

    @property
    def hop_mean(self) -> float:
        return self.latency.mean + self.processing.mean

    @property
    def hop_variance(self) -> float:
        return self.latency.variance + self.processing.variance


@dataclass(frozen=True)
class PosteriorVector:
    """P(H=h | t) for h = 1..len(probs); ``probs[0]`` is h=1."""

    probs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if not self.probs:
            raise ValueError("posterior needs at least one hop count")
        for p in self.probs:
            if not 0.0 <= p <= 1.0 + 1e-12:
                raise ValueError(f"probability out of range: {p}")

    @property
    def max_hops(self) -> int:
        return len(self.probs)

    def __getitem__(self, h: int) -> float:
        if not 1 <= h <= len(self.probs):
            raise IndexError(f"hop count {h} outside 1..{len(self.probs)}")
        return self.probs[h - 1]

    def items(self) -> Iterator[tuple[int, float]]:
        return ((h, p) for h, p in enumerate(self.probs, start=1))

    def argmax(self) -> int:
        # first maximum wins, i.e. ties go to the smaller hop count
        best = max(self.probs)
        return self.probs.index(best) + 1


def _check_hop(h: int) -> None:
    if isinstance(h, bool) or int(h) != h or h < 1:
        raise ValueError(f"hop count must be an integer >= 1, got {h!r}")


def hop_prior_prob(prior: HopPrior, h: int) -> float:
    _check_hop(h)
    p = prior.edge_prob
    return (1.0 - p) ** (h - 1) * p


def _std_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _window_mass(lo: float, hi: float, mean: float, std: float) -> float:
    """Mass of N(mean, std^2) inside [lo, hi], tail-accurate on both sides."""
    z_lo = (lo - mean) / std
    z_hi = (hi - mean) / std
    if z_lo > 0:
        # upper tail: use survival functions to avoid 1 - 1 cancellation
        mass = _std_cdf(-z_lo) - _std_cdf(-z_hi)
    else:
        mass = _std_cdf(z_hi) - _std_cdf(z_lo)
    return mass if mass >= UNDERFLOW else 0.0


def hop_likelihood(params: LikelihoodParams, h: int, t: float) -> float:
    """P(t - eps <= T <= t + eps | H = h) for the h-fold convolved normal."""
    _check_hop(h)
    if not math.isfinite(t):
        raise ValueError(f"time difference must be finite, got {t!r}")
    var = h * params.hop_variance
    if var <= 0:
        raise ValueError("combined per-hop variance is zero; the density is degenerate")
    eps = params.tolerance_eps
    return _window_mass(t - eps, t + eps, h * params.hop_mean, math.sqrt(var))


def _joint_terms(prior: HopPrior, params: LikelihoodParams, t: float) -> list[float]:
    return [
        hop_likelihood(params, h, t) * hop_prior_prob(prior, h)
        for h in range(1, params.max_hops + 1)
    ]


def evidence(prior: HopPrior, params: LikelihoodParams, t: float) -> float:
    """Total probability of ``t`` over hop counts 1..max_hops.

    Raises UninformativeObservation when every term is zero.
    """
    total = math.fsum(_joint_terms(prior, params, t))
    if total <= 0.0:
        raise UninformativeObservation(t)
    return total


def posterior(prior: HopPrior, params: LikelihoodParams, t: float) -> PosteriorVector:
    terms = _joint_terms(prior, params, t)
    total = math.fsum(terms)
    if total <= 0.0:
        raise UninformativeObservation(t)
    return PosteriorVector(tuple(x / total for x in terms))


# -- vectorized forms -------------------------------------------------------


def prior_vector(prior: HopPrior, max_hops: int) -> np.ndarray:
    h = np.arange(1, max_hops + 1)
    p = prior.edge_prob
    return (1.0 - p) ** (h - 1) * p


def likelihood_matrix(t, hop_mean, hop_variance, eps: float, max_hops: int) -> np.ndarray:
    """Likelihoods for every hop count, shape ``broadcast(t, ...) + (max_hops,)``.

    ``hop_mean`` and ``hop_variance`` are the one-hop totals (latency plus
    processing) and broadcast against ``t``.
    """
    t = np.asarray(t, dtype=float)[..., None]
    h = np.arange(1, max_hops + 1, dtype=float)
    mu = np.asarray(hop_mean, dtype=float)[..., None] * h
    var = np.asarray(hop_variance, dtype=float)[..., None] * h
    if np.any(var <= 0):
        raise ValueError("combined per-hop variance is zero; the density is degenerate")
    sd = np.sqrt(var)
    z_lo = (t - eps - mu) / sd
    z_hi = (t + eps - mu) / sd
    upper = z_lo > 0
    mass = np.where(upper, ndtr(-z_lo) - ndtr(-z_hi), ndtr(z_hi) - ndtr(z_lo))
    mass[mass < UNDERFLOW] = 0.0
    return mass


def posterior_matrix(t, hop_mean, hop_variance, prior: HopPrior, eps: float,
                     max_hops: int) -> tuple[np.ndarray, np.ndarray]:
    """Posteriors for an array of time differences.

    Returns ``(post, informative)``; rows with zero evidence are all-zero in
    ``post`` and False in ``informative``.
    """
    joint = likelihood_matrix(t, hop_mean, hop_variance, eps, max_hops) * prior_vector(prior, max_hops)
    total = joint.sum(axis=-1)
    informative = total > 0
    safe = np.where(informative, total, 1.0)
    return joint / safe[..., None], informative
