"""Latency and processing-delay parameters from external data.

Latency datasets are plain CSV (``country_a,country_b,rtt_ms``).  Fitting
halves the RTT to get a one-way latency per country pair; the relay factor
(three one-way legs for inventory/getdata/block, i.e. 1.5) is applied later,
either when edge weights are drawn or when a parameter pack is built.

Validation constants come in microseconds per byte and are converted to
milliseconds in exactly one place, :func:`processing_params`.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .prob_core import DEFAULT_EPSILON_MS, DEFAULT_MAX_HOPS, HopPrior, LikelihoodParams, NormalParams

US_PER_MS = 1_000.0
US2_PER_MS2 = 1_000_000.0
RELAY_FACTOR = 1.5


def pair_key(a: str, b: str) -> tuple[str, str]:
    """Unordered country pair as a sorted tuple."""
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class ProcessingModel:
    k_mu: float       # us per byte
    k_sigma2: float   # us^2 per byte

    def __post_init__(self):
        if self.k_mu < 0 or self.k_sigma2 < 0:
            raise ValueError(f"validation constants must be >= 0, got {self}")


PRESETS: dict[str, ProcessingModel] = {
    "gervais": ProcessingModel(k_mu=0.3796, k_sigma2=0.552049),
    "testnet": ProcessingModel(k_mu=8.55, k_sigma2=345.1),
    "mainnet": ProcessingModel(k_mu=12.7357, k_sigma2=2128.16),
}


def preset(name: str) -> ProcessingModel:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def processing_params(model: ProcessingModel, block_size: float) -> NormalParams:
    if block_size < 0:
        raise ValueError(f"block size must be >= 0, got {block_size}")
    return NormalParams(
        mean=model.k_mu * block_size / US_PER_MS,
        variance=model.k_sigma2 * block_size / US2_PER_MS2,
    )


@dataclass(frozen=True)
class VarianceScenario:
    name: str
    fraction: float | None = None

    def __post_init__(self):
        if self.name == "empirical":
            return
        if self.name not in SCENARIO_FRACTIONS:
            raise ValueError(f"unknown variance scenario {self.name!r}")
        if self.fraction is None:
            object.__setattr__(self, "fraction", SCENARIO_FRACTIONS[self.name])
        elif not math.isclose(self.fraction, SCENARIO_FRACTIONS[self.name]):
            raise ValueError(
                f"scenario {self.name!r} fixes sigma at {SCENARIO_FRACTIONS[self.name]} of the mean"
            )

    @classmethod
    def named(cls, name: str) -> "VarianceScenario":
        return cls(name)


SCENARIO_FRACTIONS = {"small": 0.10, "medium": 0.30, "large": 0.50}


@dataclass
class LatencyDataset:
    records: list[tuple[str, str, float]] = field(default_factory=list)

    def __post_init__(self):
        for a, b, rtt in self.records:
            if not rtt > 0:
                raise ValueError(f"rtt must be > 0, got {rtt} for {a}-{b}")

    def buckets(self) -> dict[tuple[str, str], list[float]]:
        out: dict[tuple[str, str], list[float]] = defaultdict(list)
        for a, b, rtt in self.records:
            out[pair_key(a, b)].append(rtt)
        return dict(out)

    @classmethod
    def from_csv(cls, path) -> "LatencyDataset":
        with open(path, newline="") as fh:
            rows = [
                (r["country_a"].strip(), r["country_b"].strip(), float(r["rtt_ms"]))
                for r in csv.DictReader(fh)
            ]
        return cls(rows)


def default_dataset() -> LatencyDataset:
    """Bundled approximate country-pair RTTs for US, CA, RU, CN, FR, DE, JP."""
    ref = resources.files("blocktopo").joinpath("data/country_rtt.csv")
    with resources.as_file(ref) as path:
        return LatencyDataset.from_csv(path)


class LatencyModel(Mapping):
    """Per unordered country pair normal latency parameters."""

    def __init__(self, pairs: Mapping[tuple[str, str], NormalParams] | None = None):
        self._pairs: dict[tuple[str, str], NormalParams] = {}
        for (a, b), params in (pairs or {}).items():
            self._pairs[pair_key(a, b)] = params

    def __getitem__(self, pair) -> NormalParams:
        a, b = pair
        try:
            return self._pairs[pair_key(a, b)]
        except KeyError:
            raise KeyError(f"latency model has no entry for country pair {a}-{b}") from None

    def __iter__(self):
        return iter(sorted(self._pairs))

    def __len__(self):
        return len(self._pairs)

    def __repr__(self):
        return f"LatencyModel({len(self)} pairs)"

    def lookup(self, a: str, b: str) -> NormalParams:
        return self[(a, b)]

    def scaled(self, factor: float) -> "LatencyModel":
        return LatencyModel({k: v.scaled(factor) for k, v in self._pairs.items()})

    def covers(self, countries: Iterable[str]) -> list[tuple[str, str]]:
        """Pairs over ``countries`` missing from the model."""
        cs = sorted(set(countries))
        return [
            (a, b) for i, a in enumerate(cs) for b in cs[i:]
            if pair_key(a, b) not in self._pairs
        ]


def fit_latency_model(data: LatencyDataset, scenario: VarianceScenario, *,
                      required: Iterable[tuple[str, str]] = (),
                      rtt_basis: str = "one_way") -> LatencyModel:
    """One-way latency normals per country pair.

    ``rtt_basis="rtt"`` keeps the full RTT as the latency base instead of
    halving it (the alternate reading where the relay factor multiplies RTT).
    """
    if rtt_basis not in ("one_way", "rtt"):
        raise ValueError(f"rtt_basis must be 'one_way' or 'rtt', got {rtt_basis!r}")
    divisor = 2.0 if rtt_basis == "one_way" else 1.0
    buckets = data.buckets()
    for a, b in required:
        if not buckets.get(pair_key(a, b)):
            raise ValueError(f"no RTT records for country pair {a}-{b}")
    pairs = {}
    for key, rtts in buckets.items():
        latencies = [r / divisor for r in rtts]
        mean = statistics.fmean(latencies)
        if scenario.name == "empirical":
            if len(latencies) < 2:
                raise ValueError(
                    f"country pair {key[0]}-{key[1]} has a single sample; empirical variance undefined"
                )
            var = statistics.variance(latencies)
        else:
            var = (scenario.fraction * mean) ** 2
        pairs[key] = NormalParams(mean, var)
    return LatencyModel(pairs)


def uniform_latency_model(countries: Iterable[str], mean: float, variance: float) -> LatencyModel:
    cs = sorted(set(countries))
    return LatencyModel({(a, b): NormalParams(mean, variance) for i, a in enumerate(cs) for b in cs[i:]})


@dataclass
class ParameterPack:
    """Everything inference needs besides the observations.

    ``latency`` holds the full one-hop relay latency (relay factor already
    applied), not the fitted one-way latency.
    """

    latency: LatencyModel
    processing: ProcessingModel
    epsilon_ms: float = DEFAULT_EPSILON_MS
    max_hops: int = DEFAULT_MAX_HOPS
    mean_degree: float = 16.0
    node_count: int = 300

    @property
    def prior(self) -> HopPrior:
        return HopPrior(self.mean_degree, self.node_count)

    def likelihood_params(self, country_a: str, country_b: str, block_size: float) -> LikelihoodParams:
        return LikelihoodParams(
            latency=self.latency.lookup(country_a, country_b),
            processing=processing_params(self.processing, block_size),
            tolerance_eps=self.epsilon_ms,
            max_hops=self.max_hops,
        )

    def to_json(self) -> dict:
        return {
            "pairs": [
                {"a": a, "b": b, "mean_ms": p.mean, "var_ms2": p.variance}
                for (a, b), p in sorted(self.latency.items())
            ],
            "k_mu_us_per_byte": self.processing.k_mu,
            "k_sigma2_us2_per_byte": self.processing.k_sigma2,
            "epsilon_ms": self.epsilon_ms,
            "max_hops": self.max_hops,
            "mean_degree": self.mean_degree,
            "node_count": self.node_count,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ParameterPack":
        latency = LatencyModel({
            (p["a"], p["b"]): NormalParams(float(p["mean_ms"]), float(p["var_ms2"]))
            for p in doc["pairs"]
        })
        return cls(
            latency=latency,
            processing=ProcessingModel(float(doc["k_mu_us_per_byte"]), float(doc["k_sigma2_us2_per_byte"])),
            epsilon_ms=float(doc.get("epsilon_ms", DEFAULT_EPSILON_MS)),
            max_hops=int(doc.get("max_hops", DEFAULT_MAX_HOPS)),
            mean_degree=float(doc.get("mean_degree", 16.0)),
            node_count=int(doc.get("node_count", 300)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ParameterPack":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_pack(one_way: LatencyModel, processing: ProcessingModel, *,
               relay_factor: float = RELAY_FACTOR, **kwargs) -> ParameterPack:
    return ParameterPack(latency=one_way.scaled(relay_factor), processing=processing, **kwargs)
