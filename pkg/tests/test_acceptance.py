"""Exit criteria for the toolkit, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import filecmp
import math
import time

import numpy as np
import pytest

from blocktopo.cli import main
from blocktopo.evaluation import ConfusionCounts, ExperimentConfig, estimate_matrix, run_experiment
from blocktopo.inference import infer_edges
from blocktopo.ingest import ingest_log, synthetic_log, write_log
from blocktopo.param_fit import ParameterPack, ProcessingModel, uniform_latency_model
from blocktopo.prob_core import (
    HopPrior,
    LikelihoodParams,
    NormalParams,
    UninformativeObservation,
    hop_likelihood,
    hop_prior_prob,
    posterior,
)
from blocktopo.topo_sim import (
    CountryDistribution,
    Topology,
    generate_topology,
    propagation_delays,
    simulate_deltas,
    synthesize_observations,
)

from .oracles import brute_force_delays, numeric_hop_likelihood


def test_table_arithmetic(verdict):
    cases = [((33, 33, 7), 0.500, 0.825), ((18, 18, 22), 0.500, 0.450), ((30, 26, 10), 0.5357, 0.750)]
    ok = True
    for (tp, fp, fn), p, r in cases:
        cc = ConfusionCounts(tp, fp, fn)
        ok &= abs(cc.precision - p) <= 1e-4 and abs(cc.recall - r) <= 1e-4
    # the first two are exact ratios
    ok &= ConfusionCounts(33, 33, 7).recall == 0.825 and ConfusionCounts(18, 18, 22).recall == 0.45
    assert verdict("table arithmetic", ok)


def test_normalization(verdict):
    rng = np.random.default_rng(20240601)
    worst, scored = 0.0, 0
    for _ in range(10_000):
        n = int(rng.integers(3, 5000))
        prior = HopPrior(float(rng.uniform(0.01, 0.99)) * (n - 1), n)
        params = LikelihoodParams(
            NormalParams(rng.uniform(1, 500), rng.uniform(0.01, 1e4)),
            NormalParams(rng.uniform(0, 1000), rng.uniform(0, 1e3)),
            float(rng.uniform(0, 50)), int(rng.integers(1, 16)),
        )
        hop = params.hop_mean * rng.uniform(0.5, params.max_hops + 0.5)
        t = float(hop + rng.normal(0, 3 * math.sqrt(params.hop_variance)))
        try:
            post = posterior(prior, params, t)
        except UninformativeObservation:
            continue
        scored += 1
        worst = max(worst, abs(math.fsum(post.probs) - 1.0))
    partial = np.cumsum([hop_prior_prob(HopPrior(16, 300), h) for h in range(1, 3001)])
    monotone = bool(np.all(np.diff(partial) >= 0)) and abs(partial[-1] - 1.0) < 1e-12
    ok = worst <= 1e-9 and monotone and scored > 9000
    assert verdict("posterior normalization", ok, f"{scored} scored, max |sum-1| = {worst:.1e}")


def test_convolution_oracle(verdict):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        lat = (rng.uniform(5, 300), rng.uniform(1, 2500))
        proc = (rng.uniform(0, 800), 0.0 if rng.random() < 0.25 else rng.uniform(0.5, 400))
        eps = float(rng.uniform(0.5, 20))
        params = LikelihoodParams(NormalParams(*lat), NormalParams(*proc), eps, 9)
        for h in (1, 2, 3):
            t = h * params.hop_mean + rng.uniform(-3, 3) * math.sqrt(h * params.hop_variance)
            got = hop_likelihood(params, h, t)
            expected = numeric_hop_likelihood(h, lat[0], lat[1], proc[0], proc[1], t, eps)
            worst = max(worst, abs(got - expected))
    assert verdict("convolution oracle", worst <= 1e-6, f"max abs error {worst:.1e}")


def test_brute_force_paths(verdict):
    rng = np.random.default_rng(11)
    mismatches = 0
    for g in range(200):
        n = int(rng.integers(2, 11))
        p = rng.uniform(0.15, 0.7)
        edges = {(a, b): float(rng.uniform(1, 300)) for a in range(n) for b in range(a + 1, n)
                 if rng.random() < p}
        sources = list(range(n))
        if g % 2 == 0:
            # through the public simulator: fixed weights, deterministic processing
            if not edges:
                continue
            mu = float(rng.uniform(0, 50))
            topo = Topology(["US"] * n, edges)
            got = simulate_deltas(topo, NormalParams(mu, 0.0), sources, 1, seed=g)[0]
            delays = np.full((n, n), mu)
        else:
            delays = rng.uniform(0, 60, size=(n, n))
            keys = sorted(edges)
            got = propagation_delays(
                n, np.array([k[0] for k in keys], dtype=np.int64), np.array([k[1] for k in keys], dtype=np.int64),
                np.array([edges[k] for k in keys], dtype=float), delays, sources,
            )
        for s in sources:
            if got[s].tolist() != brute_force_delays(n, edges, delays[s], s):
                mismatches += 1
    assert verdict("brute-force path oracle", mismatches == 0, f"{mismatches} mismatching sources")


def test_noise_free_recovery(verdict):
    topo = generate_topology(300, 8, CountryDistribution.single("DE"), seed=5)
    one_way = uniform_latency_model(["DE"], 50.0, 0.0)
    proc = ProcessingModel(0.3796, 0.0)
    block = 1_000_000
    pack = ParameterPack(one_way.scaled(1.5), proc, 5.0, 9, mean_degree=16.0, node_count=300)
    sources = list(range(300))
    deltas = simulate_deltas(topo, NormalParams(proc.k_mu * block / 1000, 0.0), sources, 1, seed=1,
                             latency_model=one_way)
    est = estimate_matrix(deltas, sources, topo.countries, pack, block)
    truth = topo.hop_distances()
    in_range = (truth >= 1) & (truth <= 9)
    share = float(np.mean(est[in_range] == truth[in_range]))
    assert verdict("noise-free recovery", share == 1.0, f"{share:.2%} of {int(in_range.sum())} pairs")


@pytest.fixture(scope="module")
def reference_report():
    cfg = ExperimentConfig(
        n_nodes=300, out_degree=8, repetitions=50, epsilon_ms=5.0, preset="gervais", seed=0,
        block_sizes=[1630, 1_000_000, 2_000_000], scenarios=["small", "medium", "large"],
    )
    start = time.perf_counter()
    report = run_experiment(cfg)
    return report, time.perf_counter() - start


def _mean_over_scenarios(report, block, distance, key):
    vals = [report.cell(block, s)[distance][key] for s in ("small", "medium", "large")]
    vals = [v for v in vals if v is not None]
    return sum(vals) / len(vals) if vals else float("nan")


def test_trend_recall(reference_report, verdict):
    report, elapsed = reference_report
    assert not report.errors
    r = report.cell(2_000_000, "small")[1]["recall"]
    assert verdict("trend (a): 2 MB distance-1 recall >= 0.8 (small)",
                   r is not None and r >= 0.8 and elapsed < 600, f"recall {r}, {elapsed:.0f}s")


def test_trend_far_precision(reference_report, verdict):
    report, _ = reference_report
    details, ok = [], True
    for d in (2, 3):
        big = _mean_over_scenarios(report, 2_000_000, d, "precision")
        small = _mean_over_scenarios(report, 1630, d, "precision")
        ok &= big >= small
        details.append(f"d{d}: {big:.3f} vs {small:.3f}")
    assert verdict("trend (b): distance 2-3 precision 2 MB >= 1630 B", ok, "; ".join(details))


def test_trend_direct_precision_level(reference_report, verdict):
    report, _ = reference_report
    big = _mean_over_scenarios(report, 2_000_000, 1, "precision")
    small = _mean_over_scenarios(report, 1630, 1, "precision")
    directional = big >= small
    level = abs(big - 0.40) <= 0.15
    assert verdict("trend (c): distance-1 precision larger-block-better and within 0.40 +/- 0.15",
                   directional and level, f"2 MB {big:.3f}, 1630 B {small:.3f}")


def test_ingestion_round_trip(tmp_path, verdict):
    topo = generate_topology(60, 4, CountryDistribution.single("DE"), seed=21)
    one_way = uniform_latency_model(["DE"], 40.0, 0.0)
    proc = ProcessingModel(12.7357, 0.0)
    sim = synthesize_observations(topo, proc, 15_678, repetitions=5, seed=8, latency_model=one_way)
    rng = np.random.default_rng(3)
    rtts = {v: float(rng.uniform(10, 300)) for v in range(topo.n)}
    log = tmp_path / "capture.ndjson"
    write_log(log, synthetic_log(sim, rtts))
    replay = ingest_log(log)

    want = {(str(o.source), str(o.relay), o.repetition): o.delta for o in sim}
    got = {(o.source, o.relay, o.repetition): o.delta for o in replay}
    same_keys = set(want) == set(got)
    worst = max(abs(got[k] - want[k]) for k in want) if same_keys else math.inf

    pack = ParameterPack(one_way.scaled(1.5), proc, 5.0, 9, mean_degree=8.0, node_count=60)
    countries = {str(v): "DE" for v in range(topo.n)}
    edges = infer_edges(replay, pack, countries, min_blocks=5)
    planted = {(str(o.source), str(o.relay)) for o in sim if o.true_hops == 1}
    recovered = len(edges & planted) / len(planted)
    ok = same_keys and worst < 1e-3 and recovered >= 0.95
    assert verdict("ingestion round trip", ok, f"max delta error {worst:.1e} ms, recovered {recovered:.1%}")


def _tree_identical(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    return all(filecmp.cmp(a / f, b / f, shallow=False) for f in cmp.common_files)


def test_determinism(tmp_path, verdict):
    exp_cfg = tmp_path / "exp.json"
    exp_cfg.write_text('{"n_nodes": 50, "out_degree": 4, "repetitions": 3, '
                       '"block_sizes": [1630, 2000000], "scenarios": ["small", "medium"]}')

    def pipeline(root):
        def run(name, *args):
            assert main(["--out", str(root / name), "--seed", "9", *args]) == 0
            return root / name
        gen = run("generate", "generate", "--nodes", "50", "--out-degree", "4")
        fit = run("fit", "fit", "--mean-degree", "8", "--node-count", "50")
        sim = run("simulate", "simulate", "--topology", str(gen / "topology.json"), "--repetitions", "5",
                  "--scenario", "medium")
        obs = [o for o in synthesize_observations(
            Topology.load(gen / "topology.json"), ProcessingModel(0.38, 0.55), 1000, repetitions=5, seed=2)]
        write_log(root / "capture.ndjson", synthetic_log(obs, {v: 50.0 + v for v in range(50)}))
        run("ingest", "ingest", "--log", str(root / "capture.ndjson"))
        inf = run("infer", "infer", "--observations", str(sim / "observations.csv"),
                  "--pack", str(fit / "pack.json"), "--topology", str(gen / "topology.json"))
        run("score", "score", "--inferred", str(inf / "inferred_edges.csv"), "--topology", str(gen / "topology.json"))
        run("experiment", "--config", str(exp_cfg), "experiment")
        run("experiment_parallel", "--config", str(exp_cfg), "experiment", "--workers", "2")
        return root

    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    subcommands = ["generate", "fit", "simulate", "ingest", "infer", "score", "experiment", "experiment_parallel"]
    same = [_tree_identical(a / s, b / s) for s in subcommands]
    parallel_same = filecmp.cmp(a / "experiment" / "report.csv", a / "experiment_parallel" / "report.csv",
                                shallow=False)
    ok = all(same) and parallel_same
    failed = [s for s, x in zip(subcommands, same) if not x]
    assert verdict("determinism", ok, f"differing: {failed or 'none'}; parallel==serial: {parallel_same}")
