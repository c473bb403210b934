"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import evaluation, ingest, inference, param_fit, topo_sim
from .observations import read_observations, write_observations

log = logging.getLogger("blocktopo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _dataset(path):
    if path is None:
        return param_fit.default_dataset()
    try:
        return param_fit.LatencyDataset.from_csv(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read latency dataset {path}: {exc}") from exc


def _processing(args) -> param_fit.ProcessingModel:
    base = param_fit.preset(args.preset)
    return param_fit.ProcessingModel(
        base.k_mu if args.k_mu is None else args.k_mu,
        base.k_sigma2 if args.k_sigma2 is None else args.k_sigma2,
    )


def _load_topology(path) -> topo_sim.Topology:
    try:
        return topo_sim.Topology.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read topology {path}: {exc}") from exc


def _fit(args, countries) -> param_fit.LatencyModel:
    cs = sorted(set(countries))
    required = [(a, b) for i, a in enumerate(cs) for b in cs[i:]]
    try:
        return param_fit.fit_latency_model(
            _dataset(args.dataset), param_fit.VarianceScenario.named(args.scenario),
            required=required, rtt_basis=args.rtt_basis,
        )
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_generate(args, out: Path) -> None:
    dist = topo_sim.CountryDistribution.from_mapping(args.countries or dict(topo_sim.DEFAULT_COUNTRIES.entries))
    topo = topo_sim.generate_topology(args.nodes, args.out_degree, dist, args.seed)
    if not args.unit_weights:
        model = _fit(args, topo.countries)
        topo = topo_sim.assign_edge_latencies(topo, model, args.seed, args.relay_factor)
    topo.save(out / "topology.json")
    log.info("wrote %d nodes, %d edges (mean degree %.2f)", topo.n, len(topo.edges), topo.mean_degree())


def cmd_simulate(args, out: Path) -> None:
    topo = _load_topology(args.topology)
    model = None if args.fixed_weights else _fit(args, topo.countries)
    diag: dict = {}
    obs = topo_sim.synthesize_observations(
        topo, _processing(args), args.block_size, None, args.repetitions, args.seed,
        latency_model=model, relay_factor=args.relay_factor,
        include_processing=not args.no_processing, diagnostics=diag,
    )
    write_observations(out / "observations.csv", obs)
    _dump_json(out / "simulate_diagnostics.json", {"observations": len(obs), **diag})


def cmd_fit(args, out: Path) -> None:
    data = _dataset(args.dataset)
    countries = {c for a, b, _ in data.records for c in (a, b)}
    model = _fit(args, countries)
    pack = param_fit.build_pack(
        model, _processing(args), relay_factor=args.relay_factor, epsilon_ms=args.epsilon,
        max_hops=args.max_hops, mean_degree=args.mean_degree, node_count=args.node_count,
    )
    pack.save(out / "pack.json")


def cmd_ingest(args, out: Path) -> None:
    diag: Counter = Counter()
    try:
        obs = ingest.ingest_log(args.log, alpha=args.alpha, order_by=args.order_by, diagnostics=diag)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot ingest {args.log}: {exc}") from exc
    write_observations(out / "observations.csv", obs)
    _dump_json(out / "ingest_diagnostics.json", {"observations": len(obs), **diag})


def _countries(args) -> dict:
    if args.topology:
        topo = _load_topology(args.topology)
        return {str(i): c for i, c in enumerate(topo.countries)}
    if args.countries_csv:
        try:
            with open(args.countries_csv, newline="") as fh:
                return {row["peer"]: row["country"] for row in csv.DictReader(fh)}
        except (OSError, KeyError) as exc:
            raise DataError(f"cannot read countries {args.countries_csv}: {exc}") from exc
    raise ConfigError("infer needs --topology or --countries-csv to place peers")


def cmd_infer(args, out: Path) -> None:
    try:
        obs = read_observations(args.observations)
        pack = param_fit.ParameterPack.load(args.pack)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    countries = _countries(args)
    try:
        result = inference.estimate_pairs(obs, pack, countries, args.min_blocks, args.mode)
    except KeyError as exc:
        raise DataError(f"no country or latency entry for {exc}") from exc
    inference.write_inferred_edges(out / "inferred_edges.csv", result)
    log.info("%d pairs, %d classified direct, %d uninformative",
             len(result.estimates), len(result.edges), len(result.uninformative))


def cmd_score(args, out: Path) -> None:
    try:
        est = inference.read_inferred_edges(args.inferred)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    topo = _load_topology(args.topology)
    dist = topo.hop_distances()
    try:
        truth = {(s, r): int(dist[int(s), int(r)]) for s, r in est}
    except (ValueError, IndexError) as exc:
        raise DataError(f"inferred pairs do not match topology node ids: {exc}") from exc
    counts = evaluation.score(est, truth, args.up_to)
    with open(out / "score.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["distance", "tp", "fp", "fn", "precision", "recall"])
        for c, cc in counts.items():
            w.writerow([c, cc.tp, cc.fp, cc.fn, evaluation._fmt(cc.precision), evaluation._fmt(cc.recall)])


def cmd_experiment(args, out: Path) -> None:
    doc = dict(args.config_doc or {})
    if args.seed_given:
        doc["seed"] = args.seed
    if args.workers is not None:
        doc["workers"] = args.workers
    try:
        cfg = evaluation.ExperimentConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad experiment config: {exc}") from exc
    report = evaluation.run_experiment(cfg)
    report.write(out / "report.csv")
    if report.errors:
        log.warning("%d experiment cells failed", len(report.errors))


def _add_latency_opts(p) -> None:
    p.add_argument("--dataset", help="country-pair RTT CSV (bundled approximation if omitted)")
    p.add_argument("--scenario", default="small", choices=["small", "medium", "large", "empirical"])
    p.add_argument("--relay-factor", type=float, default=param_fit.RELAY_FACTOR)
    p.add_argument("--rtt-basis", default="one_way", choices=["one_way", "rtt"])


def _add_processing_opts(p) -> None:
    p.add_argument("--preset", default="gervais", choices=sorted(param_fit.PRESETS))
    p.add_argument("--k-mu", type=float, help="validation mean constant, us/B (overrides preset)")
    p.add_argument("--k-sigma2", type=float, help="validation variance constant, us^2/B (overrides preset)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blocktopo", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    parser.add_argument("--config", help="JSON file supplying option defaults")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices

    p = sub.add_parser("generate", help="random country-tagged topology")
    p.add_argument("--nodes", type=int, default=300)
    p.add_argument("--out-degree", type=int, default=8)
    p.add_argument("--unit-weights", action="store_true", help="skip latency assignment")
    p.set_defaults(countries=None)
    _add_latency_opts(p)

    p = sub.add_parser("simulate", help="synthetic observations over a topology")
    p.add_argument("--topology", required=True)
    p.add_argument("--block-size", type=int, default=2_000_000)
    p.add_argument("--repetitions", type=int, default=50)
    p.add_argument("--no-processing", action="store_true", help="leave validation delay out of deltas")
    p.add_argument("--fixed-weights", action="store_true", help="reuse topology weights every repetition")
    _add_latency_opts(p)
    _add_processing_opts(p)

    p = sub.add_parser("fit", help="parameter pack from a latency dataset")
    p.add_argument("--epsilon", type=float, default=5.0)
    p.add_argument("--max-hops", type=int, default=9)
    p.add_argument("--mean-degree", type=float, default=16.0)
    p.add_argument("--node-count", type=int, default=300)
    _add_latency_opts(p)
    _add_processing_opts(p)

    p = sub.add_parser("ingest", help="NDJSON announcement log to observations")
    p.add_argument("--log", required=True)
    p.add_argument("--alpha", type=float, default=ingest.DEFAULT_ALPHA)
    p.add_argument("--order-by", default="adjusted", choices=["adjusted", "raw"])

    p = sub.add_parser("infer", help="hop estimates per (source, relay) pair")
    p.add_argument("--observations", required=True)
    p.add_argument("--pack", required=True)
    p.add_argument("--topology", help="take peer countries from a topology file")
    p.add_argument("--countries-csv", help="CSV with columns peer,country")
    p.add_argument("--min-blocks", type=int, default=ingest.DEFAULT_MIN_BLOCKS)
    p.add_argument("--mode", default="posterior", choices=list(inference.MODES))

    p = sub.add_parser("score", help="precision/recall of inferred distances")
    p.add_argument("--inferred", required=True)
    p.add_argument("--topology", required=True)
    p.add_argument("--up-to", type=int, default=3)

    p = sub.add_parser("experiment", help="full simulation experiment matrix")
    p.add_argument("--workers", type=int, default=None)
    return parser


COMMANDS = {
    "generate": cmd_generate, "simulate": cmd_simulate, "fit": cmd_fit, "ingest": cmd_ingest,
    "infer": cmd_infer, "score": cmd_score, "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config_doc = None
        if args.config:
            try:
                config_doc = json.loads(Path(args.config).read_text())
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
            if not isinstance(config_doc, dict):
                raise ConfigError("config must be a JSON object")
            if args.command != "experiment":
                # config keys act as option defaults; explicit flags still win
                parser.subcommands[args.command].set_defaults(**{k.replace("-", "_"): v for k, v in config_doc.items()})
                args = parser.parse_args(argv)
        args.config_doc = config_doc
        args.seed_given = args.seed is not None
        if args.seed is None:
            args.seed = 0
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # invariant violations from user-supplied numbers
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
