"""Operator command line.

Subcommands: gen-fleet, train, simulate, bench-throughput, bench-scale,
tamper-test, eval-ids, export-plots, verify-chain. Every command takes
--seed and --config where meaningful, writes all artifacts under --out,
and leaves a manifest (config hash, seed, version) sufficient to reproduce
the run. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import aquachain
from aquachain import bench
from aquachain.config import ConfigError, SimulationConfig, load_config
from aquachain.fleet import (
    events_from_jsonl,
    events_to_jsonl,
    generate_fleet,
    generate_fleet_events,
)
from aquachain.ledger import ChainDecodeError, Keyring, read_chain, verify_chain
from aquachain.pipeline import (
    RunReport,
    VerdictRow,
    load_models,
    run,
    save_models,
    train_phase,
    write_csv,
    write_run_artifacts,
)


def _fail(message: str, code: int = 1) -> int:
    print(f"error: {code}: {message}", file=sys.stderr)
    return code


def _write_manifest(outdir: Path, args, config_path: Path | None) -> None:
    manifest = {
        "tool": "aquachain",
        "version": aquachain.__version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "config_sha256": hashlib.sha256(config_path.read_bytes()).hexdigest()
                         if config_path else None,
    }
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_cfg(args) -> SimulationConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
        cfg.validate()
    return cfg


def cmd_gen_fleet(args) -> int:
    outdir = Path(args.out)
    cfg = _load_cfg(args)
    configs = generate_fleet(cfg.fleet.n_meters, cfg.fleet.params, seed=cfg.seed)
    outdir.mkdir(parents=True, exist_ok=True)
    doc = [{
        "meter_id": c.meter_id,
        "reporting_interval": c.reporting_interval,
        "reports_per_day": c.reports_per_day,
        "median_daily_volume": c.profile.median_daily_volume,
        "diurnal_weights": list(c.profile.diurnal_weights),
        "seasonal_weights": list(c.profile.seasonal_weights),
        "noise_scale": c.profile.noise_scale,
    } for c in configs]
    with open(outdir / "fleet.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    events = generate_fleet_events(configs, cfg.horizon, leaks=cfg.leaks,
                                   seed=cfg.seed)
    with open(outdir / "events.jsonl", "w", encoding="utf-8") as fh:
        fh.write(events_to_jsonl(events))
    _write_manifest(outdir, args, Path(args.config))
    print(f"wrote {len(configs)} meters and {len(events)} events to {outdir}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    outdir = Path(args.out)
    iforest, autoencoder = train_phase(cfg)
    save_models(outdir, iforest, autoencoder)
    _write_manifest(outdir, args, Path(args.config))
    print(f"trained models saved to {outdir} "
          f"(theta={iforest.theta:.6f}, tau={autoencoder.tau:.6f})")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    outdir = Path(args.out)
    models = load_models(Path(args.models)) if args.models else None
    result = run(cfg, models=models)
    report = result.report
    write_run_artifacts(outdir, cfg, result)
    _write_manifest(outdir, args, Path(args.config))
    if not report.flow_conservation_holds():
        return _fail("flow conservation violated")
    if not report.chain_ok:
        return _fail("sealed chain failed verification")
    print(f"simulated {report.generated} events: "
          f"{report.on_chain_logged} on-chain, {report.ids_rejected} gated, "
          f"{report.contract_reverted} reverted, {report.still_buffered} buffered")
    return 0


def cmd_bench_throughput(args) -> int:
    outdir = Path(args.out)
    rows = bench.run_throughput(batch_sizes=args.batch_sizes,
                                n_meters=args.meters,
                                offered_tps=args.offered_tps,
                                duration_s=args.duration,
                                seed=args.seed if args.seed is not None else 42)
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv(outdir / "table2.csv", bench.throughput_csv_rows(rows))
    _write_manifest(outdir, args, Path(args.config) if args.config else None)
    for row in rows:
        print(f"batch={row.batch_size:>3} tps={row.throughput_tps:.2f} "
              f"mean={row.mean_latency_s:.3f}s max={row.max_latency_s:.3f}s")
    return 0


def cmd_bench_scale(args) -> int:
    outdir = Path(args.out)
    counts = args.meter_counts or list(range(100, 1001, 100))
    rows = bench.run_scalability(meter_counts=counts, batch_size=args.batch_size,
                                 duration_s=args.duration,
                                 seed=args.seed if args.seed is not None else 42)
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv(outdir / "scalability.csv", bench.scalability_csv_rows(rows))
    _write_manifest(outdir, args, Path(args.config) if args.config else None)
    for row in rows:
        print(f"meters={row['n_meters']:>5} tps={row['throughput_tps']:.2f} "
              f"mean={row['mean_latency_s']:.3f}s dropped={row['dropped']}")
    return 0


def cmd_tamper_test(args) -> int:
    outdir = Path(args.out)
    try:
        blocks = read_chain(args.chain)
    except (ChainDecodeError, OSError) as exc:
        return _fail(f"cannot read chain: {exc}")
    seed = args.seed if args.seed is not None else 42
    ledger = _ledger_from_blocks(blocks, seed)
    if ledger is None:
        return _fail("chain does not verify against the derived validator set")
    results = bench.run_tamper_suite(ledger, trials=args.trials, seed=seed)
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv(outdir / "table3.csv", bench.tamper_csv_rows(results))
    _write_manifest(outdir, args, None)
    ok = all(r.passed for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.attack}: "
              f"{r.caught}/{r.trials} {r.result}")
    return 0 if ok else _fail("tamper suite found misses")


def _ledger_from_blocks(blocks, seed):
    """Rebuild a live ledger around a decoded chain (same seeded keyring).

    The validator set is recovered from the sealers in height order; the
    round-robin schedule means the first distinct sealers are the set.
    """
    from aquachain.contract import VillageWaterSystem
    from aquachain.ledger import replay_chain

    keyring = Keyring(network_seed=seed)
    keyring.register("owner-0")
    authorities = []
    for b in blocks:
        if b.sealer not in authorities:
            authorities.append(b.sealer)
    for v in authorities:
        if not keyring.knows(v):
            keyring.register(v)
    if not authorities or verify_chain(blocks, authorities, keyring) is not None:
        return None
    contract = replay_chain(
        blocks, lambda: VillageWaterSystem(owner="owner-0",
                                           authorized_loggers=["gateway-0"]))
    return Ledger.from_blocks(blocks, keyring, authorities, contract)


def cmd_eval_ids(args) -> int:
    rundir = Path(args.run)
    outdir = Path(args.out)
    try:
        report = _report_from_run_dir(rundir)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        return _fail(f"cannot load run artifacts: {exc}")
    metrics = bench.eval_ids(report)
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv(outdir / "table1.csv", metrics.csv_rows())
    _write_manifest(outdir, args, None)
    for km in metrics.per_kind:
        print(f"{km.kind}: injected={km.injected} detected={km.detected} "
              f"P={km.precision:.3f} R={km.recall:.3f} F1={km.f1:.3f}")
    if metrics.overall:
        o = metrics.overall
        print(f"overall: P={o.precision:.3f} R={o.recall:.3f} F1={o.f1:.3f} "
              f"FPR={metrics.false_positive_rate:.4f}")
    return 0


def _report_from_run_dir(rundir: Path) -> RunReport:
    with open(rundir / "report.json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    report = RunReport(config_seed=doc.get("config_seed", 0))
    report.scenarios = doc.get("scenarios", [])
    with open(rundir / "verdicts.csv", "r", encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            report.verdicts.append(VerdictRow(
                event_id=int(rec["event_id"]),
                meter_id=rec["meter_id"],
                timestamp=int(rec["timestamp"]),
                label=rec["label"],
                scenario_id=rec["scenario_id"],
                decision=rec["decision"],
                reason=rec["reason"],
                score=float(rec["score"]),
            ))
    return report


def cmd_export_plots(args) -> int:
    rundir = Path(args.run)
    outdir = Path(args.out)
    try:
        report = _report_from_run_dir(rundir)
        with open(rundir / "events.jsonl", "r", encoding="utf-8") as fh:
            events = events_from_jsonl(fh.read())
        with open(rundir / "leaks.csv", "r", encoding="utf-8", newline="") as fh:
            leak_rows = [row for row in csv.reader(fh)]
    except OSError as exc:
        return _fail(f"cannot load run artifacts: {exc}")
    metrics = bench.eval_ids(report) if report.scenarios else None
    bench.write_plot_data(outdir, events, report, leak_rows, metrics)
    _write_manifest(outdir, args, None)
    print(f"plot data written to {outdir}")
    return 0


def cmd_verify_chain(args) -> int:
    try:
        blocks = read_chain(args.chain)
    except ChainDecodeError as exc:
        return _fail(f"chain corrupt: {exc}")
    except OSError as exc:
        return _fail(f"cannot read chain: {exc}")
    seed = args.seed if args.seed is not None else 42
    ledger = _ledger_from_blocks(blocks, seed)
    if ledger is None:
        return _fail("chain corrupt: verification failed")
    print(f"ok ({len(blocks)} blocks)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aquachain",
        description="secure water-telemetry pipeline simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="scenario YAML file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-fleet", help="generate fleet configs and events")
    common(p)
    p.set_defaults(fn=cmd_gen_fleet)

    p = sub.add_parser("train", help="train the anomaly gate on a clean warm-up")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("simulate", help="run a full scenario")
    common(p)
    p.add_argument("--models", default=None,
                   help="directory with pre-trained models (else train first)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("bench-throughput", help="throughput/latency vs batch size")
    common(p, config_required=False)
    p.add_argument("--batch-sizes", type=int, nargs="+", default=[1, 5, 10, 20])
    p.add_argument("--meters", type=int, default=400)
    p.add_argument("--offered-tps", type=float, default=30.0)
    p.add_argument("--duration", type=int, default=120)
    p.set_defaults(fn=cmd_bench_throughput)

    p = sub.add_parser("bench-scale", help="scalability sweep over meter counts")
    common(p, config_required=False)
    p.add_argument("--meter-counts", type=int, nargs="+", default=None)
    p.add_argument("--batch-size", type=int, default=5)
    p.add_argument("--duration", type=int, default=60)
    p.set_defaults(fn=cmd_bench_scale)

    p = sub.add_parser("tamper-test", help="tamper-resistance suite on a chain")
    p.add_argument("--chain", required=True, help="chain.dat file")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=None,
                   help="network seed the chain was produced with (default 42)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_tamper_test)

    p = sub.add_parser("eval-ids", help="detection metrics from a run directory")
    p.add_argument("--run", required=True, help="simulate output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval_ids)

    p = sub.add_parser("export-plots", help="emit plot-data CSVs from a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_plots)

    p = sub.add_parser("verify-chain", help="verify a persisted chain file")
    p.add_argument("--chain", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="network seed the chain was produced with (default 42)")
    p.set_defaults(fn=cmd_verify_chain)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(f"config: {exc}")
    except (ValueError, FileNotFoundError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
