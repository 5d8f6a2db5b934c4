"""End-to-end simulation on one virtual clock.

Within a tick the order is fixed: meter emissions are ingested (and fed to
the leak detector), the gateway flushes on its 8-hour boundaries with the
anomaly gate screening each reading before its transaction is formed, and
the ledger seals. Blocks land on exact 1-second ticks; between bursts the
sealer is idle, so ticks with provably nothing to do (empty pool, finalized
tail) are skipped rather than materialised as empty blocks.

``train_phase`` bootstraps the gate: it replays a clean warm-up horizon
through the same fleet and gateway batching, extracts features, trains both
detectors and calibrates their thresholds. ``run`` then executes a full
scenario and returns a report whose flow-conservation identity
(ingested = on-chain + gate-rejected + reverted + still-buffered)
is checked at the end of every run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from aquachain.config import IdsConfig, SimulationConfig
from aquachain.contract import VillageWaterSystem, events_to_csv_rows
from aquachain.fleet import (
    LabeledEvent,
    generate_fleet,
    generate_fleet_events,
    inject_attacks,
)
from aquachain.gateway import BatchContext, Gateway
from aquachain.ids.detector import Decision, DetectorConfig, HybridDetector
from aquachain.ids.features import Normalizer, RateHistory, TxContext, extract_features
from aquachain.ids.iforest import IsolationForestModel, train_iforest
from aquachain.ids.lstm_ae import LstmAutoencoder, train_autoencoder
from aquachain.leakage import LeakDetector
from aquachain.ledger import Keyring, Ledger, receipts_to_csv_rows, write_chain
from aquachain.simtime import SECONDS_PER_DAY

OWNER_KEY = "owner-0"
TRAIN_SEED_SALT = 0x7A11  # warm-up noise differs from the scenario's


@dataclass
class VerdictRow:
    event_id: int
    meter_id: str
    timestamp: int
    label: str  # "normal" or the attack kind
    scenario_id: str
    decision: str
    reason: str
    score: float


@dataclass
class RunReport:
    """Counters, verdicts and latency samples for one simulated scenario."""

    config_seed: int
    generated: int = 0
    ingested: int = 0
    malformed: int = 0
    ids_rejected: int = 0
    ids_rejected_by_reason: dict[str, int] = field(default_factory=dict)
    on_chain_logged: int = 0
    contract_reverted: int = 0
    still_buffered: int = 0
    blocks_sealed: int = 0
    txs_submitted: int = 0
    leak_alerts: int = 0
    leak_confirmed: int = 0
    latencies: list[float] = field(default_factory=list)
    verdicts: list[VerdictRow] = field(default_factory=list)
    scenarios: list[dict] = field(default_factory=list)
    chain_ok: bool = True

    def flow_conservation_holds(self) -> bool:
        return self.ingested == (self.on_chain_logged + self.ids_rejected
                                 + self.contract_reverted + self.still_buffered)

    def to_dict(self) -> dict:
        return {
            "config_seed": self.config_seed,
            "counters": {
                "generated": self.generated,
                "ingested": self.ingested,
                "malformed": self.malformed,
                "ids_rejected": self.ids_rejected,
                "ids_rejected_by_reason": dict(sorted(
                    self.ids_rejected_by_reason.items())),
                "on_chain_logged": self.on_chain_logged,
                "contract_reverted": self.contract_reverted,
                "still_buffered": self.still_buffered,
                "blocks_sealed": self.blocks_sealed,
                "txs_submitted": self.txs_submitted,
                "leak_alerts": self.leak_alerts,
                "leak_confirmed": self.leak_confirmed,
            },
            "flow_conservation": self.flow_conservation_holds(),
            "chain_ok": self.chain_ok,
            "latency": {
                "samples": len(self.latencies),
                "mean": (sum(self.latencies) / len(self.latencies))
                        if self.latencies else None,
                "max": max(self.latencies) if self.latencies else None,
            },
            "scenarios": self.scenarios,
        }


def _collect_warmup_features(cfg: SimulationConfig):
    """Replay the clean warm-up through the gateway, extracting features.

    Returns the per-meter feature series in arrival order; the warm-up
    stream is the history the deployed gate will have seen when the
    scenario horizon begins.
    """
    configs = generate_fleet(cfg.fleet.n_meters, cfg.fleet.params, seed=cfg.seed)
    horizon = (cfg.origin, cfg.origin + cfg.ids.warmup_days * SECONDS_PER_DAY)
    events = generate_fleet_events(configs, horizon, leaks=(),
                                   seed=cfg.seed ^ TRAIN_SEED_SALT)

    gateway = Gateway(cfg.gateway)
    history = RateHistory()
    per_meter: dict[str, list[np.ndarray]] = {}
    contexts: list[tuple[LabeledEvent, TxContext]] = []

    def collect(event: LabeledEvent, ctx: BatchContext, now: int) -> bool:
        tx_ctx = TxContext(ctx.gas, ctx.batch_len)
        fv = extract_features(event.reading, tx_ctx, history)
        history.observe(event.reading.meter_id, event.reading.timestamp)
        per_meter.setdefault(event.reading.meter_id, []).append(fv.as_array())
        contexts.append((event, tx_ctx))
        return True

    _drive_gateway(events, gateway, cfg.origin, horizon[1],
                   cfg.gateway.flush_interval, classify=collect)
    return per_meter, contexts


def train_phase(cfg: SimulationConfig) -> tuple[IsolationForestModel, LstmAutoencoder]:
    """Clean warm-up run -> features -> trained forest + autoencoder.

    The warm-up horizon must give every meter at least one full window.
    Each meter's first reporting day is a bootstrap artifact (the trailing
    rate ramps up from an empty history), so those vectors are kept for the
    normalization statistics but excluded from model fitting and threshold
    calibration; a primed scenario run never sees that transient again.
    """
    ids_cfg = cfg.ids
    reports_per_day = SECONDS_PER_DAY // cfg.gateway.flush_interval
    if ids_cfg.warmup_days < 1:
        raise ValueError("warm-up horizon must be at least one day")
    if (ids_cfg.warmup_days - 1) * reports_per_day < ids_cfg.sequence_length:
        raise ValueError("warm-up shorter than one full window per meter")

    per_meter, _ = _collect_warmup_features(cfg)
    skip = reports_per_day  # bootstrap day

    steady_vectors = []
    for meter_id in sorted(per_meter):
        steady_vectors.extend(per_meter[meter_id][skip:])
    iforest = train_iforest(np.stack(steady_vectors), n_trees=ids_cfg.n_trees,
                            subsample=ids_cfg.subsample,
                            quantile=ids_cfg.iforest_quantile, seed=cfg.seed)

    N = ids_cfg.sequence_length
    all_windows, steady_windows = [], []
    for meter_id in sorted(per_meter):
        series = per_meter[meter_id]
        for start in range(0, len(series) - N + 1, ids_cfg.sequence_stride):
            window = np.stack(series[start:start + N])
            all_windows.append(window)
            if start >= skip:
                steady_windows.append(window)
    pooled = np.concatenate(all_windows, axis=0)
    autoencoder = train_autoencoder(steady_windows,
                                    hidden_size=ids_cfg.hidden_size,
                                    epochs=ids_cfg.epochs,
                                    learning_rate=ids_cfg.learning_rate,
                                    quantile=ids_cfg.lstm_quantile,
                                    seed=cfg.seed, clip_norm=ids_cfg.clip_norm,
                                    normalization=Normalizer.fit(pooled))
    return iforest, autoencoder


def _drive_gateway(events, gateway: Gateway, start: int, end: int,
                   interval: int, classify=None, connectivity=None,
                   on_ingest=None, on_flush=None) -> None:
    """Shared event loop: ingest on schedule, flush on every boundary."""
    idx = 0
    last_event_t = events[-1].reading.timestamp if events else start
    horizon_end = max(end, last_event_t)
    flush_t = start + interval
    while flush_t <= horizon_end:
        # within a tick: emissions first, then the flush
        while idx < len(events) and events[idx].reading.timestamp <= flush_t:
            ev = events[idx]
            ok = gateway.ingest(ev, ev.reading.timestamp)
            if ok and on_ingest is not None:
                on_ingest(ev)
            idx += 1
        gateway.flush(flush_t, connectivity, classify)
        if on_flush is not None:
            on_flush(flush_t)
        flush_t += interval


@dataclass
class RunOutput:
    report: RunReport
    ledger: Ledger
    gateway: Gateway
    detector: HybridDetector
    leak_detector: LeakDetector
    events: list[LabeledEvent]


def run(cfg: SimulationConfig,
        models: tuple[IsolationForestModel, LstmAutoencoder] | None = None,
        ) -> RunOutput:
    """Execute a full scenario; models are trained first when not supplied."""
    if models is None:
        models = train_phase(cfg)
    iforest, autoencoder = models
    if autoencoder.sequence_length != cfg.ids.sequence_length:
        raise ValueError("configured window length does not match the model")

    configs = generate_fleet(cfg.fleet.n_meters, cfg.fleet.params, seed=cfg.seed)
    events = generate_fleet_events(configs, cfg.horizon, leaks=cfg.leaks,
                                   seed=cfg.seed)
    events = inject_attacks(events, cfg.attacks, seed=cfg.seed)

    keyring = Keyring(network_seed=cfg.seed)
    keyring.register(OWNER_KEY)
    contract = VillageWaterSystem(owner=OWNER_KEY,
                                  authorized_loggers=[cfg.gateway.sender])
    ledger = Ledger(validators=cfg.ledger.validator_ids, keyring=keyring,
                    contract=contract, genesis_time=cfg.run_start,
                    gas_limit=cfg.ledger.gas_limit,
                    block_interval=cfg.ledger.block_interval,
                    finality_depth=cfg.ledger.finality_depth)
    ledger.register_sender(OWNER_KEY)
    gateway = Gateway(cfg.gateway, ledger=ledger)
    detector = HybridDetector(iforest, autoencoder, DetectorConfig(
        sequence_length=cfg.ids.sequence_length,
        purge_rejected_from_window=cfg.ids.purge_rejected_from_window))
    leak_detector = LeakDetector()
    report = RunReport(config_seed=cfg.seed)
    report.generated = len(events)

    if cfg.ids.prime_from_warmup:
        # continue from the warm-up stream: rate history, windows and leak
        # state at the scenario start match what the gate trained on
        _, warm_contexts = _collect_warmup_features(cfg)
        for warm_event, tx_ctx in warm_contexts:
            detector.prime(warm_event, tx_ctx)
            leak_detector.update(warm_event.reading)

    _register_meters(ledger, cfg)
    _pump_ledger(ledger, cfg.run_start)

    def classify(event: LabeledEvent, ctx: BatchContext, now: int) -> bool:
        verdict = detector.classify(event, TxContext(ctx.gas, ctx.batch_len), now)
        report.verdicts.append(VerdictRow(
            event_id=event.event_id if event.event_id is not None else -1,
            meter_id=event.reading.meter_id,
            timestamp=event.reading.timestamp,
            label=event.attack.value if event.attack else "normal",
            scenario_id=event.scenario_id or "",
            decision=verdict.decision.value,
            reason=verdict.reason.value,
            score=verdict.score,
        ))
        return verdict.decision is Decision.ACCEPT

    def on_ingest(event: LabeledEvent) -> None:
        leak_detector.update(event.reading)

    def on_flush(now: int) -> None:
        _pump_ledger(ledger, now)

    _drive_gateway(events, gateway, cfg.run_start, cfg.horizon[1],
                   cfg.gateway.flush_interval, classify=classify,
                   connectivity=cfg.outages, on_ingest=on_ingest,
                   on_flush=on_flush)
    _pump_ledger(ledger, cfg.horizon[1])

    report.ingested = gateway.ingested
    report.malformed = gateway.rejected_invalid
    report.ids_rejected = gateway.rejected_by_gate
    for rec in detector.incidents:
        key = rec.reason.value
        report.ids_rejected_by_reason[key] = report.ids_rejected_by_reason.get(key, 0) + 1
    logged, reverted = _count_log_calls(ledger)
    report.on_chain_logged = logged
    report.contract_reverted = reverted
    report.still_buffered = len(gateway.buffer)
    report.blocks_sealed = len(ledger.blocks)
    report.txs_submitted = gateway.submitted_txs
    report.leak_alerts = len(leak_detector.alerts)
    report.leak_confirmed = sum(1 for a in leak_detector.alerts if a.confirmed)
    report.latencies = [ledger.receipts[t].inclusion_latency
                        for t in ledger.receipt_order]
    report.scenarios = [{
        "scenario_id": s.scenario_id or f"S{i:02d}",
        "kind": s.kind.value,
        "window": list(s.window),
        "count": s.count,
        "targets": sorted(s.target_meters),
    } for i, s in enumerate(cfg.attacks)]
    report.chain_ok = ledger.verify() is None
    return RunOutput(report=report, ledger=ledger, gateway=gateway,
                     detector=detector, leak_detector=leak_detector,
                     events=events)


def _register_meters(ledger: Ledger, cfg: SimulationConfig,
                     calls_per_tx: int = 100) -> None:
    meter_ids = cfg.meter_ids()
    nonce = 0
    for i in range(0, len(meter_ids), calls_per_tx):
        chunk = meter_ids[i:i + calls_per_tx]
        calls = tuple(("registerMeter", (m,)) for m in chunk)
        gas = cfg.gateway.base_gas + cfg.gateway.per_reading_gas * len(chunk)
        nonce += 1
        tx = ledger.make_transaction(OWNER_KEY, calls,
                                     submitted_at=float(cfg.run_start),
                                     gas=gas, nonce=nonce)
        status = ledger.submit_tx(tx)
        if status != "queued":
            raise RuntimeError(f"registration transaction rejected: {status}")


def _count_log_calls(ledger: Ledger) -> tuple[int, int]:
    """(successful, reverted) logWaterData calls across all sealed blocks."""
    logged = reverted = 0
    for block in ledger.blocks:
        for tx in block.transactions:
            receipt = ledger.receipts[tx.tx_id]
            for call, status in zip(tx.calls, receipt.statuses):
                if call[0] != "logWaterData":
                    continue
                if status == "ok":
                    logged += 1
                else:
                    reverted += 1
    return logged, reverted


def _pump_ledger(ledger: Ledger, now: int) -> None:
    """Seal 1-second ticks while there is work; skip provably idle spans."""
    while ledger.has_pending_work():
        last_ts = ledger.blocks[-1].timestamp
        ledger.seal_block(max(last_ts + 1, now))


# -- artifacts ---------------------------------------------------------------

def write_csv(path: Path, rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row))
            fh.write("\n")


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if any(ch in text for ch in ",\"\n"):
        text = '"' + text.replace('"', '""') + '"'
    return text


def verdict_csv_rows(report: RunReport) -> list[list]:
    rows = [["event_id", "meter_id", "timestamp", "label", "scenario_id",
             "decision", "reason", "score"]]
    for v in report.verdicts:
        rows.append([v.event_id, v.meter_id, v.timestamp, v.label,
                     v.scenario_id, v.decision, v.reason, v.score])
    return rows


def block_csv_rows(ledger: Ledger) -> list[list]:
    rows = [["height", "timestamp", "sealer", "n_txs", "gas_used", "block_hash"]]
    for b in ledger.blocks:
        rows.append([b.height, b.timestamp, b.sealer, len(b.transactions),
                     b.gas_used, b.block_hash.hex()])
    return rows


def leak_state_csv_rows(leak_detector: LeakDetector) -> list[list]:
    rows = [["meter_id", "day", "h0", "h1", "h2", "h3", "h4", "h5",
             "flagged", "confirmed"]]
    for meter_id in sorted(leak_detector.states):
        state = leak_detector.states[meter_id]
        confirmed = state.alert.confirmed if state.alert else False
        for day, slots in sorted(state.history.items()):
            filled = [v if v is not None else 0 for v in slots]
            rows.append([meter_id, day, *filled, int(state.frozen), int(confirmed)])
    return rows


def write_run_artifacts(outdir: Path, cfg: SimulationConfig,
                        result: RunOutput) -> None:
    from aquachain.fleet import events_to_jsonl

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    report, ledger = result.report, result.ledger
    with open(outdir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_csv(outdir / "verdicts.csv", verdict_csv_rows(report))
    write_csv(outdir / "receipts.csv", receipts_to_csv_rows(ledger))
    write_csv(outdir / "blocks.csv", block_csv_rows(ledger))
    write_csv(outdir / "gateway_flushes.csv", result.gateway.flush_log_csv_rows())
    write_csv(outdir / "contract_events.csv",
              events_to_csv_rows(ledger.contract.events))
    with open(outdir / "incidents.jsonl", "w", encoding="utf-8") as fh:
        fh.write(result.detector.incident_log_jsonl())
    with open(outdir / "events.jsonl", "w", encoding="utf-8") as fh:
        fh.write(events_to_jsonl(result.events))
    write_chain(ledger.blocks, outdir / "chain.dat")
    write_csv(outdir / "leaks.csv", leak_state_csv_rows(result.leak_detector))


def save_models(outdir: Path, iforest: IsolationForestModel,
                autoencoder: LstmAutoencoder) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, model in (("iforest.json", iforest),
                        ("lstm_autoencoder.json", autoencoder)):
        with open(outdir / name, "w", encoding="utf-8") as fh:
            json.dump(model.to_dict(), fh, sort_keys=True)
            fh.write("\n")


def load_models(model_dir: Path) -> tuple[IsolationForestModel, LstmAutoencoder]:
    model_dir = Path(model_dir)
    with open(model_dir / "iforest.json", "r", encoding="utf-8") as fh:
        iforest = IsolationForestModel.from_dict(json.load(fh))
    with open(model_dir / "lstm_autoencoder.json", "r", encoding="utf-8") as fh:
        autoencoder = LstmAutoencoder.from_dict(json.load(fh))
    return iforest, autoencoder
