"""Scenario configuration: a structured YAML tree mapped onto typed configs.

A scenario file is the unit of reproducibility: it pins the fleet, gateway,
gate, ledger and injected events, and together with a seed fully determines
every output byte. Unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, Optional

import yaml

from aquachain.fleet import AttackKind, AttackScenario, FleetParams, LeakSpec
from aquachain.gateway import ConnectivitySchedule, GatewayConfig
from aquachain.simtime import SECONDS_PER_DAY, SECONDS_PER_HOUR


class ConfigError(Exception):
    """The scenario file is malformed or inconsistent."""


@dataclass(frozen=True)
class FleetSpec:
    n_meters: int = 50
    params: FleetParams = field(default_factory=FleetParams)


@dataclass(frozen=True)
class IdsConfig:
    sequence_length: int = 21
    n_trees: int = 100
    subsample: int = 256
    iforest_quantile: float = 0.995
    lstm_quantile: float = 0.99
    hidden_size: int = 16
    epochs: int = 200
    learning_rate: float = 0.05
    clip_norm: float = 1.0
    purge_rejected_from_window: bool = False
    warmup_days: int = 28
    sequence_stride: int = 1
    # scenario runs continue the warm-up stream (windows and rate history
    # primed), so the gate never re-enters its bootstrap transient
    prime_from_warmup: bool = True


@dataclass(frozen=True)
class LedgerConfig:
    n_validators: int = 3
    gas_limit: int = 15_000_000
    block_interval: int = 1
    finality_depth: int = 2

    @property
    def validator_ids(self) -> tuple[str, ...]:
        return tuple(f"V{i}" for i in range(self.n_validators))


@dataclass(frozen=True)
class SimulationConfig:
    seed: int = 42
    origin: int = 0
    horizon_days: int = 7
    fleet: FleetSpec = field(default_factory=FleetSpec)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    ids: IdsConfig = field(default_factory=IdsConfig)
    ledger: LedgerConfig = field(default_factory=LedgerConfig)
    leaks: tuple[LeakSpec, ...] = ()
    attacks: tuple[AttackScenario, ...] = ()
    outages: ConnectivitySchedule = field(default_factory=ConnectivitySchedule)

    @property
    def run_start(self) -> int:
        """Scenario start: after the warm-up when the stream is continued."""
        if self.ids.prime_from_warmup:
            return self.origin + self.ids.warmup_days * SECONDS_PER_DAY
        return self.origin

    @property
    def horizon(self) -> tuple[int, int]:
        return (self.run_start,
                self.run_start + self.horizon_days * SECONDS_PER_DAY)

    def meter_ids(self) -> list[str]:
        return [f"M{i:03d}" for i in range(self.fleet.n_meters)]

    def validate(self) -> None:
        if self.horizon_days < 1:
            raise ConfigError("horizon_days must be >= 1")
        known = set(self.meter_ids())
        for leak in self.leaks:
            if leak.meter_id not in known:
                raise ConfigError(f"leak references unknown meter {leak.meter_id!r}")
        start, end = self.horizon
        for scenario in self.attacks:
            for m in scenario.target_meters:
                if m not in known:
                    raise ConfigError(
                        f"attack {scenario.kind.value} references unknown meter {m!r}")
            if scenario.window[0] < start or scenario.window[1] > end:
                raise ConfigError(
                    f"attack window {scenario.window} outside the horizon {self.horizon}")


def _take(doc: dict, section: str, allowed: set[str]) -> dict:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    return doc


def _build_fleet(doc: dict) -> FleetSpec:
    _take(doc, "fleet", {"n_meters", "median_volume_m3", "volume_sigma",
                         "noise_scale", "diurnal_jitter", "error_code_rate",
                         "error_code_max"})
    n = int(doc.get("n_meters", 50))
    param_keys = {f.name for f in fields(FleetParams)}
    params = FleetParams(**{k: v for k, v in doc.items() if k in param_keys})
    return FleetSpec(n_meters=n, params=params)


def _build_gateway(doc: dict) -> GatewayConfig:
    _take(doc, "gateway", {"flush_interval_hours", "batch_size", "base_gas",
                           "per_reading_gas", "gas_anomaly_factor",
                           "validate_error_code"})
    kwargs: dict[str, Any] = {}
    if "flush_interval_hours" in doc:
        kwargs["flush_interval"] = int(doc["flush_interval_hours"] * SECONDS_PER_HOUR)
    for key in ("batch_size", "base_gas", "per_reading_gas",
                "gas_anomaly_factor", "validate_error_code"):
        if key in doc:
            kwargs[key] = doc[key]
    return GatewayConfig(**kwargs)


def _build_section(doc: dict, section: str, cls):
    allowed = {f.name for f in fields(cls)}
    _take(doc, section, allowed)
    return cls(**doc)


def _build_leaks(items: list, origin: int) -> tuple[LeakSpec, ...]:
    leaks = []
    for item in items:
        _take(item, "leaks[]", {"meter_id", "start_day", "start", "night_flow"})
        if "start" in item:
            start = int(item["start"])
        elif "start_day" in item:
            start = origin + int(item["start_day"]) * SECONDS_PER_DAY
        else:
            raise ConfigError("leak needs start or start_day")
        leaks.append(LeakSpec(meter_id=item["meter_id"], start=start,
                              night_flow=int(item["night_flow"])))
    return tuple(leaks)


def _build_attacks(items: list, origin: int, meter_ids: list[str]) -> tuple[AttackScenario, ...]:
    scenarios = []
    for i, item in enumerate(items):
        _take(item, "attacks[]", {"kind", "count", "window_days", "window",
                                  "targets", "n_targets", "target_start",
                                  "scenario_id", "spoof_low_fraction",
                                  "tamper_over_limit_fraction"})
        try:
            kind = AttackKind(item["kind"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"attacks[{i}]: bad kind {item.get('kind')!r}") from exc
        if "window" in item:
            window = (int(item["window"][0]), int(item["window"][1]))
        elif "window_days" in item:
            a, b = item["window_days"]
            window = (origin + int(a * SECONDS_PER_DAY), origin + int(b * SECONDS_PER_DAY))
        else:
            raise ConfigError(f"attacks[{i}]: needs window or window_days")
        if "targets" in item:
            targets = tuple(item["targets"])
        elif "n_targets" in item:
            first = int(item.get("target_start", 0))
            targets = tuple(meter_ids[first:first + int(item["n_targets"])])
        else:
            raise ConfigError(f"attacks[{i}]: needs targets or n_targets")
        kwargs = {}
        for key in ("spoof_low_fraction", "tamper_over_limit_fraction"):
            if key in item:
                kwargs[key] = float(item[key])
        scenarios.append(AttackScenario(
            kind=kind, target_meters=targets, window=window,
            count=int(item["count"]),
            scenario_id=item.get("scenario_id", f"S{i:02d}"), **kwargs))
    return tuple(scenarios)


def _build_outages(items: list, origin: int) -> ConnectivitySchedule:
    ranges: list[tuple[int, int]] = []
    for item in items:
        _take(item, "outages[]", {"start", "end", "start_day", "start_hour",
                                  "duration_hours", "repeat_days"})
        if "start" in item and "end" in item:
            ranges.append((int(item["start"]), int(item["end"])))
            continue
        start_day = int(item.get("start_day", 0))
        start_hour = float(item["start_hour"])
        duration = float(item["duration_hours"])
        repeat = int(item.get("repeat_days", 1))
        for d in range(repeat):
            begin = origin + (start_day + d) * SECONDS_PER_DAY \
                + int(start_hour * SECONDS_PER_HOUR)
            ranges.append((begin, begin + int(duration * SECONDS_PER_HOUR)))
    ranges.sort()
    return ConnectivitySchedule(outages=tuple(ranges))


def config_from_dict(doc: dict) -> SimulationConfig:
    if not isinstance(doc, dict):
        raise ConfigError("top-level config must be a mapping")
    _take(doc, "config", {"seed", "origin", "horizon_days", "fleet", "gateway",
                          "ids", "ledger", "leaks", "attacks", "outages"})
    origin = int(doc.get("origin", 0))
    fleet = _build_fleet(dict(doc.get("fleet", {})))
    meter_ids = [f"M{i:03d}" for i in range(fleet.n_meters)]
    try:
        ids_cfg = _build_section(dict(doc.get("ids", {})), "ids", IdsConfig)
        # day offsets in the scenario sections count from the run start
        run_start = origin
        if ids_cfg.prime_from_warmup:
            run_start += ids_cfg.warmup_days * SECONDS_PER_DAY
        cfg = SimulationConfig(
            seed=int(doc.get("seed", 42)),
            origin=origin,
            horizon_days=int(doc.get("horizon_days", 7)),
            fleet=fleet,
            gateway=_build_gateway(dict(doc.get("gateway", {}))),
            ids=ids_cfg,
            ledger=_build_section(dict(doc.get("ledger", {})), "ledger", LedgerConfig),
            leaks=_build_leaks(list(doc.get("leaks", [])), run_start),
            attacks=_build_attacks(list(doc.get("attacks", [])), run_start, meter_ids),
            outages=_build_outages(list(doc.get("outages", [])), run_start),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def load_config(path) -> SimulationConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
    return config_from_dict(doc or {})
