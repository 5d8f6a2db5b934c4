"""Synthetic meter fleet: consumption profiles, telemetry, leaks and attacks.

Generates deterministic telemetry for a fleet of water meters reporting on a
fixed interval (8 hours, three reports per day by default). Each reading
carries an hourly breakdown of the reporting window so that night-flow leak
logic can run downstream, while only the total is stored on-chain. Leaks add
a constant flow to every hour from their start; attack scenarios replay,
spoof or tamper with readings and tag transactions for inflated gas, always
with exact per-kind counts and ground-truth labels.

All generation is pure over explicit seeds: the same inputs produce the same
byte-for-byte event stream, and a leak-free and leak-injected run with the
same seed differ only by the injected constant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from aquachain.simtime import (
    HOURS_PER_DAY,
    MONTHS_PER_YEAR,
    SECONDS_PER_DAY,
    SECONDS_PER_HOUR,
    hour_of_day,
    month_index,
)

# Relative hourly demand of a typical rural household: silent night,
# morning and evening peaks. Night hours (00-06) are zero so that a
# healthy meter shows no night flow at all.
DEFAULT_DIURNAL_WEIGHTS = (
    0.0, 0.0, 0.0, 0.0, 0.0, 0.0,       # 00-06: night, no draw
    2.0, 4.0, 3.0,                      # 06-09: morning peak
    1.5, 1.0, 1.0, 1.5, 1.0, 0.5, 0.5,  # 09-16: daytime
    1.0, 2.0, 3.0, 4.0, 3.0,            # 16-21: evening peak
    2.0, 1.0, 0.5,                      # 21-24: wind-down
)

# Relative monthly demand, peaking in summer.
DEFAULT_SEASONAL_WEIGHTS = (
    0.80, 0.80, 0.90, 1.00, 1.10, 1.25,
    1.40, 1.35, 1.15, 1.00, 0.90, 0.85,
)

DEFAULT_REPORTING_INTERVAL = 8 * SECONDS_PER_HOUR
DEFAULT_REPORTS_PER_DAY = 3


class AttackKind(str, Enum):
    REPLAY = "replay"
    SPOOFED_CONSUMPTION = "spoofed_consumption"
    TAMPERED_ERROR_CODE = "tampered_error_code"
    GAS_ANOMALY = "gas_anomaly"


@dataclass(frozen=True)
class ConsumptionProfile:
    """Relative demand shape and scale for one meter."""

    diurnal_weights: tuple[float, ...] = DEFAULT_DIURNAL_WEIGHTS
    seasonal_weights: tuple[float, ...] = DEFAULT_SEASONAL_WEIGHTS
    median_daily_volume: float = 0.45  # cubic metres per day
    noise_scale: float = 0.2
    error_code_rate: float = 0.3  # fraction of readings with a nonzero code
    error_code_max: int = 3

    def __post_init__(self):
        if len(self.diurnal_weights) != HOURS_PER_DAY:
            raise ValueError("diurnal_weights must have 24 entries")
        if len(self.seasonal_weights) != MONTHS_PER_YEAR:
            raise ValueError("seasonal_weights must have 12 entries")
        if any(w < 0 for w in self.diurnal_weights + self.seasonal_weights):
            raise ValueError("demand weights must be non-negative")
        if not any(w > 0 for w in self.diurnal_weights):
            raise ValueError("at least one diurnal weight must be positive")
        if not 0 <= self.noise_scale < 1:
            raise ValueError("noise_scale must lie in [0, 1)")
        if not 0 <= self.error_code_rate <= 1:
            raise ValueError("error_code_rate must lie in [0, 1]")
        if not 0 <= self.error_code_max <= 100:
            raise ValueError("error_code_max must lie in [0, 100]")


@dataclass(frozen=True)
class MeterConfig:
    meter_id: str
    profile: ConsumptionProfile = field(default_factory=ConsumptionProfile)
    reporting_interval: int = DEFAULT_REPORTING_INTERVAL
    reports_per_day: int = DEFAULT_REPORTS_PER_DAY

    def __post_init__(self):
        if not self.meter_id:
            raise ValueError("meter_id must be nonempty")
        if self.reporting_interval <= 0 or self.reporting_interval % SECONDS_PER_HOUR:
            raise ValueError("reporting_interval must be a positive whole number of hours")
        if self.reporting_interval * self.reports_per_day != SECONDS_PER_DAY:
            raise ValueError("reporting_interval x reports_per_day must cover 24 hours")

    @property
    def window_hours(self) -> int:
        return self.reporting_interval // SECONDS_PER_HOUR


@dataclass(frozen=True)
class MeterReading:
    """One reported record: totals plus the hourly breakdown of its window.

    ``timestamp`` marks the end of the reporting window; slot ``j`` of
    ``hourly_breakdown`` covers ``[timestamp - W + j*3600, ...)`` where ``W``
    is the window length in seconds.
    """

    meter_id: str
    timestamp: int
    water_usage: int  # litres
    error_code: int
    hourly_breakdown: tuple[int, ...]

    def validate(self, require_code_in_range: bool = True) -> None:
        if not self.meter_id:
            raise ValueError("meter_id must be nonempty")
        if self.water_usage < 0 or any(h < 0 for h in self.hourly_breakdown):
            raise ValueError("water volumes must be non-negative")
        if sum(self.hourly_breakdown) != self.water_usage:
            raise ValueError("hourly_breakdown must sum to water_usage")
        if self.error_code < 0:
            raise ValueError("error_code must be non-negative")
        if require_code_in_range and self.error_code > 100:
            raise ValueError("error_code must lie in [0, 100]")

    def slot_start(self, slot: int) -> int:
        window = len(self.hourly_breakdown) * SECONDS_PER_HOUR
        return self.timestamp - window + slot * SECONDS_PER_HOUR


@dataclass(frozen=True)
class LeakSpec:
    """Constant extra flow (litres/hour) on one meter from ``start`` onwards."""

    meter_id: str
    start: int
    night_flow: int

    def __post_init__(self):
        if self.night_flow <= 0:
            raise ValueError("night_flow must be positive")


@dataclass(frozen=True)
class AttackScenario:
    kind: AttackKind
    target_meters: tuple[str, ...]
    window: tuple[int, int]
    count: int
    scenario_id: Optional[str] = None
    # SPOOFED_CONSUMPTION only: share of events in the repeated-low mode
    # (daytime usage zeroed); the rest get a x5..x20 spike.
    spoof_low_fraction: float = 0.5
    # TAMPERED_ERROR_CODE only: share of codes pushed above the contract's
    # 100 cap (those revert on-chain even if they slip past the gate).
    tamper_over_limit_fraction: float = 0.2

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.window[1] <= self.window[0]:
            raise ValueError("window must be a nonempty timestamp range")


@dataclass(frozen=True)
class LabeledEvent:
    """A reading plus ground truth for evaluation.

    ``attack is None`` means the reading is genuine. ``inflate_gas`` is the
    mechanical side of a gas-anomaly scenario: the gateway multiplies the
    per-reading gas of tagged events by its anomaly factor.
    """

    reading: MeterReading
    attack: Optional[AttackKind] = None
    scenario_id: Optional[str] = None
    inflate_gas: bool = False
    event_id: Optional[int] = None

    @property
    def is_normal(self) -> bool:
        return self.attack is None


@dataclass(frozen=True)
class FleetParams:
    """Distribution config for :func:`generate_fleet`."""

    median_volume_m3: float = 0.45
    volume_sigma: float = 0.35  # lognormal sigma of per-meter scale
    noise_scale: float = 0.2
    diurnal_jitter: float = 0.2
    error_code_rate: float = 0.3
    error_code_max: int = 3


def generate_fleet(n_meters: int, params: FleetParams | None = None,
                   seed: int = 0) -> list[MeterConfig]:
    """Create ``n_meters`` meter configs with ids M000, M001, ...

    Per-meter daily volume is lognormal around the base median and the
    diurnal shape gets a small multiplicative jitter per hour; night hours
    stay exactly zero so healthy meters never show night flow.
    """
    if n_meters < 1:
        raise ValueError("n_meters must be >= 1")
    params = params or FleetParams()
    rng = np.random.default_rng([seed, 0xF1EE7])
    configs = []
    for i in range(n_meters):
        scale = float(rng.lognormal(mean=0.0, sigma=params.volume_sigma))
        jitter = rng.uniform(1.0 - params.diurnal_jitter,
                             1.0 + params.diurnal_jitter, size=HOURS_PER_DAY)
        diurnal = tuple(
            float(w * j) if w > 0 else 0.0
            for w, j in zip(DEFAULT_DIURNAL_WEIGHTS, jitter)
        )
        profile = ConsumptionProfile(
            diurnal_weights=diurnal,
            seasonal_weights=DEFAULT_SEASONAL_WEIGHTS,
            median_daily_volume=params.median_volume_m3 * scale,
            noise_scale=params.noise_scale,
            error_code_rate=params.error_code_rate,
            error_code_max=params.error_code_max,
        )
        configs.append(MeterConfig(meter_id=f"M{i:03d}", profile=profile))
    return configs


def generate_readings(config: MeterConfig, horizon: tuple[int, int],
                      leaks: Sequence[LeakSpec] = (), seed: int = 0) -> list[MeterReading]:
    """Produce one meter's readings over ``horizon`` (half-open, end inclusive
    for reports landing exactly on the horizon end).

    Reports land at exact multiples of the reporting interval after the
    horizon start. Expected flow in an hour is the daily volume split by the
    diurnal weights and scaled by the month's seasonal factor, with
    multiplicative uniform noise. Leak flow is added after rounding, so a
    leak-free and a leak-injected run with the same seed differ by exactly
    the injected litres.
    """
    start, end = horizon
    if end <= start:
        raise ValueError("horizon must be a nonempty timestamp range")
    for leak in leaks:
        if leak.meter_id != config.meter_id:
            raise ValueError(
                f"leak targets {leak.meter_id!r} but meter is {config.meter_id!r}")

    profile = config.profile
    rng = np.random.default_rng([seed, _stable_id_hash(config.meter_id)])
    diurnal_sum = sum(profile.diurnal_weights)
    seasonal_mean = sum(profile.seasonal_weights) / MONTHS_PER_YEAR
    daily_litres = profile.median_daily_volume * 1000.0

    readings = []
    ts = start + config.reporting_interval
    while ts <= end:
        slots = []
        for j in range(config.window_hours):
            slot_start = ts - config.reporting_interval + j * SECONDS_PER_HOUR
            weight = profile.diurnal_weights[hour_of_day(slot_start)]
            season = profile.seasonal_weights[month_index(slot_start)] / seasonal_mean
            expected = daily_litres * (weight / diurnal_sum) * season
            noise = rng.uniform(1.0 - profile.noise_scale, 1.0 + profile.noise_scale)
            value = int(round(expected * noise))
            # Leaks add constant flow after rounding and consume no draws,
            # keeping the noise stream identical across leak variants.
            for leak in leaks:
                if slot_start >= leak.start:
                    value += leak.night_flow
            slots.append(value)
        if rng.random() < profile.error_code_rate and profile.error_code_max > 0:
            error_code = int(rng.integers(1, profile.error_code_max + 1))
        else:
            error_code = 0
        reading = MeterReading(
            meter_id=config.meter_id,
            timestamp=ts,
            water_usage=sum(slots),
            error_code=error_code,
            hourly_breakdown=tuple(slots),
        )
        reading.validate()
        readings.append(reading)
        ts += config.reporting_interval
    return readings


def generate_fleet_events(configs: Sequence[MeterConfig], horizon: tuple[int, int],
                          leaks: Sequence[LeakSpec] = (), seed: int = 0) -> list[LabeledEvent]:
    """Readings for a whole fleet as Normal-labeled events sorted by time."""
    by_meter = {}
    for leak in leaks:
        by_meter.setdefault(leak.meter_id, []).append(leak)
    unknown = set(by_meter) - {c.meter_id for c in configs}
    if unknown:
        raise ValueError(f"leaks reference unknown meters: {sorted(unknown)}")
    events = []
    for config in configs:
        for reading in generate_readings(config, horizon,
                                         by_meter.get(config.meter_id, ()), seed):
            events.append(LabeledEvent(reading=reading))
    events.sort(key=lambda e: (e.reading.timestamp, e.reading.meter_id))
    return [replace(ev, event_id=i) for i, ev in enumerate(events)]


def inject_attacks(events: Sequence[LabeledEvent], scenarios: Sequence[AttackScenario],
                   seed: int = 0) -> list[LabeledEvent]:
    """Apply attack scenarios to a time-sorted event stream.

    Replays add fresh events duplicating earlier genuine payloads at new
    timestamps; the other kinds convert existing Normal events in the
    scenario window. Exactly ``count`` events per scenario end up labeled
    with its kind; an event is never claimed by two scenarios. Events that
    stay Normal are returned untouched.
    """
    timestamps = [e.reading.timestamp for e in events]
    if any(b < a for a, b in zip(timestamps, timestamps[1:])):
        raise ValueError("events must be sorted by timestamp")

    out: list[Optional[LabeledEvent]] = list(events)
    added: list[LabeledEvent] = []
    claimed: set[int] = set()
    rng = np.random.default_rng([seed, 0xA77AC5])

    for s_idx, scenario in enumerate(scenarios):
        if not scenario.target_meters:
            raise ValueError("scenario target set must be nonempty")
        sid = scenario.scenario_id or f"S{s_idx:02d}"
        targets = set(scenario.target_meters)
        if scenario.kind is AttackKind.REPLAY:
            added.extend(_inject_replays(out, scenario, sid, targets, rng))
            continue

        eligible = [i for i, ev in enumerate(out)
                    if ev.is_normal and i not in claimed
                    and ev.reading.meter_id in targets
                    and scenario.window[0] <= ev.reading.timestamp < scenario.window[1]]
        if len(eligible) < scenario.count:
            raise ValueError(
                f"scenario {sid}: only {len(eligible)} eligible events for count {scenario.count}")

        if scenario.kind is AttackKind.SPOOFED_CONSUMPTION:
            chosen_pairs = _spoof_events(out, eligible, scenario, sid, rng)
        elif scenario.kind is AttackKind.TAMPERED_ERROR_CODE:
            chosen_pairs = _tamper_events(out, eligible, scenario, sid, rng)
        elif scenario.kind is AttackKind.GAS_ANOMALY:
            picks = rng.choice(len(eligible), size=scenario.count, replace=False)
            chosen_pairs = [
                (eligible[int(p)],
                 replace(out[eligible[int(p)]], attack=AttackKind.GAS_ANOMALY,
                         scenario_id=sid, inflate_gas=True))
                for p in sorted(picks)
            ]
        else:
            raise ValueError(f"unknown attack kind: {scenario.kind}")
        for idx, new_ev in chosen_pairs:
            out[idx] = new_ev
            claimed.add(idx)

    merged = [ev for ev in out if ev is not None] + added
    merged.sort(key=lambda e: (e.reading.timestamp, e.reading.meter_id))
    return [replace(ev, event_id=i) for i, ev in enumerate(merged)]


def _inject_replays(events, scenario, sid, targets, rng):
    """Duplicate earlier genuine readings at fresh timestamps in the window."""
    sources = [ev for ev in events if ev.is_normal and ev.reading.meter_id in targets]
    if not sources:
        raise ValueError(f"scenario {sid}: no genuine readings to replay")
    injected = []
    lo, hi = scenario.window
    for _ in range(scenario.count):
        for _attempt in range(64):
            t_new = int(rng.integers(lo, hi))
            pool = [ev for ev in sources if ev.reading.timestamp < t_new]
            if pool:
                break
        else:
            raise ValueError(f"scenario {sid}: no reading precedes the replay window")
        src = pool[int(rng.integers(0, len(pool)))]
        injected.append(LabeledEvent(
            reading=replace(src.reading, timestamp=t_new),
            attack=AttackKind.REPLAY,
            scenario_id=sid,
        ))
    return injected


def _spoof_events(events, eligible, scenario, sid, rng):
    """Split the quota into repeated-low runs and isolated spikes.

    Low mode mimics suppressed reporting: a consecutive run of readings per
    target meter loses all daytime flow (night hours kept), spreading the
    quota evenly over the targets. Spike mode multiplies every hour by a
    factor in [5, 20].
    """
    n_low = int(round(scenario.count * scenario.spoof_low_fraction))
    n_spike = scenario.count - n_low
    by_meter: dict[str, list[int]] = {}
    for i in eligible:
        by_meter.setdefault(events[i].reading.meter_id, []).append(i)
    meters = sorted(by_meter)
    rng.shuffle(meters)
    run_length = -(-n_low // len(meters)) if n_low else 0  # ceil

    pairs = []
    used = set()
    remaining_low = n_low
    for meter in meters:
        if remaining_low <= 0:
            break
        candidates = by_meter[meter]  # indices already time-ordered
        take = min(run_length, remaining_low, len(candidates))
        offset = int(rng.integers(0, len(candidates) - take + 1))
        for idx in candidates[offset:offset + take]:
            reading = events[idx].reading
            slots = tuple(
                0 if 6 <= hour_of_day(reading.slot_start(j)) else value
                for j, value in enumerate(reading.hourly_breakdown)
            )
            new_reading = replace(reading, hourly_breakdown=slots, water_usage=sum(slots))
            pairs.append((idx, replace(events[idx], reading=new_reading,
                                       attack=AttackKind.SPOOFED_CONSUMPTION,
                                       scenario_id=sid)))
            used.add(idx)
        remaining_low -= take
    if remaining_low > 0:
        raise ValueError(f"scenario {sid}: not enough eligible events for low mode")

    spike_pool = [i for i in eligible if i not in used]
    if len(spike_pool) < n_spike:
        raise ValueError(f"scenario {sid}: not enough eligible events for spike mode")
    picks = rng.choice(len(spike_pool), size=n_spike, replace=False)
    for p in sorted(picks):
        idx = spike_pool[int(p)]
        reading = events[idx].reading
        factor = float(rng.uniform(5.0, 20.0))
        slots = tuple(int(round(v * factor)) for v in reading.hourly_breakdown)
        new_reading = replace(reading, hourly_breakdown=slots, water_usage=sum(slots))
        pairs.append((idx, replace(events[idx], reading=new_reading,
                                   attack=AttackKind.SPOOFED_CONSUMPTION,
                                   scenario_id=sid)))
    return pairs


def _tamper_events(events, eligible, scenario, sid, rng):
    """Push error codes outside the fleet's historical range."""
    picks = sorted(int(p) for p in
                   rng.choice(len(eligible), size=scenario.count, replace=False))
    n_over = int(round(scenario.count * scenario.tamper_over_limit_fraction))
    pairs = []
    for k, p in enumerate(picks):
        idx = eligible[p]
        if k < n_over:
            code = int(rng.integers(101, 151))
        else:
            code = int(rng.integers(50, 101))
        new_reading = replace(events[idx].reading, error_code=code)
        pairs.append((idx, replace(events[idx], reading=new_reading,
                                   attack=AttackKind.TAMPERED_ERROR_CODE,
                                   scenario_id=sid)))
    return pairs


def events_to_jsonl(events: Iterable[LabeledEvent]) -> str:
    """Line-delimited export with ground-truth labels."""
    lines = []
    for ev in events:
        r = ev.reading
        lines.append(json.dumps({
            "meter_id": r.meter_id,
            "timestamp": r.timestamp,
            "water_usage": r.water_usage,
            "error_code": r.error_code,
            "hourly_breakdown": list(r.hourly_breakdown),
            "label": ev.attack.value if ev.attack else "normal",
            "scenario_id": ev.scenario_id,
        }, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def events_from_jsonl(text: str) -> list[LabeledEvent]:
    events = []
    for i, line in enumerate(filter(None, text.splitlines())):
        rec = json.loads(line)
        label = rec["label"]
        events.append(LabeledEvent(
            reading=MeterReading(
                meter_id=rec["meter_id"],
                timestamp=rec["timestamp"],
                water_usage=rec["water_usage"],
                error_code=rec["error_code"],
                hourly_breakdown=tuple(rec["hourly_breakdown"]),
            ),
            attack=None if label == "normal" else AttackKind(label),
            scenario_id=rec.get("scenario_id"),
            event_id=i,
        ))
    return events


def _stable_id_hash(meter_id: str) -> int:
    # Stable across processes (unlike hash()) so seeded streams reproduce.
    h = 0
    for ch in meter_id:
        h = (h * 131 + ord(ch)) % (2**31 - 1)
    return h
