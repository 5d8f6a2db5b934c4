"""Rule-based night-flow leak detection.

A meter is suspected of leaking when all six night hours (00:00-06:00,
half-open) carry flow on consecutive days: the counter increments on an
all-positive night, resets on any night with a zero hour, and at two the
meter freezes and a provisional alert is raised. The next all-positive
night confirms the alert. Freezing is sticky; only an explicit operator
reset clears it.

State is per meter and strictly sequential per meter. Night data is
accumulated hour-slot by hour-slot from whatever reports cover it, so the
logic does not depend on reporting windows being aligned to midnight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from aquachain.fleet import MeterReading
from aquachain.simtime import (
    NIGHT_END_HOUR,
    NIGHT_HOURS,
    SECONDS_PER_HOUR,
    day_index,
    hour_of_day,
)

HISTORY_DAYS = 35  # bounded night-data buffer per meter


@dataclass
class LeakAlert:
    meter_id: str
    detected_on: int  # simulated day index of the second positive night
    confirmed: bool = False


@dataclass
class LeakState:
    meter_id: str
    consecutive_positive_nights: int = 0
    frozen: bool = False
    # day index -> list of 6 night-hour values (None until observed)
    history: dict[int, list[Optional[int]]] = field(default_factory=dict)
    alert: Optional[LeakAlert] = None
    last_timestamp: Optional[int] = None
    _evaluated_through: int = -1


class LeakDetector:
    """Streaming per-meter leak state machines."""

    def __init__(self):
        self.states: dict[str, LeakState] = {}
        self.alerts: list[LeakAlert] = []

    def update(self, reading: MeterReading) -> Optional[LeakAlert]:
        state = self.states.setdefault(reading.meter_id,
                                       LeakState(meter_id=reading.meter_id))
        alert = update(state, reading)
        if alert is not None and not alert.confirmed:
            self.alerts.append(alert)
        return alert

    def reset(self, meter_id: str) -> None:
        """Operator exit from the frozen state."""
        state = self.states.get(meter_id)
        if state is None:
            return
        state.frozen = False
        state.consecutive_positive_nights = 0
        state.alert = None


def update(state: LeakState, reading: MeterReading) -> Optional[LeakAlert]:
    """Feed one reading into a meter's leak state machine.

    Returns the alert when it is first raised (provisional, at the second
    consecutive positive night) and again when the next positive night
    confirms it; otherwise ``None``.
    """
    if reading.meter_id != state.meter_id:
        raise ValueError(
            f"reading for {reading.meter_id!r} fed to state of {state.meter_id!r}")
    if state.last_timestamp is not None and reading.timestamp < state.last_timestamp:
        raise ValueError("readings must arrive in timestamp order")
    state.last_timestamp = reading.timestamp

    completed = _record_night_slots(state, reading)
    emitted = None
    for day in completed:
        result = _evaluate_night(state, day)
        if result is not None:
            emitted = result
    return emitted


def _record_night_slots(state: LeakState, reading: MeterReading) -> list[int]:
    """Store night-hour values carried by this reading; return days completed."""
    completed = []
    for j, value in enumerate(reading.hourly_breakdown):
        slot_start = reading.slot_start(j)
        hod = hour_of_day(slot_start)
        if hod >= NIGHT_END_HOUR:
            continue
        day = day_index(slot_start)
        slots = state.history.setdefault(day, [None] * NIGHT_HOURS)
        slots[hod] = value  # latest observation wins
        if all(v is not None for v in slots) and day > state._evaluated_through:
            completed.append(day)
    # keep the buffer bounded
    if len(state.history) > HISTORY_DAYS:
        for day in sorted(state.history)[:len(state.history) - HISTORY_DAYS]:
            del state.history[day]
    return sorted(set(completed))


def _evaluate_night(state: LeakState, day: int) -> Optional[LeakAlert]:
    state._evaluated_through = day
    positive = all(v is not None and v > 0 for v in state.history[day])
    if not positive:
        if not state.frozen:
            state.consecutive_positive_nights = 0
        return None

    if state.frozen:
        if state.alert is not None and not state.alert.confirmed:
            state.alert.confirmed = True
            return state.alert
        return None  # already confirmed: never duplicate

    state.consecutive_positive_nights += 1
    if state.consecutive_positive_nights >= 2:
        state.frozen = True
        state.alert = LeakAlert(meter_id=state.meter_id, detected_on=day)
        return state.alert
    return None


@dataclass
class MeterLeakReport:
    meter_id: str
    night_matrix: dict[int, list[int]]  # day -> 6 hourly values
    flagged: bool
    confirmed: bool
    detected_on: Optional[int]


def scan_history(readings_by_meter: dict[str, Sequence[MeterReading]]) -> list[MeterLeakReport]:
    """Offline pass over full per-meter histories.

    Produces the day x hour night-usage matrix for each meter (heatmap data)
    plus the flagged/confirmed outcome of running the streaming rule over
    the history. Empty input yields an empty report.
    """
    reports = []
    for meter_id in sorted(readings_by_meter):
        state = LeakState(meter_id=meter_id)
        for reading in sorted(readings_by_meter[meter_id], key=lambda r: r.timestamp):
            update(state, reading)
        matrix = {
            day: [v if v is not None else 0 for v in slots]
            for day, slots in sorted(state.history.items())
        }
        reports.append(MeterLeakReport(
            meter_id=meter_id,
            night_matrix=matrix,
            flagged=state.frozen,
            confirmed=state.alert.confirmed if state.alert else False,
            detected_on=state.alert.detected_on if state.alert else None,
        ))
    return reports


def leak_report_csv_rows(reports: Iterable[MeterLeakReport]) -> list[list]:
    """CSV export: one row per meter-day of night usage plus the flags."""
    rows = [["meter_id", "day", "h0", "h1", "h2", "h3", "h4", "h5",
             "flagged", "confirmed"]]
    for rep in reports:
        for day, slots in rep.night_matrix.items():
            rows.append([rep.meter_id, day, *slots,
                         int(rep.flagged), int(rep.confirmed)])
    return rows
