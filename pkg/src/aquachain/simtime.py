"""Simulated-time arithmetic.

All timestamps in the simulator are seconds on a virtual clock that starts
at a configurable origin (default 0 = midnight of day 0). No component ever
reads the wall clock. Months are modelled as fixed 30-day blocks so that
seasonal demand factors stay deterministic and calendar-free.
"""

SECONDS_PER_HOUR = 3600
SECONDS_PER_DAY = 86400
HOURS_PER_DAY = 24
DAYS_PER_MONTH = 30
MONTHS_PER_YEAR = 12

NIGHT_START_HOUR = 0
NIGHT_END_HOUR = 6  # half-open window [00:00, 06:00)
NIGHT_HOURS = NIGHT_END_HOUR - NIGHT_START_HOUR


def hour_of_day(ts: int) -> int:
    return (ts % SECONDS_PER_DAY) // SECONDS_PER_HOUR


def day_index(ts: int) -> int:
    return ts // SECONDS_PER_DAY


def month_index(ts: int) -> int:
    return (day_index(ts) // DAYS_PER_MONTH) % MONTHS_PER_YEAR


def is_night_hour(ts: int) -> bool:
    return NIGHT_START_HOUR <= hour_of_day(ts) < NIGHT_END_HOUR
