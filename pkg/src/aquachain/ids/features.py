"""Per-event feature construction for the anomaly gate.

Each record becomes a four-dimensional vector: water usage, error code,
the meter's transaction rate over a trailing 24-hour window, and the gas of
the carrying transaction apportioned equally across its batch. Features are
kept raw here; each trained model stores its own normalization statistics
and applies them at inference time.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from aquachain.fleet import MeterReading

RATE_WINDOW_HOURS = 24.0
RATE_WINDOW_SECONDS = int(RATE_WINDOW_HOURS * 3600)

FEATURE_NAMES = ("water_usage", "error_code", "tx_rate", "gas_used")
N_FEATURES = len(FEATURE_NAMES)


@dataclass(frozen=True)
class FeatureVector:
    water_usage: float
    error_code: float
    tx_rate: float
    gas_used: float

    def as_array(self) -> np.ndarray:
        return np.array([self.water_usage, self.error_code,
                         self.tx_rate, self.gas_used], dtype=np.float64)


@dataclass(frozen=True)
class TxContext:
    """Gas and size of the (candidate) transaction carrying a reading."""

    gas: int
    batch_len: int


class RateHistory:
    """Per-meter event times backing the trailing-window rate.

    Every arrival counts, whatever verdict it later receives; a replay
    flood therefore shows up as an elevated rate.
    """

    def __init__(self):
        self._times: dict[str, deque[int]] = {}

    def rate(self, meter_id: str, now: int) -> float:
        """Events in (now - 24h, now], including one arriving now, per hour."""
        times = self._times.get(meter_id, ())
        count = sum(1 for t in times if now - RATE_WINDOW_SECONDS < t <= now)
        return (count + 1) / RATE_WINDOW_HOURS

    def observe(self, meter_id: str, ts: int) -> None:
        times = self._times.setdefault(meter_id, deque())
        times.append(ts)
        while times and times[0] <= ts - 2 * RATE_WINDOW_SECONDS:
            times.popleft()


def extract_features(reading: MeterReading, tx_context: TxContext,
                     history: RateHistory) -> FeatureVector:
    """Raw feature vector for one reading.

    ``history`` must not yet contain this arrival; call
    ``history.observe`` afterwards. Gas is the carrying transaction's gas
    divided equally over its batch.
    """
    if tx_context.batch_len < 1:
        raise ValueError("batch_len must be >= 1")
    return FeatureVector(
        water_usage=float(reading.water_usage),
        error_code=float(reading.error_code),
        tx_rate=history.rate(reading.meter_id, reading.timestamp),
        gas_used=tx_context.gas / tx_context.batch_len,
    )


@dataclass(frozen=True)
class Normalizer:
    """Per-feature z-score parameters frozen at training time.

    The scale is floored at 2% of the feature's mean magnitude: a feature
    that is (near-)constant in training would otherwise turn every benign
    wiggle into an astronomic z-score. A feature that is identically zero
    passes through unscaled.
    """

    SCALE_FLOOR_FRACTION = 0.02

    mean: tuple[float, ...]
    scale: tuple[float, ...]

    @classmethod
    def fit(cls, X: np.ndarray) -> "Normalizer":
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        floor = cls.SCALE_FLOOR_FRACTION * np.abs(mean)
        scale = np.maximum(std, floor)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean=tuple(float(v) for v in mean),
                   scale=tuple(float(v) for v in scale))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - np.array(self.mean)) / np.array(self.scale)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "scale": list(self.scale)}

    @classmethod
    def from_dict(cls, doc: dict) -> "Normalizer":
        return cls(mean=tuple(doc["mean"]), scale=tuple(doc["scale"]))
