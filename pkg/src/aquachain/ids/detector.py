"""Two-stage anomaly gate over per-meter sliding windows.

Every incoming event is vectorised and appended to its meter's window
first. The isolation forest screens the single vector; only if that passes
and the window is full does the autoencoder screen the whole window, after
which the oldest vector is evicted. An event rejected by either stage
leaves its vector in the window (the printed algorithm only ever evicts
the oldest, inside the sequence branch), so a burst of rejected anomalies
smears suspicion onto the healthy events that follow it.

``purge_rejected_from_window`` is the alternative reading: a rejected
vector is replaced by the element-wise median of the rest of the window, a
stand-in that stays sane even when a few anomalies slipped through the
gate earlier. The window stays full (every subsequent event is still
screened), keeps advancing one step per evaluation (a bad stretch cannot
wedge it), and carries no anomalous payload forward.

Rejections are appended to an incident log with score and threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from aquachain.fleet import LabeledEvent
from aquachain.ids.features import (
    FeatureVector,
    RateHistory,
    TxContext,
    extract_features,
)
from aquachain.ids.iforest import IsolationForestModel
from aquachain.ids.lstm_ae import LstmAutoencoder


class Decision(str, Enum):
    ACCEPT = "accept"
    REJECT = "reject"


class Reason(str, Enum):
    NONE = "none"
    IFOREST = "iforest"
    LSTM_RECONSTRUCTION = "lstm_reconstruction"


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    reason: Reason
    score: float

    def __post_init__(self):
        if self.decision is Decision.REJECT and self.reason is Reason.NONE:
            raise ValueError("a rejection must carry a reason")


@dataclass(frozen=True)
class IncidentRecord:
    timestamp: int
    meter_id: str
    reason: Reason
    score: float
    threshold: float


@dataclass(frozen=True)
class DetectorConfig:
    sequence_length: int = 21
    purge_rejected_from_window: bool = False


class HybridDetector:
    """Streaming forest-then-autoencoder gate (one window per meter)."""

    def __init__(self, iforest: IsolationForestModel, autoencoder: LstmAutoencoder,
                 config: DetectorConfig | None = None):
        self.iforest = iforest
        self.autoencoder = autoencoder
        self.config = config or DetectorConfig(
            sequence_length=autoencoder.sequence_length)
        if self.config.sequence_length != autoencoder.sequence_length:
            raise ValueError("detector window and autoencoder length must match")
        self.windows: dict[str, list[np.ndarray]] = {}
        self.rate_history = RateHistory()
        self.incidents: list[IncidentRecord] = []

    def prime(self, event: LabeledEvent, tx_context: TxContext) -> None:
        """Feed one trusted (warm-up) event into the state without screening.

        Rate history and the meter's window advance exactly as they would on
        an accepted event, so a scenario can continue seamlessly from the
        stream the models were trained on.
        """
        reading = event.reading
        features = extract_features(reading, tx_context, self.rate_history)
        self.rate_history.observe(reading.meter_id, reading.timestamp)
        window = self.windows.setdefault(reading.meter_id, [])
        if len(window) >= self.config.sequence_length:
            window.pop(0)
        window.append(features.as_array())
        if len(window) == self.config.sequence_length:
            window.pop(0)  # mirror the post-evaluation eviction

    def classify(self, event: LabeledEvent, tx_context: TxContext,
                 now: int) -> Verdict:
        """Gate one event; the caller forwards only accepted events on-chain."""
        reading = event.reading
        features = extract_features(reading, tx_context, self.rate_history)
        self.rate_history.observe(reading.meter_id, reading.timestamp)
        vector = features.as_array()

        window = self.windows.setdefault(reading.meter_id, [])
        if len(window) >= self.config.sequence_length:
            window.pop(0)  # FIFO eviction keeps capacity at N
        window.append(vector)

        score = self.iforest.score(vector)
        if score > self.iforest.theta:
            self._purge(window)
            return self._reject(reading, Reason.IFOREST, score, self.iforest.theta)

        if len(window) == self.config.sequence_length:
            loss = self.autoencoder.window_loss(np.stack(window))
            if loss > self.autoencoder.tau:
                self._purge(window)
                window.pop(0)  # the window still advances on every evaluation
                return self._reject(reading, Reason.LSTM_RECONSTRUCTION,
                                    loss, self.autoencoder.tau)
            window.pop(0)  # evict oldest after a sequence evaluation
            return Verdict(Decision.ACCEPT, Reason.NONE, loss)

        return Verdict(Decision.ACCEPT, Reason.NONE, score)

    def _purge(self, window: list) -> None:
        """Swap the rejected vector for the window's element-wise median."""
        if not self.config.purge_rejected_from_window:
            return
        if len(window) < 2:
            window.pop()
        else:
            window[-1] = np.median(np.stack(window[:-1]), axis=0)

    def _reject(self, reading, reason: Reason, score: float,
                threshold: float) -> Verdict:
        self.incidents.append(IncidentRecord(
            timestamp=reading.timestamp, meter_id=reading.meter_id,
            reason=reason, score=score, threshold=threshold))
        return Verdict(Decision.REJECT, reason, score)

    def incident_log_jsonl(self) -> str:
        lines = [
            json.dumps({
                "timestamp": rec.timestamp,
                "meter_id": rec.meter_id,
                "reason": rec.reason.value,
                "score": rec.score,
                "threshold": rec.threshold,
            }, sort_keys=True)
            for rec in self.incidents
        ]
        return "\n".join(lines) + ("\n" if lines else "")


def audit_blocks(blocks, iforest: IsolationForestModel,
                 autoencoder: LstmAutoencoder,
                 config: DetectorConfig | None = None) -> list[dict]:
    """Post-hoc screening of records already sealed on-chain.

    Rebuilds feature vectors from logged calls (usage, error code, gas
    apportioned per call, on-chain event times) and runs the same two-stage
    gate over them. This is the audit counterpart of the inline gate: it
    cannot block anything, only flag.
    """
    from aquachain.fleet import MeterReading

    detector_cfg = config or DetectorConfig(
        sequence_length=autoencoder.sequence_length)
    detector = HybridDetector(iforest, autoencoder, detector_cfg)
    findings = []
    for block in blocks:
        for tx in block.transactions:
            log_calls = [c for c in tx.calls if c[0] == "logWaterData"]
            if not log_calls:
                continue
            ctx = TxContext(gas=tx.gas, batch_len=len(log_calls))
            for fn, args in log_calls:
                meter_id, usage, error_code = args
                reading = MeterReading(
                    meter_id=meter_id, timestamp=block.timestamp,
                    water_usage=usage, error_code=error_code,
                    hourly_breakdown=(usage,))
                verdict = detector.classify(LabeledEvent(reading=reading),
                                            ctx, block.timestamp)
                if verdict.decision is Decision.REJECT:
                    findings.append({
                        "height": block.height,
                        "tx_id": tx.tx_id.hex(),
                        "meter_id": meter_id,
                        "reason": verdict.reason.value,
                        "score": verdict.score,
                    })
    return findings
