"""Buffering gateway between the meter fleet and the ledger.

Emulates the replicated LoRaWAN gateway: readings are buffered as they
arrive and flushed every 8 hours into batched transactions. During a
connectivity outage a flush is a no-op and the buffer is retained, so
nothing is ever lost. Gas per transaction follows a fixed law
(base + per-reading gas, with gas-anomaly events inflated by a factor),
which makes throughput behaviour analytically checkable.

Validation here is structural only (field shapes and arithmetic); semantic
checks such as the error-code cap belong to the anomaly gate and the
contract, so an out-of-range code passes through by default and reverts
on-chain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from aquachain.fleet import LabeledEvent
from aquachain.ledger import Ledger, Transaction
from aquachain.simtime import SECONDS_PER_HOUR

DEFAULT_FLUSH_INTERVAL = 8 * SECONDS_PER_HOUR


@dataclass(frozen=True)
class GatewayConfig:
    flush_interval: int = DEFAULT_FLUSH_INTERVAL
    batch_size: int = 5
    base_gas: int = 21_000
    per_reading_gas: int = 60_000
    gas_anomaly_factor: int = 10
    sender: str = "gateway-0"
    validate_error_code: bool = False  # off: the contract is the semantic check

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_gas <= 0 or self.per_reading_gas <= 0:
            raise ValueError("gas parameters must be positive")


@dataclass(frozen=True)
class ConnectivitySchedule:
    """Sorted, non-overlapping half-open outage ranges [start, end)."""

    outages: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        prev_end = None
        for start, end in self.outages:
            if end <= start:
                raise ValueError("outage ranges must be nonempty")
            if prev_end is not None and start < prev_end:
                raise ValueError("outage ranges must be sorted and non-overlapping")
            prev_end = end

    def is_out(self, ts: int) -> bool:
        return any(start <= ts < end for start, end in self.outages)

    @classmethod
    def daily(cls, start_hour: float, duration_hours: float, days: int,
              origin: int = 0) -> "ConnectivitySchedule":
        ranges = []
        for d in range(days):
            start = origin + d * 24 * SECONDS_PER_HOUR + int(start_hour * SECONDS_PER_HOUR)
            ranges.append((start, start + int(duration_hours * SECONDS_PER_HOUR)))
        return cls(outages=tuple(ranges))


@dataclass(frozen=True)
class BatchContext:
    """What the anomaly gate sees about a reading's candidate transaction."""

    gas: int
    batch_len: int


# classify(event, context, now) -> True to keep the reading, False to drop it
Classifier = Callable[[LabeledEvent, BatchContext, int], bool]


@dataclass
class FlushRecord:
    timestamp: int
    batches: int
    readings_submitted: int
    buffered_remainder: int
    outage: bool


class Gateway:
    """Single logical actor driven by the simulation clock.

    Ingestion and flushing are serialized events; the buffer is strictly
    FIFO from ingestion to submission, which preserves per-meter timestamp
    order on-chain.
    """

    def __init__(self, config: GatewayConfig, ledger: Optional[Ledger] = None):
        self.config = config
        self.ledger = ledger
        if ledger is not None:
            ledger.register_sender(config.sender)
        self.buffer: list[LabeledEvent] = []
        self.ingested = 0
        self.rejected_invalid = 0
        self.rejected_by_gate = 0
        self.submitted_readings = 0
        self.submitted_txs = 0
        self.flush_log: list[FlushRecord] = []
        self._nonce = 0

    def ingest(self, event: LabeledEvent, now: int) -> bool:
        """Buffer one reading; structurally invalid ones are counted, not kept."""
        try:
            event.reading.validate(require_code_in_range=self.config.validate_error_code)
        except ValueError:
            self.rejected_invalid += 1
            return False
        self.buffer.append(event)
        self.ingested += 1
        return True

    def reading_gas(self, event: LabeledEvent) -> int:
        gas = self.config.per_reading_gas
        return gas * self.config.gas_anomaly_factor if event.inflate_gas else gas

    def batch_gas(self, events: Sequence[LabeledEvent]) -> int:
        return self.config.base_gas + sum(self.reading_gas(ev) for ev in events)

    def flush(self, now: int, connectivity: Optional[ConnectivitySchedule] = None,
              classify: Optional[Classifier] = None) -> list[Transaction]:
        """Batch the buffer into transactions, unless within an outage.

        The buffer is partitioned FIFO into chunks of ``batch_size`` (last
        chunk may be smaller). When a classifier is given it sees each
        reading with its candidate chunk's gas attribution; rejected
        readings are dropped and the surviving chunk is re-priced. Built
        transactions are submitted to the ledger when one is attached.
        """
        if connectivity is not None and connectivity.is_out(now):
            self.flush_log.append(FlushRecord(timestamp=now, batches=0,
                                              readings_submitted=0,
                                              buffered_remainder=len(self.buffer),
                                              outage=True))
            return []

        chunks = [self.buffer[i:i + self.config.batch_size]
                  for i in range(0, len(self.buffer), self.config.batch_size)]
        self.buffer = []
        txs = []
        submitted = 0
        for chunk in chunks:
            if classify is not None:
                ctx = BatchContext(gas=self.batch_gas(chunk), batch_len=len(chunk))
                kept = [ev for ev in chunk if classify(ev, ctx, now)]
                self.rejected_by_gate += len(chunk) - len(kept)
            else:
                kept = chunk
            if not kept:
                continue
            tx = self._build_transaction(kept, now)
            txs.append(tx)
            submitted += len(kept)
            if self.ledger is not None:
                self.ledger.submit_tx(tx)
        self.submitted_readings += submitted
        self.submitted_txs += len(txs)
        self.flush_log.append(FlushRecord(timestamp=now, batches=len(txs),
                                          readings_submitted=submitted,
                                          buffered_remainder=len(self.buffer),
                                          outage=False))
        return txs

    def _build_transaction(self, events: Sequence[LabeledEvent], now: int) -> Transaction:
        calls = tuple(
            ("logWaterData", (ev.reading.meter_id, ev.reading.water_usage,
                              ev.reading.error_code))
            for ev in events
        )
        gas = self.batch_gas(events)
        self._nonce += 1
        if self.ledger is not None:
            return self.ledger.make_transaction(self.config.sender, calls,
                                                submitted_at=float(now), gas=gas,
                                                nonce=self._nonce)
        # Detached mode (no ledger): unsigned transaction for inspection.
        from aquachain.ledger import tx_payload_hash
        tx_id = tx_payload_hash(self.config.sender, calls, float(now), self._nonce)
        return Transaction(tx_id=tx_id, sender=self.config.sender,
                           nonce=self._nonce, submitted_at=float(now),
                           gas=gas, calls=calls, sig=bytes(32))

    def flush_log_csv_rows(self) -> list[list]:
        rows = [["timestamp", "batches", "readings_submitted",
                 "buffered_remainder", "outage"]]
        for rec in self.flush_log:
            rows.append([rec.timestamp, rec.batches, rec.readings_submitted,
                         rec.buffered_remainder, int(rec.outage)])
        return rows
