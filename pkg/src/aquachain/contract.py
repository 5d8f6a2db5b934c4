"""VillageWaterSystem: the water-billing contract as a deterministic state machine.

Executed only inside sequential block sealing. Calls are all-or-nothing:
every guard runs before any mutation, so a reverted call leaves no trace.
Payment units are abstract integers (one unit per litre at base rate 1),
keeping the arithmetic exact.

Revert messages are part of the interface and asserted on by tests:
"Invalid ID", "Unreg.", "Invalid err", "Unauthorized", "Invalid rate",
"Duplicate ID".
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence


class ContractRevert(Exception):
    """Raised by a failed require(); the message is the revert reason."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ContractRevert(message)


@dataclass(frozen=True)
class WaterData:
    timestamp: int
    water_usage: int
    error_code: int
    meter_id: str


@dataclass(frozen=True)
class CallContext:
    """Execution environment provided by the sealing block."""

    sender: str
    block_height: int
    block_time: int
    tx_id: bytes


@dataclass(frozen=True)
class ContractEvent:
    kind: str  # MeterRegistered | MeterDisabled | WaterDataLogged | PaymentProcessed
    args: tuple
    block_height: int
    tx_id: bytes


class VillageWaterSystem:
    """Meter registry, validated data logging and payment calculation.

    ``owner`` administers the registry and the base rate; ``authorized_loggers``
    are the gateway keys allowed to log water data. Disabling a meter removes
    it from the registry (blocking further logging and queries) but never
    deletes stored logs, so re-registration resumes with history intact.
    """

    def __init__(self, owner: str, authorized_loggers: Sequence[str] = (),
                 base_rate: int = 1, swap_payment_branches: bool = False):
        self.owner = owner
        self.authorized_loggers = set(authorized_loggers) | {owner}
        self.base_rate = base_rate
        self.swap_payment_branches = swap_payment_branches
        self.registered_meters: list[str] = []
        self._registered: set[str] = set()
        self.water_logs: dict[str, list[WaterData]] = {}
        self.events: list[ContractEvent] = []

    # -- mutations ---------------------------------------------------------

    def register_meter(self, ctx: CallContext, meter_id: str) -> None:
        _require(ctx.sender == self.owner, "Unauthorized")
        _require(bool(meter_id), "Invalid ID")
        _require(meter_id not in self._registered, "Duplicate ID")
        self.registered_meters.append(meter_id)
        self._registered.add(meter_id)
        self._emit(ctx, "MeterRegistered", (meter_id,))

    def disable_meter(self, ctx: CallContext, meter_id: str) -> None:
        _require(ctx.sender == self.owner, "Unauthorized")
        _require(bool(meter_id), "Invalid ID")
        _require(meter_id in self._registered, "Unreg.")
        self.registered_meters.remove(meter_id)
        self._registered.discard(meter_id)
        self._emit(ctx, "MeterDisabled", (meter_id,))

    def log_water_data(self, ctx: CallContext, meter_id: str, usage: int,
                       error_code: int) -> int:
        _require(ctx.sender in self.authorized_loggers, "Unauthorized")
        _require(self.is_meter_registered(meter_id), "Unreg.")
        _require(error_code <= 100, "Invalid err")
        _require(usage >= 0 and error_code >= 0, "Invalid data")
        record = WaterData(timestamp=ctx.block_time, water_usage=usage,
                           error_code=error_code, meter_id=meter_id)
        self.water_logs.setdefault(meter_id, []).append(record)
        self._emit(ctx, "WaterDataLogged", (meter_id, usage, error_code))
        payment = self.calculate_payment(usage, error_code)
        self._emit(ctx, "PaymentProcessed", (meter_id, payment))
        return payment

    def set_base_rate(self, ctx: CallContext, rate: int) -> None:
        _require(ctx.sender == self.owner, "Unauthorized")
        _require(rate > 0, "Invalid rate")
        self.base_rate = rate

    # -- queries -----------------------------------------------------------

    def is_meter_registered(self, meter_id: str) -> bool:
        return meter_id in self._registered

    def get_water_logs(self, meter_id: str) -> list[WaterData]:
        _require(self.is_meter_registered(meter_id), "Unreg.")
        return list(self.water_logs.get(meter_id, []))

    def get_registered_meters(self) -> list[str]:
        return list(self.registered_meters)

    def calculate_payment(self, usage: int, error_code: int) -> int:
        """Pure billing rule: usage x base_rate x (1 if error_code > 80 else 2).

        Implemented verbatim even though the high-error branch pays less;
        ``swap_payment_branches`` exchanges the two multipliers for
        experimentation.
        """
        multiplier = 1 if error_code > 80 else 2
        if self.swap_payment_branches:
            multiplier = 3 - multiplier
        return usage * self.base_rate * multiplier

    # -- plumbing ----------------------------------------------------------

    def execute(self, call: tuple, ctx: CallContext):
        """Dispatch one payload call ``(function_name, args)``."""
        fn, args = call
        handlers = {
            "registerMeter": self.register_meter,
            "disableMeter": self.disable_meter,
            "logWaterData": self.log_water_data,
            "setBaseRate": self.set_base_rate,
        }
        if fn not in handlers:
            raise ContractRevert("Unknown function")
        return handlers[fn](ctx, *args)

    def _emit(self, ctx: CallContext, kind: str, args: tuple) -> None:
        self.events.append(ContractEvent(kind=kind, args=args,
                                         block_height=ctx.block_height,
                                         tx_id=ctx.tx_id))

    def state_digest(self) -> str:
        """Order-sensitive digest of the full state, for replay checks."""
        doc = {
            "owner": self.owner,
            "loggers": sorted(self.authorized_loggers),
            "base_rate": self.base_rate,
            "registered": self.registered_meters,
            "logs": {
                m: [[w.timestamp, w.water_usage, w.error_code] for w in logs]
                for m, logs in sorted(self.water_logs.items())
            },
        }
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def events_to_csv_rows(events: Sequence[ContractEvent]) -> list[list]:
    rows = [["block_height", "tx_id", "kind", "args"]]
    for ev in events:
        rows.append([ev.block_height, ev.tx_id.hex(), ev.kind,
                     json.dumps(list(ev.args))])
    return rows
