"""Secure water-telemetry pipeline simulator.

End-to-end virtual-clock simulation of a rural smart-metering deployment:
a synthetic meter fleet feeds a buffering LoRaWAN-style gateway, readings
pass a rule-based night-flow leak detector and a hybrid anomaly gate
(isolation forest + LSTM autoencoder), and validated records are executed
by a water-billing contract on a proof-of-authority hash-chained ledger.
Everything runs on simulated time with explicit seeds, so every run is
bit-reproducible.
"""

__version__ = "0.1.0"

from aquachain.fleet import (
    AttackKind,
    AttackScenario,
    ConsumptionProfile,
    FleetParams,
    LabeledEvent,
    LeakSpec,
    MeterConfig,
    MeterReading,
    generate_fleet,
    generate_readings,
    inject_attacks,
)
from aquachain.gateway import ConnectivitySchedule, Gateway, GatewayConfig
from aquachain.leakage import LeakAlert, LeakDetector, LeakState, scan_history
from aquachain.ledger import Block, Keyring, Ledger, Transaction, verify_chain
from aquachain.contract import ContractEvent, ContractRevert, VillageWaterSystem, WaterData

__all__ = [
    "AttackKind",
    "AttackScenario",
    "Block",
    "ConnectivitySchedule",
    "ConsumptionProfile",
    "ContractEvent",
    "ContractRevert",
    "FleetParams",
    "Gateway",
    "GatewayConfig",
    "Keyring",
    "LabeledEvent",
    "LeakAlert",
    "LeakDetector",
    "LeakSpec",
    "LeakState",
    "Ledger",
    "MeterConfig",
    "MeterReading",
    "Transaction",
    "VillageWaterSystem",
    "WaterData",
    "generate_fleet",
    "generate_readings",
    "inject_attacks",
    "scan_history",
    "verify_chain",
]
