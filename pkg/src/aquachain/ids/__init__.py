"""Hybrid anomaly gate: isolation forest screening plus per-meter
LSTM-autoencoder sequence screening, both implemented from scratch."""

from aquachain.ids.features import (
    FeatureVector,
    Normalizer,
    RateHistory,
    TxContext,
    extract_features,
)
from aquachain.ids.iforest import IsolationForestModel, if_score, train_iforest
from aquachain.ids.lstm_ae import LstmAutoencoder, reconstruction_loss, train_autoencoder
from aquachain.ids.detector import (
    Decision,
    DetectorConfig,
    HybridDetector,
    IncidentRecord,
    Reason,
    Verdict,
    audit_blocks,
)

__all__ = [
    "Decision",
    "DetectorConfig",
    "FeatureVector",
    "HybridDetector",
    "IncidentRecord",
    "IsolationForestModel",
    "LstmAutoencoder",
    "Normalizer",
    "RateHistory",
    "Reason",
    "TxContext",
    "Verdict",
    "audit_blocks",
    "extract_features",
    "if_score",
    "reconstruction_loss",
    "train_autoencoder",
    "train_iforest",
]
