import numpy as np
import pytest

from aquachain.fleet import LabeledEvent, MeterReading
from aquachain.ids.detector import (
    Decision,
    DetectorConfig,
    HybridDetector,
    Reason,
    Verdict,
)
from aquachain.ids.features import Normalizer, TxContext
from aquachain.ids.iforest import train_iforest
from aquachain.ids.lstm_ae import build_autoencoder

HOUR = 3600
N = 4


def make_models(theta=0.9, tau=5.0, seed=1):
    """Small real forest plus a zero-weight autoencoder with settable tau.

    ``theta=None`` keeps the quantile-calibrated threshold.
    """
    rng = np.random.default_rng(seed)
    X = rng.normal(loc=(80, 0, 0.125, 64_200), scale=(10, 1, 0.01, 500),
                   size=(300, 4))
    iforest = train_iforest(X, n_trees=25, subsample=64, seed=seed)
    if theta is not None:
        iforest.theta = theta
    autoencoder = build_autoencoder(4, 2, N, iforest.normalization, seed=seed)
    for p in autoencoder.parameters().values():
        p[...] = 0.0
    autoencoder.tau = tau
    return iforest, autoencoder


def detector(theta=0.9, tau=5.0, purge=False):
    iforest, autoencoder = make_models(theta=theta, tau=tau)
    return HybridDetector(iforest, autoencoder,
                          DetectorConfig(sequence_length=N,
                                         purge_rejected_from_window=purge))


def event(ts, usage=80, code=0, meter="M001"):
    per = usage // 8
    slots = [per] * 8
    slots[-1] += usage - 8 * per
    return LabeledEvent(reading=MeterReading(
        meter_id=meter, timestamp=ts, water_usage=usage, error_code=code,
        hourly_breakdown=tuple(slots)))


CTX = TxContext(gas=81_000, batch_len=1)


def feed(det, k, **kw):
    return det.classify(event((k + 1) * 8 * HOUR, **kw), CTX, (k + 1) * 8 * HOUR)


def test_warmup_accepts_without_lstm():
    det = detector(tau=-1.0)  # any sequence check would reject
    for k in range(N - 1):
        verdict = feed(det, k)
        assert verdict.decision is Decision.ACCEPT
        assert verdict.reason is Reason.NONE
    # window is full on the Nth event: now the sequence check fires
    verdict = feed(det, N - 1)
    assert verdict.decision is Decision.REJECT
    assert verdict.reason is Reason.LSTM_RECONSTRUCTION


def test_iforest_rejection_skips_lstm():
    det = detector(theta=-1.0, tau=-1.0)  # forest rejects everything first
    calls = []
    original = det.autoencoder.window_loss
    det.autoencoder.window_loss = lambda w: calls.append(1) or original(w)
    for k in range(N + 2):
        verdict = feed(det, k)
        assert verdict.decision is Decision.REJECT
        assert verdict.reason is Reason.IFOREST
    assert calls == []  # an event with s > theta never reaches the sequence model


def test_accept_path_evicts_oldest():
    det = detector()
    for k in range(N):
        feed(det, k)
    assert len(det.windows["M001"]) == N - 1  # evaluated then evicted


def test_literal_mode_retains_rejected_vector():
    det = detector(theta=-1.0, purge=False)
    feed(det, 0)
    assert len(det.windows["M001"]) == 1
    feed(det, 1)
    assert len(det.windows["M001"]) == 2


def test_purge_mode_drops_vector_when_nothing_accepted_yet():
    det = detector(theta=-1.0, purge=True)
    feed(det, 0)
    assert det.windows["M001"] == []


def test_purge_mode_substitutes_window_median():
    det = detector(purge=True)
    feed(det, 0, usage=80)  # accepted (window not full, s below theta)
    det.iforest.theta = -1.0  # everything from now on is forest-rejected
    feed(det, 1, usage=160)
    window = det.windows["M001"]
    assert len(window) == 2
    assert window[-1][0] == 80  # rejected vector replaced by the median


def test_window_capacity_never_exceeded():
    det = detector(theta=-1.0, purge=False)  # every event rejected and retained
    for k in range(3 * N):
        feed(det, k)
        assert len(det.windows["M001"]) <= N


def test_lstm_reject_literal_evicts_oldest_keeps_newest():
    det = detector(tau=-1.0, purge=False)
    vectors = []
    for k in range(N):
        feed(det, k, usage=80 + k)
    window = det.windows["M001"]
    assert len(window) == N - 1
    # the newest vector (usage 80+N-1) is retained, the oldest was evicted
    assert window[-1][0] == 80 + N - 1
    assert window[0][0] == 81


def test_lstm_reject_purge_substitutes_and_advances():
    det = detector(tau=-1.0, purge=True)
    for k in range(N - 1):
        feed(det, k, usage=80 + k)
    before = [tuple(v) for v in det.windows["M001"]]
    verdict = feed(det, N - 1)
    assert verdict.decision is Decision.REJECT
    # rejected vector replaced by the window median AND the oldest evicted:
    # the window stays full for the next event and keeps advancing, so a bad
    # stretch can neither wedge it nor open screening gaps
    median = tuple(np.median(np.stack([np.array(v) for v in before]), axis=0))
    assert [tuple(v) for v in det.windows["M001"]] == before[1:] + [median]


def test_incident_log_records_rejections():
    det = detector(theta=-1.0)
    feed(det, 0)
    feed(det, 1)
    assert len(det.incidents) == 2
    rec = det.incidents[0]
    assert rec.meter_id == "M001"
    assert rec.reason is Reason.IFOREST
    assert rec.threshold == -1.0
    lines = det.incident_log_jsonl().strip().splitlines()
    assert len(lines) == 2
    import json
    doc = json.loads(lines[0])
    assert doc["reason"] == "iforest"


def test_rejected_events_still_count_toward_rate():
    det = detector(theta=-1.0)  # reject everything
    for k in range(3):
        feed(det, k)
    # rate history saw all three arrivals
    rate = det.rate_history.rate("M001", 3 * 8 * HOUR)
    assert rate == pytest.approx(4 / 24)


def test_verdict_invariant():
    with pytest.raises(ValueError):
        Verdict(Decision.REJECT, Reason.NONE, 0.0)


def test_windows_are_per_meter():
    det = detector()
    feed(det, 0, meter="M001")
    feed(det, 0, meter="M002")
    assert set(det.windows) == {"M001", "M002"}
    assert len(det.windows["M001"]) == 1


def test_mismatched_window_length_rejected():
    iforest, autoencoder = make_models()
    with pytest.raises(ValueError):
        HybridDetector(iforest, autoencoder,
                       DetectorConfig(sequence_length=N + 1))


def test_audit_blocks_flags_sealed_anomalies():
    from aquachain.ids.detector import audit_blocks
    from aquachain.ledger import Keyring, Ledger

    iforest, autoencoder = make_models(theta=None, tau=1e9)
    keyring = Keyring(network_seed=1)
    ledger = Ledger(validators=("V0", "V1", "V2"), keyring=keyring, contract=None)
    ledger.register_sender("gateway-0")
    # one wildly out-of-range record (usage and gas) among normals
    for k, (usage, gas) in enumerate([(80, 81_000), (81, 81_000),
                                      (1_000_000, 861_000), (79, 81_000)]):
        tx = ledger.make_transaction(
            "gateway-0", (("logWaterData", ("M001", usage, 0)),),
            submitted_at=float(k), gas=gas, nonce=k + 1)
        ledger.submit_tx(tx)
        ledger.seal_block(k + 1)
    findings = audit_blocks(ledger.blocks, iforest, autoencoder)
    assert any(f["meter_id"] == "M001" for f in findings)
