import numpy as np
import pytest

from aquachain.fleet import (
    AttackKind,
    AttackScenario,
    ConsumptionProfile,
    FleetParams,
    LeakSpec,
    MeterConfig,
    events_from_jsonl,
    events_to_jsonl,
    generate_fleet,
    generate_fleet_events,
    generate_readings,
    inject_attacks,
)

DAY = 86400


def test_generate_fleet_400_unique_ids():
    configs = generate_fleet(400, seed=42)
    ids = [c.meter_id for c in configs]
    assert len(configs) == 400
    assert ids[0] == "M000" and ids[-1] == "M399"
    assert len(set(ids)) == 400


def test_generate_fleet_singleton():
    configs = generate_fleet(1, seed=123)
    assert len(configs) == 1
    assert configs[0].meter_id == "M000"


def test_generate_fleet_zero_meters_rejected():
    with pytest.raises(ValueError):
        generate_fleet(0)


def test_generate_fleet_deterministic():
    a = generate_fleet(100, seed=7)
    b = generate_fleet(100, seed=7)
    assert a == b
    c = generate_fleet(100, seed=8)
    assert a != c


def test_readings_zero_night_weights_give_zero_night_hours():
    config = MeterConfig(meter_id="M000")
    readings = generate_readings(config, (0, 7 * DAY), seed=5)
    for r in readings:
        hod = (r.timestamp % DAY) // 3600
        if hod == 8:  # the report covering 00:00-08:00
            assert r.hourly_breakdown[:6] == (0, 0, 0, 0, 0, 0)


def test_readings_seven_days_three_per_day():
    config = MeterConfig(meter_id="M000")
    readings = generate_readings(config, (0, 7 * DAY), seed=5)
    assert len(readings) == 21
    assert [r.timestamp for r in readings] == [8 * 3600 * k for k in range(1, 22)]


def test_readings_conservation_and_validity():
    for seed in range(5):
        config = generate_fleet(3, seed=seed)[1]
        for r in generate_readings(config, (0, 10 * DAY), seed=seed):
            assert sum(r.hourly_breakdown) == r.water_usage
            assert 0 <= r.error_code <= 100
            assert all(h >= 0 for h in r.hourly_breakdown)


def test_leak_adds_exact_constant_from_start():
    # oracle: diff two seeded runs, with and without the leak
    config = MeterConfig(meter_id="M007")
    leak = LeakSpec(meter_id="M007", start=3 * DAY, night_flow=5)
    base = generate_readings(config, (0, 7 * DAY), seed=11)
    leaked = generate_readings(config, (0, 7 * DAY), (leak,), seed=11)
    assert len(base) == len(leaked)
    for b, l in zip(base, leaked):
        for j, (hb, hl) in enumerate(zip(b.hourly_breakdown, l.hourly_breakdown)):
            slot_start = b.slot_start(j)
            expected = 5 if slot_start >= 3 * DAY else 0
            assert hl - hb == expected
        assert l.water_usage >= b.water_usage


def test_leak_monotonicity_property():
    config = generate_fleet(1, seed=3)[0]
    base = generate_readings(config, (0, 5 * DAY), seed=9)
    leaked = generate_readings(config, (0, 5 * DAY),
                               (LeakSpec("M000", 0, 2),), seed=9)
    for b, l in zip(base, leaked):
        assert all(hl >= hb for hb, hl in zip(b.hourly_breakdown, l.hourly_breakdown))


def test_leak_wrong_meter_rejected():
    config = MeterConfig(meter_id="M000")
    with pytest.raises(ValueError):
        generate_readings(config, (0, DAY), (LeakSpec("M001", 0, 5),), seed=1)


def test_empty_horizon_rejected():
    with pytest.raises(ValueError):
        generate_readings(MeterConfig(meter_id="M000"), (100, 100), seed=1)


def test_profile_invariants():
    with pytest.raises(ValueError):
        ConsumptionProfile(diurnal_weights=(0.0,) * 24)
    with pytest.raises(ValueError):
        ConsumptionProfile(diurnal_weights=(-1.0,) + (1.0,) * 23)


def _fleet_events(n_meters=6, days=6, seed=21, leaks=()):
    configs = generate_fleet(n_meters, seed=seed)
    return generate_fleet_events(configs, (0, days * DAY), leaks=leaks, seed=seed)


def test_inject_counts_370_total():
    events = _fleet_events(n_meters=20, days=10)
    meters = [f"M{i:03d}" for i in range(20)]
    scenarios = [
        AttackScenario(AttackKind.REPLAY, tuple(meters[:5]), (2 * DAY, 5 * DAY), 120),
        AttackScenario(AttackKind.SPOOFED_CONSUMPTION, tuple(meters[5:12]),
                       (2 * DAY, 8 * DAY), 100),
        AttackScenario(AttackKind.TAMPERED_ERROR_CODE, tuple(meters[12:16]),
                       (2 * DAY, 9 * DAY), 80),
        AttackScenario(AttackKind.GAS_ANOMALY, tuple(meters[16:20]),
                       (2 * DAY, 9 * DAY), 70),
    ]
    out = inject_attacks(events, scenarios, seed=3)
    attacks = [e for e in out if not e.is_normal]
    assert len(attacks) == 370
    by_kind = {}
    for e in attacks:
        by_kind[e.attack] = by_kind.get(e.attack, 0) + 1
    assert by_kind == {AttackKind.REPLAY: 120,
                       AttackKind.SPOOFED_CONSUMPTION: 100,
                       AttackKind.TAMPERED_ERROR_CODE: 80,
                       AttackKind.GAS_ANOMALY: 70}


def test_inject_empty_scenarios_is_identity():
    events = _fleet_events()
    assert inject_attacks(events, [], seed=1) == events


def test_replay_duplicates_payload_with_new_timestamp():
    events = _fleet_events()
    scenario = AttackScenario(AttackKind.REPLAY, ("M001",), (2 * DAY, 4 * DAY), 5)
    out = inject_attacks(events, [scenario], seed=13)
    replays = [e for e in out if e.attack is AttackKind.REPLAY]
    assert len(replays) == 5
    genuine = {(e.reading.meter_id, e.reading.hourly_breakdown,
                e.reading.water_usage, e.reading.error_code)
               for e in events}
    for rep in replays:
        r = rep.reading
        # payload matches some genuine reading, timestamp is fresh
        assert (r.meter_id, r.hourly_breakdown, r.water_usage, r.error_code) in genuine
        assert 2 * DAY <= r.timestamp < 4 * DAY


def test_label_soundness_normals_untouched():
    events = _fleet_events(n_meters=8, days=8)
    scenarios = [
        AttackScenario(AttackKind.SPOOFED_CONSUMPTION, ("M000", "M001"),
                       (DAY, 7 * DAY), 10),
        AttackScenario(AttackKind.TAMPERED_ERROR_CODE, ("M002",),
                       (DAY, 7 * DAY), 8),
        AttackScenario(AttackKind.GAS_ANOMALY, ("M003",), (DAY, 7 * DAY), 6),
        AttackScenario(AttackKind.REPLAY, ("M004",), (DAY, 7 * DAY), 7),
    ]
    out = inject_attacks(events, scenarios, seed=2)
    original = {(e.reading.meter_id, e.reading.timestamp): e.reading
                for e in events}
    for ev in out:
        if ev.is_normal:
            assert original[(ev.reading.meter_id, ev.reading.timestamp)] == ev.reading
        else:
            assert ev.scenario_id is not None


def test_spoof_modes_change_usage():
    events = _fleet_events(n_meters=4, days=8)
    scenario = AttackScenario(AttackKind.SPOOFED_CONSUMPTION, ("M000", "M001"),
                              (DAY, 7 * DAY), 12, spoof_low_fraction=0.5)
    out = inject_attacks(events, [scenario], seed=4)
    original = {(e.reading.meter_id, e.reading.timestamp): e.reading
                for e in events}
    spoofed = [e for e in out if e.attack is AttackKind.SPOOFED_CONSUMPTION]
    assert len(spoofed) == 12
    lows = [e for e in spoofed
            if e.reading.water_usage < original[(e.reading.meter_id,
                                                 e.reading.timestamp)].water_usage]
    spikes = [e for e in spoofed
              if e.reading.water_usage > original[(e.reading.meter_id,
                                                   e.reading.timestamp)].water_usage]
    assert len(lows) == 6 and len(spikes) == 6
    for e in spikes:
        orig = original[(e.reading.meter_id, e.reading.timestamp)]
        ratio = e.reading.water_usage / max(orig.water_usage, 1)
        assert 4.0 <= ratio <= 21.0
    for e in spoofed:
        assert sum(e.reading.hourly_breakdown) == e.reading.water_usage


def test_tampered_codes_out_of_range():
    events = _fleet_events(n_meters=4, days=8)
    scenario = AttackScenario(AttackKind.TAMPERED_ERROR_CODE, ("M002",),
                              (DAY, 7 * DAY), 10, tamper_over_limit_fraction=0.3)
    out = inject_attacks(events, [scenario], seed=6)
    tampered = [e for e in out if e.attack is AttackKind.TAMPERED_ERROR_CODE]
    assert len(tampered) == 10
    over = [e for e in tampered if e.reading.error_code > 100]
    within = [e for e in tampered if 50 <= e.reading.error_code <= 100]
    assert len(over) == 3
    assert len(within) == 7


def test_gas_anomaly_tags_without_payload_change():
    events = _fleet_events(n_meters=4, days=6)
    scenario = AttackScenario(AttackKind.GAS_ANOMALY, ("M003",), (DAY, 5 * DAY), 4)
    out = inject_attacks(events, [scenario], seed=8)
    original = {(e.reading.meter_id, e.reading.timestamp): e.reading
                for e in events}
    tagged = [e for e in out if e.attack is AttackKind.GAS_ANOMALY]
    assert len(tagged) == 4
    for e in tagged:
        assert e.inflate_gas
        assert e.reading == original[(e.reading.meter_id, e.reading.timestamp)]


def test_inject_deterministic():
    events = _fleet_events(n_meters=6, days=8)
    scenarios = [AttackScenario(AttackKind.REPLAY, ("M000",), (DAY, 6 * DAY), 9)]
    a = inject_attacks(events, scenarios, seed=5)
    b = inject_attacks(events, scenarios, seed=5)
    assert a == b


def test_inject_requires_targets():
    events = _fleet_events()
    with pytest.raises(ValueError):
        inject_attacks(events,
                       [AttackScenario(AttackKind.REPLAY, (), (0, DAY), 1)],
                       seed=1)


def test_events_sorted_and_ids_reassigned():
    events = _fleet_events(n_meters=5, days=6)
    out = inject_attacks(events, [
        AttackScenario(AttackKind.REPLAY, ("M000", "M001"), (DAY, 5 * DAY), 15),
    ], seed=10)
    stamps = [e.reading.timestamp for e in out]
    assert stamps == sorted(stamps)
    assert [e.event_id for e in out] == list(range(len(out)))


def test_jsonl_round_trip():
    events = _fleet_events(n_meters=3, days=3)
    out = inject_attacks(events, [
        AttackScenario(AttackKind.GAS_ANOMALY, ("M000",), (DAY, 3 * DAY), 2),
    ], seed=1)
    text = events_to_jsonl(out)
    back = events_from_jsonl(text)
    assert len(back) == len(out)
    for a, b in zip(out, back):
        assert a.reading == b.reading
        assert a.attack == b.attack
