import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coexsim.channel import (
    INTERFERENCE_FREE,
    ChannelError,
    PathlossModel,
    RateMap,
    gain,
    pathloss_db,
    rate,
    received_power,
    sir,
    undb,
)
from coexsim.geometry import Region, TierSpec, LTE_SCHEDULED, WIFI_CONTENTION, wrap_distance

from conftest import LTE, WIFI, make_deployment

UMI = PathlossModel()
LTE_MAP = RateMap(84e6)


def test_pathloss_clamped_below_min_distance():
    assert pathloss_db(UMI, 10.0, 2.1e9) == pathloss_db(UMI, 5.0, 2.1e9)


def test_pathloss_umi_hand_value():
    # 22.7 + 36.7*log10(100) + 26*log10(2.1)
    assert pathloss_db(UMI, 100.0, 2.1e9) == pytest.approx(104.48, abs=0.005)


@given(st.floats(10.0, 1e4))
def test_pathloss_decade_slope(d):
    assert pathloss_db(UMI, 10 * d, 2.4e9) - pathloss_db(UMI, d, 2.4e9) == pytest.approx(10 * UMI.alpha)


@given(st.floats(0.0, 1e4), st.floats(0.0, 1e4), st.floats(0.5e9, 6e9), st.floats(0.5e9, 6e9))
def test_pathloss_monotone(d1, d2, f1, f2):
    d1, d2 = sorted((d1, d2))
    f1, f2 = sorted((f1, f2))
    assert pathloss_db(UMI, d1, f1) <= pathloss_db(UMI, d2, f1)
    assert pathloss_db(UMI, d1, f1) <= pathloss_db(UMI, d1, f2)
    assert pathloss_db(UMI, d2, f2) >= 0


def test_pathloss_rejects_bad_carrier():
    with pytest.raises(ChannelError):
        pathloss_db(UMI, 100.0, 0.0)


def test_model_invariants():
    with pytest.raises(ChannelError):
        PathlossModel(dist_slope_db=30.0)
    with pytest.raises(ChannelError):
        PathlossModel(dist_slope_db=20.0, alpha=2.0)
    with pytest.raises(ChannelError):
        RateMap(84e6, attenuation=1.5)


def test_received_power_examples():
    assert received_power(5.0, 0.0) == 5.0
    assert received_power(40.0, 60.0) == pytest.approx(4e-5)
    assert received_power(1.0, 90.0) == pytest.approx(1e-9)


def test_rate_examples():
    assert rate(0.0, LTE_MAP) == 0.0
    assert rate(INTERFERENCE_FREE, LTE_MAP) == 84e6
    # 0.75 * 20 MHz * log2(1 + 10**1.5), below the 84 Mbps cap
    hand = 0.75 * 20e6 * math.log2(1 + 10 ** 1.5)
    assert rate(undb(15.0), LTE_MAP) == pytest.approx(hand)
    assert hand == pytest.approx(75.42e6, rel=1e-4)
    assert rate(undb(15.0), RateMap(65e6)) == 65e6


def test_rate_floor():
    assert rate(undb(-10.5), LTE_MAP) == 0.0
    assert rate(undb(-9.5), LTE_MAP) > 0.0


@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0.05, 1.0), st.floats(1e6, 1e8))
def test_rate_bounded_and_monotone(a, b, att, peak):
    rm = RateMap(peak, attenuation=att)
    lo, hi = sorted((a, b))
    assert 0 <= rate(lo, rm) <= rate(hi, rm) <= peak
    assert rate(hi, rm) <= rate(INTERFERENCE_FREE, rm)


def scene(n_nodes, rng, tiers=(LTE, WIFI)):
    pos = rng.random((n_nodes, 2)) * 1000
    tier = rng.integers(len(tiers), size=n_nodes)
    user = rng.random((1, 2)) * 1000
    return make_deployment(np.column_stack([pos, tier]), tiers, user, [0])


def test_sir_interference_free():
    dep = make_deployment([(0, 0, 0)], users=[(50, 0)], serving=[0])
    assert sir(dep, 0, [], UMI) == INTERFERENCE_FREE
    assert sir(dep, 0, [0], UMI) == INTERFERENCE_FREE
    assert rate(sir(dep, 0, [], UMI), LTE_MAP) == 84e6


def test_sir_symmetric_interferer_is_unity():
    dep = make_deployment([(0, 0, 0), (200, 0, 0)], users=[(100, 0)], serving=[0])
    assert sir(dep, 0, [1], UMI) == pytest.approx(1.0)


def test_sir_unknown_server():
    dep = make_deployment([(0, 0, 0)], users=[(50, 0)], serving=[0])
    with pytest.raises(ChannelError):
        sir(dep, 0, [], UMI, serving=3)


def test_sir_matches_brute_force_summation(rng):
    for _ in range(50):
        n = int(rng.integers(2, 51))
        dep = scene(n, rng)
        active = [i for i in range(1, n) if rng.random() < 0.6]
        region = dep.region
        u = dep.user_positions[0]

        def rx(i):
            t = dep.tiers[dep.tier[i]]
            d = max(float(wrap_distance(u, dep.positions[i], region)), UMI.min_distance)
            pl = UMI.intercept_db + UMI.dist_slope_db * math.log10(d) + UMI.freq_slope_db * math.log10(t.carrier / 1e9)
            return t.tx_power * 10 ** (-pl / 10)

        total = sum(rx(i) for i in active)
        expected = rx(0) / total if active else INTERFERENCE_FREE
        assert sir(dep, 0, active, UMI) == pytest.approx(expected, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30))
def test_adding_interferer_never_raises_sir(seed, n):
    rng = np.random.default_rng(seed)
    dep = scene(n, rng)
    order = rng.permutation(np.arange(1, n))
    prev = INTERFERENCE_FREE
    for k in range(1, len(order) + 1):
        cur = sir(dep, 0, order[:k], UMI)
        assert cur <= prev
        prev = cur


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 100), st.integers(1, 100))
def test_sir_power_scale_invariance(seed, p_lte, p_wifi):
    rng = np.random.default_rng(seed)
    tiers = (TierSpec("a", 1e-6, float(p_lte), 2.1e9, 84e6, LTE_SCHEDULED),
             TierSpec("b", 1e-6, float(p_wifi), 2.4e9, 65e6, WIFI_CONTENTION))
    scaled = tuple(TierSpec(t.name, t.density, 10 * t.tx_power, t.carrier, t.peak_rate, t.protocol) for t in tiers)
    dep = scene(12, rng, tiers)
    dep10 = make_deployment(np.column_stack([dep.positions, dep.tier]), scaled, dep.user_positions, dep.serving)
    active = np.arange(1, 12)[rng.random(11) < 0.7]
    assert sir(dep, 0, active, UMI) == sir(dep10, 0, active, UMI)


def test_gain_is_unit_power_received():
    assert gain(UMI, 100.0, 2.4e9) == received_power(1.0, pathloss_db(UMI, 100.0, 2.4e9))


def test_arrays_broadcast():
    d = np.array([5.0, 10.0, 100.0])
    pl = pathloss_db(UMI, d, 2.1e9)
    assert pl.shape == (3,) and pl[0] == pl[1]
    r = rate(np.array([0.0, 1.0, INTERFERENCE_FREE]), LTE_MAP)
    assert r.tolist()[0] == 0.0 and r[2] == 84e6
