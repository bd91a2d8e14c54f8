import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpgame.channel import (
    ChannelConfig,
    ChannelRealization,
    Schedule,
    Upload,
    check_deadline,
    computation_delay,
    data_volume,
    link_rate,
    pathloss_db,
    sinr,
    transmission_delay,
    validate_schedule,
)
from cpgame.coalition import Partition
from cpgame.world import DensityField

from helpers import make_world

NO_FADE = ChannelConfig(shadowing_sigma_db=0.0, fading=False)


def hand_rate(d, p_dbm=23.0, fc=5.9, b_hz=4e6):
    noise = -174 + 10 * math.log10(b_hz)
    snr_db = p_dbm - (32.4 + 21 * math.log10(d) + 20 * math.log10(fc)) - noise
    return b_hz * math.log2(1 + 10 ** (snr_db / 10))


def fixture_link(distance=100.0, cfg=NO_FADE):
    world = make_world([[100, 200], [100 + distance, 200]])
    return world, ChannelRealization.deterministic(world.cavs, cfg)


def test_pathloss_fixtures():
    assert pathloss_db(1, 5.9) == pytest.approx(47.817, abs=1e-3)
    assert pathloss_db(100, 5.9) == pytest.approx(89.817, abs=0.01)
    assert pathloss_db(10) - pathloss_db(100) == pytest.approx(-21.0)
    assert pathloss_db(0) == pathloss_db(1)


def test_noise_floor():
    assert ChannelConfig().noise_dbm == pytest.approx(-107.98, abs=0.01)
    assert ChannelConfig().subchannel_hz == 4e6


def test_fixture_rate():
    world, real = fixture_link()
    s = Schedule([Upload(0, 1, 0, 0)])
    r = link_rate(0, 1, 0, s, real, NO_FADE)
    assert r == pytest.approx(54.7e6, rel=0.01)
    assert r == pytest.approx(hand_rate(100), rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(2, 300))
def test_rate_matches_hand_chain(d):
    _, real = fixture_link(d)
    assert link_rate(0, 1, 0, Schedule([Upload(0, 1, 0, 0)]), real, NO_FADE) == pytest.approx(hand_rate(d), rel=1e-9)


def test_interference_lowers_rate_and_gain_raises_it():
    world = make_world([[100, 200], [150, 200], [180, 200], [260, 200]])
    real = ChannelRealization.deterministic(world.cavs, NO_FADE)
    alone = Schedule([Upload(0, 1, 0, 0)])
    crowded = Schedule([Upload(0, 1, 0, 0), Upload(2, 3, 0, 0)])
    other_k = Schedule([Upload(0, 1, 0, 0), Upload(2, 3, 0, 1)])
    r0 = link_rate(0, 1, 0, alone, real, NO_FADE)
    assert link_rate(0, 1, 0, crowded, real, NO_FADE) < r0
    assert link_rate(0, 1, 0, other_k, real, NO_FADE) == pytest.approx(r0)
    boosted = ChannelRealization(real.ids, real.gain * np.where(np.arange(4)[:, None, None] == 0, 2.0, 1.0), 23.0)
    assert sinr(0, 1, 0, {0, 2}, boosted, NO_FADE) > sinr(0, 1, 0, {0, 2}, real, NO_FADE)


def test_vanishing_gain_gives_vanishing_rate():
    world, real = fixture_link()
    tiny = ChannelRealization(real.ids, real.gain * 1e-30, 23.0)
    assert link_rate(0, 1, 0, Schedule([Upload(0, 1, 0, 0)]), tiny, NO_FADE) < 1.0


def test_realization_reproducible_and_symmetric_shadowing():
    world = make_world([[10, 10], [60, 40], [90, 90]])
    cfg = ChannelConfig()
    a = ChannelRealization.draw(world.cavs, cfg, seed=7, cycle=3)
    b = ChannelRealization.draw(list(reversed(world.cavs)), cfg, seed=7, cycle=3)
    assert np.array_equal(a.gain, b.gain)
    assert (a.gain > 0).all()
    c = ChannelRealization.draw(world.cavs, cfg, seed=7, cycle=4)
    assert not np.array_equal(a.gain, c.gain)
    # path loss x shadowing is symmetric; only fading differs between directions
    no_fade = ChannelRealization.draw(world.cavs, ChannelConfig(fading=False), seed=7, cycle=3)
    assert np.allclose(no_fade.gain, no_fade.gain.transpose(1, 0, 2))
    # a pair's draw does not depend on which other vehicles exist
    pair = ChannelRealization.draw(world.cavs[:2], cfg, seed=7, cycle=3)
    assert pair.h(0, 1, 5) == a.h(0, 1, 5)


def test_validate_schedule_cases():
    assert validate_schedule(Schedule()) == []
    hd = validate_schedule(Schedule([Upload(0, 1, 0, 0), Upload(1, 0, 0, 0)]))
    assert [v.kind for v in hd] == ["half_duplex"]
    multi = validate_schedule(Schedule([Upload(0, 1, 0, 0), Upload(0, 1, 1, 2)]))
    assert [v.kind for v in multi] == ["multi_subchannel"]
    p = Partition((frozenset({0, 1}), frozenset({2, 3})), (0, 2))
    kinds = {v.kind for v in validate_schedule(Schedule([Upload(1, 3, 0, 0), Upload(3, 0, 0, 1)]), p)}
    assert kinds == {"non_leader_receiver", "non_member_upload"}
    assert validate_schedule(Schedule([Upload(1, 0, 0, 0), Upload(3, 2, 5, 1)]), p) == []


def test_schedule_links_and_equality():
    s = Schedule([Upload(0, 1, 3, 0), Upload(0, 1, 4, 0), Upload(2, 1, 3, 1)])
    assert set(s.links()) == {(0, 1, 0), (2, 1, 1)}
    assert len(s) == 3 and Upload(0, 1, 4, 0) in s
    assert s.with_link((2, 1, 1), [5]) == s | Schedule([Upload(2, 1, 5, 1)])
    assert s.transmitters(0) == {0}
    assert s.inbound(1) == [(0, 1, 0), (2, 1, 1)]


def test_delay_fixtures():
    world, real = fixture_link()
    cfg = NO_FADE
    rate = hand_rate(100)
    # one grid whose density carries exactly rate * 0.1 s worth of bits
    rho = np.zeros((2, 4))
    rho[0, 2] = rate * 0.1 / cfg.c0
    dens = DensityField((0, 1), rho)
    s = Schedule([Upload(0, 1, 2, 0)])
    assert data_volume(0, 1, 0, s, dens, cfg) == pytest.approx(rate * 0.1)
    assert transmission_delay(0, 1, 0, s, dens, real, cfg) == pytest.approx(0.1)
    assert not check_deadline(1, s, dens, real, cfg, 1e12, 0.1)
    assert check_deadline(1, Schedule(), dens, real, cfg, 1e12, 0.1)
    assert transmission_delay(0, 1, 0, Schedule(), dens, real, cfg) == 0.0
    doubled = DensityField((0, 1), rho * 2)
    assert transmission_delay(0, 1, 0, s, doubled, real, cfg) == pytest.approx(0.2)


def test_computation_delay():
    cfg = ChannelConfig()
    rho = np.zeros((2, 1))
    rho[0, 0] = 10e6 / cfg.c0  # 10 Mbit
    dens = DensityField((0, 1), rho)
    s = Schedule([Upload(0, 1, 0, 0)])
    assert computation_delay(1, s, dens, cfg, 1e12) == pytest.approx(1e-3)
    assert computation_delay(1, s, dens, cfg, 2e12) == pytest.approx(0.5e-3)
    assert computation_delay(1, Schedule(), dens, cfg, 1e12) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.data())
def test_removing_an_upload_keeps_deadline(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    world = make_world(rng.uniform(150, 250, (4, 2)))
    cfg = ChannelConfig()
    real = ChannelRealization.draw(world.cavs, cfg, 0, 0)
    ups = [Upload(int(m), 0, int(g), int(m)) for m in (1, 2, 3) for g in np.flatnonzero(world.sens[m])[:40]]
    s = Schedule(ups)
    drop = ups[int(rng.integers(len(ups)))]
    smaller = Schedule(set(ups) - {drop})
    if check_deadline(0, s, world.density, real, cfg, 1e12, 0.1):
        assert check_deadline(0, smaller, world.density, real, cfg, 1e12, 0.1)
