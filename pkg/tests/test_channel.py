import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavisac.channel import (
    ArrayGeometry,
    ChannelParams,
    DegenerateGeometry,
    FadingDraws,
    Scene,
    WorldState,
    comm_sinr,
    compute_sinrs,
    link_gains,
    rician_gain,
    sensing_sinr_bs,
    sensing_sinr_uav,
    steering_vector,
)
from uavisac.config import EnvConfig, db_to_linear, dbm_to_watts

from conftest import random_beams


def steering_oracle(geom, origin, toward):
    """Element (ix, iy) sits at (ix*dx, iy*dy); phase is the projection on the unit direction."""
    d = np.asarray(toward, float) - np.asarray(origin, float)
    u = d / np.linalg.norm(d)
    out = []
    for ix in range(geom.mx):
        for iy in range(geom.my):
            path = ix * geom.dx * u[0] + iy * geom.dy * u[1]
            out.append(np.exp(-2j * np.pi * path / geom.wavelength))
    return np.array(out)


def gain_oracle(beta0, pathloss, k, g):
    return (np.sqrt(k / (k + 1)) + np.sqrt(1 / (k + 1)) * g) * np.sqrt(beta0 / pathloss)


def sinr_oracle(scene, world, W, gains):
    """Per-term brute force over beams and scatterers (no projection matrix)."""
    p = scene.params
    w = W.w
    n_uav = world.n
    a_t = steering_oracle(scene.geom, world.bs_pos, world.target_pos)
    a_u = [steering_oracle(scene.geom, world.bs_pos, world.uav_pos[i]) for i in range(n_uav)]

    def hit(a, k):
        return abs(np.vdot(a, w[:, k])) ** 2

    comm = []
    for n in range(n_uav):
        c2 = abs(gains.comm[n]) ** 2
        num = c2 * hit(a_u[n], n + 1)
        den = p.sigma2_0
        for k in range(1, n_uav + 1):
            if k != n + 1:
                den += c2 * hit(a_u[n], k)
        for k in range(n_uav + 1):
            den += p.rcs_target**2 * abs(gains.uav_target[n]) ** 2 * hit(a_t, k)
            for i in range(n_uav):
                if i != n:
                    den += p.rcs_uav**2 * abs(gains.uav_uav[n, i]) ** 2 * hit(a_u[i], k)
        comm.append(num / den)

    def sense(gain, resid):
        s2 = p.rcs_target**2 * abs(gain) ** 2
        num = s2 * hit(a_t, 0)
        den = resid + p.sigma2_0 + sum(s2 * hit(a_t, k) for k in range(1, n_uav + 1))
        return num / den

    return np.array(comm), sense(gains.bs_target, p.sigma2_ubs), np.array(
        [sense(gains.uav_target[i], p.sigma2_un) for i in range(n_uav)])


def test_steering_boresight_all_ones():
    geom = ArrayGeometry(8, 8, 0.05, 0.05, 0.1)
    a = steering_vector(geom, (0, 0, 0), (0, 0, 10))
    assert np.allclose(a, np.ones(64))


def test_steering_unit_modulus_and_norm():
    geom = ArrayGeometry(8, 8, 0.05, 0.05, 0.1)
    a = steering_vector(geom, (0, 0, 0), (60, 0, 60))
    assert np.allclose(np.abs(a), 1.0)
    assert np.isclose(np.vdot(a, a).real, 64.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.integers(1, 6), st.integers(1, 6))
def test_steering_matches_per_element_oracle(vec, mx, my):
    geom = ArrayGeometry(mx, my, 0.05, 0.05, 0.1)
    assert np.allclose(steering_vector(geom, (0, 0, 0), vec), steering_oracle(geom, (0, 0, 0), vec), atol=1e-12)


def test_steering_degenerate_direction():
    geom = ArrayGeometry(2, 2, 0.05, 0.05, 0.1)
    with pytest.raises(DegenerateGeometry):
        steering_vector(geom, (1, 2, 3), (1, 2, 3))


def test_rician_gain_pure_los_comm(scene):
    # d = 10 m, K -> inf: |h|^2 = beta0 / d^2
    params = ChannelParams(np.inf, 1e-5, 1e-5, 0.9, 0.9, 1e-11, 1e-10, 1e-10)
    h = rician_gain(params, "comm", (0, 0, 0), (10, 0, 0), g=0.7 + 0.2j)
    assert np.isclose(abs(h) ** 2, 1e-5 / 100.0)


@pytest.mark.parametrize("kind,pathloss", [("bs_sense", 50.0**4), ("comm", 50.0**2),
                                            ("uav_sense", 30.0**2 * 40.0**2)])
def test_rician_gain_matches_formula(kind, pathloss):
    params = ChannelParams(10.0, 1e-5, 1e-5, 0.9, 0.9, 1e-11, 1e-10, 1e-10)
    g = 0.3 - 0.4j
    if kind == "uav_sense":
        h = rician_gain(params, kind, (0, 0, 0), (30, 40, 0), via=(30, 0, 0), g=g)
    else:
        h = rician_gain(params, kind, (0, 0, 0), (30, 40, 0), g=g)
    assert np.isclose(h, gain_oracle(1e-5, pathloss, 10.0, g), rtol=1e-12)


def test_rician_gain_zero_distance_raises():
    params = ChannelParams(10.0, 1e-5, 1e-5, 0.9, 0.9, 1e-11, 1e-10, 1e-10)
    with pytest.raises(DegenerateGeometry):
        rician_gain(params, "comm", (1, 1, 1), (1, 1, 1), g=0)


def test_rician_gain_needs_rng_unless_frozen():
    params = ChannelParams(10.0, 1e-5, 1e-5, 0.9, 0.9, 1e-11, 1e-10, 1e-10)
    with pytest.raises(ValueError):
        rician_gain(params, "comm", (0, 0, 0), (1, 0, 0))
    frozen = ChannelParams(10.0, 1e-5, 1e-5, 0.9, 0.9, 1e-11, 1e-10, 1e-10, g_frozen=True)
    los = np.sqrt(10 / 11) * np.sqrt(1e-5)
    assert np.isclose(rician_gain(frozen, "comm", (0, 0, 0), (1, 0, 0)), los)


def test_rician_power_average(cfg):
    # E|h|^2 = beta0 / pathloss for unit-variance circular scatter
    params = Scene.from_config(cfg).params
    rng = np.random.default_rng(3)
    hs = [rician_gain(params, "comm", (0, 0, 0), (30, 10, 70), rng=rng) for _ in range(20000)]
    expected = db_to_linear(-50) / (30**2 + 10**2 + 70**2)
    assert np.isclose(np.mean(np.abs(hs) ** 2), expected, rtol=0.03)


def test_unit_conversions():
    assert np.isclose(dbm_to_watts(-80.0), 1e-11)
    assert np.isclose(dbm_to_watts(-70.0), 1e-10)
    assert np.isclose(db_to_linear(5.0), 3.1622776601683795)


def test_scene_from_table_defaults(cfg):
    s = Scene.from_config(cfg)
    assert s.geom.m == 64
    assert np.isclose(s.params.beta0_c, 1e-5)
    assert np.isclose(s.params.sigma2_0, 1e-11)
    assert s.power == 5.0


@pytest.mark.parametrize("seed", range(20))
def test_sinrs_match_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    cfg = EnvConfig(n_uavs=n)
    scene = Scene.from_config(cfg)
    world = WorldState((0, 0, 0), rng.uniform([-50, -50, 20], [50, 50, 90], (n, 3)), rng.uniform([20, -30, 20],
                                                                                                [80, 30, 80]))
    gains = link_gains(scene, world, FadingDraws.draw(n, rng))
    W = random_beams(rng, 64, n + 1)
    comm, bs, uav = sinr_oracle(scene, world, W, gains)
    rep = compute_sinrs(scene, world, W, gains)
    assert np.allclose(rep.comm, comm, rtol=1e-10)
    assert np.isclose(rep.sense_bs, bs, rtol=1e-10)
    assert np.allclose(rep.sense_uav, uav, rtol=1e-10)
    for i in range(1, n + 1):
        assert np.isclose(comm_sinr(i, scene, world, W, gains), comm[i - 1], rtol=1e-10)
        assert np.isclose(sensing_sinr_uav(i, scene, world, W, gains), uav[i - 1], rtol=1e-10)
    assert np.isclose(sensing_sinr_bs(scene, world, W, gains), bs, rtol=1e-10)


def test_comm_sinr_index_checked(scene, world):
    gains = link_gains(scene, world, FadingDraws.zeros(2))
    W = random_beams(np.random.default_rng(0), 64, 3)
    with pytest.raises(IndexError):
        comm_sinr(0, scene, world, W, gains)
    with pytest.raises(IndexError):
        comm_sinr(3, scene, world, W, gains)


def test_sensing_beam_null_gives_zero_sinr(scene, world):
    gains = link_gains(scene, world, FadingDraws.zeros(2))
    rng = np.random.default_rng(1)
    W = random_beams(rng, 64, 3)
    a = gains.steer[:, 0]
    w0 = W.w[:, 0] - a * np.vdot(a, W.w[:, 0]) / np.vdot(a, a)
    W.w[:, 0] = w0
    assert compute_sinrs(scene, world, W, gains).sense_bs == pytest.approx(0.0, abs=1e-20)


def test_matched_beam_beats_random(scene, world):
    gains = link_gains(scene, world, FadingDraws.zeros(2))
    rng = np.random.default_rng(2)
    W = random_beams(rng, 64, 3)
    W_m = W.w.copy()
    W_m[:, 0] = gains.steer[:, 0] * np.linalg.norm(W.w[:, 0]) / 8.0
    from uavisac.channel import BeamformingMatrix

    matched = compute_sinrs(scene, world, BeamformingMatrix(W_m, 5.0), gains).sense_bs
    assert matched > compute_sinrs(scene, world, W, gains).sense_bs


def test_sinr_scales_to_noise_free_limit(scene, world):
    # doubling all beam amplitudes cannot reduce any SINR (noise share shrinks)
    gains = link_gains(scene, world, FadingDraws.zeros(2))
    W = random_beams(np.random.default_rng(5), 64, 3)
    from uavisac.channel import BeamformingMatrix

    a = compute_sinrs(scene, world, W, gains)
    b = compute_sinrs(scene, world, BeamformingMatrix(2 * W.w, 20.0), gains)
    assert np.all(b.comm >= a.comm - 1e-12) and b.sense_bs >= a.sense_bs
