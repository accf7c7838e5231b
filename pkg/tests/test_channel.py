import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from twincsi.channel import (
    ChannelMatrix,
    StatGenConfig,
    array_response,
    channel_from_paths,
    count_clipped,
    delay_domain_channel,
    freq_channel,
    stack,
    statistical_channels,
)
from twincsi.csiproc import (
    AngularDelayCsi,
    batch_from_delay_angular,
    batch_to_delay_angular,
    from_delay_angular,
    from_real,
    full_delay_angular,
    to_delay_angular,
    to_real,
)
from twincsi.raytracer import Path
from twincsi.scene import ArrayConfig, OfdmConfig

OFDM = OfdmConfig()
TS = OFDM.sample_period


def ula(n=32, fov=180.0):
    return ArrayConfig((0.0, 0.0, 15.0), n, OFDM.wavelength / 2, (1.0, 0.0, 0.0), (0.0, -1.0, 0.0), fov)


def path(gain, delay, az=-math.pi / 2, el=0.0):
    return Path(complex(gain), float(delay), float(az), float(el), (), 1.0, np.zeros((2, 3)))


def random_on_grid_paths(rng, n):
    return [
        path(rng.standard_normal() + 1j * rng.standard_normal(), int(rng.integers(0, 32)) * TS, rng.uniform(-math.pi, 0), rng.uniform(-0.3, 0.1))
        for _ in range(n)
    ]


# ---------------------------------------------------------------- array response


def test_array_response_trivial_cases():
    np.testing.assert_allclose(array_response(ula(1), 0.3, 0.1, OFDM.wavelength), [1.0])
    np.testing.assert_allclose(array_response(ula(), -math.pi / 2, 0.0, OFDM.wavelength), np.ones(32), atol=1e-12)
    endfire = array_response(ula(), 0.0, 0.0, OFDM.wavelength)
    np.testing.assert_allclose(endfire, (-1.0) ** np.arange(32), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-1.5, 1.5))
def test_array_response_matches_loop_oracle(az, el):
    ref = oracles.steering(32, OFDM.wavelength / 2, az, el, OFDM.wavelength)
    np.testing.assert_allclose(array_response(ula(), az, el, OFDM.wavelength), ref, atol=1e-9)


# ---------------------------------------------------------------- delay and frequency domain


def test_single_path_on_grid_taps():
    h = delay_domain_channel([path(1.0, 0.0)], ula(1), OFDM)
    assert h[0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(h[0, 1:], 0.0, atol=1e-15)
    a = array_response(ula(), 0.4, -0.1, OFDM.wavelength)
    h = delay_domain_channel([path(0.5 - 2j, 3 * TS, 0.4, -0.1)], ula(), OFDM)
    np.testing.assert_allclose(h[:, 3], (0.5 - 2j) * a, atol=1e-12)
    np.testing.assert_allclose(np.delete(h, 3, axis=1), 0.0, atol=1e-12)


def test_empty_path_list_gives_zero_channel():
    assert not np.any(delay_domain_channel([], ula(), OFDM))


def test_linearity_and_scaling():
    rng = np.random.default_rng(1)
    a, b = random_on_grid_paths(rng, 3), random_on_grid_paths(rng, 4)
    ha, hb = (channel_from_paths(p, ula(), OFDM).h for p in (a, b))
    np.testing.assert_allclose(channel_from_paths(a + b, ula(), OFDM).h, ha + hb, atol=1e-12)
    scaled = [path(3j * p.gain, p.delay, p.azimuth, p.elevation) for p in a]
    np.testing.assert_allclose(channel_from_paths(scaled, ula(), OFDM).h, 3j * ha, atol=1e-12)


def test_freq_channel_flat_and_shift():
    k = OFDM.num_subcarriers
    d = np.zeros((1, 32), complex)
    d[0, 0] = 1
    np.testing.assert_allclose(freq_channel(d, k).h, np.ones((1, k)))
    d = np.zeros((1, 32), complex)
    d[0, 3] = 1
    h = freq_channel(d, k).h[0]
    np.testing.assert_allclose(np.abs(h), 1.0)
    np.testing.assert_allclose(h, np.exp(-2j * np.pi * 3 * np.arange(k) / k), atol=1e-12)


def test_two_path_direct_sum_oracle():
    lam, k = OFDM.wavelength, OFDM.num_subcarriers
    specs = [(0.7 + 0.2j, 2, 0.3, -0.05), (-0.1 + 0.9j, 11, -2.0, 0.2)]
    h = channel_from_paths([path(g, d * TS, az, el) for g, d, az, el in specs], ula(), OFDM).h
    ref = np.zeros((32, k), complex)
    for g, d, az, el in specs:
        a = oracles.steering(32, lam / 2, az, el, lam)
        for kk in range(k):
            ref[:, kk] += g * a * cmath.exp(-2j * math.pi * kk * d / k)
    np.testing.assert_allclose(h, ref, atol=1e-12)


def test_clipped_paths_counted():
    paths = [path(1, 5 * TS), path(1, 80 * TS), path(1, 39 * TS), path(1, 40 * TS)]
    assert count_clipped(paths, OFDM) == 2
    with pytest.raises(ValueError):
        freq_channel(np.zeros((1, 300)), 256)


def test_channel_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        ChannelMatrix(np.array([[np.nan]]))


# ---------------------------------------------------------------- statistical baseline


def test_statistical_determinism_and_shape():
    cfg = StatGenConfig(seed=5)
    a = stack(statistical_channels(cfg, ula(), OFDM, 20))
    b = stack(statistical_channels(cfg, ula(), OFDM, 20))
    assert a.shape == (20, 32, 256)
    assert a.tobytes() == b.tobytes()
    c = stack(statistical_channels(StatGenConfig(seed=6), ula(), OFDM, 20))
    assert not np.array_equal(a, c)


def test_statistical_normalisation():
    chans = statistical_channels(StatGenConfig(seed=0), ula(), OFDM, 10_000)
    power = np.mean([np.linalg.norm(c.h) ** 2 for c in chans]) / (32 * 256)
    assert 0.97 <= power <= 1.03


def test_statistical_single_ray_is_rank_one():
    cfg = StatGenConfig(num_clusters=1, rays_per_cluster=1, angle_spread=0.0, seed=3)
    for c in statistical_channels(cfg, ula(), OFDM, 10):
        s = np.linalg.svd(c.h, compute_uv=False)
        assert s[1] < 1e-9 * s[0]


def test_statistical_config_validation():
    with pytest.raises(ValueError):
        StatGenConfig(num_clusters=0)
    with pytest.raises(ValueError):
        StatGenConfig(delay_scale=0.0)
    with pytest.raises(ValueError):
        statistical_channels(StatGenConfig(), ula(), OFDM, 0)


# ---------------------------------------------------------------- delay-angular transform


def test_single_on_grid_broadside_path_is_one_entry():
    csi = to_delay_angular(channel_from_paths([path(2 - 1j, 3 * TS)], ula(), OFDM))
    mag = np.abs(csi.g)
    assert mag[3, 0] == pytest.approx(1.0, abs=1e-12)
    mag[3, 0] = 0
    assert mag.max() < 1e-12


def test_unitarity_before_truncation():
    rng = np.random.default_rng(2)
    h = rng.standard_normal((32, 256)) + 1j * rng.standard_normal((32, 256))
    assert np.linalg.norm(full_delay_angular(h)) == pytest.approx(np.linalg.norm(h), rel=1e-12)


def test_round_trip_and_truncation_losslessness():
    rng = np.random.default_rng(3)
    for _ in range(50):
        h = channel_from_paths(random_on_grid_paths(rng, 6), ula(), OFDM).h
        g = full_delay_angular(h)
        assert np.sum(np.abs(g[32:]) ** 2) < 1e-12 * np.sum(np.abs(g) ** 2)
        back = from_delay_angular(to_delay_angular(h)).h
        assert np.max(np.abs(back - h)) < 1e-10


def test_round_trip_statistical_corpus():
    h = stack(statistical_channels(StatGenConfig(seed=9), ula(), OFDM, 100))
    g, s = batch_to_delay_angular(h)
    assert np.max(np.abs(batch_from_delay_angular(g, s, 256) - h)) < 1e-10


def test_scale_invariance():
    rng = np.random.default_rng(4)
    h = channel_from_paths(random_on_grid_paths(rng, 3), ula(), OFDM).h
    a, b = to_delay_angular(h), to_delay_angular(7 * h)
    np.testing.assert_allclose(a.g, b.g, atol=1e-14)
    assert b.scale == pytest.approx(7 * a.scale, rel=1e-12)
    assert np.linalg.norm(a.g) == pytest.approx(1.0, abs=1e-9)


def test_zero_channel_rejected():
    with pytest.raises(ValueError):
        to_delay_angular(np.zeros((32, 256)))
    with pytest.raises(ValueError):
        batch_to_delay_angular(np.zeros((2, 32, 256)))
    with pytest.raises(ValueError):
        AngularDelayCsi(np.zeros((32, 32)), 1.0)


def test_batch_matches_single():
    h = stack(statistical_channels(StatGenConfig(seed=1), ula(), OFDM, 5))
    g, s = batch_to_delay_angular(h)
    for i in range(5):
        one = to_delay_angular(h[i])
        np.testing.assert_allclose(g[i], one.g, atol=1e-14)
        assert s[i] == pytest.approx(one.scale, rel=1e-12)


def test_real_layout():
    g = np.arange(32 * 32).reshape(32, 32) * (1 + 2j)
    x = to_real(g)
    assert x.shape == (2048,)
    assert x[1] == g[0, 1].real and x[32] == g[1, 0].real and x[1024 + 33] == g[1, 1].imag
    np.testing.assert_array_equal(from_real(x), g)
    batch = np.stack([g, 2 * g])
    np.testing.assert_array_equal(from_real(to_real(batch)), batch)
