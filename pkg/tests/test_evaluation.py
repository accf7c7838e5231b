import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenes import make_scene, small_city
from twincsi.evaluation import (
    EvalConfig,
    RankDeficient,
    coverage,
    dbm_to_w,
    noisy_channel_estimate,
    nmse,
    nmse_db,
    sum_rate,
    write_results_csv,
    zf_precoder,
    zf_precoders,
)
from twincsi.harness.demo import with_fov
from twincsi.raytracer import TraceConfig


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_nmse_examples():
    h = np.array([1.0 + 1j, 2.0])
    assert nmse(h, h) == 0
    assert nmse(h, np.zeros(2)) == 1
    assert nmse(np.array([1.0]), np.array([0.5])) == pytest.approx(0.25)
    assert nmse_db(np.array([1.0]), np.array([0.9])) == pytest.approx(-20.0)
    with pytest.raises(ValueError):
        nmse(np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        nmse(np.ones(2), np.ones(3))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100), st.floats(-math.pi, math.pi), st.integers(0, 10_000))
def test_nmse_scale_invariant(mag, phase, seed):
    rng = np.random.default_rng(seed)
    h, e = crandn(rng, 4, 6), crandn(rng, 4, 6)
    c = mag * np.exp(1j * phase)
    assert nmse(c * h, c * e) == pytest.approx(nmse(h, e), rel=1e-12)


def test_zf_single_user():
    rng = np.random.default_rng(0)
    h = crandn(rng, 8)
    f = zf_precoder(h, 2.0)
    np.testing.assert_allclose(f[:, 0], h / np.linalg.norm(h) ** 2 * math.sqrt(2.0) * np.linalg.norm(h), rtol=1e-12)
    g = np.vdot(h, f[:, 0])
    assert abs(g.imag) < 1e-12 and g.real > 0
    assert np.sum(np.abs(f) ** 2) == pytest.approx(2.0)


def test_zf_residual_and_orthogonal_users():
    rng = np.random.default_rng(1)
    h = crandn(rng, 4, 2)
    f = zf_precoder(h, 1.0)
    raw = h @ np.linalg.inv(h.conj().T @ h)
    np.testing.assert_allclose(h.conj().T @ raw, np.eye(2), atol=1e-10)
    gram = h.conj().T @ f
    assert abs(gram[0, 1]) < 1e-8 * abs(gram[0, 0]) and abs(gram[1, 0]) < 1e-8 * abs(gram[1, 1])
    q = np.linalg.qr(crandn(rng, 6, 3))[0] * [1.0, 2.0, 0.5]
    f = zf_precoder(q, 1.0)
    for u in range(3):
        cos = abs(np.vdot(q[:, u], f[:, u])) / (np.linalg.norm(q[:, u]) * np.linalg.norm(f[:, u]))
        assert cos == pytest.approx(1.0, abs=1e-12)


def test_zf_rank_deficient_names_subcarrier():
    h = np.ones((4, 2), complex)
    with pytest.raises(RankDeficient, match="subcarrier 3"):
        zf_precoder(h, 1.0, 3)
    stack = np.stack([np.eye(4, 2, dtype=complex), np.ones((4, 2), complex)])
    with pytest.raises(RankDeficient, match="subcarrier 1"):
        zf_precoders(stack, 1.0)


def test_sum_rate_single_user_closed_form():
    rng = np.random.default_rng(2)
    h = crandn(rng, 16, 8, 1)
    f = zf_precoders(h, 3.0)
    expect = np.mean(np.log2(1 + 3.0 * np.linalg.norm(h[:, :, 0], axis=1) ** 2 / 0.5))
    assert sum_rate(h, f, 0.5) == pytest.approx(expect, rel=1e-12)
    assert sum_rate(h, f, 1e30) < 1e-20


def test_sum_rate_two_user_hand_case():
    # K = 2, N_t = 2; explicit SINRs
    h = np.array([[[1, 0], [0, 1]], [[1, 1j], [0, 1]]], dtype=complex)
    f = np.array([[[1, 0.5], [0, 1]], [[0.5, 0], [1j, 1]]], dtype=complex)
    total = 0.0
    for k in range(2):
        for u in range(2):
            s = abs(np.vdot(h[k][:, u], f[k][:, u])) ** 2
            i = abs(np.vdot(h[k][:, u], f[k][:, 1 - u])) ** 2
            total += math.log2(1 + s / (i + 0.1))
    assert sum_rate(h, f, 0.1) == pytest.approx(total / 2, rel=1e-12)


def test_sum_rate_rotation_invariant():
    rng = np.random.default_rng(3)
    h = crandn(rng, 4, 6, 3)
    f = zf_precoders(crandn(rng, 4, 6, 3), 1.0)
    q = np.linalg.qr(crandn(rng, 6, 6))[0]
    assert sum_rate(q @ h, q @ f, 0.2) == pytest.approx(sum_rate(h, f, 0.2), rel=1e-10)


def test_noise_levels():
    cfg = EvalConfig()
    assert cfg.noise_dbm == pytest.approx(-174 + 10 * math.log10(3e4) + 7)
    assert cfg.noise_dbm == pytest.approx(-122.2, abs=0.05)
    assert cfg.power_per_subcarrier == pytest.approx(dbm_to_w(43) / 256)
    assert cfg.estimation_noise_var == pytest.approx(cfg.noise_w * 256 / dbm_to_w(43))
    with pytest.raises(ValueError):
        EvalConfig(num_users=0)
    with pytest.raises(ValueError):
        EvalConfig(sum_power=0.0)


def test_noisy_estimate():
    cfg = EvalConfig()
    h = np.ones((10, 20), complex)
    assert np.array_equal(noisy_channel_estimate(h, cfg, noise_var=0.0), h)
    big = np.zeros(100_000, complex)
    e = noisy_channel_estimate(big, cfg, np.random.default_rng(0))
    assert np.mean(np.abs(e) ** 2) == pytest.approx(cfg.estimation_noise_var, rel=0.05)
    a = noisy_channel_estimate(h, cfg, 5)
    b = noisy_channel_estimate(h, cfg, 5)
    assert np.array_equal(a, b)


def test_coverage():
    open_scene = make_scene(ues=[(5, -5, 2), (10, 3, 1)])
    assert coverage(open_scene) == 1.0
    city = small_city(fov=180.0)
    c180 = coverage(city)
    assert coverage(with_fov(city, 140.0)) <= c180
    assert coverage(city, TraceConfig(max_reflections=1)) <= coverage(city, TraceConfig(max_reflections=4))


def test_results_csv(tmp_path):
    out = tmp_path / "r.csv"
    write_results_csv(out, [("exp", "nmse_db", -7.5, 0, "abc")])
    assert out.read_text().splitlines() == ["experiment_id,metric,value,seed,config_hash", "exp,nmse_db,-7.5,0,abc"]
