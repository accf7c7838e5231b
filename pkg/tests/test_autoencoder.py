import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from twincsi.autoencoder import (
    Adam,
    AutoencoderModel,
    TrainConfig,
    TrainingDiverged,
    decode,
    encode,
    evaluate_nmse,
    gradient_check,
    init_model,
    latent_from_ratio,
    load_model,
    loss_and_grads,
    nmse_per_sample,
    save_model,
    train,
    write_history_csv,
)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def small(latent=4, seed=0):
    return init_model(latent, seed, input_size=64, hidden=(16,))


def toy_corpus(n=100, d=64, seed=0):
    # low-rank structure so that a small bottleneck can learn it
    rng = np.random.default_rng(seed)
    basis = rng.standard_normal((3, d))
    x = rng.standard_normal((n, 3)) @ basis
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_latent_sizes_from_ratio():
    assert latent_from_ratio(1 / 64) == 32
    assert latent_from_ratio(1 / 32) == 64
    assert latent_from_ratio(1 / 16) == 128
    assert latent_from_ratio(1 / 8) == 256


def test_init_shapes_and_determinism():
    m = init_model(32, 5)
    shapes = [w.shape for w, _ in m.layers]
    assert shapes == [(2048, 512), (512, 32), (32, 512), (512, 2048)]
    assert all(not b.any() for _, b in m.layers)
    again = init_model(32, 5)
    assert all(np.array_equal(a, b) for a, b in zip(m.params(), again.params()))
    with pytest.raises(ValueError):
        init_model(2048, 0)
    with pytest.raises(ValueError):
        init_model(0, 0)


def test_bad_layer_chain_rejected():
    w = np.zeros((4, 2))
    with pytest.raises(ValueError):
        AutoencoderModel([(w, np.zeros(2))], [(np.zeros((3, 4)), np.zeros(4))], 2)


def test_encode_zero_input_gives_zero_latent():
    m = small()
    assert not np.any(encode(m, np.zeros(64)))
    assert encode(m, np.ones(64)).shape == (4,)
    with pytest.raises(ValueError):
        encode(m, np.ones(63))
    with pytest.raises(ValueError):
        decode(m, np.ones(5))


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(1)
    m = init_model(6, 2, input_size=24, hidden=(10,))
    # non-zero biases so that the bias path is exercised too
    m = AutoencoderModel([(w, rng.standard_normal(b.shape) * 0.1) for w, b in m.enc_layers], [(w, rng.standard_normal(b.shape) * 0.1) for w, b in m.dec_layers], 6)
    x = unit_rows(rng, 1, 24)[0]
    z_ref = oracles.dense_forward(m.enc_layers, x, 0.3, n_enc=2, final_tanh=False)
    np.testing.assert_allclose(encode(m, x), z_ref, rtol=0, atol=1e-10)
    t_ref = oracles.dense_forward(m.layers, x, 0.3, n_enc=2)
    np.testing.assert_allclose(m.decode_pre_norm(encode(m, x)), t_ref, rtol=0, atol=1e-10)
    np.testing.assert_allclose(m.reconstruct(x), t_ref / np.linalg.norm(t_ref), rtol=0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4))
def test_decode_unit_norm_and_tanh_range(z):
    m = small()
    pre = m.decode_pre_norm(np.array(z))
    assert np.all(np.abs(pre) <= 1.0)
    y, flagged = m.decode(np.array(z), return_flag=True)
    if not flagged:
        assert abs(np.linalg.norm(y) - 1.0) < 1e-9


def test_decode_zero_output_is_flagged():
    m = small()
    zero = AutoencoderModel(m.enc_layers, [(np.zeros_like(w), np.zeros_like(b)) for w, b in m.dec_layers], 4)
    y, flagged = zero.decode(np.ones(4), return_flag=True)
    assert flagged and np.all(np.isfinite(y)) and not y.any()


def test_nmse_per_sample_basics():
    x = np.array([[3.0, 4.0]])
    assert nmse_per_sample(x, x)[0] == 0
    assert nmse_per_sample(x, np.zeros_like(x))[0] == 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_check_reduced_model(seed):
    m = init_model(8, seed, input_size=64, hidden=(16,)).astype(np.float64)
    x = unit_rows(np.random.default_rng(seed), 3, 64)
    assert gradient_check(m, x, num_params=200, step=1e-5, seed=seed) < 1e-4


def test_gradient_check_detects_corruption():
    m = init_model(8, 0, input_size=64, hidden=(16,))
    x = unit_rows(np.random.default_rng(0), 3, 64)
    # the first decoder weight tensor is dense enough that sampled entries always hit it
    assert gradient_check(m, x, num_params=400, grad_scale={4: 2.0}) > 0.1


def test_zero_loss_model_has_zero_gradients():
    x = unit_rows(np.random.default_rng(3), 1, 4)[0]
    enc = [(np.zeros((4, 2)), np.ones(2)), (np.zeros((2, 1)), np.ones(1))]
    dec = [(np.zeros((1, 2)), np.ones(2)), (np.zeros((2, 4)), np.arctanh(x / 2))]
    m = AutoencoderModel(enc, dec, 1)
    np.testing.assert_allclose(m.reconstruct(x), x, atol=1e-15)
    loss, grads = loss_and_grads(m, x)
    assert loss < 1e-28
    assert max(np.abs(g).max() for g in grads) < 1e-12


def test_training_halves_toy_loss_and_is_deterministic():
    data = toy_corpus()
    cfg = TrainConfig(learning_rate=1e-3, batch_size=16, epochs=50, seed=1)
    a = train(small(), data, cfg)
    b = train(small(), data, cfg)
    assert a.losses[-1] < 0.5 * a.losses[0]
    assert a.losses == b.losses
    # non-increasing up to 5 % transients
    for prev, cur in zip(a.losses, a.losses[1:]):
        assert cur <= prev * 1.05


def test_zero_learning_rate_keeps_loss_constant():
    data = toy_corpus(64)
    res = train(small(), data, TrainConfig(learning_rate=0.0, batch_size=64, epochs=5, dtype="float64"))
    # parameters never move; only the shuffled summation order changes
    assert max(res.losses) - min(res.losses) < 1e-12


def test_training_rejects_bad_input():
    with pytest.raises(ValueError):
        train(small(), np.zeros((0, 64)))
    with pytest.raises(ValueError):
        train(small(), 2 * toy_corpus(10))
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_divergence_is_reported():
    data = toy_corpus(32)
    m = small()
    bad = AutoencoderModel(m.enc_layers, [(w, b) for w, b in m.dec_layers[:-1]] + [(m.dec_layers[-1][0] * np.nan, m.dec_layers[-1][1])], 4)
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(bad, data, TrainConfig(epochs=1))


def test_max_iterations_and_callback():
    data = toy_corpus(100)
    seen = []
    res = train(small(), data, TrainConfig(batch_size=10, epochs=100, max_iterations=25), callback=lambda it, m: seen.append(it), callback_every=10)
    assert res.iterations == 25
    assert seen == [0, 10, 20]
    assert len(res.history) == 3


def test_adam_single_step_matches_closed_form():
    p = [np.array([1.0, -2.0])]
    g = [np.array([0.5, -0.25])]
    Adam(p, lr=0.1).step(p, g)
    # after one step the bias-corrected update is lr * sign(g) (up to eps)
    np.testing.assert_allclose(p[0], [0.9, -1.9], atol=1e-7)


def test_checkpoint_round_trip(tmp_path):
    m = init_model(32, 3)
    path = tmp_path / "m.adae"
    save_model(m, path)
    blob = path.read_bytes()
    assert blob[:4] == b"ADAE"
    back = load_model(path)
    assert back.latent_size == 32
    assert all(np.array_equal(a, b) for a, b in zip(m.params(), back.params()))
    save_model(back, tmp_path / "again.adae")
    assert (tmp_path / "again.adae").read_bytes() == blob
    (tmp_path / "bad").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        load_model(tmp_path / "bad")


def test_history_csv(tmp_path):
    out = tmp_path / "h.csv"
    write_history_csv(out, [(1, 0.5, 0.6), (2, 0.25, float("nan"))])
    lines = out.read_text().splitlines()
    assert lines[0] == "epoch,train_nmse,val_nmse"
    assert lines[1] == "1,0.5,0.6"


def test_evaluate_nmse_batches_consistently():
    data = toy_corpus(50)
    m = small()
    np.testing.assert_allclose(evaluate_nmse(m, data, batch=7), evaluate_nmse(m, data, batch=1024), rtol=1e-12)
