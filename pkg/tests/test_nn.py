import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpanomaly.nn import checkpoint
from dpanomaly.nn.model import (
    ArchError,
    InputError,
    ModelArch,
    build_model,
    forward_loss,
    per_example_gradients,
    predict_distribution,
)


def linear_unit(w=2.0):
    m = build_model(ModelArch("mlp", widths=(1, 1)), 0)
    m.params["dense0.W"][:] = w
    m.params["dense0.b"][:] = 0.0
    return m


# -- construction ---------------------------------------------------------------


def test_build_is_deterministic():
    arch = ModelArch("dense-autoencoder", widths=(784, 128, 32, 128, 784))
    assert checkpoint.dumps(build_model(arch, 7)) == checkpoint.dumps(build_model(arch, 7))


def test_lstm_output_width_is_vocabulary():
    m = build_model(ModelArch("lstm-lm", vocab_size=29, history=10, hidden=8), 1)
    assert m.output(np.zeros((2, 10), dtype=int)).shape == (2, 29)


def test_seeds_give_different_parameters():
    arch = ModelArch("classifier", channels=(4, 8), kernel_size=5)
    assert build_model(arch, 3).digest() != build_model(arch, 4).digest()


@pytest.mark.parametrize(
    "arch",
    [
        ModelArch("dense-autoencoder", widths=(784, 128, 64)),
        ModelArch("conv-autoencoder", channels=(4,), kernel_size=2),
        ModelArch("lstm-lm", vocab_size=1, history=3),
        ModelArch("classifier", widths=(784, 9)),
        ModelArch("nonsense"),
    ],
)
def test_inconsistent_arch_rejected(arch):
    with pytest.raises(ArchError):
        build_model(arch, 0)


# -- losses -------------------------------------------------------------------


def test_linear_unit_mse():
    assert forward_loss(linear_unit(), np.array([1.0]), np.array([0.0])) == 4.0


def test_perfect_reconstruction_has_zero_loss():
    m = build_model(ModelArch("mlp", widths=(3, 3)), 0)
    m.params["dense0.W"][:] = np.eye(3)
    x = np.array([0.2, 0.5, 0.9])
    assert forward_loss(m, x) == 0.0


def test_confident_correct_cross_entropy_is_zero():
    m = build_model(ModelArch("classifier", widths=(2, 3), n_classes=3), 0)
    m.params["dense0.W"][:] = 0.0
    m.params["dense0.b"][:] = [0.0, 800.0, 0.0]
    assert forward_loss(m, np.zeros(2), 1) == 0.0


def test_shape_mismatch_is_input_error():
    m = build_model(ModelArch("dense-autoencoder", widths=(4, 2, 4)), 0)
    with pytest.raises(InputError):
        forward_loss(m, np.zeros(5))


def test_empty_batch_is_input_error():
    m = build_model(ModelArch("dense-autoencoder", widths=(4, 2, 4)), 0)
    with pytest.raises(InputError):
        per_example_gradients(m, np.zeros((0, 4)))


@given(st.integers(0, 2**31), st.sampled_from(["ae", "clf", "lstm"]))
def test_losses_are_non_negative(seed, which):
    rng = np.random.default_rng(seed)
    if which == "ae":
        m = build_model(ModelArch("dense-autoencoder", widths=(6, 3, 6)), seed)
        out = m.losses(rng.uniform(size=(5, 6)))
    elif which == "clf":
        m = build_model(ModelArch("classifier", widths=(6, 4), n_classes=4), seed)
        out = m.losses(rng.normal(size=(5, 6)) * 50, rng.integers(0, 4, 5))
    else:
        m = build_model(ModelArch("lstm-lm", vocab_size=5, history=3, hidden=4), seed)
        out = m.losses(rng.integers(0, 6, (5, 3)), rng.integers(0, 5, 5))
    assert np.all(out >= 0) and np.all(np.isfinite(out))


# -- gradients ------------------------------------------------------------------


def test_linear_unit_gradient():
    g = per_example_gradients(linear_unit(), np.array([[1.0]]), np.array([[0.0]]))
    assert g[0, 0] == 4.0  # d/dw (w x - t)^2 = 2 (w x - t) x
    assert g[0, 1] == 4.0


def _random_instance(i: int):
    """Small random model + batch; cycles through every layer kind."""
    rng = np.random.default_rng(1000 + i)
    act = ["relu", "tanh", "sigmoid"][i % 3]
    family = i % 6
    b = 3
    if family == 0:
        arch = ModelArch("mlp", widths=tuple(rng.integers(2, 6, size=3)), activation=act)
        x, y = rng.normal(size=(b, arch.widths[0])), rng.normal(size=(b, arch.widths[-1]))
    elif family == 1:
        w = int(rng.integers(3, 7))
        arch = ModelArch("dense-autoencoder", widths=(w, 2, w), activation=act)
        x, y = rng.uniform(size=(b, w)), None
    elif family == 2:
        arch = ModelArch("classifier", widths=(5, 4, 3), n_classes=3, activation=act)
        x, y = rng.normal(size=(b, 5)), rng.integers(0, 3, b)
    elif family == 3:
        size = int(rng.integers(4, 8))
        arch = ModelArch("classifier", channels=(2, 3), kernel_size=3, image_size=size, n_classes=3, activation=act)
        x, y = rng.uniform(size=(b, size * size)), rng.integers(0, 3, b)
    elif family == 4:
        size = int(rng.integers(3, 7))
        arch = ModelArch("conv-autoencoder", channels=(2,), kernel_size=3, image_size=size, activation=act)
        x, y = rng.uniform(size=(b, size * size)), None
    else:
        v, h = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        arch = ModelArch("lstm-lm", vocab_size=v, history=h, hidden=3, lstm_layers=1 + i % 2)
        x, y = rng.integers(0, v + 1, (b, h)), rng.integers(0, v, b)
    m = build_model(arch, i)
    # random non-zero biases so every parameter has a generic gradient
    m.set_flat_params(m.flat_params() + rng.normal(scale=0.3, size=m.n_params))
    return m, x, y


def _finite_difference(m, x, y, i, step=1e-5):
    theta = m.flat_params()
    out = np.empty(len(theta))
    for j in range(len(theta)):
        for sign in (1, -1):
            t = theta.copy()
            t[j] += sign * step
            m.set_flat_params(t)
            v = forward_loss(m, x, y)
            out[j] = v if sign == 1 else (out[j] - v) / (2 * step)
    m.set_flat_params(theta)
    return out


@pytest.mark.parametrize("i", range(100))
def test_gradients_match_finite_differences(i):
    m, x, y = _random_instance(i)
    g = per_example_gradients(m, x, y)
    for r in range(len(x)):
        num = _finite_difference(m, x[r], None if y is None else y[r], i)
        scale = np.maximum(np.maximum(np.abs(g[r]), np.abs(num)), 1e-6)
        assert np.max(np.abs(g[r] - num) / scale) <= 1e-4


@pytest.mark.parametrize("i", [0, 3, 4, 5])
def test_fast_gradient_views_match_materialized(i):
    m, x, y = _random_instance(i)
    m.backprop(x, y)
    g = m.example_grads()
    np.testing.assert_allclose(m.sq_norms(), np.einsum("bi,bi->b", g, g), rtol=1e-12)
    w = np.arange(1.0, len(x) + 1)
    np.testing.assert_allclose(m.weighted_grad(w), w @ g, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("i", [0, 3, 4, 5])
def test_permuting_batch_permutes_gradient_rows(i):
    m, x, y = _random_instance(i)
    g = per_example_gradients(m, x, y)
    perm = np.array([2, 0, 1])
    gp = per_example_gradients(m, x[perm], None if y is None else y[perm])
    np.testing.assert_allclose(gp, g[perm], rtol=1e-12, atol=1e-15)


def test_single_sample_batch_is_gradient_of_its_loss():
    m, x, y = _random_instance(2)
    g1 = per_example_gradients(m, x[:1], y[:1])[0]
    num = _finite_difference(m, x[0], y[0], 2)
    np.testing.assert_allclose(g1, num, rtol=1e-5, atol=1e-8)


# -- next-token distributions ------------------------------------------------------


@given(st.integers(0, 2**31))
def test_distribution_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    m = build_model(ModelArch("lstm-lm", vocab_size=7, history=4, hidden=5), seed)
    p = predict_distribution(m, rng.integers(0, 7, 4))
    assert abs(p.sum() - 1.0) <= 1e-9 and np.all(p >= 0)


def test_zeroed_output_layer_is_uniform():
    m = build_model(ModelArch("lstm-lm", vocab_size=29, history=10, hidden=8), 0)
    m.params["out.W"][:] = 0.0
    m.params["out.b"][:] = 0.0
    np.testing.assert_allclose(predict_distribution(m, np.arange(10)), np.full(29, 1 / 29), rtol=1e-12)


def test_out_of_vocabulary_history_rejected():
    m = build_model(ModelArch("lstm-lm", vocab_size=5, history=2, hidden=3), 0)
    with pytest.raises(InputError):
        predict_distribution(m, np.array([1, 9]))


def test_toy_automaton_is_learned():
    from dpanomaly.dp import DpConfig, train

    # token 0 (A) is always followed by 1 (B); B by 0
    seq = np.array([0, 1] * 40)
    h = 3
    x = np.array([seq[i : i + h] for i in range(len(seq) - h)])
    y = seq[h:]
    m = build_model(ModelArch("lstm-lm", vocab_size=2, history=h, hidden=8), 0)
    train(m, x, y, DpConfig(lr=1.0, batch_size=16, epochs=60, seed=0))
    assert predict_distribution(m, np.array([1, 0, 1, 0])[1:])[1] > 0.9


# -- checkpoints ------------------------------------------------------------------


@pytest.mark.parametrize("i", range(6))
def test_checkpoint_round_trip(i, tmp_path):
    m, x, y = _random_instance(i)
    digest = checkpoint.save(m, tmp_path / "m.ckpt")
    back = checkpoint.load(tmp_path / "m.ckpt")
    assert back.arch == m.arch and back.digest() == m.digest()
    np.testing.assert_array_equal(back.losses(x, y), m.losses(x, y))
    assert len(digest) == 64


def test_corrupted_checkpoint_rejected(tmp_path):
    data = bytearray(checkpoint.dumps(linear_unit()))
    data[-40] ^= 1
    with pytest.raises(checkpoint.CheckpointError, match="hash"):
        checkpoint.loads(bytes(data))
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"NOTACKPT" + bytes(data[8:]))
