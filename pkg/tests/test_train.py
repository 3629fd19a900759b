from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from safeens import train as T
from safeens.train import (LOSSES, METHODS, Batch, TrainConfig, cbf_rate, cbf_value, constraint_arrays,
                           hinge_pair, member_outputs, model_from_dict, model_to_dict, new_model, sablas_rate)
from safeens.verify import gradient_checks, tiny_batch

TINY = TrainConfig(hidden=(8, 8), state_dim=4, encoder_hidden=8, dynamics_hidden=(8,), epochs=3, dynamics_epochs=3,
                   batch_size=4)


def test_hinge_pair_hand_values():
    v = np.array([0.1, 0.1, 0.02])
    safe = np.array([True, False, True])
    loss, grad = hinge_pair(v, safe, 0.05, 18.0, 3.0)
    # safe 0.1 clears the margin; unsafe 0.1 violates by 0.15 at weight 18; safe 0.02 short by 0.03
    assert loss == pytest.approx((18 * 0.15 + 0.03) / 3)
    assert np.allclose(grad, [0.0, 18 / 3, -1 / 3])
    loss_m, grad_m = hinge_pair(v, safe, 0.05, 18.0, 3.0, mask=np.array([True, False, True]))
    assert loss_m == pytest.approx(0.01)
    assert grad_m[1] == 0.0


@given(arrays(float, 12, elements=st.floats(-2, 2)), arrays(bool, 12), st.floats(0.0, 0.5), st.floats(1, 30))
def test_hinge_pair_nonnegative_and_zero_when_separated(v, safe, margin, lam):
    loss, grad = hinge_pair(v, safe, margin, lam, 12.0)
    assert loss >= 0
    sep = np.where(safe, np.abs(v) + margin + 0.1, -np.abs(v) - margin - 0.1)
    assert hinge_pair(sep, safe, margin, lam, 12.0)[0] == 0.0


@pytest.fixture(scope="module")
def tiny():
    return tiny_batch(0)


@pytest.mark.parametrize("method", METHODS)
def test_loss_gradients(method, tiny, rng):
    data, batch = tiny
    model = new_model(method, "A", data, TINY, 0.2, rng)
    if model.dynamics is not None:
        for p in model.dynamics.parameters():
            p += 0.3 * rng.standard_normal(p.shape)
    fn = LOSSES[method]
    from safeens.gradcheck import check_directional

    res = check_directional(method, lambda: fn(model, batch, TINY)[0], lambda: fn(model, batch, TINY)[1],
                            model.trainable_parameters(), rng, 5)
    assert res.ok, res.worst


def test_suite_gradient_checks_pass():
    assert all(r.ok for r in gradient_checks(4))


@pytest.mark.parametrize("method", METHODS)
def test_padding_does_not_change_loss(method, tiny, rng):
    data, batch = tiny
    assert not batch.valid.all(), "fixture should contain padded rows"
    model = new_model(method, "A", data, TINY, 0.2, rng)
    fn = LOSSES[method]
    base, _ = fn(model, batch, TINY)
    noisy = Batch(batch.emb.copy(), batch.controls.copy(), batch.state_safe.copy(), batch.control_safe.copy(),
                  batch.valid)
    pad = ~batch.valid
    noisy.emb[pad] = rng.standard_normal(noisy.emb[pad].shape)
    noisy.controls[pad] = rng.standard_normal(noisy.controls[pad].shape)
    noisy.state_safe[pad] = False
    noisy.control_safe[pad] = False
    assert fn(model, noisy, TINY)[0] == pytest.approx(base, rel=1e-12, abs=1e-15)


def test_batch_take_trims(tiny):
    _, batch = tiny
    lens = batch.valid.sum(axis=1)
    i = int(np.argmin(lens))
    sub = batch.take(np.array([i]))
    assert sub.emb.shape[1] == lens[i] and sub.valid.all()


def _cbf_model(tiny, rng, method="idbf"):
    data, _ = tiny
    model = new_model(method, "A", data, TINY, 0.2, rng)
    for p in model.head_net.parameters():
        p += 0.5 * rng.standard_normal(p.shape)
    return model


def test_cbf_rate_is_time_derivative(tiny, rng):
    model = _cbf_model(tiny, rng)
    x = rng.standard_normal((5, 4))
    u = rng.standard_normal((5, 2))
    h = 1e-6
    v = model.dynamics.xdot(x, u)
    fd = (cbf_value(model, x + h * v) - cbf_value(model, x - h * v)) / (2 * h)
    assert np.allclose(cbf_rate(model, x, u), fd + model.gamma_alpha * cbf_value(model, x), atol=1e-7)


@pytest.mark.parametrize("method", METHODS)
def test_constraint_is_affine_rate(method, tiny, rng):
    model = _cbf_model(tiny, rng, method)
    x = rng.standard_normal((6, 4))
    u = rng.standard_normal((6, 2))
    a, b = constraint_arrays(model, x)
    assert a.shape == (6, 2) and b.shape == (6,)
    val = np.einsum("nk,nk->n", a, u) - b
    if model.is_cbf:
        assert np.allclose(val, cbf_rate(model, x, u))
    else:
        out = model.head_net.forward(x)
        assert np.allclose(val, np.einsum("nk,nk->n", out[:, :2], u) - out[:, 2])


def test_sablas_rate_logged_control(tiny, rng):
    model = _cbf_model(tiny, rng, "sablas")
    x, xn = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    u = rng.standard_normal((4, 2))
    expect = (cbf_value(model, xn) - cbf_value(model, x)) / model.dt + model.gamma_alpha * cbf_value(model, x)
    assert np.allclose(sablas_rate(model, x, xn, u), expect)
    assert np.allclose(sablas_rate(model, x, xn, u, u), expect)


def test_dh_has_no_barrier(tiny, rng):
    model = new_model("dh", "A", tiny[0], TINY, 0.2, rng)
    with pytest.raises(TypeError):
        cbf_value(model, np.zeros((1, 4)))


def test_training_reduces_loss(small_data):
    model = T.train_idbf(small_data, TINY.replace(epochs=12, state_dim=6), "A", 0.2)
    hist = model.hyperparams["loss_history"]
    assert len(hist) == 12 and hist[-1] < hist[0]


def test_label_requirements(small_data):
    only_safe = small_data.subset([t for t in small_data.trajectories if not t.had_collision])
    with pytest.raises(ValueError):
        T.train_dh(only_safe, TINY, "A", 0.2)


def test_pool_is_deterministic_and_diverse(small_data):
    a = T.train_member_pool(small_data, ("dh",), ("A",), 2, base=TINY, pool_seed=1)
    b = T.train_member_pool(small_data, ("dh",), ("A",), 2, base=TINY, pool_seed=1)
    assert [m.member_id for m in a] == ["dh-A-member-0", "dh-A-member-1"]
    for x, y in zip(a, b):
        for p, q in zip(x.trainable_parameters(), y.trainable_parameters()):
            assert np.array_equal(p, q)
    assert not np.array_equal(a[0].head_net.weights[0], a[1].head_net.weights[0])
    assert a[0].hyperparams["learning_rate"] != a[1].hyperparams["learning_rate"]


def test_model_roundtrip(small_data, rng):
    model = T.train_sablas_offline(small_data, TINY, "B", 0.2)
    back = model_from_dict(model_to_dict(model))
    o1, o2 = member_outputs(model, small_data), member_outputs(back, small_data)
    assert np.array_equal(o1.a_vec, o2.a_vec) and np.array_equal(o1.b_off, o2.b_off)
    assert np.array_equal(o1.b, o2.b)


def test_member_outputs_only_real_frames(small_data, rng):
    model = new_model("idbf", "A", small_data, TINY, 0.2, rng)
    out = member_outputs(model, small_data)
    n = int(small_data.lengths().sum())
    assert out.a_vec.shape == (n, 2) and out.state_safe.shape == (n,)
    assert np.allclose(out.rate, cbf_rate(model, model.encode(small_data.embeddings("A"),
                                                              small_data.controls())[small_data.valid()],
                                          out.controls))
