import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resflow import tensor as T
from resflow.errors import ConfigError
from resflow.tensor import Adam, DenseLayer, Parameter, Tape, Tensor


def _layer(W, b, activation, slope=None):
    W = np.asarray(W, dtype=float)
    layer = DenseLayer(W.shape[1], W.shape[0], activation, dtype=np.float64)
    layer.weights.value[:] = W
    layer.bias.value[:] = b
    if slope is not None:
        layer.prelu_slope.value[:] = slope
    return layer


# ---------------------------------------------------------------- dense_forward

def test_dense_identity():
    out = T.dense_forward(_layer(np.eye(2), [0, 0], "identity"), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(out.value, [1.0, 2.0])


def test_dense_prelu_at_zero_slope_is_relu():
    out = T.dense_forward(_layer(np.eye(2), [0, 0], "prelu"), np.array([-1.0, 3.0]))
    np.testing.assert_array_equal(out.value, [0.0, 3.0])


def test_dense_min_zero():
    out = T.dense_forward(_layer(np.eye(2), [0, 0], "min-zero"), np.array([2.0, -5.0]))
    np.testing.assert_array_equal(out.value, [0.0, -5.0])


def test_dense_width_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        T.dense_forward(_layer(np.eye(2), [0, 0], "identity"), np.ones(3))


def test_dense_layer_shapes_and_slope_presence():
    layer = DenseLayer(5, 3, "prelu")
    assert layer.weights.shape == (3, 5) and layer.bias.shape == (3,)
    np.testing.assert_array_equal(layer.prelu_slope.value, 0.0)
    assert DenseLayer(5, 3, "sigmoid").prelu_slope is None
    limit = math.sqrt(6 / 8)
    assert np.abs(layer.weights.value).max() <= limit


# ---------------------------------------------------------------- sigmoid / bce

def test_sigmoid_examples():
    assert T.sigmoid(0.0) == 0.5
    big = T.sigmoid(700.0)
    assert 1 - 1e-12 < big <= 1.0
    assert T.sigmoid(math.log(3)) == pytest.approx(0.75, abs=1e-15)
    assert T.sigmoid(-700.0) >= 0.0


@given(st.floats(-30, 30))
def test_sigmoid_symmetry(z):
    assert abs(T.sigmoid(z) + T.sigmoid(-z) - 1.0) <= 1e-12


def test_weighted_bce_examples():
    assert T.weighted_bce(1, 1 - 1e-7, 1.0) == pytest.approx(0.0, abs=1e-6)
    assert T.weighted_bce(1, 0.5, 2.0, 1.0) == pytest.approx(2 * math.log(2), rel=1e-12)
    assert T.weighted_bce(0, 0.5, 500.0, 1.0) == pytest.approx(math.log(2), rel=1e-12)


def test_weighted_bce_clamps_extremes():
    assert math.isfinite(T.weighted_bce(1, 0.0))
    assert math.isfinite(T.weighted_bce(0, 1.0))


@given(st.sampled_from([0, 1]), st.floats(1e-6, 1 - 1e-6), st.floats(0.1, 100), st.floats(0.1, 100),
       st.floats(0.1, 10))
def test_weighted_bce_nonnegative_and_linear(y, p, wp, wn, alpha):
    base = T.weighted_bce(y, p, wp, wn)
    assert base >= 0
    if y == 1:
        assert T.weighted_bce(y, p, alpha * wp, wn) == pytest.approx(alpha * base, rel=1e-12)


def test_tensor_bce_matches_scalar_form():
    y = np.array([1.0, 0.0, 1.0])
    p = Tensor(np.array([0.2, 0.7, 0.9]))
    vec = T.weighted_bce(y, p, 3.0, 1.0).value
    ref = [T.weighted_bce(int(a), float(b), 3.0, 1.0) for a, b in zip(y, p.value)]
    np.testing.assert_allclose(vec, ref, rtol=1e-12)


def test_bce_with_logits_equals_bce_of_sigmoid():
    z = np.array([-3.0, -0.1, 0.0, 2.5])
    y = np.array([1.0, 0.0, 1.0, 0.0])
    fused = T.bce_with_logits(y, Tensor(z), 4.0, 1.0).value
    ref = [T.weighted_bce(int(a), T.sigmoid(float(b)), 4.0, 1.0) for a, b in zip(y, z)]
    np.testing.assert_allclose(fused, ref, rtol=1e-10)


# ---------------------------------------------------------------- backward

def test_backward_product_rule():
    w = Parameter(np.array(3.0))
    with Tape() as tape:
        loss = T.mul(w, Tensor(np.array(2.0)))
    assert T.backward(tape, loss)[w] == pytest.approx(2.0)


@pytest.mark.parametrize("z", [-4.0, -0.3, 0.0, 1.7])
def test_sigmoid_bce_gradient_is_sigmoid_minus_one(z):
    zp = Parameter(np.array([z]))
    with Tape() as tape:
        loss = T.total(T.weighted_bce(np.array([1.0]), T.sigmoid(zp)))
    g = T.backward(tape, loss)[zp][0]
    assert g == pytest.approx(T.sigmoid(z) - 1.0, rel=1e-9)
    # finite-difference cross-check of the analytic form
    h = 1e-5
    fd = (T.weighted_bce(1, T.sigmoid(z + h)) - T.weighted_bce(1, T.sigmoid(z - h))) / (2 * h)
    assert g == pytest.approx(fd, rel=1e-6)


def test_backward_rejects_non_scalar():
    w = Parameter(np.ones(3))
    with Tape() as tape:
        out = T.scale(w, 2.0)
    with pytest.raises(ValueError):
        T.backward(tape, out)


def test_min_zero_and_prelu_subgradients():
    x = Parameter(np.array([-2.0, 0.0, 3.0]))
    slope = Parameter(np.array([0.1, 0.1, 0.1]))
    with Tape() as tape:
        loss = T.add(T.total(T.min_zero(x)), T.total(T.prelu(x, slope)))
    g = T.backward(tape, loss)
    # min-zero: 1 where x < 0, 0 at 0 and above; prelu: slope where x <= 0, 1 above
    np.testing.assert_allclose(g[x], [1.0 + 0.1, 0.0 + 0.1, 0.0 + 1.0])
    np.testing.assert_allclose(g[slope], [-2.0, 0.0, 0.0])


def test_tape_replays_in_reverse_and_one_slot_per_parameter():
    w = Parameter(np.array([1.0, 2.0]))
    with Tape() as tape:
        a = T.scale(w, 2.0)
        b = T.mul(w, w)
        loss = T.total(T.add(a, b))
    grads = T.backward(tape, loss)
    assert list(grads) == [w]
    np.testing.assert_allclose(grads[w], 2.0 + 2 * w.value)
    assert tape.nodes.index(a) < tape.nodes.index(b) < tape.nodes.index(loss)


def test_ops_outside_tape_record_nothing():
    w = Parameter(np.ones(2))
    out = T.scale(w, 3.0)
    assert not out.requires_grad and out._parents == ()


def _numeric_grad(f, p, h=1e-4):
    g = np.zeros_like(p.value)
    for j in range(p.value.size):
        o = p.value.flat[j]
        p.value.flat[j] = o + h
        up = f()
        p.value.flat[j] = o - h
        down = f()
        p.value.flat[j] = o
        g.flat[j] = (up - down) / (2 * h)
    return g


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_two_layer_net_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    l1 = DenseLayer(4, 5, "prelu", rng=rng, dtype=np.float64)
    l2 = DenseLayer(5, 1, "identity", rng=rng, dtype=np.float64)
    l1.prelu_slope.value[:] = rng.uniform(-0.5, 0.5, 5)
    l1.bias.value[:] = rng.normal(0, 0.5, 5)
    x = rng.normal(size=(6, 4))
    y = (rng.random(6) < 0.5).astype(float)

    def loss_value():
        return float(T.total(T.bce_with_logits(y, T.column(l2(l1(x))), 2.0, 1.0)).value)

    with T.kink_probe() as probe:
        loss_value()
    if probe.nearest < 1e-3:
        return
    with Tape() as tape:
        loss = T.total(T.bce_with_logits(y, T.column(l2(l1(x))), 2.0, 1.0))
    grads = T.backward(tape, loss)
    for p in l1.parameters() + l2.parameters():
        num = _numeric_grad(loss_value, p)
        diff = np.abs(grads[p] - num)
        rel = diff / np.maximum(np.maximum(np.abs(grads[p]), np.abs(num)), 1e-300)
        assert np.all((diff < 1e-6) | (rel < 1e-4))


# ---------------------------------------------------------------- dropout

def test_dropout_train_and_eval():
    x = Tensor(np.ones((2000, 10)))
    rng = np.random.default_rng(0)
    out = T.dropout(x, 0.3, rng, training=True).value
    kept = out != 0
    assert abs(1 - kept.mean() - 0.3) < 0.01
    np.testing.assert_allclose(out[kept], 1 / 0.7)
    assert T.dropout(x, 0.3, rng, training=False) is x


# ---------------------------------------------------------------- adam

def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0]))
    opt = Adam([p], lr=1e-3, eps=1e-8)
    T.adam_apply(opt, {p: np.array([5.0])})
    assert p.value[0] - 1.0 == pytest.approx(-1e-3, rel=1e-6)


def test_adam_zero_gradient_is_noop_but_counts():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=1e-2)
    opt.step({p: np.zeros(2)})
    opt.step({p: np.zeros(2)})
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    assert opt.t == 2


def test_adam_moments_start_at_zero_and_hyperparameters():
    p = Parameter(np.zeros(3))
    opt = Adam([p])
    assert opt.t == 0 and not opt.m[0].any() and not opt.v[0].any()
    assert (opt.beta1, opt.beta2) == (0.9, 0.999)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(3)
    p = Parameter(np.zeros(4))
    opt = Adam([p], lr=0.01)
    m = v = np.zeros(4)
    ref = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        opt.step({p: g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.value, ref, rtol=1e-12)


def test_adam_rejects_bad_lr():
    with pytest.raises(ConfigError):
        Adam([Parameter(np.zeros(1))], lr=0.0)
