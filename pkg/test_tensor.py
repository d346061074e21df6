#!/usr/bin/env python3
"""
Tests for the tensor engine: finite-difference gradient checks, graph
lifetime rules and the Adam update.
"""

import logging

import numpy as np
import pytest

from services.errors import DimensionError, GraphError, LookupIndexError, TrainingError
from services.gradcheck import check_gradients
from services.nn import Parameter
from services.nn_ops import (
    activation,
    conv1d,
    conv2d,
    conv_transpose1d,
    embedding_lookup,
    layer_norm,
    log_softmax,
    softmax,
)
from services.optim import Adam, AdamState, adam_step
from services.tensor import (
    Tensor,
    absolute,
    add,
    broadcast_to,
    concat,
    default_dtype,
    div,
    exp,
    get_default_dtype,
    getitem,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    pad,
    power,
    reshape,
    sqrt,
    straight_through,
    sub,
    take,
    tanh,
    transpose,
    tsum,
)

logging.basicConfig(level=logging.INFO, format="%(asctime)s [%(levelname)s] %(message)s")

TOL = 1e-4
INSTANCES = 20


def _weights(shape, seed=7):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def _project(out):
    """Random linear functional so every output coordinate carries a distinct gradient."""
    return tsum(mul(out, _weights(out.shape)))


def _check(fn, *arrays):
    result = check_gradients(fn, list(arrays), tolerance=TOL)
    assert result.passed(TOL), result
    return result


def _check_instances(fn, draw, instances=INSTANCES):
    """Gradient-check `fn` on `instances` seeded draws of random small inputs."""
    for seed in range(instances):
        _check(fn, *draw(np.random.default_rng(seed)))


def _shape(rng, ndim=None):
    ndim = int(rng.integers(1, 4)) if ndim is None else ndim
    return tuple(int(n) for n in rng.integers(1, 4, size=ndim))


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _away_from_zero(rng, shape):
    return rng.uniform(0.1, 2.0, shape) * rng.choice([-1.0, 1.0], shape)


def _normal_3d(rng):
    return (rng.standard_normal(_shape(rng, 3)),)


def test_elementwise_gradients():
    def pair(rng):
        shape = _shape(rng)
        return rng.standard_normal(shape), rng.standard_normal(shape)

    def fraction(rng):
        shape = _shape(rng)
        return rng.standard_normal(shape), _positive(rng, shape)

    _check_instances(lambda x, y: _project(add(x, y)), pair)
    _check_instances(lambda x, y: _project(sub(x, y)), pair)
    _check_instances(lambda x, y: _project(mul(x, y)), pair)
    _check_instances(lambda x, y: _project(div(x, y)), fraction)
    _check_instances(lambda x: _project(exp(x)), lambda rng: (rng.standard_normal(_shape(rng)),))
    _check_instances(lambda x: _project(log(x)), lambda rng: (_positive(rng, _shape(rng)),))
    _check_instances(lambda x: _project(sqrt(x)), lambda rng: (_positive(rng, _shape(rng)),))
    _check_instances(lambda x: _project(power(x, 3.0)), lambda rng: (rng.standard_normal(_shape(rng)),))
    _check_instances(lambda x: _project(tanh(x)), lambda rng: (rng.standard_normal(_shape(rng)),))
    _check_instances(lambda x: _project(absolute(x)), lambda rng: (_away_from_zero(rng, _shape(rng)),))


def test_broadcasting_gradients():
    def broadcast_pair(rng):
        shape = _shape(rng, 3)
        # collapse random axes to 1 and sometimes drop the leading axes
        small = tuple(1 if rng.random() < 0.5 else n for n in shape)[int(rng.integers(0, 3)):]
        return rng.standard_normal(shape), rng.standard_normal(small)

    def expandable(rng):
        return (rng.standard_normal((1, int(rng.integers(1, 4)), 1)),)

    _check_instances(lambda x, y: _project(add(x, y)), broadcast_pair)
    _check_instances(lambda x, y: _project(mul(x, y)), broadcast_pair)
    _check_instances(lambda x: _project(broadcast_to(x, (2, x.shape[1], 3))), expandable)


def test_reduction_and_matmul_gradients():
    def product(rng):
        n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
        batch = (int(rng.integers(1, 3)),) if rng.random() < 0.5 else ()
        return rng.standard_normal(batch + (n, k)), rng.standard_normal((k, m))

    _check_instances(lambda x: _project(tsum(x, axis=1)), _normal_3d)
    _check_instances(lambda x: _project(mean(x, axis=(0, 2), keepdims=True)), _normal_3d)
    _check_instances(lambda x, y: _project(matmul(x, y)), product)


def test_shape_op_gradients():
    _check_instances(lambda t: _project(reshape(t, (t.shape[0] * t.shape[1], t.shape[2]))), _normal_3d)
    _check_instances(lambda t: _project(transpose(t, (2, 0, 1))), _normal_3d)
    _check_instances(lambda t: _project(getitem(t, (slice(None), slice(0, max(1, t.shape[1] - 1))))), _normal_3d)

    def gather(rng):
        x = rng.standard_normal(_shape(rng, 3))
        return x, rng.integers(0, x.shape[-1], size=int(rng.integers(1, 5)))

    for seed in range(INSTANCES):
        x, ids = gather(np.random.default_rng(seed))
        _check(lambda t, ids=ids: _project(take(t, ids, axis=-1)), x)

    def joined(rng):
        a, b, c = _shape(rng, 3)
        return rng.standard_normal((a, b, c)), rng.standard_normal((a, int(rng.integers(1, 4)), c))

    _check_instances(lambda t, u: _project(concat([t, u], axis=1)), joined)
    _check_instances(lambda t: _project(pad(t, ((0, 0), (1, 2), (0, 1)))), _normal_3d)


def test_nn_op_gradients():
    def conv_case(rng):
        batch, c_in, c_out, size = (int(v) for v in rng.integers(1, 4, size=4))
        length = size + int(rng.integers(1, 6))
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        arrays = (rng.standard_normal((batch, c_in, length)), rng.standard_normal((c_out, c_in, size)),
                  rng.standard_normal(c_out))
        return arrays, (stride, padding)

    def transposed_case(rng):
        batch, c_in, c_out = (int(v) for v in rng.integers(1, 4, size=3))
        size, stride = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        padding, output_padding = int(rng.integers(0, (size - 1) // 2 + 1)), int(rng.integers(0, stride))
        arrays = (rng.standard_normal((batch, c_in, int(rng.integers(2, 6)))),
                  rng.standard_normal((c_in, c_out, size)), rng.standard_normal(c_out))
        return arrays, (stride, padding, output_padding)

    def conv2d_case(rng):
        c_in, c_out, kh, kw = (int(v) for v in rng.integers(1, 4, size=4))
        height, width = kh + int(rng.integers(0, 4)), kw + int(rng.integers(0, 4))
        arrays = (rng.standard_normal((1, c_in, height, width)), rng.standard_normal((c_out, c_in, kh, kw)),
                  rng.standard_normal(c_out))
        return arrays, (int(rng.integers(1, 3)), int(rng.integers(0, 2)))

    for seed in range(INSTANCES):
        rng = np.random.default_rng(seed)
        arrays, (stride, padding) = conv_case(rng)
        _check(lambda x, w, b: _project(conv1d(x, w, b, stride=stride, padding=padding)), *arrays)
        arrays, (stride, padding, extra) = transposed_case(rng)
        _check(lambda x, w, b: _project(conv_transpose1d(x, w, b, stride=stride, padding=padding,
                                                         output_padding=extra)), *arrays)
        arrays, (stride, padding) = conv2d_case(rng)
        _check(lambda x, w, b: _project(conv2d(x, w, b, stride=stride, padding=padding)), *arrays)

    def normed(rng):
        shape = _shape(rng, 2) + (int(rng.integers(3, 7)),)
        return rng.standard_normal(shape), rng.uniform(0.5, 1.5, shape[-1]), rng.standard_normal(shape[-1])

    _check_instances(lambda x, g, b: _project(layer_norm(x, g, b)), normed)
    _check_instances(lambda x: _project(softmax(x, axis=-1)), lambda rng: (rng.standard_normal(_shape(rng, 2)),))
    _check_instances(lambda x: _project(log_softmax(x, axis=0)), lambda rng: (rng.standard_normal(_shape(rng, 2)),))

    for seed in range(INSTANCES):
        rng = np.random.default_rng(seed)
        rows, width = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        ids = rng.integers(0, rows, size=(int(rng.integers(1, 3)), int(rng.integers(1, 4))))
        _check(lambda table, ids=ids: _project(embedding_lookup(table, ids)), rng.standard_normal((rows, width)))


def test_activation_gradients():
    for kind in ("relu", "leaky_relu", "elu", "gelu", "tanh"):
        # keep samples away from the kinks at zero
        _check_instances(lambda t, kind=kind: _project(activation(t, kind)),
                         lambda rng: (_away_from_zero(rng, _shape(rng, 2)),))


def test_attention_block_gradients():
    from services.codec import AttentionImprintUnit

    for seed in range(INSTANCES):
        rng = np.random.default_rng(100 + seed)
        with default_dtype(np.float64):
            unit = AttentionImprintUnit(d_s=8, d_w=8, n_heads=2, rng=rng)
        h_s = rng.standard_normal((1, 4, 8))
        h_w = rng.standard_normal((1, 4, 8))
        _check(lambda s, w: _project(unit(s, w)), h_s, h_w)
        if seed < 3:
            _check(lambda q, k: _project(unit(Tensor(h_s), Tensor(h_w))), unit.query.weight, unit.key.weight)


def test_small_closed_form_examples():
    out = conv1d(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((1, 1, 2))), None, stride=2)
    np.testing.assert_allclose(out.data.reshape(-1), [2.0, 2.0])
    normed = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(normed.data, [[-1.0, 1.0]], atol=1e-5)
    param = Parameter(np.array([0.0]))
    adam_step({"w": param}, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    assert param.data[0] == pytest.approx(-0.1, rel=1e-6)


def test_softmax_and_lookup_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    wide = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(wide))
    np.testing.assert_allclose(wide, [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])
    rows = embedding_lookup(Tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([1]))
    np.testing.assert_array_equal(rows.data, [[3.0, 4.0]])


def test_adam_zero_gradient_leaves_parameters():
    param = Parameter(np.array([1.5, -0.25]))
    state = adam_step({"w": param}, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(param.data, [1.5, -0.25])
    np.testing.assert_array_equal(state.m["w"], 0.0)

    state.m["w"] = np.array([1.0, 1.0])
    adam_step({"w": param}, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_allclose(state.m["w"], 0.9)


def test_adam_runs_are_bitwise_reproducible():
    def run():
        rng = np.random.default_rng(12)
        param = Parameter(rng.standard_normal(5))
        target = rng.standard_normal(5)
        optimizer = Adam({"p": param}, lr=0.05)
        for _ in range(100):
            optimizer.zero_grad()
            diff = sub(param, Tensor(target))
            tsum(mul(diff, diff)).backward()
            optimizer.step()
        return param.data

    assert run().tobytes() == run().tobytes()


def test_gradcheck_closed_form_and_restores_inputs():
    result = check_gradients(lambda x: tsum(mul(x, x)), [np.array([1.0, 2.0])])
    assert result.passed(TOL)
    assert result.analytic == pytest.approx(2.0 * (result.worst_index[0] + 1))
    assert check_gradients(lambda x: tsum(x), [np.array([0.3, -7.0, 2.0])]).max_relative_error < 1e-8

    with default_dtype("float32"):
        param = Parameter(np.array([0.5, -1.0]))
    param.requires_grad = False
    check_gradients(lambda p: tsum(mul(p, p)), [param])
    assert param.dtype == np.float32
    assert not param.requires_grad
    assert param.grad is None


def test_second_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    y = tsum(mul(x, x))
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * np.ones(3))
    with pytest.raises(GraphError):
        y.backward()


def test_backward_accumulates_shared_inputs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = tsum(add(mul(x, 3.0), mul(x, x)))
    y.backward()
    np.testing.assert_allclose(x.grad, 3.0 + 2 * x.data)


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert issubclass(DimensionError, ValueError)


def test_embedding_out_of_range():
    table = Tensor(np.zeros((4, 2)))
    with pytest.raises(LookupIndexError):
        embedding_lookup(table, np.array([4]))
    with pytest.raises(IndexError):
        embedding_lookup(table, np.array([-1]))


def test_straight_through_jacobian_is_identity():
    x = Tensor(np.random.default_rng(8).standard_normal((2, 3)), requires_grad=True)
    rounded = np.round(x.data)
    y = straight_through(x, rounded)
    np.testing.assert_array_equal(y.data, rounded)
    seed = np.random.default_rng(9).standard_normal((2, 3))
    y.backward(seed)
    np.testing.assert_allclose(x.grad, seed, atol=1e-6)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = mul(x, 2.0)
    assert not y.requires_grad
    with pytest.raises(GraphError):
        y.backward(np.ones(2))


def test_default_dtype_context():
    assert get_default_dtype() == np.float64
    with default_dtype("float32"):
        assert Tensor([1.0]).dtype == np.float32
        assert Parameter(np.zeros(2)).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


def test_adam_first_step_closed_form():
    param = Parameter(np.array([1.0, -2.0, 0.5]))
    grad = np.array([0.3, -0.1, 0.0])
    state = adam_step({"w": param}, {"w": grad}, AdamState(), lr=0.01)
    # bias-corrected moments on step 1 reduce to g and g^2
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * grad / (np.abs(grad) + 1e-8)
    np.testing.assert_allclose(param.data, expected, rtol=1e-12)
    assert state.step == 1


def test_adam_rejects_non_finite_gradient():
    param = Parameter(np.zeros(2))
    with pytest.raises(TrainingError, match="'w'"):
        adam_step({"w": param}, {"w": np.array([np.nan, 0.0])}, AdamState(), lr=0.1)


def test_adam_reduces_quadratic():
    param = Parameter(np.array([3.0, -4.0]))
    optimizer = Adam({"p": param}, lr=0.1)
    for _ in range(200):
        optimizer.zero_grad()
        tsum(mul(param, param)).backward()
        optimizer.step()
    assert np.linalg.norm(param.data) < 0.5


def test_gradient_clipping_reports_norm():
    param = Parameter(np.zeros(2))
    param.grad = np.array([3.0, 4.0])
    optimizer = Adam({"p": param}, lr=0.1, grad_clip=1.0)
    norm = optimizer.step()
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(param.grad, [0.6, 0.8], rtol=1e-9)


if __name__ == "__main__":
    for name, test in list(globals().items()):
        if name.startswith("test_") and callable(test):
            print(f"🔍 {name}")
            test()
    print("✅ All tensor tests passed")
