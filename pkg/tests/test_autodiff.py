import numpy as np
import pytest
from numpy.testing import assert_allclose

import autodiff as ad
from exceptions import ShapeMismatchError


def numeric_grad(fn, values, name, eps=1e-6):
    """Central differences of a scalar fn(values) with respect to values[name]."""
    base = values[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        old = base[idx]
        base[idx] = old + eps
        up = fn(values)
        base[idx] = old - eps
        down = fn(values)
        base[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


def check_gradients(build, values):
    """Compare tape gradients of build(tensors) against central differences for every input."""
    tape = ad.Tape()
    tensors = {k: tape.param(v.copy(), k) for k, v in values.items()}
    loss = build(tensors)
    tape.backward(loss)

    def value_of(vals):
        off = ad.Tape(enabled=False)
        return float(build({k: off.param(v, k) for k, v in vals.items()}).value)

    for name, tensor in tensors.items():
        expected = numeric_grad(value_of, values, name)
        assert_allclose(tensor.grad, expected, rtol=1e-5, atol=1e-7, err_msg=name)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestGradients:
    def test_broadcast_add_and_mul(self, rng):
        values = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,)), "c": rng.normal(size=(3, 1))}
        check_gradients(lambda t: ad.total(ad.mul(t["a"] + t["b"], t["c"])), values)

    def test_batched_matmul(self, rng):
        values = {"x": rng.normal(size=(2, 3, 4)), "w": rng.normal(size=(4, 5))}
        check_gradients(lambda t: ad.total(ad.gelu(t["x"] @ t["w"])), values)

    def test_layer_norm(self, rng):
        values = {"x": rng.normal(size=(2, 5)), "g": rng.normal(size=(5,)), "b": rng.normal(size=(5,))}
        weights = rng.normal(size=(2, 5))
        check_gradients(lambda t: ad.total(ad.mul(ad.layer_norm(t["x"], t["g"], t["b"]), weights)), values)

    def test_masked_softmax(self, rng):
        mask = np.tril(np.ones((4, 4), dtype=bool))
        weights = rng.normal(size=(4, 4))
        values = {"s": rng.normal(size=(4, 4))}
        check_gradients(lambda t: ad.total(ad.mul(ad.masked_softmax(t["s"], mask), weights)), values)

    def test_reshape_transpose_take_rows(self, rng):
        values = {"x": rng.normal(size=(6, 4))}
        weights = rng.normal(size=(2, 3, 2))

        def build(t):
            rows = ad.take_rows(t["x"], 3)
            return ad.total(ad.mul(ad.transpose(ad.reshape(rows, (3, 2, 2)), (1, 0, 2)), weights))

        check_gradients(build, values)

    def test_reused_tensor_accumulates(self, rng):
        values = {"x": rng.normal(size=(3,))}
        check_gradients(lambda t: ad.total(ad.mul(t["x"], t["x"]) - ad.scale(t["x"], 3.0)), values)


class TestTape:
    def test_masked_softmax_zeroes_masked_entries(self):
        mask = np.array([[True, False, False], [True, True, False]])
        y = ad.masked_softmax(ad.Tape(enabled=False).constant(np.ones((2, 3))), mask).value
        assert np.all(y[~mask] == 0.0)
        assert_allclose(y.sum(axis=1), 1.0)

    def test_disabled_tape_records_nothing(self):
        tape = ad.Tape(enabled=False)
        x = tape.param(np.ones(3))
        ad.total(ad.gelu(x))
        assert tape.nodes == []
        assert not x.requires_grad

    def test_constants_get_no_gradient(self):
        tape = ad.Tape()
        x = tape.param(np.ones(2))
        c = tape.constant(np.full(2, 3.0))
        tape.backward(ad.total(ad.mul(x, c)))
        assert_allclose(x.grad, [3.0, 3.0])
        assert c.grad is None

    def test_backward_needs_scalar(self):
        tape = ad.Tape()
        x = tape.param(np.ones(3))
        with pytest.raises(ShapeMismatchError):
            tape.backward(ad.gelu(x))

    def test_matmul_shape_mismatch(self):
        tape = ad.Tape()
        with pytest.raises(ShapeMismatchError):
            tape.param(np.ones((2, 3))) @ tape.param(np.ones((2, 3)))

    def test_dropout_identity_without_generator(self):
        x = ad.Tape().param(np.arange(4.0))
        assert ad.dropout(x, 0.5, None) is x

    def test_dropout_is_inverted(self):
        x = ad.Tape(enabled=False).constant(np.ones(10000))
        y = ad.dropout(x, 0.25, np.random.default_rng(0)).value
        assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
        assert y.mean() == pytest.approx(1.0, abs=0.05)
