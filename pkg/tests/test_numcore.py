import numpy as np
import pytest

from siaseq import numcore as nc
from siaseq.errors import ConfigError, NumericError, ShapeError, SiaSeqError
from siaseq.numcore import Tape, Tensor


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_matmul_identity():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor(np.eye(2))
    out = nc.matmul(eye, m)
    assert np.array_equal(out.data, m.data)


def test_matmul_zero():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    z = Tensor([[0.0], [0.0]])
    out = nc.matmul(a, z)
    assert np.array_equal(out.data, np.zeros((2, 1)))


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError) as err:
        nc.matmul(a, b)
    assert "(2, 3)" in str(err.value)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a = _rand(rng, 3, 4)
    b_fixed = rng.standard_normal((4, 2))

    err_a = nc.grad_check(lambda t: nc.matmul(t, Tensor(b_fixed)).sum(), a)
    assert err_a < 1e-6

    b = _rand(rng, 4, 2)
    a_fixed = rng.standard_normal((3, 4))
    err_b = nc.grad_check(lambda t: nc.matmul(Tensor(a_fixed), t).sum(), b)
    assert err_b < 1e-6


def test_softmax_symmetry():
    out = nc.softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_large_inputs_do_not_overflow():
    out = nc.softmax(Tensor([1000.0, 0.0]))
    assert np.isfinite(out.data).all()
    assert out.data[0] == pytest.approx(1.0)
    assert out.data[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rows_are_probability_simplex():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal((5, 8)) * rng.uniform(0.1, 50)
        out = nc.softmax(Tensor(x))
        assert (out.data >= 0).all()
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() <= 1e-12


def test_softmax_nan_input_rejected():
    with pytest.raises(NumericError):
        nc.softmax(Tensor([0.0, np.nan]))


def test_log_exp_inverse():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(10)
    out = nc.log(nc.exp(Tensor(x)))
    assert np.allclose(out.data, x, atol=1e-12)


def test_log_rejects_non_positive():
    with pytest.raises(NumericError):
        nc.log(Tensor([1.0, 0.0]))


def test_power_zero_exponent_is_one():
    rng = np.random.default_rng(3)
    p = Tensor(rng.uniform(0.01, 5.0, size=7), requires_grad=True)
    out = nc.power(p, 0.0)
    assert np.array_equal(out.data, np.ones(7))
    assert not out.requires_grad


def test_sum_gradient_is_all_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        y = x.sum()
        tape.backward(y)
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_mask_fill_values_and_gradient():
    x = Tensor(np.arange(4.0), requires_grad=True)
    mask = np.array([False, True, False, True])
    with Tape() as tape:
        y = nc.mask_fill(x, mask, -5.0)
        assert np.array_equal(y.data, [0.0, -5.0, 2.0, -5.0])
        tape.backward(y.sum())
    assert np.array_equal(x.grad, [1.0, 0.0, 1.0, 0.0])


def test_broadcast_gradients_have_operand_shapes():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        y = (x + b).sum()
        tape.backward(y)
    assert x.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    assert np.array_equal(b.grad, np.full(4, 3.0))


def test_grad_check_linear_function():
    x = Tensor(np.array([0.3, -1.2, 0.7]), requires_grad=True)
    assert nc.grad_check(lambda t: t.sum(), x) < 1e-10


def test_grad_check_quadratic():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    err = nc.grad_check(lambda t: (t * t).sum(), x)
    assert err < 1e-8


def test_grad_check_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        nc.grad_check(lambda t: t * 2.0, x)


def test_grad_check_rejects_bad_step():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ConfigError):
        nc.grad_check(lambda t: t.sum(), x, step=0.5)


# Every differentiable op stays under 1e-6 relative error at 20 random
# points. Functions map a flat vector to a scalar through the op.


def _op_cases():
    rng = np.random.default_rng(42)
    other = rng.standard_normal(6)
    pos = rng.uniform(0.2, 2.0, size=6)
    idx = rng.integers(0, 3, size=2)
    mask = rng.random(6) < 0.5
    return {
        "add": (lambda t: (t + Tensor(other)).sum(), lambda: rng.standard_normal(6)),
        "sub": (lambda t: (Tensor(other) - t).sum(), lambda: rng.standard_normal(6)),
        "mul": (lambda t: (t * Tensor(other)).sum(), lambda: rng.standard_normal(6)),
        "div": (lambda t: (t / Tensor(pos)).sum(), lambda: rng.standard_normal(6)),
        "div_denom": (lambda t: (Tensor(other) / t).sum(), lambda: rng.uniform(0.5, 2.0, 6)),
        "matmul": (
            lambda t: nc.matmul(t.reshape((2, 3)), t.reshape((3, 2))).sum(),
            lambda: rng.standard_normal(6),
        ),
        "log": (lambda t: nc.log(t).sum(), lambda: rng.uniform(0.1, 3.0, 6)),
        "exp": (lambda t: nc.exp(t).sum(), lambda: rng.standard_normal(6)),
        "tanh": (lambda t: nc.tanh(t).sum(), lambda: rng.standard_normal(6)),
        "power": (lambda t: nc.power(t, 1.7).sum(), lambda: rng.uniform(0.2, 2.0, 6)),
        "sum_axis": (
            lambda t: (t.reshape((2, 3)).sum(axis=0) * Tensor(other[:3])).sum(),
            lambda: rng.standard_normal(6),
        ),
        "mean": (lambda t: t.mean() * 3.0, lambda: rng.standard_normal(6)),
        "mean_keepdims": (
            lambda t: (t.reshape((2, 3)).mean(axis=1, keepdims=True) * Tensor(other[:2].reshape(2, 1))).sum(),
            lambda: rng.standard_normal(6),
        ),
        "softmax": (
            lambda t: (nc.softmax(t) * Tensor(other)).sum(),
            lambda: rng.standard_normal(6),
        ),
        "log_softmax": (
            lambda t: (nc.log_softmax(t) * Tensor(other)).sum(),
            lambda: rng.standard_normal(6),
        ),
        "mask_fill": (
            lambda t: (nc.mask_fill(t, mask, 2.0) * Tensor(other)).sum(),
            lambda: rng.standard_normal(6),
        ),
        "clamp_max": (
            lambda t: (nc.clamp_max(t, 0.2) * Tensor(other)).sum(),
            lambda: rng.standard_normal(6) + 1.0,
        ),
        "embedding": (
            lambda t: (nc.embedding(t.reshape((3, 2)), idx) * Tensor(other[:4].reshape(2, 2))).sum(),
            lambda: rng.standard_normal(6),
        ),
        "take_along_last": (
            lambda t: (nc.take_along_last(t.reshape((2, 3)), idx) * Tensor(other[:2])).sum(),
            lambda: rng.standard_normal(6),
        ),
        "transpose": (
            lambda t: (t.reshape((2, 3)).transpose((1, 0)) * Tensor(other.reshape(3, 2))).sum(),
            lambda: rng.standard_normal(6),
        ),
    }


@pytest.mark.parametrize("name", sorted(_op_cases().keys()))
def test_op_gradients_at_random_points(name):
    f, sample = _op_cases()[name]
    for _ in range(20):
        x = Tensor(sample(), requires_grad=True)
        assert nc.grad_check(f, x) < 1e-6, name


def test_tape_replay_is_idempotent_after_reset():
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)

    def run():
        x.grad = None
        w.grad = None
        with Tape() as tape:
            y = nc.softmax(nc.matmul(x, w))
            loss = (y * y).sum()
            tape.backward(loss)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_tape_cannot_be_replayed_twice():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        y = x.sum()
        tape.backward(y)
        with pytest.raises(SiaSeqError):
            tape.backward(y)


def test_tape_clear_drops_entries():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        _ = (x * 2.0).sum()
        assert len(tape) > 0
        tape.clear()
        assert len(tape) == 0


def test_leaves_without_requires_grad_get_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))
    with Tape() as tape:
        y = (x * c).sum()
        tape.backward(y)
    assert x.grad is not None
    assert c.grad is None


def test_no_tape_means_no_tracking():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    assert not y.requires_grad
