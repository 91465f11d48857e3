import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dyqdetr import diffcore as dc
from helpers import grad_error, op_cases, set_loss_case

CASES = op_cases()


@pytest.mark.parametrize("name,f,x", CASES, ids=[c[0] for c in CASES])
def test_op_gradients_match_central_differences(name, f, x):
    assert grad_error(f, x) < 1e-5


def test_every_registered_op_has_a_gradient_case():
    covered = {c[0].split("[")[0].split("-")[0] for c in CASES}
    assert set(dc.OPS) <= covered


@pytest.mark.parametrize("name,f,x", set_loss_case(), ids=lambda v: v if isinstance(v, str) else "")
def test_set_loss_gradients(name, f, x):
    assert grad_error(f, x) < 1e-5


def test_backward_rejects_non_scalar_root():
    x = dc.parameter(np.ones((2, 2)))
    with pytest.raises(dc.ShapeError):
        dc.backward(x * 2)


def test_backward_accumulates_over_reuse():
    x = dc.parameter(np.array([3.0]))
    y = (x * x + x * 2.0).sum()
    grads = dc.backward(y)
    assert grads[x][0] == pytest.approx(2 * 3.0 + 2.0)


def test_tape_is_released_after_backward():
    x = dc.parameter(np.ones(3))
    y = (x * 2).sum()
    dc.backward(y)
    assert y._parents == () and y._backward is None


def test_constant_graph_has_no_gradients():
    y = (dc.tensor([1.0, 2.0]) * 3).sum()
    assert dc.backward(y) == {}


def test_no_grad_records_nothing():
    x = dc.parameter(np.ones(3))
    with dc.no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad
    assert dc.is_grad_enabled()


def test_broadcast_mismatch_raises():
    with pytest.raises(dc.ShapeError):
        dc.tensor(np.ones((2, 3))) + dc.tensor(np.ones((4,)))


def test_masked_softmax_blocked_entries_are_exactly_zero():
    rng = np.random.default_rng(1)
    a = dc.parameter(rng.normal(size=(4, 4)))
    mask = np.zeros((4, 4))
    mask[:2, 2:] = -np.inf
    mask[2:, :2] = -np.inf
    p = dc.masked_softmax(a, mask).data
    assert np.all(p[:2, 2:] == 0.0) and np.all(p[2:, :2] == 0.0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-15)


def test_fully_masked_row_is_zero_and_finite():
    a = dc.parameter(np.ones((2, 3)))
    mask = np.array([[-np.inf] * 3, [0.0, 0.0, -np.inf]])
    p = dc.masked_softmax(a, mask)
    assert np.all(p.data[0] == 0.0)
    dc.backward((p * np.arange(6.0).reshape(2, 3)).sum())
    assert np.all(np.isfinite(a.grad))


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_log_softmax_rows_normalize(x):
    out = dc.log_softmax(dc.tensor(x)).data
    np.testing.assert_allclose(np.exp(out).sum(-1), 1.0, atol=1e-12)


@given(arrays(np.float64, (4,), elements=st.floats(-800, 800)))
def test_sigmoid_is_finite_and_bounded(x):
    s = dc.sigmoid(dc.tensor(x)).data
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))


def test_spawn_rng_streams_are_named_and_reproducible():
    a = dc.spawn_rng(7, "data").random(4)
    b = dc.spawn_rng(7, "data").random(4)
    c = dc.spawn_rng(7, "init").random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_finite_diff_check_flags_a_wrong_gradient():
    def bad(x):
        out = dc.Tensor(x.data ** 2)
        out.requires_grad = True
        out._parents = (x,)
        out._backward = lambda g: (g * 3.0,)     # wrong on purpose
        return out.sum()
    assert dc.finite_diff_check(bad, dc.tensor(np.array([1.0, -1.5])), 1e-6) > 1e-2
