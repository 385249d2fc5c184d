import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emea import autodiff as ad
from emea.autodiff import ContractError, ShapeError

from conftest import fd_grad, leaf, rel_err

finite = st.floats(-5, 5, allow_nan=False, width=64)


def test_matmul_identity():
    out = ad.matmul(ad.tensor([[1, 0], [0, 1]]), ad.tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.value, [[3, 4], [5, 6]])


def test_matmul_hand_value():
    assert ad.matmul(ad.tensor([[1, 2]]), ad.tensor([[3], [4]])).value.tolist() == [[11.0]]


def test_matmul_gradient_of_sum():
    a = leaf([[1.0, 2.0]])
    ad.backward(ad.total(ad.matmul(a, ad.tensor([[3], [4]], dtype=np.float64))))
    np.testing.assert_allclose(a.grad, [[3.0, 4.0]])
    numeric = fd_grad(lambda x: float(np.sum(x @ np.array([[3.0], [4.0]]))), a.value)
    np.testing.assert_allclose(numeric, [[3.0, 4.0]], atol=1e-6)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(ad.tensor([0.0, 0.0])).value, [0.5, 0.5])
    np.testing.assert_allclose(ad.softmax(ad.tensor([math.log(2), 0.0], dtype=np.float64)).value, [2 / 3, 1 / 3], atol=1e-12)


@given(arrays(np.float64, st.integers(1, 6), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariance_and_simplex(x, c):
    p = ad.softmax(ad.tensor(x, dtype=np.float64)).value
    np.testing.assert_allclose(ad.softmax(ad.tensor(x + c, dtype=np.float64)).value, p, atol=1e-12)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-6


def test_softmax_is_stable_for_large_inputs():
    p = ad.softmax(ad.tensor([1000.0, 0.0])).value
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)


def test_entropy_examples():
    assert ad.entropy(ad.tensor([[1, 0, 0, 0]])).item() == 0.0
    assert ad.entropy(ad.tensor([[0.25] * 4], dtype=np.float64)).item() == pytest.approx(math.log(4), abs=1e-12)
    # -(0.7 ln 0.7 + 0.3 ln 0.3), evaluated by hand
    assert ad.entropy(ad.tensor([[0.7, 0.3]], dtype=np.float64)).item() == pytest.approx(0.61086, abs=1e-5)


def test_entropy_rejects_non_distributions():
    with pytest.raises(ContractError):
        ad.entropy(ad.tensor([[0.7, 0.4]]))


def test_entropy_mean_reduction():
    p = ad.tensor([[0.5, 0.5], [1.0, 0.0]], dtype=np.float64)
    assert ad.entropy(p, "mean").item() == pytest.approx(math.log(2) / 2)


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite))
def test_entropy_bounds(logits):
    p = ad.softmax(ad.tensor(logits, dtype=np.float64), axis=1)
    h = ad.entropy(p).item()
    assert -1e-9 <= h <= logits.shape[0] * math.log(logits.shape[1]) + 1e-9


def test_backward_of_sum():
    x = leaf([1.0, 2.0, 3.0])
    ad.backward(ad.total(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_uniform_point_is_critical_for_entropy():
    b = leaf([0.0, 0.0])
    ad.backward(ad.entropy(ad.reshape(ad.softmax(b), (1, 2))))
    np.testing.assert_allclose(b.grad, [0.0, 0.0], atol=1e-12)


def test_backward_accumulates_on_leaves():
    x = leaf([1.0, 2.0])
    y = ad.total(ad.mul(x, x))
    ad.backward(y)
    ad.backward(y)
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_backward_needs_scalar_root():
    with pytest.raises(ContractError):
        ad.backward(ad.mul(leaf([1.0, 2.0]), leaf([1.0, 2.0])))


def test_frozen_leaves_get_no_gradient():
    a, b = leaf([[1.0, 2.0]]), ad.tensor([[3.0], [4.0]], dtype=np.float64)
    ad.backward(ad.total(ad.matmul(a, b)))
    assert b.grad is None


def test_shared_node_visited_once():
    x = leaf([2.0])
    y = ad.mul(x, x)
    z = ad.total(ad.add(y, y))
    ad.backward(z)
    np.testing.assert_allclose(x.grad, [8.0])


# --------------------------------------------------------------------------- #
# finite-difference checks for every op
# --------------------------------------------------------------------------- #


def _check(op, *shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    vals = [rng.normal(size=s) if not positive else rng.uniform(0.2, 1.0, size=s) for s in shapes]
    w = rng.normal(size=op(*[ad.tensor(v, dtype=np.float64) for v in vals]).shape)

    def f(i):
        def run(x):
            args = [ad.tensor(x if j == i else v, dtype=np.float64) for j, v in enumerate(vals)]
            return float(np.sum(op(*args).value * w))

        return run

    nodes = [leaf(v) for v in vals]
    out = op(*nodes)
    ad.backward(ad.total(ad.mul(out, ad.tensor(w, dtype=np.float64))))
    for i, n in enumerate(nodes):
        assert rel_err(n.grad, fd_grad(f(i), vals[i])) < 1e-3, f"input {i}"


OPS = {
    "matmul": (ad.matmul, [(3, 4), (4, 2)]),
    "transpose": (ad.transpose, [(3, 2)]),
    "add": (ad.add, [(2, 3), (2, 3)]),
    "sub": (ad.sub, [(2, 3), (2, 3)]),
    "mul": (ad.mul, [(2, 3), (2, 3)]),
    "scale": (lambda x: ad.scale(x, -1.7), [(3,)]),
    "add_bias": (ad.add_bias, [(3, 4), (4,)]),
    "relu": (ad.relu, [(4, 3)]),
    "mean": (ad.mean, [(2, 5)]),
    "softmax": (lambda x: ad.softmax(x, axis=1), [(3, 4)]),
    "log_softmax": (lambda x: ad.log_softmax(x, axis=1), [(3, 4)]),
    "cross_entropy": (lambda x: ad.cross_entropy(x, np.array([1, -100, 3])), [(3, 5)]),
    "layer_norm": (ad.layer_norm, [(3, 5), (5,), (5,)]),
    "embedding": (lambda t: ad.embedding(t, np.array([0, 2, 2, 1])), [(4, 3)]),
    "take_rows": (lambda x: ad.take_rows(x, np.array([2, 0, 2])), [(3, 4)]),
    "mix": (lambda a, b, w: ad.mix([a, b], w), [(2, 3), (2, 3), (2,)]),
    "row_mix": (lambda a, b, w: ad.row_mix([a, b], w), [(2, 3), (2, 3), (2, 2)]),
    "row_dots": (lambda q, k1, k2: ad.row_dots(q, [k1, k2]), [(3, 4), (3, 4), (3, 4)]),
    "attention": (lambda q, k, v: ad.attention(q, k, v, 2, 2, np.array([[1, 1, 0], [1, 1, 1]])), [(6, 4), (6, 4), (6, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(name, seed):
    op, shapes = OPS[name]
    _check(op, *shapes, seed=seed)


@pytest.mark.parametrize("seed", range(10))
def test_entropy_gradient(seed):
    _check(lambda p: ad.entropy(ad.softmax(p, axis=1)), (3, 4), seed=seed)


def test_float64_is_preserved_through_ops():
    x = ad.tensor(np.ones((2, 2)), dtype=np.float64)
    assert ad.softmax(ad.matmul(x, x)).dtype == np.float64
    assert ad.tensor([1, 2]).dtype == np.float32
