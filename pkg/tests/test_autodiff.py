"""Finite-difference verification of every reverse-mode op.

Each op is wrapped into a scalar objective; central differences with step
1e-5 on every input coordinate are the oracle. Relative error uses the
denominator max(|analytic|, |numeric|, 1) so near-zero gradients compare
absolutely.
"""

import numpy as np
import pytest

from tinyshot import autodiff as ad


STEP = 1e-5
TOL = 1e-6


def numeric_grad(f, x):
    """Central-difference gradient of scalar f at array x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + STEP
        hi = f(x)
        flat[i] = keep - STEP
        lo = f(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * STEP)
    return g


def check_op(build, *shapes, seed=60):
    """Compare backward() grads of scalar build(*vars) against differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    vs = [ad.var(a.copy()) for a in arrays]
    out = build(*vs)
    ad.backward(out)
    for idx, (a, v) in enumerate(zip(arrays, vs)):
        def f(x, idx=idx):
            probe = [ad.var(arr.copy()) for arr in arrays]
            probe[idx] = ad.var(x.copy())
            return float(build(*probe).value)
        num = numeric_grad(f, a.copy())
        denom = np.maximum(np.maximum(np.abs(num), np.abs(v.grad)), 1.0)
        assert np.max(np.abs(v.grad - num) / denom) < TOL, f"operand {idx}"


def test_matmul_grads():
    check_op(lambda a, b: ad.sum_all(ad.matmul(a, b)), (3, 4), (4, 2))


def test_matmul_chain_grads():
    check_op(lambda a, b, c: ad.sum_all(ad.matmul(ad.matmul(a, b), c)),
             (2, 3), (3, 3), (3, 2))


def test_transpose_grads():
    check_op(lambda a, b: ad.sum_all(ad.matmul(ad.transpose(a), b)), (4, 3), (4, 2))


def test_add_sub_mul_same_shape():
    check_op(lambda a, b: ad.sum_all(ad.mul(ad.add(a, b), ad.sub(a, b))), (3, 5), (3, 5))


def test_broadcast_unbroadcast_grads():
    # row-vector bias added to a matrix, then weighted elementwise
    check_op(lambda a, b: ad.sum_all(ad.mul(ad.add(a, b), a)), (4, 3), (3,))
    check_op(lambda a, b: ad.sum_all(ad.mul(a, b)), (4, 3), (1, 3))


def test_scalar_ops_and_tanh():
    check_op(lambda a: ad.sum_all(ad.tanh(ad.mul_scalar(ad.add_scalar(a, 0.3), 1.7))),
             (4, 4))


def test_row_normalize_grads():
    check_op(lambda a: ad.sum_all(ad.mul(ad.row_normalize(a), a)), (5, 7))


def test_row_normalize_unit_output():
    rng = np.random.default_rng(61)
    a = ad.var(rng.normal(size=(6, 9)))
    out = ad.row_normalize(a)
    assert np.allclose(np.linalg.norm(out.value, axis=1), 1.0)


def test_prefix_grads_and_validation():
    check_op(lambda a: ad.sum_all(ad.mul(ad.prefix(a, 3), ad.prefix(a, 3))), (4, 6))
    with pytest.raises(ValueError):
        ad.prefix(ad.var(np.zeros((2, 4))), 5)
    with pytest.raises(ValueError):
        ad.prefix(ad.var(np.zeros(4)), 2)


def test_ce_diag_value_and_grads():
    check_op(lambda a: ad.ce_diag(a), (5, 5))
    # uniform logits: every row's loss is log(n)
    n = 6
    out = ad.ce_diag(ad.var(np.zeros((n, n))))
    assert float(out.value) == pytest.approx(np.log(n))
    with pytest.raises(ValueError):
        ad.ce_diag(ad.var(np.zeros((3, 4))))


def test_shared_subexpression_accumulates():
    # y = sum(a*a) + sum(a): dy/da = 2a + 1 exactly
    rng = np.random.default_rng(62)
    a_val = rng.normal(size=(3, 3))
    a = ad.var(a_val)
    y = ad.add(ad.sum_all(ad.mul(a, a)), ad.sum_all(a))
    ad.backward(y)
    assert np.allclose(a.grad, 2 * a_val + 1)


def test_backward_resets_stale_grads():
    a = ad.var(np.ones((2, 2)))
    y1 = ad.sum_all(ad.mul(a, a))
    ad.backward(y1)
    first = a.grad.copy()
    y2 = ad.sum_all(ad.mul(a, a))
    ad.backward(y2)
    assert np.array_equal(a.grad, first)  # not doubled by the second pass


def test_backward_rejects_non_scalar_root():
    with pytest.raises(ValueError):
        ad.backward(ad.var(np.zeros((2, 2))))


def test_deep_chain_is_iterative():
    # long sequential graph; a recursive backward would hit the stack limit
    x = ad.var(np.array(0.5))
    node = x
    for _ in range(5000):
        node = ad.add_scalar(node, 0.0)
    out = ad.mul_scalar(node, 2.0)
    ad.backward(out)
    assert x.grad == pytest.approx(2.0)
