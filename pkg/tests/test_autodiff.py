import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from learnpruner.autodiff import (DegenerateRowError, ShapeError, Tape, Tensor, causal_mask, concat, cross_entropy,
                                  masked_softmax_pruned, matmul, mean, relu, reshape, rms_norm, softmax_rows, ste,
                                  take, transpose)

from conftest import central_diff, relerr


def grad_of(build, *leaves):
    for t in leaves:
        t.grad = None
    with Tape() as tape:
        out = build()
    tape.backward(out)
    return [t.grad for t in leaves]


def test_matmul_examples():
    assert np.array_equal(matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]])).data, [[3, 4], [5, 6]])
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_matmul_gradient_matches_finite_differences(rng):
    a = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    ga, gb = grad_of(lambda: (a @ b).sum(), a, b)
    f = lambda: float((a.data @ b.data).sum())
    assert relerr(ga, central_diff(f, a.data)) <= 1e-6
    assert relerr(gb, central_diff(f, b.data)) <= 1e-6


def test_softmax_examples():
    assert np.allclose(softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, 1 / 3)
    out = softmax_rows(Tensor([[5.0, 5.0]]), np.array([[0.0, -np.inf]])).data
    assert out.tolist() == [[1.0, 0.0]]


def test_causal_rows_have_i_plus_one_nonzeros(rng):
    out = softmax_rows(Tensor(rng.normal(size=(3, 3))), causal_mask(3)).data
    assert [int((row != 0).sum()) for row in out] == [1, 2, 3]
    assert np.all(out[np.triu_indices(3, 1)] == 0.0)


def test_softmax_rows_sum_to_one_and_scale(rng):
    x = rng.normal(size=(6, 9)) * 30
    out = softmax_rows(Tensor(x), scale=0.25).data
    assert np.all(np.abs(out.sum(axis=1) - 1) <= 1e-9)
    ref = np.exp(0.25 * x - (0.25 * x).max(axis=1, keepdims=True))
    assert np.allclose(out, ref / ref.sum(axis=1, keepdims=True), atol=1e-14)


def test_fully_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        softmax_rows(Tensor([[1.0, 2.0]]), np.array([[-np.inf, -np.inf]]))


def test_bad_mask_values_rejected():
    with pytest.raises(ValueError):
        softmax_rows(Tensor([[1.0, 2.0]]), np.array([[0.0, 1.0]]))


def test_pruned_softmax_all_ones_equals_softmax(rng):
    x = rng.normal(size=(7, 7))
    a = masked_softmax_pruned(Tensor(x), np.ones(7)).data
    b = softmax_rows(Tensor(x)).data
    assert np.abs(a - b).max() <= 1e-12
    a = masked_softmax_pruned(Tensor(x), np.ones(7), causal=True).data
    b = softmax_rows(Tensor(x), causal_mask(7)).data
    assert np.abs(a - b).max() <= 1e-12


def test_pruned_softmax_single_kept_token(rng):
    keep = np.zeros(5)
    keep[1] = 1.0
    a = masked_softmax_pruned(Tensor(rng.normal(size=(5, 5))), keep).data
    assert set(np.flatnonzero(a[0])) == {0, 1}
    assert np.all(np.abs(a.sum(axis=1) - 1) <= 1e-12)


def physical_deletion(x, keep, causal):
    """Oracle: for each kept row, softmax over the surviving columns only."""
    n = len(keep)
    out = {}
    for i in range(n):
        if not keep[i]:
            continue
        cols = [j for j in range(n) if keep[j] and (not causal or j <= i)]
        z = x[i, cols] - x[i, cols].max()
        e = np.exp(z)
        out[i] = (cols, e / e.sum())
    return out


def test_pruned_softmax_matches_physical_deletion_100_instances():
    rng = np.random.default_rng(7)
    for trial in range(100):
        n = int(rng.integers(2, 10))
        x = rng.normal(size=(n, n)) * rng.uniform(0.5, 4)
        keep = (rng.random(n) < 0.5).astype(float)
        keep[rng.integers(n)] = 1.0
        causal = bool(trial % 2)
        a = masked_softmax_pruned(Tensor(x), keep, causal=causal).data
        for i, (cols, ref) in physical_deletion(x, keep, causal).items():
            assert np.abs(a[i, cols] - ref).max() <= 1e-6
            others = np.setdiff1d(np.arange(n), cols)
            assert np.all(a[i, others] == 0.0)


def test_backward_examples():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    (g,) = grad_of(lambda: x.sum(), x)
    assert g.tolist() == [1.0, 1.0, 1.0]
    x = Tensor(np.array([[0.3, -1.0, 2.0]]), requires_grad=True)
    (g,) = grad_of(lambda: softmax_rows(x).sum(), x)
    assert np.abs(g).max() < 1e-12


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_mlp_cross_entropy_gradients(rng):
    x = rng.normal(size=(6, 5))
    y = rng.integers(0, 3, 6)
    w1 = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b1 = Tensor(rng.normal(size=4) * 0.1, requires_grad=True)
    w2 = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b2 = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
    loss = lambda: cross_entropy(relu(Tensor(x) @ w1 + b1) @ w2 + b2, y)
    grads = grad_of(loss, w1, b1, w2, b2)
    for t, g in zip((w1, b1, w2, b2), grads):
        assert relerr(g, central_diff(lambda: float(loss().data), t.data)) <= 1e-4


def test_cross_entropy_value():
    logits = Tensor(np.log(np.array([[0.2, 0.8], [0.5, 0.5]])))
    assert np.isclose(cross_entropy(logits, [1, 0]).data, -(np.log(0.8) + np.log(0.5)) / 2)


def test_ste_contract(rng):
    soft = Tensor(rng.random(6), requires_grad=True)
    hard = (soft.data >= 0.5).astype(float)
    assert np.array_equal(ste(hard, soft).data, hard)
    (g,) = grad_of(lambda: ste(hard, soft).sum(), soft)
    assert np.array_equal(g, np.ones(6))


def test_tape_ignores_ops_outside_and_frozen_inputs(rng):
    a = Tensor(rng.normal(size=(2, 2)))
    with Tape() as tape:
        b = a @ a
    assert tape.nodes == [] and not b.requires_grad


# -- finite-difference sweep over every differentiable op --------------------

def _op_cases(rng):
    x = lambda *s: Tensor(rng.normal(size=s), requires_grad=True)
    w = rng.normal(size=(3, 4))
    yield "add", [x(3, 4), x(4)], lambda a, b: ((a + b) * w).sum()
    yield "sub", [x(3, 4), x(3, 1)], lambda a, b: ((a - b) * w).sum()
    yield "mul", [x(3, 4), x(3, 4)], lambda a, b: (a * b).sum()
    yield "relu", [Tensor(rng.normal(size=(3, 4)) + 0.05, requires_grad=True)], lambda a: (relu(a) * w).sum()
    yield "reshape", [x(3, 4)], lambda a: (reshape(a, (4, 3)) * w.reshape(4, 3)).sum()
    yield "transpose", [x(4, 3)], lambda a: (transpose(a) * w).sum()
    yield "take", [x(5, 4)], lambda a: (take(a, [0, 2, 2], axis=0) * w).sum()
    yield "concat", [x(1, 4), x(2, 4)], lambda a, b: (concat([a, b], axis=0) * w).sum()
    yield "mean", [x(3, 4)], lambda a: mean(a * w, axis=0).sum()
    w3 = rng.normal(size=(2, 3, 2))
    yield "batched matmul", [x(2, 3, 4), x(4, 2)], lambda a, b: ((a @ b) * w3).sum()
    yield "rms_norm", [x(3, 4), x(4)], lambda a, g: (rms_norm(a, g) * w).sum()
    yield "softmax", [x(3, 4)], lambda a: (softmax_rows(a, scale=0.7) * w).sum()
    m = np.zeros((4, 4))
    m[0, 3] = -np.inf
    w4 = rng.normal(size=(4, 4))
    yield "masked softmax", [x(4, 4)], lambda a: (softmax_rows(a, m) * w4).sum()
    keep = Tensor(rng.uniform(0.2, 1.0, 4), requires_grad=True)
    yield "pruned softmax", [x(4, 4), keep], lambda a, k: (masked_softmax_pruned(a, k, causal=True) * w4).sum()
    w5 = rng.normal(size=(2, 3, 4, 4))
    yield "pruned softmax batched", [x(2, 3, 4, 4), Tensor(rng.uniform(0.2, 1, (2, 1, 4)), requires_grad=True)], \
        lambda a, k: (masked_softmax_pruned(a, k, scale=0.5) * w5).sum()
    yield "cross_entropy", [x(3, 4)], lambda a: cross_entropy(a, [0, 3, 1])


@pytest.mark.parametrize("seed", range(4))
def test_every_op_passes_finite_difference_check(seed):
    rng = np.random.default_rng(seed)
    for name, leaves, fn in _op_cases(rng):
        grads = grad_of(lambda: fn(*leaves), *leaves)
        for t, g in zip(leaves, grads):
            num = central_diff(lambda: float(fn(*leaves).data), t.data)
            assert relerr(g, num) <= 1e-4, name


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000), st.booleans())
def test_pruned_softmax_rows_always_sum_to_one(n, seed, causal):
    rng = np.random.default_rng(seed)
    keep = (rng.random(n) < 0.3).astype(float)
    a = masked_softmax_pruned(Tensor(rng.normal(size=(n, n)) * 5), keep, causal=causal).data
    assert np.all(np.abs(a.sum(axis=1) - 1) <= 1e-9)
