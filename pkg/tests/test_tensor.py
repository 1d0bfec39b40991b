"""Semantics of the tensor operations, spec'd error cases and determinism."""

import numpy as np
import pytest

from mimleak.tensor import (
    EmptyMaskError,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    UnknownOpError,
    apply,
    backward,
    concat,
    embed_lookup,
    layernorm,
    masked_mse,
    matmul,
    mul,
    reshape,
    scale,
    slice_,
    softmax,
)


def test_softmax_uniform_logits():
    out = softmax(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], rtol=1e-6)


def test_matmul_identity_column_sums():
    # identity-padded 2x3 matrix times a column of ones -> column sums
    a = Tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    ones = Tensor([[1.0], [1.0], [1.0]])
    out = matmul(a, ones)
    np.testing.assert_allclose(out.data, [[2.0], [2.0]])


def test_layernorm_hand_oracle():
    # hand computation: mean 2, biased var 2/3
    x = np.array([[1.0, 2.0, 3.0]])
    out = layernorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-5).data
    expected = (x - 2.0) / np.sqrt(2.0 / 3.0 + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=1e-5)
    assert abs(out.mean()) < 1e-6
    assert abs(out.var() - 1.0) < 1e-4


def test_masked_mse_identical_inputs_zero():
    p = Tensor(np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32))
    assert masked_mse(p, p, np.array([1, 0, 1, 0])).item() == 0.0


def test_masked_mse_constant_offset_one():
    base = np.random.default_rng(1).standard_normal((4, 3)).astype(np.float32)
    out = masked_mse(Tensor(base + 1.0), Tensor(base), np.ones(4))
    assert abs(out.item() - 1.0) < 1e-6


def test_masked_mse_hand_arithmetic():
    # 2 patches of 2 pixels, diffs (0,0) and (3,4), mask second only -> 12.5
    pred = Tensor([[0.0, 0.0], [3.0, 4.0]])
    target = Tensor([[0.0, 0.0], [0.0, 0.0]])
    out = masked_mse(pred, target, np.array([0.0, 1.0]))
    assert out.item() == pytest.approx(12.5)


def test_masked_mse_symmetric_and_nonnegative():
    rng = np.random.default_rng(2)
    a = Tensor(rng.standard_normal((5, 4)).astype(np.float32))
    b = Tensor(rng.standard_normal((5, 4)).astype(np.float32))
    mask = np.array([1, 1, 0, 0, 1])
    ab = masked_mse(a, b, mask).item()
    ba = masked_mse(b, a, mask).item()
    assert ab == ba
    assert ab > 0.0


def test_masked_mse_empty_mask_rejected():
    p = Tensor(np.zeros((3, 2), dtype=np.float32))
    with pytest.raises(EmptyMaskError):
        masked_mse(p, p, np.zeros(3))


def test_masked_mse_shape_mismatch():
    with pytest.raises(ShapeError, match="masked_mse"):
        masked_mse(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 2))), np.ones(3))


def test_quadratic_derivative_through_sum():
    w = Tensor([1.0, 2.0], requires_grad=True)
    sq = masked_mse(reshape(w, (2, 1)), Tensor(np.zeros((2, 1))), np.ones(2))
    loss = scale(sq, 2.0)  # mean -> sum for 2 elements
    backward(loss)
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_mse_minimum_has_zero_gradient():
    p = Tensor(np.arange(6, dtype=np.float32).reshape(3, 2), requires_grad=True)
    t = Tensor(np.arange(6, dtype=np.float32).reshape(3, 2))
    loss = masked_mse(p, t, np.ones(3))
    backward(loss)
    np.testing.assert_array_equal(p.grad, np.zeros((3, 2)))


def test_backward_requires_scalar():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    out = mul(w, w)
    with pytest.raises(GraphError, match="scalar"):
        backward(out)


def test_backward_twice_rejected():
    w = Tensor([3.0], requires_grad=True)
    loss = masked_mse(reshape(w, (1, 1)), Tensor([[0.0]]), np.ones(1))
    backward(loss)
    with pytest.raises(GraphError, match="consumed"):
        backward(loss)


def test_unknown_kind_rejected():
    with pytest.raises(UnknownOpError):
        apply("conv2d", [Tensor([1.0])])


def test_apply_matches_named_ops():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    via_apply = apply("matmul", [a, b])
    np.testing.assert_array_equal(via_apply.data, matmul(a, b).data)
    out = apply("softmax", [Tensor([[1.0, 1.0]])])
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])


def test_shape_error_names_offending_op():
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="add"):
        from mimleak.tensor import add

        add(Tensor(np.ones((2, 3))), Tensor(np.ones((2,))))


def test_non_finite_creation_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf, 1.0])


def test_embed_lookup_plain_and_batched():
    table = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3), requires_grad=True)
    out = embed_lookup(table, np.array([[0, 2], [1, 1]]))
    assert out.shape == (2, 2, 3)
    np.testing.assert_array_equal(out.data[0, 1], [6, 7, 8])

    btable = Tensor(np.arange(24, dtype=np.float32).reshape(2, 4, 3))
    bout = embed_lookup(btable, np.array([[3, 0], [1, 2]]))
    np.testing.assert_array_equal(bout.data[0, 0], [9, 10, 11])
    np.testing.assert_array_equal(bout.data[1, 1], [18, 19, 20])


def test_embed_lookup_duplicate_indices_accumulate():
    table = Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
    out = embed_lookup(table, np.array([0, 0, 1]))
    loss = masked_mse(out, Tensor(np.ones((3, 2))), np.ones(3))
    backward(loss)
    # row 0 used twice: its gradient doubles row 1's
    np.testing.assert_allclose(table.grad[0], 2.0 * table.grad[1])


def test_embed_lookup_range_check():
    table = Tensor(np.zeros((2, 2)))
    with pytest.raises(ShapeError, match="range"):
        embed_lookup(table, np.array([2]))


def test_slice_concat_roundtrip():
    x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4), requires_grad=True)
    left = slice_(x, 1, 0, 2)
    right = slice_(x, 1, 2, 4)
    back = concat([left, right], axis=1)
    np.testing.assert_array_equal(back.data, x.data)


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((6, 6)).astype(np.float32)
    b = rng.standard_normal((6, 6)).astype(np.float32)

    def run():
        t = softmax(matmul(Tensor(a), Tensor(b)))
        return layernorm(t, Tensor(np.ones(6)), Tensor(np.zeros(6))).data.tobytes()

    assert run() == run()


def test_dtype_mixing_rejected():
    a = Tensor(np.ones((2, 2)), dtype=np.float32)
    b = Tensor(np.ones((2, 2)), dtype=np.float64)
    with pytest.raises(ShapeError, match="dtype"):
        mul(a, b)
