"""Shared test utilities: the finite-difference gradient oracle and
scenario builders used by both the unit tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from mimleak.tensor import (
    Tensor,
    add,
    backward,
    concat,
    embed_lookup,
    gelu,
    layernorm,
    masked_mse,
    matmul,
    mul,
    reshape,
    scale,
    slice_,
    softmax,
)

H = 1e-4
TOL = 1e-3


def fd_gradients(loss_fn, arrays: list[np.ndarray], h: float = H) -> list[np.ndarray]:
    """Central finite differences of a scalar loss over every input element.

    Independent of the engine's backward pass: only forward evaluations.
    """
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for j in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] += h
            up = loss_fn(bumped)
            bumped = [a.copy() for a in arrays]
            bumped[i].reshape(-1)[j] -= h
            down = loss_fn(bumped)
            flat[j] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_gradients(graph_fn, arrays: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Run the graph once with requires_grad leaves and collect grads."""
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = graph_fn(leaves)
    value = loss.item()
    backward(loss)
    return value, [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def check_gradients(graph_fn, arrays: list[np.ndarray], tol: float = TOL) -> None:
    """Assert analytic and finite-difference gradients agree."""

    def loss_fn(vals):
        return graph_fn([Tensor(v, dtype=np.float64) for v in vals]).item()

    _, analytic = analytic_gradients(graph_fn, arrays)
    numeric = fd_gradients(loss_fn, arrays)
    for a, f in zip(analytic, numeric):
        err = np.abs(a - f)
        bound = tol * (1.0 + np.abs(f))
        assert np.all(err <= bound), f"gradient mismatch: max err {err.max()} vs bound {bound.min()}"


def to_scalar(out: Tensor, anchor: np.ndarray) -> Tensor:
    """Reduce any op output to a scalar via mean((out - anchor)^2)."""
    flat = reshape(out, (out.size, 1))
    target = Tensor(anchor.reshape(out.size, 1), dtype=np.float64)
    return masked_mse(flat, target, np.ones(out.size))


def op_scenarios(rng: np.random.Generator) -> dict[str, tuple]:
    """One random (graph_fn, arrays) pair per op kind, tensors <= 32 elements."""

    def anchored(build, *arrays, out_shape):
        anchor = rng.standard_normal(out_shape)

        def graph(leaves):
            return to_scalar(build(leaves), anchor)

        return graph, list(arrays)

    scenarios = {}

    b, n, k, m = 2, 3, 4, 2
    a_mat = rng.standard_normal((n, k))
    b_mat = rng.standard_normal((k, m))
    ta = bool(rng.integers(2))
    tb = bool(rng.integers(2))
    a_in = a_mat.T.copy() if ta else a_mat
    b_in = b_mat.T.copy() if tb else b_mat
    scenarios["matmul"] = anchored(
        lambda L: matmul(L[0], L[1], transpose_a=ta, transpose_b=tb), a_in, b_in, out_shape=(n, m)
    )
    # batched against a shared weight matrix
    batched = rng.standard_normal((b, n, k))
    weight = rng.standard_normal((k, m))
    scenarios["matmul_batched"] = anchored(
        lambda L: matmul(L[0], L[1]), batched, weight, out_shape=(b, n, m)
    )

    x = rng.standard_normal((b, n, k))
    bias = rng.standard_normal((k,))
    scenarios["add"] = anchored(lambda L: add(L[0], L[1]), x, bias, out_shape=(b, n, k))

    y = rng.standard_normal((b, n, k))
    scenarios["mul"] = anchored(lambda L: mul(L[0], L[1]), x.copy(), y, out_shape=(b, n, k))

    alpha = float(rng.uniform(-2, 2))
    scenarios["scale"] = anchored(lambda L: scale(L[0], alpha), x.copy(), out_shape=(b, n, k))

    scenarios["gelu"] = anchored(lambda L: gelu(L[0]), 2.0 * rng.standard_normal((n, k)), out_shape=(n, k))

    scenarios["softmax"] = anchored(
        lambda L: softmax(L[0]), 2.0 * rng.standard_normal((b, n, m)), out_shape=(b, n, m)
    )

    gamma = rng.standard_normal((k,))
    beta = rng.standard_normal((k,))
    scenarios["layernorm"] = anchored(
        lambda L: layernorm(L[0], L[1], L[2]), rng.standard_normal((n, k)), gamma, beta, out_shape=(n, k)
    )

    table = rng.standard_normal((5, m))
    idx = rng.integers(0, 5, size=(b, n))
    scenarios["embed_lookup"] = anchored(
        lambda L: embed_lookup(L[0], idx), table, out_shape=(b, n, m)
    )
    btable = rng.standard_normal((b, 4, m))
    bidx = rng.integers(0, 4, size=(b, 3))
    scenarios["embed_lookup_batched"] = anchored(
        lambda L: embed_lookup(L[0], bidx), btable, out_shape=(b, 3, m)
    )

    scenarios["reshape"] = anchored(
        lambda L: reshape(L[0], (k, b * n)), rng.standard_normal((b, n, k)), out_shape=(k, b * n)
    )

    p1 = rng.standard_normal((n, k))
    p2 = rng.standard_normal((2, k))
    scenarios["concat"] = anchored(lambda L: concat(L, axis=0), p1, p2, out_shape=(n + 2, k))

    scenarios["slice"] = anchored(
        lambda L: slice_(L[0], 1, 1, 3), rng.standard_normal((n, k)), out_shape=(n, 2)
    )

    pred = rng.standard_normal((n, k))
    targ = rng.standard_normal((n, k))
    msk = np.zeros(n)
    msk[rng.choice(n, size=2, replace=False)] = 1.0
    scenarios["masked_mse"] = (
        lambda L: masked_mse(L[0], L[1], msk),
        [pred, targ],
    )
    norm = "patch"
    scenarios["masked_mse_patchnorm"] = (
        lambda L: masked_mse(L[0], L[1], msk, normalization=norm),
        [pred.copy(), targ.copy()],
    )
    return scenarios
