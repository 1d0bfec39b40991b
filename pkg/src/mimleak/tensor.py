"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery to train and probe a small masked autoencoder:
a fixed set of operations (matmul, add, mul, scale, gelu, softmax,
layernorm, embed_lookup, reshape, concat, slice, masked_mse), a tape of
OpNodes recorded whenever an input requires gradients, and a single
`backward` pass that fills Tensor.grad on every reachable parameter.

Conventions:
  - storage is float32 by default; float64 is accepted for verification
    work (e.g. finite-difference checks), but dtypes never mix inside one
    graph,
  - reductions (softmax sums, layernorm statistics, masked_mse) accumulate
    in float64 and cast back to the storage dtype,
  - broadcasting is limited to bias-style addition where the second
    operand's shape is a trailing suffix of the first; everything else is
    an explicit reshape/concat/slice,
  - every completed operation validates that its output is finite.

Concurrency: one graph has a single writer. Tensors that are not attached
to a graph are immutable by convention and safe to read from any thread.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

OP_KINDS = (
    "matmul",
    "add",
    "mul",
    "scale",
    "gelu",
    "softmax",
    "layernorm",
    "embed_lookup",
    "reshape",
    "concat",
    "slice",
    "masked_mse",
)

_SUPPORTED_DTYPES = (np.float32, np.float64)

# sqrt(2/pi), used by the tanh approximation of gelu
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class TensorError(Exception):
    """Base class for all tensor-engine failures."""


class ShapeError(TensorError):
    """Input shapes invalid for an operation; message names the op kind."""


class UnknownOpError(TensorError):
    """`apply` was handed an op kind outside OP_KINDS."""


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf."""


class GraphError(TensorError):
    """Misuse of the differentiation graph (non-scalar loss, reuse)."""


class EmptyMaskError(TensorError):
    """masked_mse received a mask selecting zero patches."""


class Tensor:
    """A dense n-dimensional array that can participate in a grad tape.

    `data` is a numpy array (row-major). When `requires_grad` is set the
    tensor is a leaf parameter: `backward` accumulates d(loss)/d(tensor)
    into `grad`. Tensors produced by operations carry the OpNode that
    created them in `node`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _SUPPORTED_DTYPES:
            raise TensorError(f"unsupported dtype {arr.dtype}")
        if _CHECK_FINITE and arr.size and not np.isfinite(arr.max() + arr.min()):
            raise NonFiniteError("tensor created from non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: OpNode | None = None

    @classmethod
    def _from_op(cls, arr: np.ndarray, node: "OpNode | None") -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = node is not None
        t.grad = None
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, None)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class OpNode:
    """One recorded operation: kind, input tensors and the vjp closure.

    The graph formed by OpNodes is acyclic by construction (an output is
    always a fresh tensor). `consumed` guards against a second backward
    pass through an already-freed tape.
    """

    __slots__ = ("kind", "inputs", "vjp", "consumed")

    def __init__(self, kind: str, inputs: Sequence[Tensor], vjp):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self.consumed = False


_CHECK_FINITE = True


class no_finite_checks:
    """Skip per-op finiteness validation inside a tight training loop.

    The caller takes over the invariant: trainers re-check the scalar loss
    every step (NaN/Inf propagates through the loss reduction), so blowups
    still abort within the step that produced them.
    """

    def __enter__(self):
        global _CHECK_FINITE
        self._prev = _CHECK_FINITE
        _CHECK_FINITE = False
        return self

    def __exit__(self, *exc):
        global _CHECK_FINITE
        _CHECK_FINITE = self._prev
        return False


def _needs_graph(inputs: Iterable[Tensor]) -> bool:
    return any(t.requires_grad or t.node is not None for t in inputs)


def _check_dtypes(kind: str, inputs: Sequence[Tensor]) -> None:
    dtypes = {t.data.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ShapeError(f"{kind}: mixed dtypes {sorted(map(str, dtypes))}")


def _finish(kind: str, arr: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    # NaN propagates through max; -inf is caught by min; +inf by max
    if _CHECK_FINITE and arr.size and not np.isfinite(arr.max() + arr.min()):
        raise NonFiniteError(f"{kind} produced non-finite values")
    node = OpNode(kind, inputs, vjp) if _needs_graph(inputs) else None
    return Tensor._from_op(arr, node)


def _sum_to_shape(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce leading broadcast axes so `arr` matches `shape`."""
    extra = arr.ndim - len(shape)
    if extra > 0:
        arr = arr.sum(axis=tuple(range(extra)))
    return arr


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """Matrix product of the last two axes, with optional transposes.

    Either both operands share identical leading (batch) dimensions, or one
    of them is a plain 2-d matrix that broadcasts across the other's batch.
    """
    _check_dtypes("matmul", (a, b))
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.ndim != b.ndim and 2 not in (a.ndim, b.ndim):
        raise ShapeError(f"matmul: incompatible ranks {a.shape} and {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")

    av = np.swapaxes(a.data, -1, -2) if transpose_a else a.data
    bv = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {av.shape[-1]} vs {bv.shape[-2]} "
            f"(inputs {a.shape} and {b.shape})"
        )

    # batched activations against a shared 2-d weight collapse into one GEMM
    if av.ndim > 2 and bv.ndim == 2 and not transpose_a:
        lead = av.shape[:-1]
        a2 = av.reshape(-1, av.shape[-1])
        out = (a2 @ bv).reshape(*lead, bv.shape[-1])

        def vjp(g: np.ndarray):
            g2 = g.reshape(-1, g.shape[-1])
            da = (g2 @ bv.T).reshape(av.shape)
            db_v = a2.T @ g2
            db = db_v.T if transpose_b else db_v
            return da, db

        return _finish("matmul", out, (a, b), vjp)

    out = av @ bv

    def vjp(g: np.ndarray):
        # out = av @ bv with av/bv the (possibly transposed) views
        da_v = g @ np.swapaxes(bv, -1, -2)
        db_v = np.swapaxes(av, -1, -2) @ g
        da = np.swapaxes(da_v, -1, -2) if transpose_a else da_v
        db = np.swapaxes(db_v, -1, -2) if transpose_b else db_v
        da = _sum_to_shape(da, a.shape)
        db = _sum_to_shape(db, b.shape)
        return da, db

    return _finish("matmul", out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may be a trailing-suffix bias of `a`."""
    _check_dtypes("add", (a, b))
    if a.shape != b.shape and a.shape[a.ndim - b.ndim :] != b.shape:
        raise ShapeError(f"add: shape {b.shape} is not {a.shape} nor a trailing suffix of it")
    out = a.data + b.data

    def vjp(g: np.ndarray):
        return g, _sum_to_shape(g, b.shape)

    return _finish("add", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of equal-shaped tensors."""
    _check_dtypes("mul", (a, b))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data

    def vjp(g: np.ndarray):
        return g * b.data, g * a.data

    return _finish("mul", out, (a, b), vjp)


def scale(x: Tensor, alpha: float) -> Tensor:
    """Multiply every element by the scalar `alpha`."""
    alpha = float(alpha)
    out = x.data * x.data.dtype.type(alpha)

    def vjp(g: np.ndarray):
        return (g * alpha,)

    return _finish("scale", out, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    xv = x.data
    x2 = xv * xv
    inner = x2 * xv
    inner *= _GELU_A
    inner += xv
    inner *= _GELU_C
    t = np.tanh(inner, out=inner)
    out = t + 1.0
    out *= xv
    out *= 0.5

    def vjp(g: np.ndarray):
        # dx = 0.5*(1+t) + 0.5*x*(1-t^2)*C*(1+3A*x^2); x2 is dead, reuse it
        dinner = x2
        dinner *= 3.0 * _GELU_A
        dinner += 1.0
        dinner *= _GELU_C
        dx = t * t
        np.subtract(1.0, dx, out=dx)
        dx *= dinner
        dx *= xv
        dx += t
        dx += 1.0
        dx *= 0.5
        dx *= g
        return (dx,)

    return _finish("gelu", out, (x,), vjp)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    xv = x.data.astype(np.float64)
    xv = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(xv)
    y64 = e / e.sum(axis=-1, keepdims=True)
    y = y64.astype(x.data.dtype)

    def vjp(g: np.ndarray):
        g64 = g.astype(np.float64)
        dot = (g64 * y64).sum(axis=-1, keepdims=True)
        return ((y64 * (g64 - dot)).astype(x.data.dtype),)

    return _finish("softmax", y, (x,), vjp)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_dtypes("layernorm", (x, gamma, beta))
    d = x.shape[-1] if x.ndim else 0
    if x.ndim < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm: expected gamma/beta of shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    xv = x.data
    dt = xv.dtype
    # statistics accumulate in float64, elementwise math stays in storage dtype
    mu = xv.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = (xv * xv).mean(axis=-1, keepdims=True, dtype=np.float64) - mu**2
    inv = (1.0 / np.sqrt(np.maximum(var, 0.0) + eps)).astype(dt)
    xhat = xv - mu.astype(dt)
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def vjp(g: np.ndarray):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
        gxhat = g * xhat
        dgamma = _sum_to_shape(gxhat.astype(np.float64), gamma.shape).astype(dt)
        dbeta = _sum_to_shape(g.astype(np.float64), beta.shape).astype(dt)
        dx = gg
        dx -= m1
        xhat_m2 = xhat * m2
        dx -= xhat_m2
        dx *= inv
        return dx, dgamma, dbeta

    return _finish("layernorm", out, (x, gamma, beta), vjp)


def _as_index_array(indices) -> np.ndarray:
    if isinstance(indices, Tensor):
        raw = indices.data
        if indices.requires_grad:
            raise ShapeError("embed_lookup: indices must not require gradients")
        idx = raw.astype(np.int64)
        if not np.array_equal(idx, raw):
            raise ShapeError("embed_lookup: index tensor holds non-integral values")
        return idx
    return np.asarray(indices, dtype=np.int64)


def embed_lookup(table: Tensor, indices) -> Tensor:
    """Row lookup into an embedding table.

    Two forms:
      - table [V, D], integer indices of any shape -> indices.shape + (D,)
      - table [B, V, D], indices [B, K] -> per-batch rows, [B, K, D]
    Gradients scatter-add back into the table; indices get none.
    """
    idx = _as_index_array(indices)
    if table.ndim == 2:
        v = table.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= v):
            raise ShapeError(f"embed_lookup: index out of range for table of {v} rows")
        out = table.data[idx]

        def vjp(g: np.ndarray):
            dt = np.zeros_like(table.data, dtype=np.float64)
            np.add.at(dt, idx, g.astype(np.float64))
            return (dt.astype(table.data.dtype),)

    elif table.ndim == 3:
        if idx.ndim != 2 or idx.shape[0] != table.shape[0]:
            raise ShapeError(
                f"embed_lookup: batched table {table.shape} needs [B, K] indices, got {idx.shape}"
            )
        v = table.shape[1]
        if idx.size and (idx.min() < 0 or idx.max() >= v):
            raise ShapeError(f"embed_lookup: index out of range for table of {v} rows")
        out = np.take_along_axis(table.data, idx[:, :, None], axis=1)
        batch = np.arange(table.shape[0])[:, None]

        def vjp(g: np.ndarray):
            dt = np.zeros_like(table.data, dtype=np.float64)
            np.add.at(dt, (batch, idx), g.astype(np.float64))
            return (dt.astype(table.data.dtype),)

    else:
        raise ShapeError(f"embed_lookup: table must be 2-d or 3-d, got {table.shape}")

    return _finish("embed_lookup", out, (table,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Row-major reshape to an explicitly given shape."""
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def vjp(g: np.ndarray):
        return (g.reshape(x.shape),)

    return _finish("reshape", out, (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along one axis."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: need at least one input")
    _check_dtypes("concat", parts)
    ndim = parts[0].ndim
    ax = axis % ndim if ndim else 0
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if p.ndim != ndim or other[:ax] + other[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat: shape {p.shape} incompatible with {parts[0].shape} on axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray):
        return tuple(np.split(g, splits, axis=ax))

    return _finish("concat", out, parts, vjp)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    ax = axis % x.ndim if x.ndim else 0
    n = x.shape[ax]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: [{start}, {stop}) invalid for axis {axis} of length {n}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    out = x.data[sl]

    def vjp(g: np.ndarray):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        return (dx,)

    return _finish("slice", out, (x,), vjp)


def masked_mse(pred: Tensor, target: Tensor, mask, normalization: str = "pixel") -> Tensor:
    """Mean squared error over the pixels of selected patches.

    `pred`/`target` are [n_patches, patch_dim] or [batch, n_patches,
    patch_dim]; `mask` is a matching binary vector (or matrix) over
    patches selecting at least one. With normalization="pixel" the sum of
    squares is divided by the number of selected pixels; with "patch" each
    selected patch contributes the *sum* of its squared pixel errors and
    the result is averaged over patches.
    """
    _check_dtypes("masked_mse", (pred, target))
    if pred.shape != target.shape:
        raise ShapeError(f"masked_mse: pred {pred.shape} vs target {target.shape}")
    if pred.ndim not in (2, 3):
        raise ShapeError(f"masked_mse: expected 2-d or 3-d inputs, got {pred.shape}")
    if normalization not in ("pixel", "patch"):
        raise ShapeError(f"masked_mse: unknown normalization {normalization!r}")
    m = np.asarray(mask)
    if m.shape != pred.shape[:-1]:
        raise ShapeError(f"masked_mse: mask shape {m.shape} does not index patches of {pred.shape}")
    m = (m != 0).astype(np.float64)
    n_sel = m.sum()
    if n_sel == 0:
        raise EmptyMaskError("masked_mse: mask selects no patches")
    patch_dim = pred.shape[-1]
    denom = n_sel * patch_dim if normalization == "pixel" else n_sel

    dt = pred.data.dtype
    diff = pred.data - target.data
    w = m[..., None].astype(dt)
    wdiff = diff * w
    # squared terms accumulate in float64
    total = float((wdiff * diff).sum(dtype=np.float64))
    out = np.asarray(total / denom, dtype=dt)

    def vjp(g: np.ndarray):
        d = ((2.0 * float(g) / denom) * wdiff).astype(dt, copy=False)
        return d, -d

    return _finish("masked_mse", out, (pred, target), vjp)


_ATTR_DEFAULTS = {
    "matmul": {"transpose_a": False, "transpose_b": False},
    "add": {},
    "mul": {},
    "scale": {"alpha": None},
    "gelu": {},
    "softmax": {},
    "layernorm": {"eps": 1e-5},
    "embed_lookup": {},
    "reshape": {"shape": None},
    "concat": {"axis": 0},
    "slice": {"axis": None, "start": None, "stop": None},
    "masked_mse": {"normalization": "pixel"},
}


def apply(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Generic dispatcher: run op `kind` on `inputs` with scalar attrs.

    Thin front over the named functions above; records an OpNode whenever
    any input participates in a graph. Unknown kinds and unknown attrs are
    errors.
    """
    if kind not in OP_KINDS:
        raise UnknownOpError(f"unknown op kind {kind!r}")
    attrs = dict(attrs or {})
    unknown = set(attrs) - set(_ATTR_DEFAULTS[kind])
    if unknown:
        raise UnknownOpError(f"{kind}: unknown attrs {sorted(unknown)}")

    if kind == "matmul":
        return matmul(inputs[0], inputs[1], bool(attrs.get("transpose_a", False)), bool(attrs.get("transpose_b", False)))
    if kind == "add":
        return add(inputs[0], inputs[1])
    if kind == "mul":
        return mul(inputs[0], inputs[1])
    if kind == "scale":
        if "alpha" not in attrs:
            raise ShapeError("scale: missing attr 'alpha'")
        return scale(inputs[0], attrs["alpha"])
    if kind == "gelu":
        return gelu(inputs[0])
    if kind == "softmax":
        return softmax(inputs[0])
    if kind == "layernorm":
        return layernorm(inputs[0], inputs[1], inputs[2], float(attrs.get("eps", 1e-5)))
    if kind == "embed_lookup":
        return embed_lookup(inputs[0], inputs[1])
    if kind == "reshape":
        if attrs.get("shape") is None:
            raise ShapeError("reshape: missing attr 'shape'")
        return reshape(inputs[0], attrs["shape"])
    if kind == "concat":
        return concat(inputs, int(attrs.get("axis", 0)))
    if kind == "slice":
        for key in ("axis", "start", "stop"):
            if attrs.get(key) is None:
                raise ShapeError(f"slice: missing attr {key!r}")
        return slice_(inputs[0], int(attrs["axis"]), int(attrs["start"]), int(attrs["stop"]))
    # masked_mse: mask rides along as a detached third input
    return masked_mse(inputs[0], inputs[1], inputs[2].data, str(attrs.get("normalization", "pixel")))


def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires_grad tensor reachable from `loss`.

    The loss must be a scalar produced by recorded operations. The tape is
    consumed: a second backward through any of its nodes raises GraphError.
    """
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise GraphError("backward: loss is not attached to a graph")

    # iterative post-order over the node DAG; every node has one output
    order: list[OpNode] = []
    seen: set[int] = set()
    stack: list[tuple[OpNode, bool]] = [(loss.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.consumed:
            raise GraphError("backward: graph already consumed; rebuild it before a second pass")
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append((t.node, False))

    grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        node.consumed = True
        if g is None:
            continue
        for t, dt in zip(node.inputs, node.vjp(g)):
            if dt is None:
                continue
            if t.requires_grad:
                # copy: vjps may pass the upstream gradient through unchanged
                t.grad = dt.copy() if t.grad is None else t.grad + dt
            if t.node is not None:
                key = id(t.node)
                if key in grads:
                    grads[key] = grads[key] + dt
                else:
                    grads[key] = dt
