"""Define-by-run reverse-mode automatic differentiation over float64 buffers.

Ops record themselves on the active ``Tape``. Outside a ``with Tape():`` block
they only compute values, which is how evaluation and inference run.

    with Tape() as tape:
        loss = softmax_cross_entropy_rows(matmul(x, w), targets)
    tape.backward(loss)
    w.grad  # dLoss/dw

A tape is confined to the thread that created it. Backward walks the recorded
nodes in reverse insertion order, visiting each exactly once.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from mmdr.errors import (
    DataError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
    TokenIndexError,
)

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]

NORM_EPS = 1e-12


class Tensor:
    """An n-dimensional float64 array with a gradient slot and a tape node id."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str = "") -> None:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if any(dim <= 0 for dim in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data: Any, name: str = "") -> Tensor:
    """A trainable leaf tensor (always a private copy of ``data``)."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data: Any) -> Tensor:
    return Tensor(data, requires_grad=False)


@dataclass
class TapeNode:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


_local = threading.local()


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of the ops executed while it is active."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self._owner = threading.get_ident()

    def __enter__(self) -> Tape:
        if threading.get_ident() != self._owner:
            raise RuntimeError("a tape can only be used by the thread that created it")
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, output: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        output.node = len(self.nodes)
        self.nodes.append(TapeNode(op=op, output=output, inputs=inputs, backward=backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(input) into ``.grad`` of every tensor that requires it."""
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node >= len(self.nodes) or self.nodes[loss.node].output is not loss:
            raise ValueError("loss was not recorded on this tape")

        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes[: loss.node + 1]):
            upstream = node.output.grad
            if upstream is None:
                continue
            for inp, g in zip(node.inputs, node.backward(upstream), strict=True):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=np.float64)
                else:
                    inp.grad = np.asarray(inp.grad + g)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)) and all(np.all(np.isfinite(t.data)) for t in inputs):
        raise NumericalError(f"{op} produced non-finite values from finite inputs", {"op": op})
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        assert tape is not None
        tape.record(op, out, tuple(inputs), backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_2d(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.data.ndim != 2:
            raise DimensionError(f"{op} expects 2-D operands, got shape {t.shape}")


def sigmoid(z: np.ndarray | float) -> np.ndarray:
    """Overflow-free logistic function on raw arrays."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


# Elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * factor,)

    return _result("scale", x.data * factor, (x,), backward)


def div_scalar(x: Tensor, divisor: float) -> Tensor:
    """Divide by a positive scalar such as a softmax temperature."""
    divisor = float(divisor)
    if not divisor > 0.0:
        raise DegenerateInputError(f"divisor must be positive, got {divisor}")

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g / divisor,)

    return _result("div_scalar", x.data / divisor, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * (1.0 - out * out),)

    return _result("tanh", out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.full(x.shape, g.item()),)

    return _result("sum_all", np.sum(x.data), (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from e

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(x.shape),)

    return _result("reshape", out, (x,), backward)


def transpose(x: Tensor) -> Tensor:
    _require_2d("transpose", x)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.T,)

    return _result("transpose", x.data.T, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DegenerateInputError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", out, tensors, backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not tensors:
        raise DegenerateInputError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: tensors differ in shape {sorted(shapes)}")

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(g[i] for i in range(len(tensors)))

    return _result("stack", np.stack([t.data for t in tensors]), tensors, backward)


def dropout(x: Tensor, rate: float, train_mode: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity (same object) outside train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * keep,)

    return _result("dropout", x.data * keep, (x,), backward)


# Linear algebra and lookups


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), backward)


def embedding_lookup(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the gathered rows."""
    _require_2d("embedding_lookup", table)
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise DegenerateInputError("embedding_lookup needs at least one id")
    vocab = table.shape[0]
    bad = idx[(idx < 0) | (idx >= vocab)]
    if bad.size:
        raise TokenIndexError(f"token id {int(bad[0])} outside vocabulary of size {vocab}")

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result("embedding_lookup", table.data[idx], (table,), backward)


def mean_pool_masked(x: Tensor, mask: Sequence[int] | np.ndarray) -> Tensor:
    """Mean of the rows of ``x`` whose mask entry is 1."""
    _require_2d("mean_pool_masked", x)
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    if m.shape[0] != x.shape[0]:
        raise DimensionError(f"mean_pool_masked: mask of length {m.shape[0]} for {x.shape[0]} rows")
    if np.any((m != 0.0) & (m != 1.0)):
        raise DataError("mean_pool_masked: mask must be binary")
    count = m.sum()
    if count == 0:
        raise DegenerateInputError("mean_pool_masked: mask selects no rows")
    weights = m / count

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.outer(weights, g),)

    return _result("mean_pool_masked", weights @ x.data, (x,), backward)


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    if x.data.ndim not in (1, 2):
        raise DimensionError(f"l2_normalize expects a vector or a matrix, got shape {x.shape}")
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise DegenerateInputError(f"l2_normalize: norm at or below {eps}")
    y = x.data / norms

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norms,)

    return _result("l2_normalize", y, (x,), backward)


def cosine_sim_matrix(contexts: Tensor, responses: Tensor) -> Tensor:
    """Pairwise dot products of unit rows: entry (i, j) = <C_i, R_j>."""
    _require_2d("cosine_sim_matrix", contexts, responses)
    if contexts.shape[1] != responses.shape[1]:
        raise DimensionError(
            f"cosine_sim_matrix: embedding sizes differ for {contexts.shape} and {responses.shape}"
        )

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g @ responses.data, g.T @ contexts.data

    return _result("cosine_sim_matrix", contexts.data @ responses.data.T, (contexts, responses), backward)


# Losses


def softmax_cross_entropy_rows(logits: Tensor, targets: Sequence[int] | np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits_i)[target_i]."""
    _require_2d("softmax_cross_entropy_rows", logits)
    rows, classes = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != rows:
        raise DimensionError(f"softmax_cross_entropy_rows: {t.shape[0]} targets for {rows} rows")
    bad = t[(t < 0) | (t >= classes)]
    if bad.size:
        raise DimensionError(f"softmax_cross_entropy_rows: target {int(bad[0])} outside [0, {classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    picked = np.arange(rows)
    loss = np.mean(log_norm - shifted[picked, t])

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        probs = np.exp(shifted - log_norm[:, None])
        probs[picked, t] -= 1.0
        return (probs * (g.item() / rows),)

    return _result("softmax_cross_entropy_rows", loss, (logits,), backward)


def bce_with_logits(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean binary cross entropy in the log-sum-exp stable form."""
    z = logits.data.reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise DimensionError(f"bce_with_logits: {y.shape[0]} labels for {z.shape[0]} logits")
    if np.any((y != 0.0) & (y != 1.0)):
        raise DataError("bce_with_logits: labels must be 0 or 1")
    n = z.shape[0]
    loss = np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (((sigmoid(z) - y) * (g.item() / n)).reshape(logits.shape),)

    return _result("bce_with_logits", loss, (logits,), backward)


# Finite-difference checking


def analytic_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``fn()`` w.r.t. ``params`` via one backward pass."""
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``param``."""
    grad = np.zeros(param.size)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn().item()
        flat[i] = original - h
        minus = fn().item()
        flat[i] = original
        grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    scale_ = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-8)
    return diff / scale_


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between analytic and finite-difference gradients."""
    analytic = analytic_gradients(fn, params)
    return max(relative_error(a, numerical_gradient(fn, p, h)) for a, p in zip(analytic, params, strict=True))
