"""
Dense reverse-mode differentiation over 64-bit numpy arrays.

Primitives run eagerly. While a GradientTape is active (per thread), every
primitive whose inputs require gradients appends a record holding its
backward closure; GradientTape.backward replays the records in reverse
creation order, which is a reverse topological order of the computation.
Non-finite forward values do not raise: the producing primitive's name is
stored in Tensor.fault and propagated to every downstream tensor.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def _tape_stack() -> List["GradientTape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape() -> Optional["GradientTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array that can take part in a gradient tape."""

    __slots__ = ("values", "grad", "requires_grad", "fault", "tape_node", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = "", fault: Optional[str] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.fault = fault
        self.tape_node: Optional["_Record"] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    @property
    def is_leaf(self) -> bool:
        return self.tape_node is None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False, fault=self.fault)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other): return add(self, _lift(other))
    def __radd__(self, other): return add(_lift(other), self)
    def __sub__(self, other): return sub(self, _lift(other))
    def __rsub__(self, other): return sub(_lift(other), self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return elementwise_mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        flags = " requires_grad" if self.requires_grad else ""
        fault = f" fault={self.fault}" if self.fault else ""
        return f"Tensor(shape={self.shape}{flags}{fault})"


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(eq=False)
class _Record:
    tape: "GradientTape"
    index: int
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Backward
    op: str


class GradientTape:
    """
    Ordered record of primitive operations with their backward closures.

    Usage::

        with GradientTape() as tape:
            loss = f(params)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], backward: Backward, op: str) -> _Record:
        entry = _Record(self, len(self.records), output, inputs, backward, op)
        self.records.append(entry)
        return entry

    def _owns(self, tensor: Tensor) -> bool:
        return tensor.tape_node is not None and tensor.tape_node.tape is self

    def backward(self, output: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """
        Accumulate d(output)/d(leaf) into the .grad of every leaf that requires gradients.

        Args:
            output: Tensor to differentiate, usually a scalar loss
            seed: Upstream gradient; defaults to ones (so scalars get 1)
        """
        seed = np.ones_like(output.values) if seed is None else np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeMismatchError(f"Seed shape {seed.shape} does not match output shape {output.shape}")
        if not self._owns(output):
            if output.requires_grad:
                _accumulate_leaf(output, seed)
            return

        grads: Dict[int, np.ndarray] = {id(output): seed}
        for entry in reversed(self.records[: output.tape_node.index + 1]):
            upstream = grads.pop(id(entry.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if self._owns(tensor):
                    key = id(tensor)
                    grads[key] = grad if key not in grads else grads[key] + grad
                else:
                    _accumulate_leaf(tensor, grad)


def _accumulate_leaf(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def _make(values: np.ndarray, inputs: Tuple[Tensor, ...], backward: Backward, op: str) -> Tensor:
    fault = next((t.fault for t in inputs if t.fault), None)
    if fault is None and not np.all(np.isfinite(values)):
        fault = op
        logger.debug(f"Non-finite values produced by {op}")
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=tracked, fault=fault)
    if tracked:
        out.tape_node = tape.record(out, inputs, backward, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def sparse_dense_matmul(adjacency: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    if adjacency.shape[1] != x.shape[0]:
        raise ShapeMismatchError(f"sparse_dense_matmul: {adjacency.shape} @ {x.shape}")
    adjacency = sp.csr_matrix(adjacency)
    values = np.asarray(adjacency @ x.values)
    return _make(values, (x,), lambda g: (np.asarray(adjacency.T @ g),), "sparse_dense_matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def scale(a: Tensor, c: Union[float, Tensor]) -> Tensor:
    """Multiply by a constant float or by a single-element tensor."""
    if not isinstance(c, Tensor):
        c = float(c)
        return _make(a.values * c, (a,), lambda g: (g * c,), "scale")
    if c.values.size != 1:
        raise ShapeMismatchError(f"scale: factor must have one element, got shape {c.shape}")
    av, cv, cshape = a.values, c.values.reshape(-1)[0], c.shape
    return _make(av * cv, (a, c), lambda g: (g * cv, np.array(np.sum(g * av)).reshape(cshape)), "scale")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "elementwise_mul")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "elementwise_mul")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _make(out, (a,), lambda g: (g / av,), "log")


def _row_logsumexp(x: np.ndarray) -> np.ndarray:
    peak = np.max(x, axis=1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    return peak + np.log(np.sum(np.exp(x - peak), axis=1, keepdims=True))


def log_row_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a matrix."""
    if a.values.ndim != 2:
        raise ShapeMismatchError(f"log_row_softmax expects a matrix, got {a.shape}")
    out = a.values - _row_logsumexp(a.values)
    probs = np.exp(out)
    return _make(out, (a,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),), "log_row_softmax")


def row_softmax(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, computed in the log domain."""
    if a.values.ndim != 2:
        raise ShapeMismatchError(f"row_softmax expects a matrix, got {a.shape}")
    probs = np.exp(a.values - _row_logsumexp(a.values))
    return _make(probs, (a,), lambda g: (probs * (g - np.sum(g * probs, axis=1, keepdims=True)),), "row_softmax")


def concat_columns(tensors: Sequence[Tensor]) -> Tensor:
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ShapeMismatchError(f"concat_columns: row counts differ {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.values for t in tensors], axis=1)
    return _make(out, tuple(tensors), lambda g: np.split(g, splits, axis=1), "concat_columns")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    cols = {t.shape[1] for t in tensors}
    if len(cols) != 1:
        raise ShapeMismatchError(f"concat_rows: column counts differ {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]
    out = np.concatenate([t.values for t in tensors], axis=0)
    return _make(out, tuple(tensors), lambda g: np.split(g, splits, axis=0), "concat_rows")


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows a[index] (rows may repeat)."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(a.values[index], (a,), backward, "gather_rows")


def scatter_add_rows(a: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """Sum rows of a into num_rows output rows: out[index[k]] += a[k]."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (a.shape[0],):
        raise ShapeMismatchError(f"scatter_add_rows: index shape {index.shape} for input {a.shape}")
    out = np.zeros((num_rows,) + a.shape[1:])
    np.add.at(out, index, a.values)
    return _make(out, (a,), lambda g: (g[index],), "scatter_add_rows")


def select_entries(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Vector of entries a[rows[k], cols[k]]."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, (rows, cols), g)
        return (grad,)

    return _make(a.values[rows, cols], (a,), backward, "select_entries")


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = a.shape
    out = np.sum(a.values, axis=axis, keepdims=axis is not None)

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward, "reduce_sum")


def transpose(a: Tensor) -> Tensor:
    return _make(a.values.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def dropout(a: Tensor, mask: np.ndarray, p: float) -> Tensor:
    """Inverted dropout with an explicit keep-mask, so forward passes are replayable."""
    if mask.shape != a.shape:
        raise ShapeMismatchError(f"dropout: mask {mask.shape} for input {a.shape}")
    if p <= 0.0:
        return a
    factor = mask.astype(np.float64) / (1.0 - p)
    return _make(a.values * factor, (a,), lambda g: (g * factor,), "dropout")


def batch_stat_normalize(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                         running_var: np.ndarray, training: bool, momentum: float = 0.1,
                         eps: float = 1e-5) -> Tensor:
    """
    Batch normalization over the node (row) dimension of a feature matrix.

    In training mode the batch statistics are used and the running statistics
    are updated in place; in eval mode the running statistics are used.
    """
    if x.values.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatchError(f"batch_stat_normalize: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xv, gv = x.values, gamma.values
    n = xv.shape[0]
    if training:
        mean = xv.mean(axis=0)
        var = xv.var(axis=0)
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (xv - mean) * inv_std
    out = x_hat * gv + beta.values

    def backward(g):
        d_hat = g * gv
        if training:
            dx = inv_std / n * (n * d_hat - d_hat.sum(axis=0) - x_hat * np.sum(d_hat * x_hat, axis=0))
        else:
            dx = d_hat * inv_std
        return dx, np.sum(g * x_hat, axis=0), g.sum(axis=0)

    return _make(out, (x, gamma, beta), backward, "batch_stat_normalize")


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                            floor: float = 1e-3) -> float:
    """
    Compare the tape gradient of a scalar function with central differences.

    Args:
        f: Scalar-valued tensor function
        x: Point at which to differentiate
        h: Finite-difference step
        floor: Lower bound on the denominator of the relative error

    Returns:
        Maximum relative error over all coordinates of x
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = Tensor(x.values.copy(), requires_grad=True)
    with GradientTape() as tape:
        out = f(point)
    if out.values.size != 1:
        raise ShapeMismatchError(f"finite_difference_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    analytic = point.grad if point.grad is not None else np.zeros_like(point.values)

    base = x.values.astype(np.float64).copy()
    numeric = np.zeros_like(base)
    for k in range(base.size):
        shifted = base.copy()
        shifted.flat[k] += h
        upper = f(Tensor(shifted)).item()
        shifted.flat[k] -= 2 * h
        lower = f(Tensor(shifted)).item()
        numeric.flat[k] = (upper - lower) / (2 * h)
    return _max_relative_error(analytic, numeric, floor)


def parameter_gradient_check(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], num_coords: int,
                             rng: np.random.Generator, h: float = 1e-5, floor: float = 1e-3) -> float:
    """
    Finite-difference check of a loss over a random subsample of parameter coordinates.

    loss_fn must be deterministic (fixed masks and random streams) and read
    the parameter tensors in place.

    Returns:
        Maximum relative error over the sampled coordinates
    """
    for tensor in params.values():
        tensor.zero_grad()
    with GradientTape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    coords = [(name, k) for name, tensor in params.items() for k in range(tensor.values.size)]
    picks = rng.choice(len(coords), size=min(num_coords, len(coords)), replace=False)
    analytic, numeric = [], []
    for pick in picks:
        name, k = coords[pick]
        tensor = params[name]
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.values)
        analytic.append(grad.flat[k])
        original = tensor.values.flat[k]
        tensor.values.flat[k] = original + h
        upper = loss_fn().item()
        tensor.values.flat[k] = original - h
        lower = loss_fn().item()
        tensor.values.flat[k] = original
        numeric.append((upper - lower) / (2 * h))
    return _max_relative_error(np.array(analytic), np.array(numeric), floor)


def _max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    if analytic.size == 0:
        return 0.0
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denominator))


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """
    Apply one bias-corrected Adam update in place.

    Parameters without a gradient entry are treated as having zero gradient.

    Returns:
        The updated state (same object)
    """
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(tensor.values)
        if grad.shape != tensor.shape:
            raise ShapeMismatchError(f"Gradient for {name} has shape {grad.shape}, expected {tensor.shape}")
        m = state.m.setdefault(name, np.zeros_like(tensor.values))
        v = state.v.setdefault(name, np.zeros_like(tensor.values))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        tensor.values -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


class Adam:
    """Adam optimizer over a named parameter dictionary."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"Learning rate must be non-negative, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def step(self, scale_grads: float = 1.0) -> None:
        grads = {
            name: tensor.grad * scale_grads
            for name, tensor in self.params.items()
            if tensor.grad is not None
        }
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


def arrays_to_manifest(arrays: Dict[str, np.ndarray]) -> Dict[str, Dict[str, list]]:
    """Map names to shape and row-major values (the checkpoint parameter format)."""
    return {
        name: {"shape": list(array.shape), "values": np.asarray(array, dtype=np.float64).ravel().tolist()}
        for name, array in arrays.items()
    }


def manifest_to_arrays(manifest: Dict[str, Dict[str, list]]) -> Dict[str, np.ndarray]:
    return {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in manifest.items()
    }
