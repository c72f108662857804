"""Dense float64 tensors with a define-by-run tape for reverse-mode gradients.

Operations only record onto a tape when one is active (``with Tape() as tape``)
and at least one operand requires a gradient, so inference runs as plain numpy.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """Raised when a NaN/Inf shows up or an arithmetic guard trips."""


class DimensionError(ValueError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Append-only record of differentiable operations for one forward pass."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def __len__(self) -> int:
        return len(self.nodes)


@contextlib.contextmanager
def no_tape():
    prev = _active_tape()
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = prev


@contextlib.contextmanager
def fp_guard():
    """Turn overflow / invalid operations into NumericError.

    Underflow (e.g. ``exp`` of a very negative logit) is allowed.
    """
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise", under="ignore"):
            yield
    except FloatingPointError as exc:
        raise NumericError(str(exc)) from exc


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, check=False)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    return _record(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored out x in."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    X, W = x.data, weight.data
    y = X @ W.T
    if bias is None:
        return _record(y, (x, weight), lambda g: (g @ W, g.T @ X))
    bias = as_tensor(bias)
    y = y + bias.data
    return _record(y, (x, weight, bias), lambda g: (g @ W, g.T @ X, g.sum(axis=0)))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    X = x.data
    # split by sign so exp never overflows
    pos = X >= 0
    z = np.exp(-np.abs(X))
    s = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or 0 in x.shape:
        raise DimensionError(f"softmax_rows needs a non-empty matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record(s, (x,), back)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.T, (x,), lambda g: (g.T,))


def total(x) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    x = as_tensor(x)
    shape = x.shape
    return _record(np.array([[x.data.sum()]]), (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def sum_rows(x) -> Tensor:
    """Column sums: (n, d) -> (1, d)."""
    x = as_tensor(x)
    n = x.shape[0]
    return _record(x.data.sum(axis=0, keepdims=True), (x,), lambda g: (np.repeat(g, n, axis=0),))


def concat_cols(parts: Sequence) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=1), parts, back)


def concat_rows(parts: Sequence) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows column mismatch: {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=0), parts, back)


def rows(x, start: int, stop: int) -> Tensor:
    """Row slice ``x[start:stop]``."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _record(x.data[start:stop], (x,), back)


def cols(x, start: int, stop: int) -> Tensor:
    """Column slice ``x[:, start:stop]``."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _record(x.data[:, start:stop], (x,), back)


def _one_hot(index: np.ndarray, n: int) -> np.ndarray:
    # (n, len(index)) scatter matrix; a matmul is much faster than np.add.at here
    return (index[None, :] == np.arange(n)[:, None]).astype(np.float64)


def gather_rows(x, index: np.ndarray) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    n = x.shape[0]
    return _record(x.data[index], (x,), lambda g: (_one_hot(index, n) @ g,))


def segment_sum(x, segment: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` buckets: ``out[segment[k]] += x[k]``."""
    x = as_tensor(x)
    segment = np.asarray(segment, dtype=np.intp)
    if segment.shape != (x.shape[0],):
        raise DimensionError(f"segment ids {segment.shape} do not match rows {x.shape}")
    return _record(_one_hot(segment, n) @ x.data, (x,), lambda g: (g[segment],))


def layer_norm_rows(x, eps: float = 1e-6) -> Tensor:
    """Standardize each row to zero mean, unit variance (no learnable affine)."""
    x = as_tensor(x)
    X = x.data
    centered = X - X.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(np.mean(centered * centered, axis=1, keepdims=True) + eps)
    y = centered * inv

    def back(g):
        return (inv * (g - g.mean(axis=1, keepdims=True) - y * np.mean(g * y, axis=1, keepdims=True)),)

    return _record(y, (x,), back)


def l2_norm(x) -> Tensor:
    """Euclidean norm of all entries as a 1x1 tensor; zero gradient at the origin."""
    x = as_tensor(x)
    X = x.data
    n = float(np.sqrt(np.sum(X * X)))

    def back(g):
        if n == 0.0:
            return (np.zeros_like(X),)
        return (g.reshape(()) * X / n,)

    return _record(np.array([[n]]), (x,), back)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf on ``tape``.

    The result is keyed by the leaf tensor objects (identity hashing).
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape")
    produced = {id(node.out) for node in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("loss is not on the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    out = {}
    for key, leaf in leaves.items():
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {leaf!r}")
        out[leaf] = g
    return out


# ---------------------------------------------------------------------------
# MLPs

ACTIVATIONS = ("relu", "none")


@dataclass
class MlpParams:
    """Stack of affine layers; weights are stored out x in."""

    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise DimensionError("MLP needs matching, non-empty weight/bias/activation lists")
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if w.data.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {k}: weight {w.shape} vs bias {b.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionError(
                    f"layer {k} expects {w.shape[1]} inputs but layer {k - 1} emits {self.weights[k - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_mlp(rng: np.random.Generator, dims: Sequence[int], final_activation: str = "none") -> MlpParams:
    """Glorot-uniform weights, zero biases, ReLU between layers."""
    weights, biases, acts = [], [], []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(-limit, limit, size=(fan_out, fan_in)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
        acts.append("relu" if k < len(dims) - 2 else final_activation)
    return MlpParams(weights, biases, acts)


def mlp_apply(p: MlpParams, x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != p.in_dim:
        raise DimensionError(f"MLP expects {p.in_dim} input columns, got shape {x.shape}")
    for w, b, act in zip(p.weights, p.biases, p.activations):
        x = linear(x, w, b)
        if act == "relu":
            x = relu(x)
    return x


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    worst: float  # worst relative error over probed entries
    checked: int


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_report(
    f: Callable[[], float],
    params: Iterable[Tensor],
    grads: dict[Tensor, np.ndarray],
    eps: float | Sequence[float] = 1e-5,
    entries: dict[Tensor, Iterable[int]] | None = None,
    good_enough: float = 0.0,
) -> GradCheckReport:
    """Compare ``grads`` with central differences of ``f``, entry by entry.

    ``f`` is re-evaluated after perturbing each parameter entry in place.
    ``entries`` optionally restricts which flat indices are probed per tensor.
    The relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.

    ``eps`` may be a sequence of step sizes; each entry is then scored by its
    best-matching step. With ReLU networks a probe can straddle a kink, where
    the central difference averages two slopes; a smaller step that stays on
    one side recovers the true derivative. A wrong analytic gradient does not
    agree at any step, so it is still caught. Steps are tried in order and the
    search stops early once an entry's error is at most ``good_enough``.
    """
    steps = [eps] if np.isscalar(eps) else list(eps)
    if not steps or min(steps) <= 0:
        raise ValueError("eps must be positive")
    worst, checked = 0.0, 0
    for p in params:
        flat = p.data.reshape(-1)
        analytic = grads.get(p)
        analytic = np.zeros(flat.shape) if analytic is None else np.asarray(analytic).reshape(-1)
        idx = range(flat.size) if entries is None or p not in entries else entries[p]
        for i in idx:
            a = analytic[i]
            best = None
            for step in steps:
                orig = flat[i]
                flat[i] = orig + step
                up = f()
                flat[i] = orig - step
                down = f()
                flat[i] = orig
                err = _rel_err(a, (up - down) / (2 * step))
                best = err if best is None else min(best, err)
                if best <= good_enough:
                    break
            worst = max(worst, best)
            checked += 1
    return GradCheckReport(worst, checked)


def finite_diff_check(
    f: Callable[[], float],
    params: Iterable[Tensor],
    grads: dict[Tensor, np.ndarray],
    eps: float | Sequence[float] = 1e-5,
    entries: dict[Tensor, Iterable[int]] | None = None,
) -> float:
    """Worst relative error; see ``finite_diff_report``."""
    return finite_diff_report(f, params, grads, eps, entries).worst
