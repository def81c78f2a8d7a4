"""
Dense float64 tensors with a small reverse-mode tape.

A ``Tensor`` is an immutable wrapper around a read-only numpy array. Operations
in this module are pure functions; when a ``GradTape`` is active and one of the
operands is tracked by it, the operation appends a record holding its
vector-Jacobian product. ``backward`` replays those records in reverse.

Only the primitives the unrolled networks need are differentiable:
correlation, transposed correlation, matmul, add/sub/scale, bias, soft
threshold, batch norm, reductions, reshape, cross-entropy and caller-supplied
linear maps (used for rotated filter banks).

Convolution layout is ``[B, C, H, W]`` (a leading batch axis is optional) and
filters are ``[C_out, C_in, h, w]``. Stride is always 1. "same" padding with an
even kernel puts the extra row/column of zeros on the bottom/right.
"""

import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionError, TapeConsumedError

logger = logging.getLogger(__name__)

Padding = Literal["same", "valid"]
Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Immutable dense array of doubles"""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if any(extent < 1 for extent in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got shape {arr.shape}")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # arr must be freshly allocated by the caller; it is frozen in place, 0-d stays 0-d
        out = cls.__new__(cls)
        arr = np.require(arr, dtype=np.float64, requirements="C")
        arr.setflags(write=False)
        out._data = arr
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, factor: float) -> "Tensor":
        return scale(self, factor)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape)))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape)))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class _Record:
    name: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: Vjp


_ACTIVE_TAPE: "contextvars.ContextVar[Optional[GradTape]]" = contextvars.ContextVar(
    "rotunroll_active_tape", default=None
)


class GradTape:
    """
    Ordered record of the primitives executed while the tape is active.

    Usage::

        with GradTape() as tape:
            tape.watch(w)
            loss = ...
        grads = backward(tape, loss)

    One tape serves exactly one backward pass and must not be shared between
    threads.
    """

    def __init__(self):
        self._records: List[_Record] = []
        self._leaves: List[Tensor] = []
        self._tracked: set = set()
        self._consumed = False
        self._token = None

    def __enter__(self) -> "GradTape":
        if self._token is not None:
            raise RuntimeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def watch(self, *tensors: Tensor) -> None:
        for tensor in tensors:
            if id(tensor) not in self._tracked:
                self._leaves.append(tensor)
                self._tracked.add(id(tensor))

    def tracks(self, tensor: Tensor) -> bool:
        return id(tensor) in self._tracked

    @property
    def leaves(self) -> List[Tensor]:
        return list(self._leaves)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def __len__(self) -> int:
        return len(self._records)

    def _push(self, name: str, output: Tensor, inputs: Tuple[Tensor, ...], vjp: Vjp) -> None:
        if self._consumed:
            raise TapeConsumedError("cannot record on a tape that was already consumed")
        if any(id(t) in self._tracked for t in inputs):
            self._records.append(_Record(name, output, inputs, vjp))
            self._tracked.add(id(output))


def _record(name: str, output: Tensor, inputs: Tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape._push(name, output, inputs, vjp)
    return output


def backward(tape: GradTape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Gradients of a scalar ``loss`` with respect to every watched leaf.

    Leaves the loss does not depend on get zero arrays. Consumes the tape.
    """
    if tape.consumed:
        raise TapeConsumedError("backward() was already run on this tape")
    if loss.size != 1:
        raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
    tape._consumed = True

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for record in reversed(tape._records):
        upstream = grads.pop(id(record.output), None)
        if upstream is None:
            continue
        for operand, grad in zip(record.inputs, record.vjp(upstream)):
            if grad is None or not tape.tracks(operand):
                continue
            key = id(operand)
            grads[key] = grads[key] + grad if key in grads else grad

    return {leaf: np.asarray(grads.get(id(leaf), np.zeros_like(leaf.data))) for leaf in tape._leaves}


# ---------------------------------------------------------------------------
# Elementwise and linear algebra
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    return _record("add", out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)
    return _record("sub", out, (a, b), lambda g: (g, -g))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor._wrap(a.data * factor)
    return _record("scale", out, (a,), lambda g: (g * factor,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Adds a per-channel bias along axis 1 (axis 0 for 1-d inputs)"""
    axis = 1 if x.ndim > 1 else 0
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise DimensionError(f"bias of shape {bias.shape} does not fit input {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    out = Tensor._wrap(x.data + bias.data.reshape(view))
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    return _record("add_bias", out, (x, bias), lambda g: (g, g.sum(axis=reduce_axes)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    out = Tensor._wrap(a.data @ b.data)
    a_data, b_data = a.data, b.data
    return _record("matmul", out, (a, b), lambda g: (g @ b_data.T, a_data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-d tensor, got {a.shape}")
    out = Tensor._wrap(a.data.T.copy())
    return _record("transpose", out, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        data = a.data.reshape(tuple(shape)).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {original} into {tuple(shape)}") from exc
    out = Tensor._wrap(data)
    return _record("reshape", out, (a,), lambda g: (g.reshape(original),))


def soft_shrink(u: Tensor, threshold: float) -> Tensor:
    """sign(u) * max(|u| - threshold, 0); the subgradient at |u| == threshold is 0"""
    threshold = float(threshold)
    magnitude = np.abs(u.data)
    active = magnitude > threshold
    out = Tensor._wrap(np.where(active, np.sign(u.data) * (magnitude - threshold), 0.0))
    return _record("soft_shrink", out, (u,), lambda g: (g * active,))


def linear_map(
    x: Tensor,
    forward: Callable[[np.ndarray], np.ndarray],
    adjoint: Callable[[np.ndarray], np.ndarray],
    name: str = "linear_map",
    precomputed: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Applies a caller-defined linear operator and records its adjoint.

    ``precomputed`` lets a caller hand in ``forward(x.data)`` it already holds
    (e.g. a cached filter expansion) so only the tape record is added.
    """
    data = forward(x.data) if precomputed is None else precomputed
    out = Tensor._wrap(np.array(data, dtype=np.float64))
    return _record(name, out, (x,), lambda g: (adjoint(g),))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def total(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(a.data.sum()))
    shape = a.shape
    return _record("sum", out, (a,), lambda g: (np.full(shape, g.item()),))


def mean(a: Tensor, axis: Union[int, Tuple[int, ...]]) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = Tensor._wrap(a.data.mean(axis=axes))
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / count,)

    return _record("mean", out, (a,), vjp)


def inner(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "inner")
    out = Tensor._wrap(np.asarray(np.vdot(a.data, b.data)))
    a_data, b_data = a.data, b.data
    return _record("inner", out, (a, b), lambda g: (g.item() * b_data, g.item() * a_data))


# ---------------------------------------------------------------------------
# Batch norm and loss
# ---------------------------------------------------------------------------

def _channel_view(x: np.ndarray) -> Tuple[Tuple[int, ...], List[int]]:
    axes = tuple(i for i in range(x.ndim) if i != 1)
    view = [1] * x.ndim
    view[1] = -1
    return axes, view


def batch_norm_train(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Normalizes each channel (axis 1) with the batch statistics.

    Returns the output together with the biased batch mean and variance so the
    caller can update its running statistics.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch norm parameters {gamma.shape} do not fit input {x.shape}")
    axes, view = _channel_view(x.data)
    count = x.size // x.shape[1]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu.reshape(view)) * inv_std.reshape(view)
    out = Tensor._wrap(x_hat * gamma.data.reshape(view) + beta.data.reshape(view))
    gamma_data = gamma.data

    def vjp(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * x_hat).sum(axis=axes)
        dx_hat = g * gamma_data.reshape(view)
        dx = inv_std.reshape(view) / count * (
            count * dx_hat
            - dx_hat.sum(axis=axes).reshape(view)
            - x_hat * (dx_hat * x_hat).sum(axis=axes).reshape(view)
        )
        return dx, dgamma, dbeta

    return _record("batch_norm_train", out, (x, gamma, beta), vjp), mu, var


def batch_norm_eval(
    x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray, eps: float
) -> Tensor:
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or running_mean.shape != (x.shape[1],):
        raise DimensionError(f"batch norm parameters {gamma.shape} do not fit input {x.shape}")
    axes, view = _channel_view(x.data)
    inv_std = 1.0 / np.sqrt(running_var + eps)
    x_hat = (x.data - running_mean.reshape(view)) * inv_std.reshape(view)
    out = Tensor._wrap(x_hat * gamma.data.reshape(view) + beta.data.reshape(view))
    gamma_data = gamma.data

    def vjp(g):
        return (
            g * (gamma_data * inv_std).reshape(view),
            (g * x_hat).sum(axis=axes),
            g.sum(axis=axes),
        )

    return _record("batch_norm_eval", out, (x, gamma, beta), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch"""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels of shape {labels.shape} do not match {logits.shape[0]} logit rows")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(logits.shape[0])
    out = Tensor._wrap(np.asarray(-log_probs[rows, labels].mean()))

    def vjp(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g.item() / logits.shape[0]),)

    return _record("cross_entropy", out, (logits,), vjp)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def same_padding(kernel: int) -> Tuple[int, int]:
    """(before, after) zero padding that keeps the extent; extra pad goes after"""
    before = (kernel - 1) // 2
    return before, kernel - 1 - before


def _pads(kernel_hw: Tuple[int, int], padding: Padding) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    if padding == "same":
        return same_padding(kernel_hw[0]), same_padding(kernel_hw[1])
    if padding == "valid":
        return (0, 0), (0, 0)
    raise DimensionError(f"unknown padding mode {padding!r}")


def _pad(x: np.ndarray, kernel_hw: Tuple[int, int], padding: Padding) -> np.ndarray:
    rows, cols = _pads(kernel_hw, padding)
    if rows == (0, 0) and cols == (0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), rows, cols))


def _correlate_arrays(x: np.ndarray, filters: np.ndarray, padding: Padding) -> np.ndarray:
    xp = _pad(x, filters.shape[-2:], padding)
    _, _, hp, wp = xp.shape
    _, _, h, w = filters.shape
    ho, wo = hp - h + 1, wp - w + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"filter {h}x{w} larger than padded input {hp}x{wp}")
    acc = np.zeros((filters.shape[0], x.shape[0], ho, wo))
    for i in range(h):
        for j in range(w):
            acc += np.tensordot(filters[:, :, i, j], xp[:, :, i:i + ho, j:j + wo], axes=([1], [1]))
    return acc.transpose(1, 0, 2, 3)


def _transpose_arrays(codes: np.ndarray, filters: np.ndarray, padding: Padding) -> np.ndarray:
    _, _, ho, wo = codes.shape
    _, c_in, h, w = filters.shape
    acc = np.zeros((c_in, codes.shape[0], ho + h - 1, wo + w - 1))
    for i in range(h):
        for j in range(w):
            acc[:, :, i:i + ho, j:j + wo] += np.tensordot(filters[:, :, i, j], codes, axes=([0], [1]))
    out = acc.transpose(1, 0, 2, 3)
    (top, bottom), (left, right) = _pads((h, w), padding)
    return out[:, :, top:out.shape[2] - bottom, left:out.shape[3] - right]


def _filter_gradient(padded_input: np.ndarray, upstream: np.ndarray, kernel_hw: Tuple[int, int]) -> np.ndarray:
    h, w = kernel_hw
    _, _, ho, wo = upstream.shape
    grad = np.empty((upstream.shape[1], padded_input.shape[1], h, w))
    for i in range(h):
        for j in range(w):
            grad[:, :, i, j] = np.tensordot(
                upstream, padded_input[:, :, i:i + ho, j:j + wo], axes=([0, 2, 3], [0, 2, 3])
            )
    return grad


def _batched(t: Tensor, what: str) -> Tuple[np.ndarray, bool]:
    if t.ndim == 3:
        return t.data[None], True
    if t.ndim == 4:
        return t.data, False
    raise DimensionError(f"{what} must be [C,H,W] or [B,C,H,W], got {t.shape}")


def conv2d_correlate(x: Tensor, filters: Tensor, padding: Padding = "same") -> Tensor:
    """Cross-correlation summed over input channels (the analysis operator W^T)"""
    if filters.ndim != 4:
        raise DimensionError(f"filters must be [C_out,C_in,h,w], got {filters.shape}")
    xb, squeeze = _batched(x, "input")
    if xb.shape[1] != filters.shape[1]:
        raise DimensionError(
            f"filters expect {filters.shape[1]} input channels, input has {xb.shape[1]}"
        )
    out = _correlate_arrays(xb, filters.data, padding)
    f_data = filters.data
    kernel_hw = f_data.shape[-2:]

    def vjp(g):
        gb = g[None] if squeeze else g
        dx = _transpose_arrays(gb, f_data, padding)
        df = _filter_gradient(_pad(xb, kernel_hw, padding), gb, kernel_hw)
        return (dx[0] if squeeze else dx), df

    return _record("conv2d_correlate", Tensor._wrap(out[0] if squeeze else out), (x, filters), vjp)


def conv2d_transpose(
    codes: Tensor,
    filters: Tensor,
    padding: Padding = "same",
    output_hw: Optional[Tuple[int, int]] = None,
) -> Tensor:
    """Exact adjoint of ``conv2d_correlate`` (the synthesis operator W)"""
    if filters.ndim != 4:
        raise DimensionError(f"filters must be [C_out,C_in,h,w], got {filters.shape}")
    zb, squeeze = _batched(codes, "codes")
    if zb.shape[1] != filters.shape[0]:
        raise DimensionError(f"codes have {zb.shape[1]} channels, filter bank has {filters.shape[0]}")
    out = _transpose_arrays(zb, filters.data, padding)
    if output_hw is not None and tuple(output_hw) != out.shape[-2:]:
        raise DimensionError(
            f"codes {zb.shape[-2:]} with {padding!r} padding synthesize {out.shape[-2:]}, not {tuple(output_hw)}"
        )
    f_data = filters.data
    kernel_hw = f_data.shape[-2:]

    def vjp(g):
        gb = g[None] if squeeze else g
        dz = _correlate_arrays(gb, f_data, padding)
        df = _filter_gradient(_pad(gb, kernel_hw, padding), zb, kernel_hw)
        return (dz[0] if squeeze else dz), df

    return _record("conv2d_transpose", Tensor._wrap(out[0] if squeeze else out), (codes, filters), vjp)


# ---------------------------------------------------------------------------
# Spectral norm
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralEstimate:
    value: float
    iterations: int
    degenerate: bool = False

    def __float__(self) -> float:
        return self.value


def power_iteration_sigma_max(
    apply: Callable[[np.ndarray], np.ndarray],
    apply_adjoint: Callable[[np.ndarray], np.ndarray],
    dim: Sequence[int],
    iters: int = 50,
    seed: int = 0,
) -> SpectralEstimate:
    """
    Largest eigenvalue of A^T A (the squared top singular value of A).

    The estimate is the Rayleigh quotient of the current iterate, which is
    nondecreasing over iterations. A zero operator returns 0 with
    ``degenerate=True``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(tuple(dim))
    v /= np.linalg.norm(v)
    value = 0.0
    for step in range(iters):
        w = apply_adjoint(apply(v))
        value = float(np.vdot(v, w))
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            logger.debug("power iteration hit the zero operator after %d step(s)", step + 1)
            return SpectralEstimate(0.0, step + 1, degenerate=True)
        v = w / norm
    return SpectralEstimate(value, iters)
