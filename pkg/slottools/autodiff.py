#!/usr/bin.env/python
# -*- coding: utf-8 -*-
"""
A minimal reverse-mode automatic differentiation layer built on numpy. Every
array the model touches is a Tensor (values, grad and a requires_grad flag).
Primitives executed while a Tape is active are recorded in order; calling
backward on a scalar loss replays the tape in reverse and accumulates
gradients into every tensor that requires them. Outside of a Tape the same
primitives simply compute values, which is how evaluation runs.

All arithmetic is float64. Broadcasting is deliberately not supported: binary
primitives demand identical shapes and the model uses `expand` explicitly.

The module also houses the Adam optimiser, global-norm gradient clipping,
a central finite-difference checker and a multiply-add counter used for the
FLOPs accounting.

Copyright 2020 Ross Burton

Permission is hereby granted, free of charge, to any person
obtaining a copy of this software and associated documentation
files (the "Software"), to deal in the Software without restriction,
including without limitation the rights to use, copy, modify,
merge, publish, distribute, sublicense, and/or sell copies of the
Software, and to permit persons to whom the Software is furnished
to do so, subject to the following conditions:
The above copyright notice and this permission notice shall be included
in all copies or substantial portions of the Software.

THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND,
EXPRESS OR IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF
MERCHANTABILITY, FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT.
IN NO EVENT SHALL THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY
CLAIM, DAMAGES OR OTHER LIABILITY, WHETHER IN AN ACTION OF CONTRACT,
TORT OR OTHERWISE, ARISING FROM, OUT OF OR IN CONNECTION WITH THE
SOFTWARE OR THE USE OR OTHER DEALINGS IN THE SOFTWARE.
"""
import logging
from contextlib import contextmanager
from typing import Callable
from typing import Dict
from typing import Iterable
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class AutodiffError(Exception):
    def __init__(self, message: str):
        logger.error(message)
        super().__init__(message)


class ShapeError(AutodiffError):
    pass


class Tensor:
    """
    Dense float64 array with a gradient slot of identical shape.

    Parameters
    ----------
    values: array-like
    requires_grad: bool (default=False)
        If True, backward will accumulate gradients into 'grad'
    name: str, optional

    Attributes
    ----------
    values: numpy.ndarray
    grad: numpy.ndarray
        Zero initialised, same shape as values
    requires_grad: bool
    tape: Tape or None
        Tape that recorded the primitive producing this tensor (None for leaves)
    """

    __array_priority__ = 100

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.name = name
        self.tape = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        name = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{name}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values: ArrayLike) -> Tensor:
    return Tensor(values, requires_grad=False)


def ones(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Node:
    """One recorded primitive: inputs, output and the rule mapping the output gradient to input gradients."""

    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: Callable):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE_TAPES: List["Tape"] = []


class Tape:
    """
    Ordered record of primitives. Use as a context manager; primitives evaluated
    inside the block are recorded, and backward replays them in reverse order.

    Examples
    --------
    >>> w = Tensor(2.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mse(scale(w, 3.0), constant(5.0))
    >>> tape.backward(loss)
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node):
        node.output.tape = self
        self.nodes.append(node)

    def backward(self, loss: Tensor):
        """
        Accumulate d(loss)/d(t) into t.grad for every tensor t on the tape that requires grad.
        Calling twice without zeroing gradients accumulates twice.

        Parameters
        ----------
        loss: Tensor
            Scalar (shape ()) output of a primitive recorded on this tape

        Raises
        ------
        AutodiffError
            Loss is not a scalar, or the tape is empty
        """
        if loss.shape != ():
            raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise AutodiffError("backward called on an empty tape")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones(())}
        touched: Dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for tensor, g_in in zip(node.inputs, node.backward_fn(g)):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                    touched[key] = tensor
        for key, tensor in touched.items():
            if tensor.requires_grad:
                tensor.grad = tensor.grad + grads[key]


def backward(loss: Tensor):
    """
    Backpropagate from a scalar loss using the tape that recorded it.

    Parameters
    ----------
    loss: Tensor

    Returns
    -------
    None

    Raises
    ------
    AutodiffError
        Loss is not scalar or was not produced on a tape
    """
    if loss.shape != ():
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise AutodiffError("backward called on a tensor that was not recorded on a tape")
    loss.tape.backward(loss)


def _emit(kind: str, inputs: Tuple[Tensor, ...], values: np.ndarray, backward_fn: Callable) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=requires_grad)
    if requires_grad and _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].record(Node(kind, inputs, out, backward_fn))
    return out


def _same_shape(kind: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _axis(kind: str, x: Tensor, axis: int) -> int:
    if x.values.ndim == 0:
        raise ShapeError(f"{kind}: cannot reduce over an axis of a scalar")
    axis = axis % x.values.ndim
    if x.shape[axis] == 0:
        raise ShapeError(f"{kind}: axis {axis} of shape {x.shape} is empty")
    return axis


# ---------------------------------------------------------------------------
# Multiply-add counting
# ---------------------------------------------------------------------------


class OpCounter:
    """
    Accumulates multiply-add counts of counted primitives (matmul, linear, mul, outer and
    explicitly recorded kernels such as the codebook distance computation), per section.
    """

    def __init__(self):
        self.totals: Dict[str, int] = {}

    def add(self, section: str, n: int):
        self.totals[section] = self.totals.get(section, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.totals.values())


_ACTIVE_COUNTERS: List[OpCounter] = []
_SECTIONS: List[str] = ["unassigned"]


@contextmanager
def counting_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.remove(counter)


@contextmanager
def op_section(name: str) -> Iterator[None]:
    _SECTIONS.append(name)
    try:
        yield
    finally:
        _SECTIONS.pop()


def record_macs(n: int):
    for counter in _ACTIVE_COUNTERS:
        counter.add(_SECTIONS[-1], n)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes; leading (batch) axes must be identical.

    Parameters
    ----------
    a: Tensor
        (..., m, k)
    b: Tensor
        (..., k, n)

    Returns
    -------
    Tensor
        (..., m, n)

    Raises
    ------
    ShapeError
    """
    if a.values.ndim < 2 or a.values.ndim != b.values.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    record_macs(int(np.prod(a.shape[:-2], dtype=np.int64)) * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def _backward(g):
        return np.matmul(g, np.swapaxes(b.values, -1, -2)), np.matmul(np.swapaxes(a.values, -1, -2), g)

    return _emit("matmul", (a, b), np.matmul(a.values, b.values), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.values + b.values, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.values - b.values, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of two tensors of identical shape."""
    _same_shape("mul_elementwise", a, b)
    record_macs(a.size)
    return _emit("mul_elementwise", (a, b), a.values * b.values, lambda g: (g * b.values, g * a.values))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.values * c, lambda g: (g * c,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """
    Softmax over one axis. Entries of -inf are allowed (masked positions) provided every
    slice keeps at least one finite entry.

    Raises
    ------
    ShapeError
        Empty axis
    """
    axis = _axis("softmax_over_axis", x, axis)
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _emit("softmax_over_axis", (x,), y, _backward)


def normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Divide by the sum over one axis so each slice sums to one (inputs assumed positive)."""
    axis = _axis("normalize_over_axis", x, axis)
    s = np.sum(x.values, axis=axis, keepdims=True)
    y = x.values / s

    def _backward(g):
        return ((g - np.sum(g * y, axis=axis, keepdims=True)) / s,)

    return _emit("normalize_over_axis", (x,), y, _backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Layer normalisation over the last axis with a learnable affine transform.

    Parameters
    ----------
    x: Tensor
        (..., d)
    weight: Tensor
        (d,)
    bias: Tensor
        (d,)
    eps: float (default=1e-5)

    Returns
    -------
    Tensor
    """
    d = x.shape[-1] if x.values.ndim else 0
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: shape mismatch {x.shape} vs {weight.shape}")
    mu = x.values.mean(axis=-1, keepdims=True)
    centred = x.values - mu
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centred * inv_std
    lead = tuple(range(x.values.ndim - 1))

    def _backward(g):
        g_hat = g * weight.values
        gx = inv_std * (
            g_hat - g_hat.mean(axis=-1, keepdims=True) - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return gx, np.sum(g * x_hat, axis=lead), np.sum(g, axis=lead)

    return _emit("layer_norm", (x, weight, bias), x_hat * weight.values + bias.values, _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _emit("relu", (x,), x.values * mask, lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf based) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + special.erf(x.values / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.values**2) / np.sqrt(2.0 * np.pi)
    return _emit("gelu", (x,), x.values * cdf, lambda g: (g * (cdf + x.values * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    y = special.expit(x.values)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y**2),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.values)
    return _emit("exp", (x,), y, lambda g: (g * y,))


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Mean over one axis, or over every element when axis is None (returns a scalar)."""
    if axis is None:
        if x.size == 0:
            raise ShapeError(f"mean_over_axis: cannot average an empty tensor of shape {x.shape}")
        n = x.size
        return _emit("mean_over_axis", (x,), np.mean(x.values), lambda g: (np.full(x.shape, g / n),))
    axis = _axis("mean_over_axis", x, axis)
    n = x.shape[axis]

    def _backward(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _emit("mean_over_axis", (x,), np.mean(x.values, axis=axis), _backward)


def outer(a: Tensor, b: Tensor) -> Tensor:
    """
    Outer product of the last axes, batched over identical leading axes:
    (..., n) x (..., d) -> (..., n, d).
    """
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"outer_product: shape mismatch {a.shape} vs {b.shape}")
    out = a.values[..., :, None] * b.values[..., None, :]
    record_macs(out.size)

    def _backward(g):
        return np.sum(g * b.values[..., None, :], axis=-1), np.sum(g * a.values[..., :, None], axis=-2)

    return _emit("outer_product", (a, b), out, _backward)


def gather_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    if x.values.ndim < 1 or (indices.size and (indices.min() < 0 or indices.max() >= x.shape[0])):
        raise ShapeError(f"gather_rows: indices out of range for shape {x.shape}")

    def _backward(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, indices, g)
        return (gx,)

    return _emit("gather_rows", (x,), x.values[indices], _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    ndim = tensors[0].values.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.values.ndim != ndim or t.shape[:axis] + t.shape[axis + 1 :] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1 :]:
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tensors, np.concatenate([t.values for t in tensors], axis=axis), _backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    axis = axis % x.values.ndim
    index = [slice(None)] * x.values.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def _backward(g):
        gx = np.zeros_like(x.values)
        gx[index] = g
        return (gx,)

    return _emit("slice", (x,), x.values[index], _backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        y = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: shape mismatch {x.shape} vs {shape}")
    return _emit("reshape", (x,), y, lambda g: (g.reshape(x.shape),))


def swap_axes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    return _emit("swap_axes", (x,), np.swapaxes(x.values, axis1, axis2), lambda g: (np.swapaxes(g, axis1, axis2),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swap_axes(x, -1, -2)


def expand(x: Tensor, n: int, axis: int = 0) -> Tensor:
    """Insert a new axis at 'axis' and repeat x n times along it."""
    y = np.repeat(np.expand_dims(x.values, axis), n, axis=axis)
    return _emit("expand", (x,), y, lambda g: (np.sum(g, axis=axis),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Affine map over the last axis: x @ weight + bias.

    Parameters
    ----------
    x: Tensor
        (..., d_in)
    weight: Tensor
        (d_in, d_out)
    bias: Tensor, optional
        (d_out,)

    Returns
    -------
    Tensor
        (..., d_out)
    """
    if x.values.ndim < 1 or weight.values.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: shape mismatch {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: shape mismatch {weight.shape} vs {bias.shape}")
    rows = int(np.prod(x.shape[:-1], dtype=np.int64))
    record_macs(rows * weight.shape[0] * weight.shape[1])
    y = x.values @ weight.values
    if bias is not None:
        y = y + bias.values
    x2d = x.values.reshape(rows, weight.shape[0])

    def _backward(g):
        g2d = g.reshape(rows, weight.shape[1])
        grads = (g @ weight.values.T, x2d.T @ g2d)
        if bias is not None:
            grads = grads + (np.sum(g2d, axis=0),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", inputs, y, _backward)


def mse(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element; returns a scalar."""
    _same_shape("mse", prediction, target)
    diff = prediction.values - target.values
    n = diff.size

    def _backward(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return _emit("mse", (prediction, target), np.mean(diff**2), _backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, detached from the graph."""
    return Tensor(x.values.copy(), requires_grad=False)


def straight_through(x: Tensor, forward_values: np.ndarray) -> Tensor:
    """
    Straight-through estimator: the forward value is 'forward_values' exactly, and the
    backward pass copies the output gradient onto x unchanged (x + sg(forward - x)).
    """
    forward_values = np.asarray(forward_values, dtype=np.float64)
    if forward_values.shape != x.shape:
        raise ShapeError(f"straight_through: shape mismatch {x.shape} vs {forward_values.shape}")
    return _emit("straight_through", (x,), forward_values.copy(), lambda g: (g,))


def gru_cell(
    x: Tensor, h: Tensor, weight_ih: Tensor, weight_hh: Tensor, bias_ih: Tensor, bias_hh: Tensor
) -> Tensor:
    """
    Gated recurrent unit with gates ordered (reset, update, candidate):

    r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
    z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
    n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
    h' = (1 - z) * n + z * h

    Parameters
    ----------
    x: Tensor
        (batch, d_in)
    h: Tensor
        (batch, d)
    weight_ih: Tensor
        (d_in, 3d)
    weight_hh: Tensor
        (d, 3d)
    bias_ih: Tensor
        (3d,)
    bias_hh: Tensor
        (3d,)

    Returns
    -------
    Tensor
        (batch, d)
    """
    d = h.shape[-1]
    if weight_hh.shape != (d, 3 * d) or weight_ih.shape[1:] != (3 * d,) or x.shape[:-1] != h.shape[:-1]:
        raise ShapeError(f"gru_cell: shape mismatch {x.shape} vs {h.shape}")
    gi = linear(x, weight_ih, bias_ih)
    gh = linear(h, weight_hh, bias_hh)
    r = sigmoid(add(slice_axis(gi, 0, d, axis=-1), slice_axis(gh, 0, d, axis=-1)))
    z = sigmoid(add(slice_axis(gi, d, 2 * d, axis=-1), slice_axis(gh, d, 2 * d, axis=-1)))
    n = tanh(add(slice_axis(gi, 2 * d, 3 * d, axis=-1), mul(r, slice_axis(gh, 2 * d, 3 * d, axis=-1))))
    return add(mul(sub(ones(z.shape), z), n), mul(z, h))


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "scale": scale,
    "softmax_over_axis": softmax,
    "normalize_over_axis": normalize,
    "layer_norm": layer_norm,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "mean_over_axis": mean,
    "outer_product": outer,
    "gather_rows": gather_rows,
    "concat": concat,
    "slice": slice_axis,
    "reshape": reshape,
    "swap_axes": swap_axes,
    "expand": expand,
    "gru_cell": gru_cell,
    "linear": linear,
    "mse": mse,
    "straight_through": straight_through,
}


def forward_primitive(op_kind: str, *inputs, **kwargs) -> Tensor:
    """
    Evaluate a primitive by name (recording it on the active tape, if any).

    Parameters
    ----------
    op_kind: str
        One of PRIMITIVES
    inputs:
        Tensors (and positional arguments) passed to the primitive
    kwargs:
        Keyword arguments passed to the primitive (e.g. axis)

    Returns
    -------
    Tensor

    Raises
    ------
    AutodiffError
        Unknown primitive
    """
    if op_kind not in PRIMITIVES:
        raise AutodiffError(f"Unknown primitive {op_kind}, must be one of: {list(PRIMITIVES.keys())}")
    return PRIMITIVES[op_kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


class Parameter(Tensor):
    """
    Learnable tensor with Adam moment estimates.

    Parameters
    ----------
    name: str
    values: array-like

    Attributes
    ----------
    adam_m: numpy.ndarray
        First moment estimate (same shape as values)
    adam_v: numpy.ndarray
        Second moment estimate (same shape as values)
    step_count: int
        Number of Adam updates applied
    """

    def __init__(self, name: str, values: ArrayLike):
        super().__init__(values, requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.values)
        self.adam_v = np.zeros_like(self.values)
        self.step_count = 0

    @property
    def tensor(self) -> Tensor:
        return self

    def __repr__(self):
        return f"Parameter(name={self.name}, shape={self.shape})"


def adam_step(
    params: Iterable[Parameter],
    lr: float = 4e-4,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
):
    """
    In-place Adam update with bias correction, followed by zeroing of the gradients.

    Parameters
    ----------
    params: Iterable[Parameter]
    lr: float (default=4e-4)
    betas: Tuple[float, float] (default=(0.9, 0.999))
    eps: float (default=1e-8)

    Returns
    -------
    None

    Raises
    ------
    AutodiffError
        A gradient contains NaN or Inf; no parameter is updated
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise AutodiffError(f"Non-finite gradient in parameter {p.name}")
    beta1, beta2 = betas
    for p in params:
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * p.grad
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * p.grad**2
        m_hat = p.adam_m / (1.0 - beta1**p.step_count)
        v_hat = p.adam_v / (1.0 - beta2**p.step_count)
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """
    Rescale gradients so their global L2 norm does not exceed max_norm.

    Returns
    -------
    float
        Global norm before clipping
    """
    params = list(params)
    norm = float(np.sqrt(sum(float(np.sum(p.grad**2)) for p in params)))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            p.grad = p.grad * factor
    return norm


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def numerical_gradient(
    f: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-4, indices: Optional[Sequence[Tuple[int, ...]]] = None
) -> np.ndarray:
    """
    Central finite-difference estimate of d f()/d tensor, evaluated with no tape active.

    Parameters
    ----------
    f: callable
        Zero-argument function returning a scalar Tensor; must read tensor.values
    tensor: Tensor
    eps: float (default=1e-4)
    indices: list of tuples, optional
        Only estimate these entries (others are left at zero)

    Returns
    -------
    numpy.ndarray
    """
    grad = np.zeros_like(tensor.values)
    indices = indices if indices is not None else list(np.ndindex(*tensor.shape))
    for idx in indices:
        original = tensor.values[idx]
        tensor.values[idx] = original + eps
        upper = f().item()
        tensor.values[idx] = original - eps
        lower = f().item()
        tensor.values[idx] = original
        grad[idx] = (upper - lower) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denominator = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denominator)


def gradcheck(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, float]:
    """
    Compare tape gradients of a scalar function against central finite differences.

    Parameters
    ----------
    f: callable
        Zero-argument function returning a scalar Tensor built from 'tensors'
    tensors: Sequence[Tensor]
        Tensors with requires_grad=True
    eps: float (default=1e-4)
    max_entries: int, optional
        Check at most this many randomly chosen entries per tensor
    rng: numpy.random.Generator, optional
        Used to choose entries when max_entries is given

    Returns
    -------
    Dict[str, float]
        Relative error per tensor (keyed by name, or position when unnamed)
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    errors = {}
    for i, t in enumerate(tensors):
        indices = list(np.ndindex(*t.shape))
        if max_entries is not None and len(indices) > max_entries:
            chosen = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[j] for j in sorted(chosen)]
        numeric = numerical_gradient(f, t, eps=eps, indices=indices)
        analytic = np.zeros_like(t.grad)
        for idx in indices:
            analytic[idx] = t.grad[idx]
        errors[t.name or str(i)] = relative_error(analytic, numeric)
    return errors
