""" autodiff.py
    A small define-by-run reverse-mode engine over float64 numpy arrays.

    Every kernel builds its output with make_op(), which records the op
    kind, the parent tensors and a closure mapping the output gradient to
    one gradient per parent. Tensors get increasing ids at creation, so
    creation order is a topological order of the graph and backward() is
    a single pass over ids from high to low.

    Kernels: add, mul, matmul, conv2d (3x3, stride 1, pad 1), relu,
    max_pool2d (2x2), nearest_upsample (x2), mean_pool, max_reduce,
    concat, softmax (last axis), log, sigmoid, gather_mask, plus the
    layout-only reshape and transpose.
"""
import itertools
import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from udma import diagnostics
from udma.errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

_next_id = itertools.count()

SIGMOID_EPS = 1e-12


@dataclass(frozen=True)
class Node:
    op: str
    input_ids: tuple
    output_id: int


class Tensor:

    def __init__(self, data, requires_grad=False, parents=(), op='leaf', backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.parents = parents
        self.op = op
        self.backward_fn = backward_fn
        self.id = next(_next_id)

    @property
    def shape(self):
        return self.data.shape

    @property
    def node(self) -> Node:
        return Node(self.op, tuple(p.id for p in self.parents), self.id)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            msg = "division by a tensor is not a kernel, multiply by a constant instead"
            raise TypeError(msg)
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def make_op(op, data, parents, backward_fn) -> Tensor:
    """ Wraps a kernel result. Parents that do not require grad are dropped
        from the record so constant subgraphs cost nothing in backward.
    """
    if not np.all(np.isfinite(data)):
        msg = f"{op} produced {int(np.count_nonzero(~np.isfinite(data)))} non-finite values"
        logger.error(msg)
        raise NumericError(msg)
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, requires_grad=False, op=op)
    return Tensor(data, requires_grad=True, parents=tuple(parents), op=op, backward_fn=backward_fn)


def unbroadcast(grad, shape):
    """ sums grad down to shape, undoing numpy broadcasting """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        msg = f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        raise ShapeError(msg)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape('add', a, b)

    def backward_fn(grad):
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)
    return make_op('add', a.data + b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape('mul', a, b)

    def backward_fn(grad):
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)
    return make_op('mul', a.data * b.data, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        msg = f"matmul: shapes {a.shape} and {b.shape} are not (m, k) x (k, n)"
        raise ShapeError(msg)

    def backward_fn(grad):
        return grad @ b.data.T, a.data.T @ grad
    return make_op('matmul', a.data @ b.data, (a, b), backward_fn)


def im2col(x):
    """ (C, H, W) -> (C * 9, H * W) columns of zero-padded 3x3 windows """
    channels, height, width = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))   # (C, H, W, 3, 3)
    return windows.transpose(0, 3, 4, 1, 2).reshape(channels * 9, height * width)


def col2im(cols, shape):
    channels, height, width = shape
    cols = cols.reshape(channels, 3, 3, height, width)
    padded = np.zeros((channels, height + 2, width + 2))
    for di in range(3):
        for dj in range(3):
            padded[:, di:di + height, dj:dj + width] += cols[:, di, dj]
    return padded[:, 1:-1, 1:-1]


def conv2d(x, weight, bias) -> Tensor:
    """ x (C_in, H, W), weight (C_out, C_in, 3, 3), bias (C_out,) -> (C_out, H, W) """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 3 or weight.data.ndim != 4 or weight.shape[1:] != (x.shape[0], 3, 3) \
            or bias.shape != (weight.shape[0],):
        msg = f"conv2d: input {x.shape}, weight {weight.shape}, bias {bias.shape} are incompatible"
        raise ShapeError(msg)
    out_channels = weight.shape[0]
    _, height, width = x.shape
    cols = im2col(x.data)
    flat_weight = weight.data.reshape(out_channels, -1)
    out = (flat_weight @ cols + bias.data[:, None]).reshape(out_channels, height, width)

    def backward_fn(grad):
        flat_grad = grad.reshape(out_channels, -1)
        grad_weight = (flat_grad @ cols.T).reshape(weight.shape)
        grad_x = col2im(flat_weight.T @ flat_grad, x.shape)
        return grad_x, grad_weight, flat_grad.sum(axis=1)
    return make_op('conv2d', out, (x, weight, bias), backward_fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0

    def backward_fn(grad):
        return (grad * positive,)
    return make_op('relu', np.where(positive, x.data, 0.0), (x,), backward_fn)


def max_pool2d(x) -> Tensor:
    """ 2x2 windows, stride 2; the first maximum in row-major window order takes the gradient """
    x = as_tensor(x)
    if x.data.ndim != 3 or x.shape[1] % 2 or x.shape[2] % 2:
        msg = f"max_pool2d: input {x.shape} is not (C, H, W) with even H and W"
        raise ShapeError(msg)
    channels, height, width = x.shape
    windows = x.data.reshape(channels, height // 2, 2, width // 2, 2).transpose(0, 1, 3, 2, 4)
    windows = windows.reshape(channels, height // 2, width // 2, 4)
    winner = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]

    def backward_fn(grad):
        scattered = np.zeros(windows.shape)
        np.put_along_axis(scattered, winner[..., None], grad[..., None], axis=-1)
        scattered = scattered.reshape(channels, height // 2, width // 2, 2, 2).transpose(0, 1, 3, 2, 4)
        return (scattered.reshape(channels, height, width),)
    return make_op('max_pool2d', out, (x,), backward_fn)


def nearest_upsample(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 3:
        msg = f"nearest_upsample: input {x.shape} is not (C, H, W)"
        raise ShapeError(msg)
    channels, height, width = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward_fn(grad):
        return (grad.reshape(channels, height, 2, width, 2).sum(axis=(2, 4)),)
    return make_op('nearest_upsample', out, (x,), backward_fn)


def normalize_axes(op, x, axes):
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    ndim = x.data.ndim
    if any(a < -ndim or a >= ndim for a in axes):
        msg = f"{op}: axes {axes} out of range for shape {x.shape}"
        raise ShapeError(msg)
    return tuple(sorted(a % ndim for a in axes))


def mean_pool(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = normalize_axes('mean_pool', x, axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        msg = f"mean_pool: empty reduction over axes {axes} of shape {x.shape}"
        raise ShapeError(msg)

    def backward_fn(grad):
        return (np.broadcast_to(np.expand_dims(grad, axes), x.shape) / count,)
    return make_op('mean_pool', x.data.mean(axis=axes), (x,), backward_fn)


def max_reduce(x, axes) -> Tensor:
    """ maximum over axes; on ties the first element in row-major order takes the gradient """
    x = as_tensor(x)
    axes = normalize_axes('max_reduce', x, axes)
    kept = tuple(a for a in range(x.data.ndim) if a not in axes)
    moved = x.data.transpose(kept + axes)
    kept_shape = moved.shape[:len(kept)]
    flat = moved.reshape(kept_shape + (-1,))
    if flat.shape[-1] == 0:
        msg = f"max_reduce: empty reduction over axes {axes} of shape {x.shape}"
        raise ShapeError(msg)
    winner = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]

    def backward_fn(grad):
        scattered = np.zeros(flat.shape)
        np.put_along_axis(scattered, winner[..., None], np.asarray(grad)[..., None], axis=-1)
        scattered = scattered.reshape(moved.shape)
        return (scattered.transpose(np.argsort(kept + axes)),)
    return make_op('max_reduce', out, (x,), backward_fn)


def concat(tensors, axis) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        msg = f"concat: shapes {[t.shape for t in tensors]} do not concatenate on axis {axis}"
        raise ShapeError(msg)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(grad):
        return tuple(np.split(grad, splits, axis=axis))
    return make_op('concat', out, tuple(tensors), backward_fn)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = shifted / shifted.sum(axis=-1, keepdims=True)

    def backward_fn(grad):
        return (out * (grad - (grad * out).sum(axis=-1, keepdims=True)),)
    return make_op('softmax', out, (x,), backward_fn)


def log(x, floor=None, name='log') -> Tensor:
    """ natural log; with a floor, inputs below it are clamped, counted
        under name in diagnostics, and pass no gradient
    """
    x = as_tensor(x)
    if floor is None:
        clamped = np.zeros(x.shape, dtype=bool)
        safe = x.data
    else:
        clamped = x.data < floor
        diagnostics.record_clamp(name, int(np.count_nonzero(clamped)))
        safe = np.where(clamped, floor, x.data)
    with np.errstate(divide='ignore', invalid='ignore'):
        out = np.log(safe)

    def backward_fn(grad):
        return (np.where(clamped, 0.0, grad / safe),)
    return make_op(name, out, (x,), backward_fn)


def sigmoid(x) -> Tensor:
    """ logistic function, kept inside [SIGMOID_EPS, 1 - SIGMOID_EPS] so it stays strictly in (0, 1) """
    x = as_tensor(x)
    out = expit(x.data)
    saturated = (out < SIGMOID_EPS) | (out > 1.0 - SIGMOID_EPS)
    diagnostics.record_clamp('sigmoid', int(np.count_nonzero(saturated)))
    out = np.clip(out, SIGMOID_EPS, 1.0 - SIGMOID_EPS)

    def backward_fn(grad):
        return (grad * out * (1.0 - out),)
    return make_op('sigmoid', out, (x,), backward_fn)


def gather_mask(x, mask) -> Tensor:
    """ x (..., H, W) and boolean mask (H, W) -> (..., n) selected in row-major order """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if x.shape[x.data.ndim - mask.ndim:] != mask.shape:
        msg = f"gather_mask: mask {mask.shape} does not match trailing dims of {x.shape}"
        raise ShapeError(msg)

    def backward_fn(grad):
        scattered = np.zeros(x.shape)
        scattered[..., mask] = grad
        return (scattered,)
    return make_op('gather_mask', x.data[..., mask], (x,), backward_fn)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        msg = f"reshape: cannot view {x.shape} as {shape}"
        raise ShapeError(msg)

    def backward_fn(grad):
        return (grad.reshape(x.shape),)
    return make_op('reshape', out, (x,), backward_fn)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inverse = np.argsort(axes)

    def backward_fn(grad):
        return (grad.transpose(inverse),)
    return make_op('transpose', x.data.transpose(axes), (x,), backward_fn)


def total(x) -> Tensor:
    """ sum of every element, as mean_pool scaled by the element count """
    x = as_tensor(x)
    return mul(mean_pool(x, tuple(range(x.data.ndim))), float(x.data.size))


class Graph:
    """ the op records reachable from a tensor, in creation order """

    def __init__(self, output: Tensor):
        seen = {}
        stack = [output]
        while stack:
            tensor = stack.pop()
            if tensor.id in seen:
                continue
            seen[tensor.id] = tensor
            stack.extend(tensor.parents)
        self.tensors = [seen[i] for i in sorted(seen)]

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.tensors]

    def __len__(self):
        return len(self.tensors)


def backward(loss: Tensor):
    """ Fills .grad of every tensor that requires it, accumulating onto
        what is already there.
    """
    if loss.data.size != 1:
        msg = f"backward needs a scalar loss, got shape {loss.shape}"
        raise ShapeError(msg)
    if not loss.requires_grad:
        return
    upstream = {loss.id: np.ones_like(loss.data)}
    for tensor in reversed(Graph(loss).tensors):
        grad = upstream.pop(tensor.id, None)
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            msg = f"backward: non-finite gradient reaching {tensor.op} (tensor {tensor.id})"
            logger.error(msg)
            raise NumericError(msg)
        tensor.grad = tensor.grad + grad
        if tensor.backward_fn is None:
            continue
        for parent, parent_grad in zip(tensor.parents, tensor.backward_fn(grad)):
            if not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad, dtype=np.float64).reshape(parent.shape)
            if parent.id in upstream:
                upstream[parent.id] = upstream[parent.id] + parent_grad
            else:
                upstream[parent.id] = parent_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    kink_retries: int
    worst_index: tuple | None = None
    n_failed: int = 0


def relative_error(analytic, numeric) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)


def grad_check(f, x: Tensor, h=1e-5, tol=1e-4, max_elements=None, rng=None) -> GradCheckReport:
    """ Compares backward() against central differences of f at x.

        f maps x to a scalar Tensor and must rebuild its graph on each call.
        An element that disagrees at h is re-measured at h/10 and h/100 and
        keeps its smallest error. With max_elements, a random subset of
        that many elements is checked.
    """
    if not x.requires_grad:
        msg = "grad_check: x must require grad"
        raise ShapeError(msg)
    x.zero_grad()
    backward(f(x))
    analytic = x.grad.copy()

    indices = list(np.ndindex(*x.shape))
    if max_elements is not None and len(indices) > max_elements:
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = rng.choice(len(indices), max_elements, replace=False)
        indices = [indices[i] for i in sorted(chosen)]

    worst, worst_index, retries, failed = 0.0, None, 0, 0
    for index in indices:
        error = None
        element_retries = 0
        for step in (h, h / 10.0, h / 100.0):
            original = x.data[index]
            x.data[index] = original + step
            plus = f(x).item()
            x.data[index] = original - step
            minus = f(x).item()
            x.data[index] = original
            step_error = relative_error(analytic[index], (plus - minus) / (2.0 * step))
            error = step_error if error is None else min(error, step_error)
            if error <= tol:
                break
            if step != h / 100.0:
                element_retries += 1
        retries += element_retries
        if error > tol:
            failed += 1
            logger.warning(f"grad_check element {index}: relative error {error:.3g} after {element_retries} retries, "
                           f"analytic {analytic[index]:.6g}")
        elif element_retries:
            logger.debug(f"grad_check element {index}: passed after {element_retries} retries, "
                         f"relative error {error:.3g}")
        if error > worst:
            worst, worst_index = error, index
    x.zero_grad()
    return GradCheckReport(worst, worst <= tol, len(indices), retries, worst_index, failed)
