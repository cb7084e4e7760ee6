"""Small reverse-mode automatic differentiation engine on numpy arrays.

A :class:`Tensor` wraps a float64 array. Operations build a graph only when
one of their inputs requires a gradient, so inference on frozen parameters
keeps no history. Images use NHWC layout and convolution weights are
``(kh, kw, c_in, c_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeError",
    "ParameterSet",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "affine",
    "conv2d",
    "maxpool2d",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "take",
    "concatenate",
    "cumsum",
    "clamp_min",
    "sq_distance",
    "backward",
    "forward_backward",
    "finite_difference_check",
    "gradient_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; the message names the op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, grad_fn, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), grad_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _node(out, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = tensor(a)
    p = float(exponent)

    def grad_fn(g):
        return (g * p * a.data ** (p - 1),)

    return _node(a.data**p, (a,), grad_fn, "pow")


# -- nonlinearities --------------------------------------------------------


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0  # subgradient 0 at the kink
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = tensor(a)
    s = expit(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp_min(a, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient passes only where ``a > floor``."""
    a = tensor(a)
    mask = a.data > floor
    return _node(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


def log_softmax(a, axis=-1) -> Tensor:
    a = tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def grad_fn(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), grad_fn, "log_softmax")


def softmax(a, axis=-1) -> Tensor:
    a = tensor(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), grad_fn, "softmax")


# -- reductions and shape ops ----------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def take(a, index) -> Tensor:
    """Basic or advanced indexing (gather); repeated indices accumulate."""
    a = tensor(a)
    out = a.data[index]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (a,), grad_fn, "take")


def concatenate(tensors: Sequence, axis=0) -> Tensor:
    tensors = [tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concatenate: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), grad_fn, "concatenate")


def cumsum(a, axis=-1) -> Tensor:
    a = tensor(a)

    def grad_fn(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(np.cumsum(a.data, axis=axis), (a,), grad_fn, "cumsum")


# -- linear algebra and layers ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), grad_fn, "matmul")


def affine(x, w, b=None) -> Tensor:
    """Dense layer ``x @ w + b`` for ``x`` of shape (batch, in)."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


def _im2col(x, kh, kw, stride):
    n, h, w, c = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = x[
                :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :
            ]
    return cols, ho, wo


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """Valid 2-D cross-correlation of NHWC images with ``(kh, kw, cin, cout)`` filters."""
    x, w = tensor(x), tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with filters {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[1] < kh or x.shape[2] < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape[:2]}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride)
    n = x.shape[0]
    flat = cols.reshape(n * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (flat @ w2).reshape(n, ho, wo, cout)
    parents = [x, w]
    if b is not None:
        b = tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} filters")
        out = out + b.data
        parents.append(b)

    def grad_fn(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (flat.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, cin)
            gx = np.zeros(x.shape)
            for i in range(kh):
                for j in range(kw):
                    gx[
                        :,
                        i : i + stride * (ho - 1) + 1 : stride,
                        j : j + stride * (wo - 1) + 1 : stride,
                        :,
                    ] += gcols[:, :, :, i, j, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(out, tuple(parents), grad_fn, "conv2d")


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    x = tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool2d: input {x.shape} smaller than window {size}")
    crop = x.data[:, : ho * size, : wo * size, :].reshape(n, ho, size, wo, size, c)
    out = crop.max(axis=(2, 4))

    def grad_fn(g):
        # the first maximal entry of each window (row-major) takes the gradient
        inner = np.zeros((n, ho, size, wo, size, c))
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(size):
            for j in range(size):
                hit = (crop[:, :, i, :, j, :] == out) & ~taken
                inner[:, :, i, :, j, :] = g * hit
                taken |= hit
        inner = inner.reshape(n, ho * size, wo * size, c)
        if inner.shape == x.shape:
            return (inner,)
        gx = np.zeros(x.shape)
        gx[:, : ho * size, : wo * size, :] = inner
        return (gx,)

    return _node(out, (x,), grad_fn, "maxpool2d")


def sq_distance(a, b, scale=None) -> Tensor:
    """Pairwise weighted squared distances ``sum_j s_j (a_nj - b_kj)^2``.

    ``a`` is (N, D), ``b`` is (K, D), ``scale`` is None or shape (D,). Result (N, K).
    """
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sq_distance: incompatible shapes {a.shape} and {b.shape}")
    s = tensor(np.ones(a.shape[1]) if scale is None else scale)
    if s.shape != (a.shape[1],):
        raise ShapeError(f"sq_distance: scale {s.shape} does not match dimension {a.shape[1]}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = (diff**2 * s.data).sum(axis=2)

    def grad_fn(g):
        gs_diff = g[:, :, None] * diff
        ga = 2.0 * s.data * gs_diff.sum(axis=1)
        gb = -2.0 * s.data * gs_diff.sum(axis=0)
        gsc = (g[:, :, None] * diff**2).sum(axis=(0, 1))
        return ga, gb, gsc

    return _node(out, (a, b, s), grad_fn, "sq_distance")


# -- graph traversal -------------------------------------------------------


def _topological(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


class ParameterSet:
    """Named float64 arrays, each flagged trainable or frozen."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None, frozen: Iterable[str] = ()):
        self.arrays: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}
        frozen = set(frozen)
        for name, arr in (arrays or {}).items():
            self.add(name, arr, trainable=name not in frozen)

    def add(self, name: str, array, trainable: bool = True) -> None:
        if name in self.arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.arrays[name] = np.array(array, dtype=np.float64)
        self.trainable[name] = bool(trainable)

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def trainable_names(self) -> list[str]:
        return [k for k, v in self.trainable.items() if v]

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for k, v in self.arrays.items():
            out.add(k, v.copy(), self.trainable[k])
        return out

    def tensors(self, grad: bool = True) -> dict[str, Tensor]:
        return {
            k: Tensor(v, requires_grad=grad and self.trainable[k]) for k, v in self.arrays.items()
        }

    def n_values(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


def _as_outputs(result):
    return list(result) if isinstance(result, (tuple, list)) else [result]


def forward_backward(program: Callable, params: ParameterSet, inputs=(), loss_index: int = 0):
    """Evaluate ``program(tensors, *inputs)`` and differentiate one scalar output.

    Returns the output arrays and a dict of gradients, one per trainable parameter.
    """
    leaves = params.tensors(grad=True)
    outputs = _as_outputs(program(leaves, *inputs))
    loss = tensor(outputs[loss_index])
    if loss.data.size != 1:
        raise ShapeError(f"forward_backward: designated loss has shape {loss.shape}, expected scalar")
    backward(loss)
    grads = {}
    for name in params.trainable_names():
        g = leaves[name].grad
        grads[name] = np.zeros_like(params[name]) if g is None else np.array(g)
    return [None if o is None else tensor(o).data for o in outputs], grads


def evaluate(program: Callable, params: ParameterSet, inputs=(), loss_index: int = 0) -> float:
    leaves = params.tensors(grad=False)
    return float(tensor(_as_outputs(program(leaves, *inputs))[loss_index]).data)


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_kinks: int
    worst: tuple[str, tuple] | None = None
    n_unresolved: int = 0


def gradient_check(
    program: Callable,
    params: ParameterSet,
    inputs=(),
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    kink_tol: float = 1e-2,
    stencil_tol: float = 1e-5,
    resolution_ulps: float = 64.0,
    method: str = "central",
) -> GradCheckResult:
    """Compare reverse-mode gradients with finite differences.

    Relative error uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.

    ``method='central'`` uses the central difference ``D(h)`` at ``h = step``.
    A coordinate is treated as a kink, and excluded, when its forward and
    backward one-sided differences disagree by more than ``kink_tol`` relative,
    or when ``D(h)`` and ``D(h/2)`` disagree by more than ``stencil_tol``
    relative (a kink inside the stencil, crossed by one side only).

    ``method='richardson'`` uses ``(4 D(h/4) - D(h/2)) / 3``, whose truncation
    error is O(h^4). That allows a step large enough for rounding in the loss
    to stay far below the 1e-8 floor of the denominator. Kinks are detected
    by disagreement between this estimate and the coarser ``(4 D(h/2) - D(h)) / 3``.

    A coordinate is unresolved, and also excluded, when both the measured
    change ``f(x+h) - f(x-h)`` and the change predicted by the analytic
    gradient lie within ``resolution_ulps`` units of rounding of the loss:
    there the difference quotient holds no information.
    ``max_coords`` limits how many randomly chosen coordinates are probed per
    parameter array.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if method not in ("central", "richardson"):
        raise ValueError(f"unknown method {method!r}")
    _, grads = forward_backward(program, params, inputs)
    f0 = evaluate(program, params, inputs)
    rng = np.random.default_rng(seed)
    eps = np.finfo(float).eps
    fractions = (1.0, 0.5) if method == "central" else (1.0, 0.5, 0.25)
    worst, n_checked, n_kinks, n_unresolved, worst_at = 0.0, 0, 0, 0, None
    for name in params.trainable_names():
        arr = params.arrays[name]
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat_idx = np.sort(rng.choice(arr.size, max_coords, replace=False))
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            plus, minus = [], []
            for frac in fractions:
                arr[idx] = orig + frac * step
                plus.append(evaluate(program, params, inputs))
                arr[idx] = orig - frac * step
                minus.append(evaluate(program, params, inputs))
            arr[idx] = orig
            analytic = grads[name][idx]
            fp, fm = plus[0], minus[0]
            resolution = resolution_ulps * eps * max(abs(f0), abs(fp), abs(fm))
            if abs(fp - fm) <= resolution and abs(analytic) * 2 * step <= resolution:
                n_unresolved += 1
                continue
            d = [(p - m) / (2 * frac * step) for p, m, frac in zip(plus, minus, fractions)]
            h_last = fractions[-1] * step
            fwd, bwd = (plus[-1] - f0) / h_last, (f0 - minus[-1]) / h_last
            if method == "central":
                numeric, coarse = d[0], d[1]
            else:
                numeric, coarse = (4 * d[2] - d[1]) / 3, (4 * d[1] - d[0]) / 3
            scale = max(abs(numeric), abs(coarse), 1e-6)
            one_sided = abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-6)
            if one_sided or abs(numeric - coarse) > stencil_tol * scale:
                n_kinks += 1
                continue
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            n_checked += 1
            if rel > worst:
                worst, worst_at = rel, (name, idx)
    return GradCheckResult(worst, n_checked, n_kinks, worst_at, n_unresolved)


def finite_difference_check(program, params, inputs=(), step: float = 1e-5, **kwargs) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return gradient_check(program, params, inputs, step=step, **kwargs).max_rel_error
