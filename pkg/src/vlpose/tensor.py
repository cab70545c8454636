"""Dense tensors with reverse-mode automatic differentiation.

Every forward op records parent links plus a backward closure; calling
``Tensor.backward()`` replays the closures in reverse topological order and
then frees the recorded graph.  float32 is the working precision for
training and inference, float64 is used by the finite-difference oracles.
Tensors are treated as immutable once created; only optimizer steps write
to ``.data`` in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "ParamSet",
    "add",
    "mul",
    "sub",
    "matmul",
    "relu",
    "softmax_lastdim",
    "layer_norm",
    "linear",
    "power",
    "sum_all",
    "sum_axis",
    "concat",
    "narrow",
    "reshape",
    "permute",
    "conv2d_1x1",
    "deconv2d",
    "batch_norm2d",
    "drop_path",
    "count_params",
]

_FLOATS = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def _coerce(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOATS:
        return arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional real array with an optional gradient.

    ``requires_grad`` marks leaves whose gradient should be retained; op
    results inherit it from their parents.  ``grad`` is populated by
    ``backward`` and always matches ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad)

    @staticmethod
    def _result(data, parents, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        needing = tuple(p for p in parents if p.requires_grad)
        out.requires_grad = bool(needing)
        if needing:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------------

    def _accumulate(self, piece):
        if self.grad is None:
            self.grad = np.array(piece, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + piece

    def backward(self, seed=None):
        """Run reverse-mode accumulation from this node.

        ``seed`` defaults to ones (sum-reduction semantics).  Gradients
        accumulate into ``.grad`` of every reachable leaf with
        ``requires_grad``; the recorded graph is freed afterwards, so a graph
        can be walked only once.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            is_leaf = not node._parents
            node._parents = ()
            node._backward = None
            if not is_leaf:
                node.grad = None

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape).astype(a.data.dtype, copy=False))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape).astype(b.data.dtype, copy=False))

    return Tensor._result(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape).astype(a.data.dtype, copy=False))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape).astype(b.data.dtype, copy=False))

    return Tensor._result(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    return add(a, mul(_as_tensor(b, like=_as_tensor(a)), -1.0))


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise x**p; caller guarantees the domain (norms carry an eps).

    Out-of-domain inputs yield NaNs rather than raising, so the gradient
    checker can flag them.
    """
    with np.errstate(invalid="ignore"):
        data = x.data ** exponent

    def backward(g):
        if x.requires_grad:
            with np.errstate(invalid="ignore"):
                x._accumulate(g * exponent * x.data ** (exponent - 1.0))

    return Tensor._result(data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # gradient at exactly 0 is defined as 0
    data = np.where(mask, x.data, 0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return Tensor._result(data, (x,), backward)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._result(data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last dimension: x[M,D] @ w[D,C] (+ b[C])."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            x._accumulate(data * (g - dot))

    return Tensor._result(data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine.

    Population variance; a constant slice maps to beta (variance clamped by
    eps, so gamma=1, beta=0 yields exactly zero).
    """
    if x.data.shape[-1] != gamma.data.shape[-1] or x.data.shape[-1] != beta.data.shape[-1]:
        raise ShapeError(
            f"layer_norm affine shape {gamma.data.shape} does not match feature dim {x.data.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=reduce_axes))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=reduce_axes))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))

    return Tensor._result(data, (x, gamma, beta), backward)


# -- reductions and reshaping ---------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.data.shape))

    return Tensor._result(data, (x,), backward)


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(gg, x.data.shape))

    return Tensor._result(data, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(lo), int(hi))
                t._accumulate(g[tuple(index)])

    return Tensor._result(data, tuple(tensors), backward)


def narrow(x: Tensor, axis: int, start: int, size: int) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + size)
    index = tuple(index)
    data = x.data[index].copy()

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[index] = g
            x._accumulate(buf)

    return Tensor._result(data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return Tensor._result(data, (x,), backward)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes).copy()
    inverse = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.transpose(g, inverse))

    return Tensor._result(data, (x,), backward)


# -- convolution family -----------------------------------------------------------


def conv2d_1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution: x[C,h,w] with w[O,C] (+ b[O])."""
    if x.data.ndim != 3 or w.data.ndim != 2 or x.data.shape[0] != w.data.shape[1]:
        raise ShapeError(f"conv2d_1x1 channel mismatch: input {x.data.shape}, weight {w.data.shape}")
    data = np.einsum("oc,chw->ohw", w.data, x.data)
    if b is not None:
        data = data + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.einsum("oc,ohw->chw", w.data, g))
        if w.requires_grad:
            w._accumulate(np.einsum("ohw,chw->oc", g, x.data))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2)))

    return Tensor._result(data, parents, backward)


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed convolution, x[C_in,h,w] with w[C_in,C_out,k,k].

    The default 4/2/1 geometry doubles the spatial dimensions exactly:
    out = (h-1)*stride - 2*pad + k.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"deconv2d expects x[C,h,w], w[C_in,C_out,k,k]; got {x.data.shape}, {w.data.shape}")
    if x.data.shape[0] != w.data.shape[0]:
        raise ShapeError(f"deconv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    c_in, h, wd = x.data.shape
    _, c_out, kh, kw = w.data.shape
    out_h = (h - 1) * stride - 2 * pad + kh
    out_w = (wd - 1) * stride - 2 * pad + kw
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"deconv2d output collapses: input {x.data.shape}, kernel {kh}, stride {stride}, pad {pad}")
    full_h = (h - 1) * stride + kh
    full_w = (wd - 1) * stride + kw

    contrib = np.einsum("chw,cokl->oklhw", x.data, w.data)
    full = np.zeros((c_out, full_h, full_w), dtype=contrib.dtype)
    for ki in range(kh):
        for kj in range(kw):
            full[:, ki : ki + stride * h : stride, kj : kj + stride * wd : stride] += contrib[:, ki, kj]
    data = full[:, pad : pad + out_h, pad : pad + out_w].copy()
    if b is not None:
        data = data + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gfull = np.zeros((c_out, full_h, full_w), dtype=g.dtype)
        gfull[:, pad : pad + out_h, pad : pad + out_w] = g
        gathered = np.empty((c_out, kh, kw, h, wd), dtype=g.dtype)
        for ki in range(kh):
            for kj in range(kw):
                gathered[:, ki, kj] = gfull[:, ki : ki + stride * h : stride, kj : kj + stride * wd : stride]
        if x.requires_grad:
            x._accumulate(np.einsum("cokl,oklhw->chw", w.data, gathered))
        if w.requires_grad:
            w._accumulate(np.einsum("chw,oklhw->cokl", x.data, gathered))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2)))

    return Tensor._result(data, parents, backward)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of x[C,h,w].

    Training mode normalizes with the batch statistics and updates the
    running buffers in place (the only stateful forward op).  Eval mode is a
    deterministic affine map built from the running statistics.
    """
    if x.data.ndim != 3 or x.data.shape[0] != gamma.data.shape[0]:
        raise ShapeError(f"batch_norm2d channel mismatch: input {x.data.shape}, gamma {gamma.data.shape}")
    if training:
        mean = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[:, None, None]) * inv[:, None, None]
    data = xhat * gamma.data[:, None, None] + beta.data[:, None, None]

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(1, 2)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(1, 2)))
        if x.requires_grad:
            dxhat = g * gamma.data[:, None, None]
            if training:
                m1 = dxhat.mean(axis=(1, 2), keepdims=True)
                m2 = (dxhat * xhat).mean(axis=(1, 2), keepdims=True)
                x._accumulate(inv[:, None, None] * (dxhat - m1 - xhat * m2))
            else:
                x._accumulate(dxhat * inv[:, None, None])

    return Tensor._result(data, (x, gamma, beta), backward)


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Stochastic depth on a whole branch: identity in eval mode."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("drop_path in training mode needs an explicit rng")
    keep = rng.random() >= rate
    scale = 1.0 / (1.0 - rate) if keep else 0.0
    return mul(x, scale)


# -- parameter bookkeeping ---------------------------------------------------------


@dataclass
class ParamSet:
    """Named parameters plus a trainable mask over the same names."""

    params: dict = field(default_factory=dict)
    trainable: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.params) != set(self.trainable):
            missing = set(self.params) ^ set(self.trainable)
            raise ValueError(f"params and trainable mask disagree on names: {sorted(missing)}")

    def names(self):
        return list(self.params)

    def trainable_names(self):
        return [n for n, on in self.trainable.items() if on]

    def apply_mask(self, mask: dict) -> None:
        """Replace the trainable mask; requires_grad follows the mask."""
        for name in self.params:
            on = bool(mask.get(name, False))
            self.trainable[name] = on
            self.params[name].requires_grad = on

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}


def count_params(paramset: ParamSet, mask_filter: str = "all", group_depth: int = 2) -> dict:
    """Exact parameter counts keyed by dotted name prefix.

    ``mask_filter`` selects all, only trainable, or only frozen entries; the
    returned mapping always carries a ``total`` key.
    """
    if mask_filter not in ("all", "trainable", "frozen"):
        raise ValueError(f"unknown mask_filter {mask_filter!r}")
    counts: dict = {}
    total = 0
    for name, p in paramset.params.items():
        on = paramset.trainable[name]
        if mask_filter == "trainable" and not on:
            continue
        if mask_filter == "frozen" and on:
            continue
        group = ".".join(name.split(".")[:group_depth])
        counts[group] = counts.get(group, 0) + p.size
        total += p.size
    counts["total"] = total
    return counts
