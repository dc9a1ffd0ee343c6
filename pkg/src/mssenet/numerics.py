"""Small dense-tensor engine with reverse-mode differentiation.

Every op works on :class:`numpy.ndarray` storage and records a closure that
pushes the upstream gradient back to its inputs.  Only the operations the
network needs are provided; they are deliberately coarse (a whole
convolution is one node) so graphs stay small.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand extents do not agree."""


class ConfigurationError(ValueError):
    """An op was asked for an impossible configuration."""


class EvaluationError(ArithmeticError):
    """A function under evaluation produced a non-finite value."""


class Rng:
    """Seeded random stream.

    Wraps a PCG64 generator, whose draw sequence is specified independently
    of platform, so a seed pins every mask and permutation.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, offset: int) -> "Rng":
        return Rng(self.seed + int(offset))

    def copy(self) -> "Rng":
        clone = Rng(self.seed)
        clone.generator.bit_generator.state = self.generator.bit_generator.state
        return clone

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def normal(self, shape, scale=1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


class Tensor:
    """Dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Propagate gradients from this tensor to every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tracked = any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    out._parents = tuple(parents) if tracked else ()
    out._backward = backward if tracked else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        return (np.where(out > 0, g, 0),)

    return _result(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward)


def clip_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor

    def backward(g):
        return (g * keep,)

    return _result(np.maximum(a.data, floor), (a,), backward)


# ---------------------------------------------------------------- reductions / shape

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = tuple(range(a.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    axes = tuple(ax % a.ndim for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise DimensionError("mean over an empty extent")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _result(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _result(a.data.transpose(axes), (a,), backward)


def flip(a: Tensor, axis: int) -> Tensor:
    def backward(g):
        return (np.flip(g, axis),)

    return _result(np.flip(a.data, axis).copy(), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def index(a: Tensor, idx) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading extents of ``a`` are treated as batch rows."""
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def conv2d_same(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Zero-padded 2D cross-correlation over the two extents before channels.

    ``x`` is ``[..., H, W, Cin]`` and ``kernels`` ``[kh, kw, Cin, Cout]``;
    any leading extents are batch.  Odd kernel extents keep ``H x W``.
    """
    kh, kw, cin, cout = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d_same needs odd kernel extents, got {kh}x{kw}")
    if x.ndim < 3 or x.shape[-1] != cin:
        raise DimensionError(f"conv2d_same: input {x.shape} vs kernel {kernels.shape}")
    H, W = x.shape[-3], x.shape[-2]
    ph, pw = kh // 2, kw // 2
    lead = x.shape[:-3]
    xp = np.pad(x.data, [(0, 0)] * len(lead) + [(ph, ph), (pw, pw), (0, 0)])
    # patches[..., h, w, cin, i, j] == xp[..., h + i, w + j, cin]
    patches = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(-3, -2))
    cols = patches.transpose(tuple(range(len(lead))) + (-5, -4, -2, -1, -3)).reshape(-1, kh * kw * cin)
    K = kernels.data.reshape(kh * kw * cin, cout)
    out = (cols @ K).reshape(lead + (H, W, cout))
    parents = [x, kernels]
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d_same: bias {bias.shape} vs {cout} output channels")
        out += bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gK = (cols.T @ g2).reshape(kernels.shape)
        gcols = (g2 @ K.T).reshape(lead + (H, W, kh, kw, cin))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[..., i:i + H, j:j + W, :] += gcols[..., i, j, :]
        grads = [gxp[..., ph:ph + H, pw:pw + W, :], gK]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out, parents, backward)


def conv1d_causal_dilated(x: Tensor, kernels: Tensor, dilation: int, bias: Tensor | None = None) -> Tensor:
    """Causal dilated 1D cross-correlation over the extent before channels.

    ``x`` is ``[..., T, Cin]`` and ``kernels`` ``[k, Cin, Cout]``.  Tap ``a``
    reads frame ``t - (k - 1 - a) * dilation``, so the last tap is the
    current frame and nothing after ``t`` is ever read.
    """
    if dilation < 1 or int(dilation) != dilation:
        raise ConfigurationError(f"dilation must be a positive integer, got {dilation}")
    k, cin, cout = kernels.shape
    if x.ndim < 2 or x.shape[-1] != cin:
        raise DimensionError(f"conv1d_causal_dilated: input {x.shape} vs kernel {kernels.shape}")
    T = x.shape[-2]
    pad = (k - 1) * dilation
    lead = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x.data, lead + [(pad, 0), (0, 0)])
    K = kernels.data
    out = np.zeros(x.shape[:-1] + (cout,), dtype=np.result_type(x.dtype, K.dtype))
    for a in range(k):
        s = a * dilation
        out += xp[..., s:s + T, :] @ K[a]
    parents = [x, kernels]
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv1d_causal_dilated: bias {bias.shape} vs {cout} outputs")
        out += bias.data
        parents.append(bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gK = np.zeros_like(K)
        g2 = g.reshape(-1, cout)
        for a in range(k):
            s = a * dilation
            gK[a] = xp[..., s:s + T, :].reshape(-1, cin).T @ g2
            gxp[..., s:s + T, :] += g @ K[a].T
        grads = [gxp[..., pad:, :], gK]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out, parents, backward)


def avgpool2x2_upsample(x: Tensor) -> Tensor:
    """2x2 average pooling followed by nearest-neighbour upsampling back to shape.

    Operates on ``[..., H, W, C]``.  Odd trailing rows/columns form partial
    blocks averaged over their real members only.
    """
    H, W = x.shape[-3], x.shape[-2]
    Hp, Wp = H + H % 2, W + W % 2
    lead = [(0, 0)] * (x.ndim - 3)
    pads = lead + [(0, Hp - H), (0, Wp - W), (0, 0)]
    count = np.pad(np.ones((H, W)), [(0, Hp - H), (0, Wp - W)])
    count = count.reshape(Hp // 2, 2, Wp // 2, 2).sum(axis=(1, 3))[..., None]

    def pool(v):
        vp = np.pad(v, pads)
        blocks = vp.reshape(vp.shape[:-3] + (Hp // 2, 2, Wp // 2, 2, v.shape[-1]))
        return blocks.sum(axis=(-4, -2)) / count

    def up(p):
        return np.repeat(np.repeat(p, 2, axis=-3), 2, axis=-2)[..., :H, :W, :]

    out = up(pool(x.data)).astype(x.dtype)

    def backward(g):
        return (up(pool(g)),)

    return _result(out, (x,), backward)


def batch_normalize(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalise by batch statistics over all extents but the last, then scale/shift.

    Returns the output with the batch mean and (biased) variance so callers
    can maintain running estimates.
    """
    C = x.shape[-1]
    x2 = x.data.reshape(-1, C)
    n = x2.shape[0]
    mu = x2.mean(axis=0)
    centered = x2 - mu
    var = np.einsum("ij,ij->j", centered, centered) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, C)
        gbeta = g2.sum(axis=0)
        ggamma = np.einsum("ij,ij->j", g2, xhat)
        gx = (gamma.data * inv / n) * (n * g2 - gbeta - xhat * ggamma)
        return gx.reshape(x.shape), ggamma, gbeta

    return _result(out.astype(x.dtype), (x, gamma, beta), backward), mu, var


# ---------------------------------------------------------------- verification

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``f`` takes no arguments and must read ``params`` by reference; it has to
    be deterministic.  Returns the max over all parameter entries of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("grad_check: f is not finite at the base point")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise EvaluationError("grad_check: f is not finite near the base point")
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        p.zero_grad()
    return worst
