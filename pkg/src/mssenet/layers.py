"""Neural building blocks shared by the fusion block and the temporal stack."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ConfigurationError,
    DimensionError,
    Rng,
    Tensor,
    add,
    matmul,
    mean,
    mul,
    relu,
    sigmoid,
    sub,
)
from . import numerics as nx


def se_hidden_width(channels: int, ratio: int) -> int:
    """Bottleneck width of an SE block; never below one unit."""
    if ratio < 1:
        raise ConfigurationError(f"SE reduction ratio must be >= 1, got {ratio}")
    return max(1, channels // ratio)


@dataclass
class SeParams:
    """Bias-free bottleneck weights of a squeeze-and-excitation block.

    ``W1`` maps the channel descriptor to the hidden layer and ``W2`` maps it
    back; both are stored in the orientation used by the gate formula
    (``s = sigmoid(W2 @ relu(W1 @ z))``).
    """

    W1: Tensor
    W2: Tensor
    r: int

    @property
    def channels(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def init(cls, channels: int, r: int, rng: Rng, dtype=np.float64) -> "SeParams":
        hidden = se_hidden_width(channels, r)
        W1 = rng.normal((hidden, channels), np.sqrt(2.0 / channels)).astype(dtype)
        W2 = rng.normal((channels, hidden), np.sqrt(1.0 / hidden)).astype(dtype)
        return cls(Tensor(W1, requires_grad=True), Tensor(W2, requires_grad=True), r)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("batch norm epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ConfigurationError("running variance must be non-negative")

    @classmethod
    def init(cls, channels: int, dtype=np.float64, momentum=0.9, epsilon=1e-5) -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


@dataclass(frozen=True)
class DropoutSpec:
    rate: float
    axis: str = field(default="channel")

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.axis != "channel":
            raise ConfigurationError("only channel-wise dropout is supported")


def se_forward(u: Tensor, p: SeParams) -> tuple[Tensor, Tensor]:
    """Squeeze-and-excitation over the last extent of ``u``.

    ``u`` is ``[H, W, C]`` or batched ``[B, H, W, C]``.  Returns the rescaled
    map and the gates ``s`` (``[C]`` or ``[B, C]``).
    """
    if u.shape[-1] != p.channels:
        raise DimensionError(f"SE block built for {p.channels} channels, got {u.shape[-1]}")
    z = mean(u, axis=(-3, -2))
    hidden = relu(matmul(z, nx.transpose(p.W1, (1, 0))))
    s = sigmoid(matmul(hidden, nx.transpose(p.W2, (1, 0))))
    gate = nx.reshape(s, s.shape[:-1] + (1, 1, s.shape[-1]))
    return mul(u, gate), s


def dropout_mask(shape, spec: DropoutSpec, rng: Rng, dtype=np.float64, batched=True) -> np.ndarray:
    """Channel mask for ``x`` of ``shape``: one draw per (sample, channel).

    With ``batched`` the leading extent indexes samples, otherwise the whole
    array is a single sample.
    """
    keep = 1.0 - spec.rate
    if batched and len(shape) >= 2:
        mshape = (shape[0],) + (1,) * (len(shape) - 2) + (shape[-1],)
    else:
        mshape = (1,) * (len(shape) - 1) + (shape[-1],)
    draws = rng.uniform(mshape)
    return np.where(draws < keep, 1.0 / keep, 0.0).astype(dtype)


def spatial_dropout(x: Tensor, spec: DropoutSpec, rng: Rng | None, training: bool,
                    batched: bool = True) -> Tensor:
    """Zero whole channels with probability ``spec.rate``; inverted scaling."""
    if not training or spec.rate == 0.0:
        return x
    return mul(x, Tensor(dropout_mask(x.shape, spec, rng, x.dtype, batched)))


def batch_norm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Per-channel normalisation over every extent except the last.

    In training mode the running statistics are updated in place with
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    C = x.shape[-1]
    if p.gamma.shape != (C,):
        raise DimensionError(f"batch norm built for {p.gamma.shape[0]} channels, got {C}")
    if training:
        out, mu, var = nx.batch_normalize(x, p.gamma, p.beta, p.epsilon)
        m = p.momentum
        p.running_mean[...] = m * p.running_mean + (1 - m) * mu
        p.running_var[...] = m * p.running_var + (1 - m) * var
        return out
    else:
        scale = 1.0 / np.sqrt(p.running_var + p.epsilon)
        xhat = mul(sub(x, p.running_mean.astype(x.dtype)), scale.astype(x.dtype))
    return add(mul(xhat, p.gamma), p.beta)


def global_temporal_pool(x: Tensor) -> Tensor:
    """Mean over the frame extent of ``[T, C]`` (or ``[B, T, C]``)."""
    if x.ndim < 2 or x.shape[-2] == 0:
        raise DimensionError("global temporal pooling needs at least one frame")
    return mean(x, axis=-2)


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map ``W @ x + b`` with ``W`` stored as ``[K, C]``."""
    if W.shape[1] != x.shape[-1] or b.shape != (W.shape[0],):
        raise DimensionError(f"dense: x {x.shape}, W {W.shape}, b {b.shape}")
    return add(matmul(x, nx.transpose(W, (1, 0))), b)


def softmax(logits: Tensor) -> Tensor:
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return nx._result(out, (logits,), backward)


def dense_softmax(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return softmax(dense(x, W, b))
