"""Minimal deterministic CNN building blocks on numpy.

Exactly the layer set the baseline architecture needs: bias-free 2-d
convolution (grouped, strided, same-padded), batch norm, ReLU, 2x2 max
pooling, global average pooling, a dense classifier head, softmax and
cross-entropy, the ADAM update, and the cosine restart schedule.

Forward passes cache what backward needs; backward accumulates gradients on
Parameter objects. Storage is float32 during training; every op preserves its
input dtype, so gradient checking can run the same code in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided


class GradientError(Exception):
    """Backward called before forward, or a step taken with missing gradients."""


@dataclass
class Parameter:
    """Weight tensor with its gradient and ADAM moment buffers."""

    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray | None = None
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g


def _out_and_pad(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


class Conv2d:
    """Bias-free 2-d convolution, same padding, square kernel, optional groups.

    Output spatial size is ceil(input / stride). Groups partition input and
    output channels into independent convolutions.
    """

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, groups=1, *, rng=None, dtype=np.float32, name="conv"):
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"groups={groups} must divide in_ch={in_ch} and out_ch={out_ch}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.in_ch, self.out_ch, self.kernel, self.stride, self.groups = in_ch, out_ch, kernel, stride, groups
        fan_in = (in_ch // groups) * kernel * kernel
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch // groups, kernel, kernel))
        self.weight = Parameter(f"{name}.weight", w.astype(dtype))
        self._cache = None

    def params(self):
        return [self.weight]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {c}")
        k, s, g = self.kernel, self.stride, self.groups
        ho, pt, pb = _out_and_pad(h, k, s)
        wo, pl, pr = _out_and_pad(w, k, s)
        xpad = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        st = xpad.strides
        view = as_strided(
            xpad,
            shape=(n, c, k, k, ho, wo),
            strides=(st[0], st[1], st[2], st[3], st[2] * s, st[3] * s),
        )
        out = np.empty((n, self.out_ch, ho, wo), dtype=x.dtype)
        cg, fg = c // g, self.out_ch // g
        cols = []
        for gi in range(g):
            ci, fi = slice(gi * cg, (gi + 1) * cg), slice(gi * fg, (gi + 1) * fg)
            # im2col copy, kept for the weight gradient in backward
            col = view[:, ci].transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, cg * k * k)
            wmat = self.weight.value[fi].reshape(fg, cg * k * k)
            out[:, fi] = (col @ wmat.T).reshape(n, ho, wo, fg).transpose(0, 3, 1, 2)
            cols.append(col)
        self._cache = (cols, x.shape, xpad.shape, (pt, pl), (ho, wo))
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise GradientError("backward before forward")
        cols, xshape, padshape, (pt, pl), (ho, wo) = self._cache
        n, c, h, w = xshape
        k, s, g = self.kernel, self.stride, self.groups
        cg, fg = c // g, self.out_ch // g

        dw = np.empty_like(self.weight.value)
        # accumulate dx channels-last so the shifted adds stay cache-friendly
        dxpad = np.zeros((n, padshape[2], padshape[3], c), dtype=dout.dtype)
        for gi in range(g):
            ci, fi = slice(gi * cg, (gi + 1) * cg), slice(gi * fg, (gi + 1) * fg)
            wmat = self.weight.value[fi].reshape(fg, cg * k * k)
            dout2 = dout[:, fi].transpose(0, 2, 3, 1).reshape(n * ho * wo, fg)
            dw[fi] = (dout2.T @ cols[gi]).reshape(fg, cg, k, k)
            dcol = (dout2 @ wmat).reshape(n, ho, wo, cg, k, k)
            for ki in range(k):
                for kj in range(k):
                    dxpad[:, ki : ki + s * ho : s, kj : kj + s * wo : s, ci] += dcol[:, :, :, :, ki, kj]
        self.weight.accumulate(dw)
        dx = np.empty((n, c, h, w), dtype=dout.dtype)
        dx[:] = dxpad[:, pt : pt + h, pl : pl + w, :].transpose(0, 3, 1, 2)
        return dx


class BatchNorm2d:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and folds them into the
    running estimates (running <- momentum * running + (1 - momentum) * batch,
    biased variance); infer mode uses the running estimates only. The running
    stats are non-trainable Parameters so checkpoints carry them.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.9, *, dtype=np.float32, name="bn"):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = Parameter(f"{name}.running_mean", np.zeros(channels, dtype=dtype), trainable=False)
        self.running_var = Parameter(f"{name}.running_var", np.ones(channels, dtype=dtype), trainable=False)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            mom = self.momentum
            self.running_mean.value[:] = mom * self.running_mean.value + (1 - mom) * mean
            self.running_var.value[:] = mom * self.running_var.value + (1 - mom) * var
        else:
            mean = self.running_mean.value
            var = self.running_var.value
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return self.gamma.value[None, :, None, None] * xhat + self.beta.value[None, :, None, None]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise GradientError("backward before forward")
        xhat, inv_std, train = self._cache
        self.gamma.accumulate((dout * xhat).sum(axis=(0, 2, 3)))
        self.beta.accumulate(dout.sum(axis=(0, 2, 3)))
        dxhat = dout * self.gamma.value[None, :, None, None]
        if not train:
            return dxhat * inv_std[None, :, None, None]
        n, _, h, w = dout.shape
        m = n * h * w
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv_std[None, :, None, None] / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise GradientError("backward before forward")
        return dout * self._mask


class Identity:
    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout


class MaxPool2x2:
    """2x2 max pooling, stride 2. Rejects odd spatial sizes; ties route the
    gradient to the first maximum in window order."""

    def __init__(self):
        self._cache = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max_pool_2x2 requires even spatial dims, got {h}x{w}")
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise GradientError("backward before forward")
        idx, (n, c, h, w) = self._cache
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


class GlobalAvgPool:
    """Collapse (N, C, H, W) to (N, C) by the per-channel spatial mean."""

    def __init__(self):
        self._hw = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._hw = x.shape[2:]
        return x.mean(axis=(2, 3))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._hw is None:
            raise GradientError("backward before forward")
        h, w = self._hw
        return np.broadcast_to(dout[:, :, None, None] / (h * w), dout.shape + (h, w)).copy()


class Dense:
    def __init__(self, in_dim, out_dim, *, rng=None, dtype=np.float32, name="fc"):
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, math.sqrt(2.0 / in_dim), size=(in_dim, out_dim))
        self.weight = Parameter(f"{name}.weight", w.astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim, dtype=dtype))
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise GradientError("backward before forward")
        self.weight.accumulate(self._x.T @ dout)
        self.bias.accumulate(dout.sum(axis=0))
        return dout @ self.weight.value.T


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with log-sum-exp stabilization; rows sum to 1."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean of -ln(p[label] + 1e-12) over the batch."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(f"label out of range for {probs.shape[1]} classes")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(picked + 1e-12).mean())


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Fused loss path: returns (loss, probs, dloss/dlogits)."""
    probs = softmax(logits)
    loss = cross_entropy(probs, labels)
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits /= len(labels)
    return loss, probs, dlogits.astype(logits.dtype)


def softmax_backward(probs: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Standalone softmax Jacobian product (for checks; training uses the fused path)."""
    inner = (dout * probs).sum(axis=1, keepdims=True)
    return probs * (dout - inner)


def adam_step(params, lr, beta1=0.9, beta2=0.999, epsilon=1e-8, *, t):
    """Bias-corrected ADAM update on the trainable parameters.

    t is the 1-based global step index. Raises GradientError if a trainable
    parameter has no gradient.
    """
    if t < 1:
        raise ValueError(f"step index t must be >= 1, got {t}")
    for p in params:
        if not p.trainable:
            continue
        if p.grad is None:
            raise GradientError(f"parameter {p.name} has no gradient")
        g = p.grad
        p.adam_m[:] = beta1 * p.adam_m + (1 - beta1) * g
        p.adam_v[:] = beta2 * p.adam_v + (1 - beta2) * (g * g)
        m_hat = p.adam_m / (1 - beta1**t)
        v_hat = p.adam_v / (1 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + epsilon)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.001
    cycle_epochs: int = 10

    def __post_init__(self):
        if self.cycle_epochs < 1:
            raise ValueError("cycle_epochs must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def cosine_lr(epoch: int, sched: LrSchedule) -> float:
    """Cosine annealing with warm restarts every cycle_epochs.

    Starts each cycle at base_lr and decays toward (but never reaching) zero;
    epoch is 0-based within the run.
    """
    phase = (epoch % sched.cycle_epochs) / sched.cycle_epochs
    return (sched.base_lr / 2.0) * (math.cos(math.pi * phase) + 1.0)
