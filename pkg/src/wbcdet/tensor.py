"""Small dense-tensor kernel: layer forward/backward passes and SGD.

Tensors are plain ``numpy.ndarray`` objects in float64. Single images and
feature maps are channel-major ``[C, H, W]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


@dataclass(eq=False)
class Parameter:
    """A trainable array with its gradient accumulator and freeze flag."""

    value: np.ndarray
    frozen: bool = False
    grad: np.ndarray = field(default=None, repr=False)
    velocity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def accumulate(self, g):
        if not self.frozen:
            self.grad += g


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(DTYPE)


# ---------------------------------------------------------------------------
# functional ops


def conv2d(x, weights, bias, stride=1, pad=0):
    """2-D cross-correlation of one ``[C, H, W]`` input with ``[K, C, kh, kw]`` kernels.

    Each output element is accumulated term by term in (c, i, j) order and the
    bias is added last, so results are reproducible against a plain loop.
    """
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    if x.ndim != 3 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] input and [K,C,kh,kw] weights, got {x.shape} and {weights.shape}")
    C, H, W = x.shape
    K, Cw, kh, kw = weights.shape
    if C != Cw:
        raise ShapeError(f"input has {C} channels but weights expect {Cw}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError("kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((K, Ho, Wo), dtype=DTYPE)
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                patch = xp[c, i:i + hs:stride, j:j + ws:stride]
                out += weights[:, c, i, j][:, None, None] * patch[None]
    out += np.asarray(bias, dtype=DTYPE)[:, None, None]
    return out


def conv2d_backward(grad_out, x, weights, stride=1, pad=0):
    """Gradients of :func:`conv2d` w.r.t. input, weights and bias."""
    C, H, W = x.shape
    K, _, kh, kw = weights.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    _, Ho, Wo = grad_out.shape
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    dxp = np.zeros_like(xp)
    dw = np.empty_like(weights)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + hs:stride, j:j + ws:stride]
            dw[:, :, i, j] = np.tensordot(grad_out, patch, axes=([1, 2], [1, 2]))
            dxp[:, i:i + hs:stride, j:j + ws:stride] += np.tensordot(weights[:, :, i, j], grad_out, axes=(0, 0))
    db = grad_out.sum(axis=(1, 2))
    dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
    return dx, dw, db


def max_pool2d(x, window, stride=None):
    """Max pooling over ``[C, H, W]``; returns ``(out, argmax)``.

    ``argmax`` holds flat indices into each channel's ``H*W`` plane. Ties go to
    the first element in row-major window order.
    """
    x = np.asarray(x, dtype=DTYPE)
    stride = window if stride is None else stride
    C, H, W = x.shape
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if window > H or window > W:
        raise ShapeError(f"pool window {window} larger than input {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    rows = np.arange(Ho)[:, None] * stride
    cols = np.arange(Wo)[None, :] * stride
    out = None
    arg = np.zeros((C, Ho, Wo), dtype=np.int64)
    for i in range(window):
        for j in range(window):
            cand = x[:, i:i + hs:stride, j:j + ws:stride]
            flat = (rows + i) * W + (cols + j)
            if out is None:
                out = cand.copy()
                arg[...] = flat
            else:
                better = cand > out
                out = np.where(better, cand, out)
                arg = np.where(better, flat, arg)
    return out, arg


def max_pool2d_backward(grad_out, argmax, input_shape):
    C, H, W = input_shape
    dx = np.zeros((C, H * W), dtype=DTYPE)
    for c in range(C):
        np.add.at(dx[c], argmax[c].ravel(), grad_out[c].ravel())
    return dx.reshape(C, H, W)


def relu(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def fully_connected(x, weights, bias):
    """``weights @ x + bias``; ``x`` may be ``[n]`` or a batch ``[B, n]``."""
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"input length {x.shape[-1]} does not match weight columns {weights.shape}")
    return x @ weights.T + bias


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels, weights=None):
    """Summed cross-entropy of row-wise softmax; returns ``(loss, dlogits)``.

    ``weights`` scales each row's contribution (e.g. ``1/N`` normalizers).
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=DTYPE))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n = logits.shape[0]
    w = np.ones(n, dtype=DTYPE) if weights is None else np.broadcast_to(np.asarray(weights, dtype=DTYPE), (n,))
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-(w * logp[rows, labels]).sum())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad * w[:, None]


def smooth_l1(diff, beta=1.0):
    """Elementwise smooth-L1 summed; returns ``(loss, dloss/ddiff)``."""
    d = np.asarray(diff, dtype=DTYPE)
    ad = np.abs(d)
    small = ad < beta
    loss = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(small, d / beta, np.sign(d))
    return float(loss.sum()), grad


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"

    def parameters(self):
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class BackwardBeforeForward(RuntimeError):
    pass


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=0, rng=None):
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ValueError("kernel >= 1, stride >= 1, padding >= 0 required")
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(glorot_uniform(rng, shape, fan_in, fan_out))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        return conv2d(x, self.weight.value, self.bias.value, self.stride, self.padding)

    def backward(self, grad):
        if self._x is None:
            raise BackwardBeforeForward("conv2d backward called before forward")
        dx, dw, db = conv2d_backward(grad, self._x, self.weight.value, self.stride, self.padding)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        if self._mask is None:
            raise BackwardBeforeForward("relu backward called before forward")
        return np.where(self._mask, grad, 0.0)


class MaxPool2d(Layer):
    kind = "max_pool2d"

    def __init__(self, window=2, stride=None):
        self.window = window
        self.stride = window if stride is None else stride
        self._cache = None

    def forward(self, x):
        out, arg = max_pool2d(x, self.window, self.stride)
        self._cache = (arg, x.shape)
        return out

    def backward(self, grad):
        if self._cache is None:
            raise BackwardBeforeForward("max_pool2d backward called before forward")
        return max_pool2d_backward(grad, *self._cache)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(-1)

    def backward(self, grad):
        if self._shape is None:
            raise BackwardBeforeForward("flatten backward called before forward")
        return grad.reshape(self._shape)


class Linear(Layer):
    """Fully connected layer; accepts ``[n]`` or batched ``[B, n]`` inputs."""

    kind = "fully_connected"

    def __init__(self, in_features, out_features, rng=None, zero=False):
        rng = np.random.default_rng(0) if rng is None else rng
        shape = (out_features, in_features)
        w = np.zeros(shape) if zero else glorot_uniform(rng, shape, in_features, out_features)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = np.asarray(x, dtype=DTYPE)
        return fully_connected(self._x, self.weight.value, self.bias.value)

    def backward(self, grad):
        if self._x is None:
            raise BackwardBeforeForward("fully_connected backward called before forward")
        x2 = self._x.reshape(-1, self._x.shape[-1])
        g2 = grad.reshape(-1, grad.shape[-1])
        self.weight.accumulate(g2.T @ x2)
        self.bias.accumulate(g2.sum(axis=0))
        return grad @ self.weight.value


class Softmax(Layer):
    kind = "softmax"

    def __init__(self):
        self._y = None

    def forward(self, x):
        self._y = softmax(x)
        return self._y

    def backward(self, grad):
        if self._y is None:
            raise BackwardBeforeForward("softmax backward called before forward")
        y = self._y
        return y * (grad - (grad * y).sum(axis=-1, keepdims=True))


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, *layers):
        self.layers = list(layers)
        self._ran_forward = False

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        self._ran_forward = True
        return x

    def backward(self, grad):
        if not self._ran_forward:
            raise BackwardBeforeForward("backward called before any forward pass")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def backprop(network: Sequential, grad_output):
    """Run the backward pass of ``network``, populating unfrozen gradients.

    Returns the gradient with respect to the network input.
    """
    return network.backward(np.asarray(grad_output, dtype=DTYPE))


def sgd_update(params, learning_rate: float, momentum: float = 0.0):
    """SGD step on unfrozen parameters, then clear all gradients.

    With ``momentum > 0`` a per-parameter velocity ``v <- momentum*v + grad``
    is kept and the step is ``-learning_rate * v``.
    """
    for p in params:
        if not p.frozen and learning_rate != 0.0:
            if momentum:
                if p.velocity is None:
                    p.velocity = np.zeros_like(p.value)
                p.velocity *= momentum
                p.velocity += p.grad
                p.value -= learning_rate * p.velocity
            else:
                p.value -= learning_rate * p.grad
        p.zero_grad()


def reset_velocity(params):
    for p in params:
        p.velocity = None


def set_frozen(params, frozen: bool):
    for p in params:
        p.frozen = frozen
        p.zero_grad()
