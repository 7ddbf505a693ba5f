"""Minimal neural-network layers on numpy with explicit backward passes.

Parameters are float64 throughout so that finite-difference gradient
checks are meaningful. Each layer caches whatever its backward pass
needs during forward; caches are single-use and overwritten on the next
forward call. Convolutions route through :mod:`forgetnot.kernels`, which
picks the numba or numpy backend at import time.
"""

import numpy as np
from scipy import special

from . import kernels


def trunc_normal(shape, std, rng):
    """Normal(0, std) resampled to lie within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Module:
    """Base class: parameter registry ordered by insertion.

    Parameters and submodules share one ordering, so a model can place a
    parameter block after all its children (the classifier head relies on
    this to keep flat indices stable when it grows).
    """

    def __init__(self):
        self._params = {}
        self._grads = {}
        self._children = {}
        self._order = []

    def add_param(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        self._order.append(("param", name))
        return value

    def add_module(self, name, module):
        self._children[name] = module
        self._order.append(("module", name))
        return module

    def replace_param(self, name, value):
        """Swap a registered parameter for a new array (same name/position)."""
        value = np.asarray(value, dtype=np.float64)
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def named_parameters(self, prefix=""):
        for kind, name in self._order:
            if kind == "param":
                yield prefix + name, self._params[name]
            else:
                yield from self._children[name].named_parameters(prefix + name + ".")

    def named_grads(self, prefix=""):
        for kind, name in self._order:
            if kind == "param":
                yield prefix + name, self._grads[name]
            else:
                yield from self._children[name].named_grads(prefix + name + ".")

    def zero_grad(self):
        for g in self._grads.values():
            g[...] = 0.0
        for child in self._children.values():
            child.zero_grad()

    # flat-vector view used by optimizers, EWC, and checkpoints
    def param_index(self):
        """Stable map name -> (offset, shape) into the flat vector."""
        index = {}
        offset = 0
        for name, value in self.named_parameters():
            index[name] = (offset, value.shape)
            offset += value.size
        return index

    def num_params(self):
        return sum(v.size for _, v in self.named_parameters())

    def flat_params(self):
        return np.concatenate([v.ravel() for _, v in self.named_parameters()]) \
            if self.num_params() else np.zeros(0)

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for _, value in self.named_parameters():
            n = value.size
            value[...] = flat[offset:offset + n].reshape(value.shape)
            offset += n
        if offset != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, model has {offset}")

    def flat_grads(self):
        return np.concatenate([g.ravel() for _, g in self.named_grads()]) \
            if self.num_params() else np.zeros(0)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, init_std=0.02, zero_init=False):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = trunc_normal((d_in, d_out), init_std, rng)
        self.w = self.add_param("w", w)
        self.b = self.add_param("b", np.zeros(d_out))

    def forward(self, x):
        self._x = x
        return x @ self.w + self.b

    def backward(self, dy):
        x2 = self._x.reshape(-1, self.w.shape[0])
        dy2 = dy.reshape(-1, self.w.shape[1])
        self._grads["w"] += x2.T @ dy2
        self._grads["b"] += dy2.sum(axis=0)
        return dy @ self.w.T


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.g = self.add_param("g", np.ones(dim))
        self.b = self.add_param("b", np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = xc * self._inv
        return self.g * self._xhat + self.b

    def backward(self, dy):
        xhat, inv = self._xhat, self._inv
        n = xhat.shape[-1]
        axes = tuple(range(dy.ndim - 1))
        self._grads["g"] += (dy * xhat).sum(axis=axes)
        self._grads["b"] += dy.sum(axis=axes)
        dxhat = dy * self.g
        term = dxhat.sum(axis=-1, keepdims=True) + xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        return inv * (dxhat - term / n)


class Gelu(Module):
    """Exact (erf) GELU."""

    def forward(self, x):
        self._x = x
        return 0.5 * x * (1.0 + special.erf(x / np.sqrt(2.0)))

    def backward(self, dy):
        x = self._x
        cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return dy * (cdf + x * pdf)


class Silu(Module):
    def forward(self, x):
        self._s = 1.0 / (1.0 + np.exp(-x))
        self._x = x
        return x * self._s

    def backward(self, dy):
        s, x = self._s, self._x
        return dy * (s * (1.0 + x * (1.0 - s)))


class Dropout(Module):
    """Inverted dropout; identity when rate == 0 or not training."""

    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x, rng=None, training=False):
        if not training or self.rate <= 0.0 or rng is None:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class Embedding(Module):
    def __init__(self, count, dim, rng, init_std=0.02):
        super().__init__()
        self.table = self.add_param("table", trunc_normal((count, dim), init_std, rng))

    def forward(self, idx):
        self._idx = np.asarray(idx, dtype=np.int64)
        return self.table[self._idx]

    def backward(self, dy):
        np.add.at(self._grads["table"], self._idx, dy)
        return None


class MultiHeadAttention(Module):
    """Standard multi-head self-attention.

    With mask_first_self=True the first token (a [CLS] readout) cannot
    attend to itself, so its output always aggregates the other tokens;
    this closes a degenerate shortcut where a readout token that only
    attends to itself makes the extracted feature input-independent.
    """

    def __init__(self, dim, heads, rng, init_std=0.02, mask_first_self=False):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.d_head = dim // heads
        self.scale = self.d_head ** -0.5
        self.mask_first_self = mask_first_self
        self.qkv = self.add_module("qkv", Linear(dim, 3 * dim, rng, init_std))
        self.proj = self.add_module("proj", Linear(dim, dim, rng, init_std))

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, n, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)

    def forward(self, x):
        b, n, dim = x.shape
        qkv = self.qkv.forward(x)
        q = self._split(qkv[..., :dim])
        k = self._split(qkv[..., dim:2 * dim])
        v = self._split(qkv[..., 2 * dim:])
        s = (q @ k.transpose(0, 1, 3, 2)) * self.scale
        if self.mask_first_self:
            s[:, :, 0, 0] = -1e30
        s -= s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=-1, keepdims=True)
        self._q, self._k, self._v, self._a = q, k, v, a
        return self.proj.forward(self._merge(a @ v))

    def backward(self, dy):
        do = self._split(self.proj.backward(dy))
        q, k, v, a = self._q, self._k, self._v, self._a
        dv = a.transpose(0, 1, 3, 2) @ do
        da = do @ v.transpose(0, 1, 3, 2)
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        ds *= self.scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([self._merge(dq), self._merge(dk), self._merge(dv)], axis=-1)
        return self.qkv.backward(dqkv)


class Conv2d(Module):
    """Square-kernel, stride-1 convolution on NCHW tensors."""

    def __init__(self, c_in, c_out, kernel, pad, rng, init_std=None, zero_init=False):
        super().__init__()
        if init_std is None:
            init_std = 1.0 / np.sqrt(c_in * kernel * kernel)
        if zero_init:
            w = np.zeros((c_out, c_in, kernel, kernel))
        else:
            w = rng.normal(0.0, init_std, size=(c_out, c_in, kernel, kernel))
        self.w = self.add_param("w", w)
        self.b = self.add_param("b", np.zeros(c_out))
        self.pad = pad

    def forward(self, x):
        self._x = x
        return kernels.conv2d_forward(x, self.w, self.b, self.pad)

    def backward(self, dy):
        dy = np.ascontiguousarray(dy)
        dw, db = kernels.conv2d_backward_weights(dy, self._x, self.w.shape, self.pad)
        self._grads["w"] += dw
        self._grads["b"] += db
        return kernels.conv2d_backward_input(dy, self.w, self._x.shape, self.pad)


class GroupNorm(Module):
    def __init__(self, groups, channels, eps=1e-5):
        super().__init__()
        if channels % groups:
            raise ValueError("channels must be divisible by groups")
        self.groups = groups
        self.g = self.add_param("g", np.ones(channels))
        self.b = self.add_param("b", np.zeros(channels))
        self.eps = eps

    def forward(self, x):
        b, c, h, w = x.shape
        xg = x.reshape(b, self.groups, c // self.groups, h, w)
        mu = xg.mean(axis=(2, 3, 4), keepdims=True)
        xc = xg - mu
        var = (xc * xc).mean(axis=(2, 3, 4), keepdims=True)
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = xc * self._inv
        y = self._xhat.reshape(b, c, h, w)
        return y * self.g[None, :, None, None] + self.b[None, :, None, None]

    def backward(self, dy):
        b, c, h, w = dy.shape
        xhat_f = self._xhat.reshape(b, c, h, w)
        self._grads["g"] += (dy * xhat_f).sum(axis=(0, 2, 3))
        self._grads["b"] += dy.sum(axis=(0, 2, 3))
        dxhat = (dy * self.g[None, :, None, None]).reshape(b, self.groups, c // self.groups, h, w)
        xhat = self._xhat
        n = xhat.shape[2] * h * w
        term = dxhat.sum(axis=(2, 3, 4), keepdims=True) \
            + xhat * (dxhat * xhat).sum(axis=(2, 3, 4), keepdims=True)
        dx = self._inv * (dxhat - term / n)
        return dx.reshape(b, c, h, w)


class AvgPool2(Module):
    def forward(self, x):
        b, c, h, w = x.shape
        self._shape = x.shape
        return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, dy):
        b, c, h, w = self._shape
        return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0


class UpsampleNearest2(Module):
    def forward(self, x):
        self._shape = x.shape
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def backward(self, dy):
        b, c, h, w = self._shape
        return dy.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps, shape [len(t), dim]."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def sigmoid_bce(logits, labels):
    """Mean per-class binary cross-entropy against one-hot targets."""
    n, c = logits.shape
    targets = np.zeros((n, c))
    targets[np.arange(n), labels] = 1.0
    # numerically stable BCE-with-logits
    loss = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    probs = 1.0 / (1.0 + np.exp(-logits))
    return loss.mean(), (probs - targets) / (n * c)


class AdamW:
    """Decoupled weight-decay Adam over a module's flat parameter vector."""

    def __init__(self, model, lr=3e-4, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.model = model
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        n = model.num_params()
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, extra_grad=None):
        g = self.model.flat_grads()
        if extra_grad is not None:
            g = g + extra_grad
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        p = self.model.flat_params()
        p -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)
        self.model.set_flat_params(p)
