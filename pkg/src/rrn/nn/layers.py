"""Layers with explicit reverse-mode gradients.

Every layer works on stacks of independent networks: activations have shape
``(units, batch, features)`` and parameters carry a leading ``units`` axis,
so one ``Linear(19, 64, units=20)`` is twenty separate fully connected
layers evaluated with a single batched matmul.

``forward`` caches what ``backward`` needs; ``backward`` consumes the cache,
accumulates parameter gradients and returns the gradient w.r.t. the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, StateError

TRAIN = "train"
EVAL = "eval"

# Polynomial fit of the Gaussian-dropout KL term (Kingma et al., 2015).
_KL_C1, _KL_C2, _KL_C3 = 1.16145124, -1.50204118, 0.58629921


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _check_input(layer, x, units, dim):
    if x.ndim != 3 or x.shape[0] != units or x.shape[2] != dim:
        raise ShapeError(
            f"{type(layer).__name__}: expected input shape ({units}, batch, {dim}), got {x.shape}"
        )


def _need_rng(rng):
    if rng is None:
        raise StateError("a stochastic layer in train mode needs an rng")
    return rng


class Layer:
    """Base class; leaf layers override the hooks below."""

    _cache = None

    def forward(self, x, mode=TRAIN, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def named_params(self, prefix=""):
        return []

    def named_buffers(self, prefix=""):
        return []

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def regularizer(self) -> float:
        return 0.0

    def regularizer_backward(self, scale: float):
        pass

    def spec(self) -> dict:
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache


def targeted_mask(weights, gamma, alpha, rng, per_unit=False):
    """Keep-mask for targeted dropout.

    The ``floor(gamma * size)`` smallest-magnitude weights form the target
    set; each of them is dropped independently with probability ``alpha``.
    With ``per_unit`` the leading axis indexes independent weight tensors,
    each with its own target set.
    """
    w = np.asarray(weights)
    lead = w.shape[0] if per_unit else 1
    flat = np.abs(w).reshape(lead, -1)
    k = int(math.floor(gamma * flat.shape[1]))
    keep = np.ones(flat.shape, dtype=bool)
    if k > 0 and alpha > 0:
        order = np.argsort(flat, axis=1, kind="stable")[:, :k]
        target = np.zeros(flat.shape, dtype=bool)
        np.put_along_axis(target, order, True, axis=1)
        drop = rng.random(flat.shape) < alpha
        keep = ~(target & drop)
    return keep.reshape(w.shape)


def dropout_targeted(weights, gamma, alpha, rng):
    """Apply targeted dropout to a whole weight tensor."""
    w = np.asarray(weights, dtype=np.float64)
    return w * targeted_mask(w, gamma, alpha, rng)


def gaussian_dropout_kl(log_alpha) -> np.ndarray:
    """Approximate KL of a Gaussian-dropout posterior, per noised value.

    ``alpha`` is clipped to (0, 1] where the polynomial fit is valid; the
    offset makes the penalty vanish at ``alpha = 1``.
    """
    la = np.minimum(np.asarray(log_alpha, dtype=np.float64), 0.0)
    a = np.exp(la)
    neg_kl = 0.5 * la + _KL_C1 * a + _KL_C2 * a**2 + _KL_C3 * a**3
    return (_KL_C1 + _KL_C2 + _KL_C3) - neg_kl


def _gaussian_dropout_kl_grad(log_alpha):
    la = np.asarray(log_alpha, dtype=np.float64)
    a = np.exp(np.minimum(la, 0.0))
    d = -(0.5 + _KL_C1 * a + 2 * _KL_C2 * a**2 + 3 * _KL_C3 * a**3)
    return np.where(la < 0.0, d, 0.0)


def dropout_variational(x, log_alpha, rng, mode=TRAIN):
    """Multiply ``x`` by noise drawn from N(1, alpha); return (values, KL).

    In eval mode the posterior mean is used, i.e. ``x`` is returned as is.
    """
    _check_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    kl = float(np.sum(gaussian_dropout_kl(log_alpha)) * x.shape[-1])
    if mode == EVAL:
        return x.copy(), kl
    alpha = np.exp(np.minimum(log_alpha, 0.0))
    noise = 1.0 + np.sqrt(alpha) * _need_rng(rng).standard_normal(x.shape)
    return x * noise, kl


class Linear(Layer):
    """Fully connected layer, optionally with targeted weight dropout."""

    def __init__(self, in_dim, out_dim, units=1, rng=None, targeted=None):
        if min(in_dim, out_dim, units) <= 0:
            raise ValueError("Linear dimensions must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.units = in_dim, out_dim, units
        self.W = Param(rng.standard_normal((units, in_dim, out_dim)) * math.sqrt(2.0 / in_dim))
        self.b = Param(np.zeros((units, out_dim)))
        self.targeted = targeted  # (gamma, alpha) or None

    def forward(self, x, mode=TRAIN, rng=None):
        _check_mode(mode)
        _check_input(self, x, self.units, self.in_dim)
        mask = None
        w = self.W.value
        if mode == TRAIN and self.targeted is not None:
            gamma, alpha = self.targeted
            mask = targeted_mask(w, gamma, alpha, _need_rng(rng), per_unit=True)
            w = w * mask
        self._cache = (x, w, mask)
        return np.matmul(x, w) + self.b.value[:, None, :]

    def backward(self, grad):
        x, w, mask = self._pop_cache()
        gw = np.matmul(x.transpose(0, 2, 1), grad)
        if mask is not None:
            gw *= mask
        self.W.grad += gw
        self.b.grad += grad.sum(axis=1)
        return np.matmul(grad, w.transpose(0, 2, 1))

    def named_params(self, prefix=""):
        return [(prefix + "W", self.W), (prefix + "b", self.b)]

    def spec(self):
        spec = {"type": "FullyConnected", "in": self.in_dim, "out": self.out_dim, "units": self.units}
        if self.targeted is not None:
            spec["targeted"] = list(self.targeted)
        return spec


class BatchNorm(Layer):
    def __init__(self, dim, units=1, momentum=0.9, eps=1e-5):
        self.dim, self.units = dim, units
        self.momentum, self.eps = momentum, eps
        self.gamma = Param(np.ones((units, dim)))
        self.beta = Param(np.zeros((units, dim)))
        self.running_mean = np.zeros((units, dim))
        self.running_var = np.ones((units, dim))

    def forward(self, x, mode=TRAIN, rng=None):
        _check_mode(mode)
        _check_input(self, x, self.units, self.dim)
        if mode == EVAL:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[:, None, :]) * inv_std[:, None, :]
            self._cache = ("eval", xhat, inv_std)
        else:
            n = x.shape[1]
            if n < 2:
                raise ShapeError(f"BatchNorm needs a batch of at least 2 in train mode, got {x.shape}")
            mean = x.mean(axis=1)
            var = x.var(axis=1)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[:, None, :]) * inv_std[:, None, :]
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * var * (n / (n - 1))
            self._cache = ("train", xhat, inv_std)
        return self.gamma.value[:, None, :] * xhat + self.beta.value[:, None, :]

    def backward(self, grad):
        kind, xhat, inv_std = self._pop_cache()
        self.gamma.grad += np.sum(grad * xhat, axis=1)
        self.beta.grad += grad.sum(axis=1)
        dxhat = grad * self.gamma.value[:, None, :]
        if kind == "eval":
            return dxhat * inv_std[:, None, :]
        n = grad.shape[1]
        return (inv_std[:, None, :] / n) * (
            n * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=1, keepdims=True)
        )

    def named_params(self, prefix=""):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]

    def named_buffers(self, prefix=""):
        return [(prefix + "running_mean", self.running_mean), (prefix + "running_var", self.running_var)]

    def load_buffer(self, name, value):
        setattr(self, name, np.array(value, dtype=np.float64))

    def spec(self):
        return {"type": "BatchNorm", "dim": self.dim, "units": self.units,
                "momentum": self.momentum, "eps": self.eps}


class ReLU(Layer):
    def forward(self, x, mode=TRAIN, rng=None):
        _check_mode(mode)
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad):
        return grad * self._pop_cache()

    def spec(self):
        return {"type": "ReLU"}


class Dropout(Layer):
    """Inverted Bernoulli dropout on activations."""

    def __init__(self, p):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p

    def forward(self, x, mode=TRAIN, rng=None):
        _check_mode(mode)
        if mode == EVAL or self.p == 0.0:
            self._cache = 1.0
            return x
        scale = (_need_rng(rng).random(x.shape) >= self.p) / (1.0 - self.p)
        self._cache = scale
        return x * scale

    def backward(self, grad):
        return grad * self._pop_cache()

    def spec(self):
        return {"type": "DropoutRegular", "p": self.p}


class GaussianDropout(Layer):
    """Variational dropout: multiplicative N(1, alpha) noise with learned alpha.

    One ``log_alpha`` per unit. :meth:`regularizer` returns the KL penalty
    summed over units and features.
    """

    def __init__(self, dim, units=1, init_log_alpha=math.log(0.25)):
        self.dim, self.units = dim, units
        self.init_log_alpha = init_log_alpha
        self.log_alpha = Param(np.full((units, 1, 1), float(init_log_alpha)))

    def forward(self, x, mode=TRAIN, rng=None):
        _check_mode(mode)
        _check_input(self, x, self.units, self.dim)
        if mode == EVAL:
            self._cache = (None, None, None)
            return x
        la = self.log_alpha.value
        sqrt_alpha = np.exp(0.5 * np.minimum(la, 0.0))
        z = _need_rng(rng).standard_normal(x.shape)
        self._cache = (x, z, sqrt_alpha)
        return x * (1.0 + sqrt_alpha * z)

    def backward(self, grad):
        x, z, sqrt_alpha = self._pop_cache()
        if x is None:
            return grad
        dla = np.sum(grad * x * z, axis=(1, 2), keepdims=True) * 0.5 * sqrt_alpha
        self.log_alpha.grad += np.where(self.log_alpha.value < 0.0, dla, 0.0)
        return grad * (1.0 + sqrt_alpha * z)

    def regularizer(self):
        return float(np.sum(gaussian_dropout_kl(self.log_alpha.value)) * self.dim)

    def regularizer_backward(self, scale):
        self.log_alpha.grad += scale * self.dim * _gaussian_dropout_kl_grad(self.log_alpha.value)

    def named_params(self, prefix=""):
        return [(prefix + "log_alpha", self.log_alpha)]

    def spec(self):
        return {"type": "DropoutVariational", "dim": self.dim, "units": self.units,
                "init_log_alpha": self.init_log_alpha}


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x, mode=TRAIN, rng=None):
        for layer in self.layers:
            x = layer.forward(x, mode, rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}{i}."))
        return out

    def named_buffers(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_buffers(f"{prefix}{i}."))
        return out

    def modules(self):
        for layer in self.layers:
            if isinstance(layer, (Sequential, DenseBlock)):
                yield from layer.modules()
            else:
                yield layer

    def regularizer(self):
        return sum(layer.regularizer() for layer in self.layers)

    def regularizer_backward(self, scale):
        for layer in self.layers:
            layer.regularizer_backward(scale)

    def spec(self):
        return {"type": "Sequential", "layers": [layer.spec() for layer in self.layers]}


class DenseBlock(Layer):
    """``layers`` rounds of FC -> BatchNorm -> ReLU, each output of width
    ``growth`` concatenated onto the running feature vector."""

    def __init__(self, in_dim, units=1, layers=4, growth=4, rng=None, targeted=None):
        self.in_dim, self.units = in_dim, units
        self.n_layers, self.growth = layers, growth
        self.targeted = targeted
        self.stages = []
        dim = in_dim
        for _ in range(layers):
            self.stages.append(
                Sequential(Linear(dim, growth, units, rng, targeted), BatchNorm(growth, units), ReLU())
            )
            dim += growth
        self.out_dim = dim

    def forward(self, x, mode=TRAIN, rng=None):
        _check_mode(mode)
        _check_input(self, x, self.units, self.in_dim)
        feats = x
        for stage in self.stages:
            feats = np.concatenate([feats, stage.forward(feats, mode, rng)], axis=2)
        self._cache = True
        return feats

    def backward(self, grad):
        self._pop_cache()
        dim = self.out_dim
        for stage in reversed(self.stages):
            dim -= self.growth
            grad = grad[:, :, :dim] + stage.backward(grad[:, :, dim:])
        return grad

    def named_params(self, prefix=""):
        out = []
        for i, stage in enumerate(self.stages):
            out.extend(stage.named_params(f"{prefix}{i}."))
        return out

    def named_buffers(self, prefix=""):
        out = []
        for i, stage in enumerate(self.stages):
            out.extend(stage.named_buffers(f"{prefix}{i}."))
        return out

    def modules(self):
        for stage in self.stages:
            yield from stage.modules()

    def spec(self):
        spec = {"type": "DenseBlock", "in": self.in_dim, "units": self.units,
                "layers": self.n_layers, "growth": self.growth}
        if self.targeted is not None:
            spec["targeted"] = list(self.targeted)
        return spec


def dense_block(x, units=1, rng=None, mode=TRAIN):
    """Run a freshly initialised 4-layer, growth-4 dense block on ``x``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    out = DenseBlock(x.shape[2], units=x.shape[0], rng=rng).forward(x, mode, rng)
    return out[0] if squeeze else out
