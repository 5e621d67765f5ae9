"""Small numpy kernels with hand-written backward passes.

Every ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes the upstream gradient and that cache. Arrays keep the dtype they come
in with, so the same code runs in float32 for training and float64 for checks.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

Params = dict[str, np.ndarray]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# ---------------------------------------------------------------- layer norm

def layer_norm_forward(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    lead = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    g = dy * gain
    dx = inv * (g - g.mean(axis=-1, keepdims=True)
                - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def layer_norm(x, gain, bias, eps=1e-5):
    return layer_norm_forward(x, gain, bias, eps)[0]


# ---------------------------------------------------------------- GELU (tanh form)

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_forward(x):
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# ---------------------------------------------------------------- attention

def attention_forward(q, k, v, mask):
    """Scaled dot-product attention.

    q: (..., Tq, dh), k/v: (..., Tk, dh), mask: bool broadcastable to
    (..., Tq, Tk) with True meaning the key may be attended.
    """
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("attention mask has a row with no allowed position")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    scores = np.where(mask, scores, -np.inf)
    probs = softmax(scores)
    return np.matmul(probs, v), (q, k, v, probs, scale)


def attention_backward(dout, cache):
    q, k, v, probs, scale = cache
    dv = np.matmul(np.swapaxes(probs, -1, -2), dout)
    dprobs = np.matmul(dout, np.swapaxes(v, -1, -2))
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dscores *= scale
    dq = np.matmul(dscores, k)
    dk = np.matmul(np.swapaxes(dscores, -1, -2), q)
    return dq, dk, dv


def attention(q, k, v, mask):
    return attention_forward(q, k, v, mask)[0]


def split_heads(x, heads):
    *lead, t, d = x.shape
    return np.swapaxes(x.reshape(*lead, t, heads, d // heads), -2, -3)


def merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, t, h, dh = x.shape
    return x.reshape(*lead, t, h * dh)


# ---------------------------------------------------------------- loss

def cross_entropy_masked(logits, targets, loss_mask):
    """Mean negative log-likelihood over unmasked positions (0 when all masked).

    logits: (..., V); targets, loss_mask: (...).
    """
    loss, _ = cross_entropy_forward(logits, targets, loss_mask)
    return loss


def cross_entropy_forward(logits, targets, loss_mask):
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.size and (targets.max() >= vocab or targets.min() < 0):
        raise ValueError(f"target id outside [0, {vocab})")
    mask = np.asarray(loss_mask, dtype=bool)
    count = int(mask.sum())
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    # numpy scalar, so extended-precision checks keep their precision
    loss = -np.sum(np.where(mask, picked, 0)) / count if count else logp.dtype.type(0)
    return loss, (logp, targets, mask, count)


def cross_entropy_backward(cache):
    """Gradient of the mean loss: (softmax - one_hot) / count on unmasked rows."""
    logp, targets, mask, count = cache
    grad = np.exp(logp)
    np.put_along_axis(grad, targets[..., None],
                      np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    if not count:
        return np.zeros_like(grad)
    return grad * (mask[..., None] / count).astype(grad.dtype)


# ---------------------------------------------------------------- init and optimisation

def truncated_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) resampled until every draw lies within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads: Params, max_norm: float) -> tuple[Params, float]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Decay applies only to names accepted by ``decay_filter`` (default: every
    parameter with two or more dimensions).
    """

    def __init__(self, params: Params, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8,
                 decay_filter: Callable[[str, np.ndarray], bool] | None = None):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter or (lambda name, p: p.ndim >= 2)
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params, lr: float) -> None:
        """Update ``params`` in place."""
        for name, g in grads.items():
            if name not in params or g.shape != params[name].shape:
                raise ValueError(f"gradient {name!r} does not match a parameter")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decay_filter(name, p):
                p -= (lr * self.weight_decay) * p
            p -= (lr * update).astype(p.dtype)

    def state_arrays(self) -> Params:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out


def adamw_step(params: Params, grads: Params, state: AdamW, lr: float) -> None:
    state.step(params, grads, lr)


# ---------------------------------------------------------------- gradient check

def grad_check(fun: Callable[[Params], tuple[float, Params]], params: Params, eps=1e-4,
               max_coords: int | None = None, seed: int = 0,
               value_fun: Callable[[Params], float] | None = None, dtype=np.float64) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fun`` returns ``(value, grads)``; ``value_fun``, when given, is used for the
    perturbed evaluations. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``. With ``max_coords`` only a seeded
    random subset of each array's coordinates is probed. Parameters are cast to
    ``dtype`` first; ``np.longdouble`` lowers the evaluation noise floor below
    what float64 differences can resolve for very small gradients.
    """
    value_fun = value_fun or (lambda p: fun(p)[0])
    params = {k: np.array(v, dtype=dtype) for k, v in params.items()}
    _, grads = fun(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        analytic = np.asarray(grads[name], dtype=dtype).reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = value_fun(params)
            flat[i] = orig - eps
            f_minus = value_fun(params)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, float(err))
    return worst
