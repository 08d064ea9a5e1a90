"""Numpy building blocks with hand-derived gradients, plus Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def leaky_relu(x, slope):
    # valid for 0 <= slope <= 1
    return np.maximum(x, x * slope)


def leaky_relu_grad(x, slope):
    g = np.ones_like(x)
    g[x <= 0] = slope
    return g


def leaky_relu_backward(d, x, slope):
    """``d * leaky_relu_grad(x)``."""
    dt = d.dtype.type
    return d * (dt(slope) + dt(1.0 - slope) * (x > 0))


def batchnorm_forward(u, gamma, beta, mean, var, eps, use_batch_stats):
    """Returns ``(out, xhat, inv_std, batch_mean, batch_var)``.

    Batch statistics use the biased variance; the caller folds them into the
    running buffers.
    """
    if use_batch_stats:
        mu = u.mean(axis=0)
        var_b = u.var(axis=0)
    else:
        mu, var_b = mean, var
    inv_std = 1.0 / np.sqrt(var_b + eps)
    xhat = (u - mu) * inv_std
    return gamma * xhat + beta, xhat, inv_std, mu, var_b


def batchnorm_backward(d_out, xhat, inv_std, gamma, used_batch_stats):
    """Returns ``(d_u, d_gamma, d_beta)``."""
    d_gamma = (d_out * xhat).sum(axis=0)
    d_beta = d_out.sum(axis=0)
    d_xhat = d_out * gamma
    if used_batch_stats:
        n = d_out.shape[0]
        d_u = (inv_std / n) * (n * d_xhat - d_xhat.sum(axis=0) - xhat * (d_xhat * xhat).sum(axis=0))
    else:
        d_u = d_xhat * inv_std
    return d_u, d_gamma, d_beta


@dataclass
class SparseRows:
    """Gradient touching only ``rows`` of a 2-D table."""

    rows: np.ndarray
    values: np.ndarray


def aggregate_rows(index: np.ndarray, values: np.ndarray, dtype) -> SparseRows:
    """Sum ``values`` rows sharing the same ``index`` entry."""
    uniq, inv = np.unique(index, return_inverse=True)
    out = np.empty((uniq.size, values.shape[1]), dtype=dtype)
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(inv, weights=values[:, j], minlength=uniq.size)
    return SparseRows(uniq, out)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Adam:
    """Adam with bias correction; sparse row gradients update lazily.

    Rows absent from a sparse gradient keep both their values and moments, so
    only embeddings touched by a batch change.
    """

    cfg: AdamConfig = field(default_factory=AdamConfig)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            vals = g.values if isinstance(g, SparseRows) else g
            if not np.all(np.isfinite(vals)):
                raise NonFiniteGradientError(f"non-finite gradient for {name}")
        self.t += 1
        c = self.cfg
        corr1 = 1.0 - c.beta1 ** self.t
        corr2 = 1.0 - c.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            if isinstance(g, SparseRows):
                r = g.rows
                m_r = c.beta1 * m[r] + (1 - c.beta1) * g.values
                v_r = c.beta2 * v[r] + (1 - c.beta2) * g.values ** 2
                m[r], v[r] = m_r, v_r
                p[r] -= (c.lr * (m_r / corr1) / (np.sqrt(v_r / corr2) + c.eps)).astype(p.dtype)
            else:
                m *= c.beta1
                m += (1 - c.beta1) * g
                v *= c.beta2
                v += (1 - c.beta2) * g * g
                p -= (c.lr * (m / corr1) / (np.sqrt(v / corr2) + c.eps)).astype(p.dtype)
