"""Cascaded CVR/RFR predictor with task-private and task-shared embeddings.

Layout (``variant="hybrid"``)::

    x ──> E_v ───────────────┐
      ├─> E_s ─> encoder ─┬──┴─> [concat] ─> CVR tower ─> o_cvr
      └─> E_r ────────────┴────> [concat] ─> RFR tower ─> o_rfr

``shared`` feeds only the encoder output to both towers, ``separate`` only the
private embeddings. Each tower is a stack of Linear -> BatchNorm -> LeakyReLU
blocks followed by a linear logit.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .domain import N_FIELDS
from .nn import (
    Adam, AdamConfig, NonFiniteGradientError, SparseRows, aggregate_rows, batchnorm_backward,
    batchnorm_forward, leaky_relu, leaky_relu_backward, sigmoid,
)

VARIANTS = ("hybrid", "shared", "separate")
TOWERS = ("cvr", "rfr")


@dataclass
class ModelConfig:
    field_cardinalities: Sequence[int]
    d_emb: int = 8
    d_shared: int = 64
    hidden: Sequence[int] = (256, 256, 128)
    variant: str = "hybrid"
    leaky_slope: float = 0.01
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    bn_min_batch: int = 16
    dtype: str = "float32"
    init_seed: int = 0
    emb_init_std: float = 0.05

    def __post_init__(self):
        self.field_cardinalities = tuple(int(c) for c in self.field_cardinalities)
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.field_cardinalities) != N_FIELDS:
            raise ValueError(f"need {N_FIELDS} field cardinalities")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0.0 <= self.leaky_slope <= 1.0:
            raise ValueError("leaky_slope must lie in [0, 1]")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["field_cardinalities"] = list(self.field_cardinalities)
        out["hidden"] = list(self.hidden)
        return out

    @property
    def uses_private(self) -> bool:
        return self.variant in ("hybrid", "separate")

    @property
    def uses_shared(self) -> bool:
        return self.variant in ("hybrid", "shared")

    @property
    def tower_input_dim(self) -> int:
        dim = 0
        if self.uses_private:
            dim += N_FIELDS * self.d_emb
        if self.uses_shared:
            dim += self.d_shared
        return dim


@dataclass
class Predictions:
    """Logits and probabilities for one batch.

    With ``direct=True`` the second tower was trained on net-conversion
    labels, so ``p_n`` is its output rather than the cascade product.
    """

    o_cvr: np.ndarray
    o_rfr: np.ndarray
    direct: bool = False

    @property
    def p_v(self) -> np.ndarray:
        return sigmoid(self.o_cvr)

    @property
    def p_r(self) -> np.ndarray:
        return sigmoid(self.o_rfr)

    @property
    def p_n(self) -> np.ndarray:
        if self.direct:
            return self.p_r
        return self.p_v * (1.0 - self.p_r)


@dataclass
class ForwardCache:
    idx: np.ndarray
    emb: dict
    enc_pre: Optional[np.ndarray]
    towers: dict
    batch_size: int


class CascadeModel:
    """Parameters, batch-norm buffers and Adam state of the cascaded model."""

    def __init__(self, cfg: ModelConfig, adam: Optional[AdamConfig] = None, init: bool = True):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        cards = np.asarray(cfg.field_cardinalities, dtype=np.int64)
        self.cards = cards
        # one reserved bucket per field for unseen ids
        self.offsets = np.concatenate([[0], np.cumsum(cards + 1)[:-1]]).astype(np.int64)
        self.vocab = int((cards + 1).sum())
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.optimizer = Adam(adam or AdamConfig())
        self._bn_cap = None
        if init:
            self._init_params()

    # -- construction ------------------------------------------------------

    def _init_params(self):
        cfg = self.cfg
        rng = np.random.default_rng([cfg.init_seed, 11])
        dt = self.dtype

        def dense(fan_in, fan_out, gain=2.0):
            return (rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)).astype(dt)

        names = []
        if cfg.uses_private:
            names += ["emb_v", "emb_r"]
        if cfg.uses_shared:
            names += ["emb_s"]
        for name in names:
            self.params[name] = (rng.standard_normal((self.vocab, cfg.d_emb)) * cfg.emb_init_std).astype(dt)
        if cfg.uses_shared:
            self.params["enc_W"] = dense(N_FIELDS * cfg.d_emb, cfg.d_shared)
            self.params["enc_b"] = np.zeros(cfg.d_shared, dt)
        self.buffers["bn_count"] = np.zeros(1, dt)
        for tower in TOWERS:
            fan_in = cfg.tower_input_dim
            for l, width in enumerate(cfg.hidden):
                self.params[f"{tower}.{l}.W"] = dense(fan_in, width)
                self.params[f"{tower}.{l}.gamma"] = np.ones(width, dt)
                self.params[f"{tower}.{l}.beta"] = np.zeros(width, dt)
                self.buffers[f"{tower}.{l}.mean"] = np.zeros(width, dt)
                self.buffers[f"{tower}.{l}.var"] = np.ones(width, dt)
                fan_in = width
            self.params[f"{tower}.out.W"] = dense(fan_in, 1, gain=1.0)[:, 0].copy()
            self.params[f"{tower}.out.b"] = np.zeros(1, dt)

    def copy(self) -> "CascadeModel":
        return copy.deepcopy(self)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        for name in sorted(self.buffers):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.buffers[name]).tobytes())
        return h.hexdigest()

    def lookup_index(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats, dtype=np.int64)
        known = (feats >= 0) & (feats < self.cards)
        return self.offsets + np.where(known, feats, self.cards)

    # -- forward -----------------------------------------------------------

    def _tower_forward(self, tower, a, train, update_stats, cache, batch_stats=None):
        cfg = self.cfg
        layers = []
        use_batch = train and a.shape[0] >= cfg.bn_min_batch
        if batch_stats is not None:
            use_batch = use_batch and batch_stats
        for l in range(len(cfg.hidden)):
            W = self.params[f"{tower}.{l}.W"]
            gamma = self.params[f"{tower}.{l}.gamma"]
            beta = self.params[f"{tower}.{l}.beta"]
            mean = self.buffers[f"{tower}.{l}.mean"]
            var = self.buffers[f"{tower}.{l}.var"]
            u = a @ W
            out, xhat, inv_std, mu, var_b = batchnorm_forward(u, gamma, beta, mean, var, cfg.bn_eps, use_batch)
            if use_batch and update_stats:
                # plain running average until the momentum horizon is reached
                n = self.buffers["bn_count"][0]
                cap = cfg.bn_momentum if self._bn_cap is None else self._bn_cap
                mom = min(cap, n / (n + 1.0))
                mean *= mom
                mean += (1 - mom) * mu
                var *= mom
                var += (1 - mom) * var_b
            if cache is not None:
                layers.append((a, xhat, inv_std, out))
            a = leaky_relu(out, cfg.leaky_slope)
        logit = a @ self.params[f"{tower}.out.W"] + self.params[f"{tower}.out.b"][0]
        if cache is not None:
            cache[tower] = (layers, a, use_batch)
        return logit

    def forward(
        self, feats, train: bool = False, update_stats: bool = True, direct: bool = False,
        batch_stats: Optional[bool] = None,
    ):
        """Score a batch of ``(B, 22)`` feature ids.

        In train mode returns ``(Predictions, ForwardCache)``; eval mode uses
        the running batch-norm statistics and returns ``(Predictions, None)``.
        ``batch_stats=False`` keeps train mode on the running statistics.
        """
        cfg = self.cfg
        idx = self.lookup_index(feats)
        B = idx.shape[0]
        emb = {}
        for name in ("emb_v", "emb_r", "emb_s"):
            if name in self.params:
                emb[name] = self.params[name][idx].reshape(B, -1)
        enc_pre = hs = None
        if cfg.uses_shared:
            enc_pre = emb["emb_s"] @ self.params["enc_W"] + self.params["enc_b"]
            hs = leaky_relu(enc_pre, cfg.leaky_slope)
        tower_cache = {} if train else None
        logits = {}
        for tower, private in (("cvr", "emb_v"), ("rfr", "emb_r")):
            parts = []
            if cfg.uses_private:
                parts.append(emb[private])
            if cfg.uses_shared:
                parts.append(hs)
            a = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
            logits[tower] = self._tower_forward(tower, a, train, update_stats, tower_cache, batch_stats)
        if train and update_stats and B >= cfg.bn_min_batch and batch_stats is not False:
            self.buffers["bn_count"] += 1
        preds = Predictions(logits["cvr"], logits["rfr"], direct=direct)
        if not train:
            return preds, None
        return preds, ForwardCache(idx, emb, enc_pre, tower_cache, B)

    # -- backward ----------------------------------------------------------

    def backward(self, cache: ForwardCache, d_cvr: np.ndarray, d_rfr: np.ndarray) -> dict:
        """Gradients of the loss given its derivatives w.r.t. both logits.

        Embedding gradients come back as ``SparseRows``.
        """
        cfg = self.cfg
        slope = cfg.leaky_slope
        grads: dict = {}
        d_inputs = {}
        for tower, d_o in (("cvr", d_cvr), ("rfr", d_rfr)):
            d_o = np.asarray(d_o, dtype=self.dtype)
            layers, a_last, use_batch = cache.towers[tower]
            grads[f"{tower}.out.W"] = a_last.T @ d_o
            grads[f"{tower}.out.b"] = np.array([d_o.sum()], dtype=self.dtype)
            d_a = np.outer(d_o, self.params[f"{tower}.out.W"])
            for l in reversed(range(len(layers))):
                a_in, xhat, inv_std, out = layers[l]
                d_out = leaky_relu_backward(d_a, out, slope)
                d_u, d_gamma, d_beta = batchnorm_backward(
                    d_out, xhat, inv_std, self.params[f"{tower}.{l}.gamma"], use_batch
                )
                grads[f"{tower}.{l}.gamma"] = d_gamma
                grads[f"{tower}.{l}.beta"] = d_beta
                grads[f"{tower}.{l}.W"] = a_in.T @ d_u
                d_a = d_u @ self.params[f"{tower}.{l}.W"].T
            d_inputs[tower] = d_a

        flat_idx = cache.idx.ravel()
        n_priv = N_FIELDS * cfg.d_emb if cfg.uses_private else 0
        d_hs = 0.0
        for tower, private in (("cvr", "emb_v"), ("rfr", "emb_r")):
            d_in = d_inputs[tower]
            if cfg.uses_private:
                vals = d_in[:, :n_priv].reshape(-1, cfg.d_emb)
                grads[private] = aggregate_rows(flat_idx, vals, self.dtype)
            if cfg.uses_shared:
                d_hs = d_hs + d_in[:, n_priv:]
        if cfg.uses_shared:
            d_pre = leaky_relu_backward(d_hs, cache.enc_pre, slope)
            grads["enc_W"] = cache.emb["emb_s"].T @ d_pre
            grads["enc_b"] = d_pre.sum(axis=0)
            d_es = d_pre @ self.params["enc_W"].T
            grads["emb_s"] = aggregate_rows(flat_idx, d_es.reshape(-1, cfg.d_emb), self.dtype)
        return grads

    def recompute_bn_stats(self, feats, batch_size: int = 1024) -> None:
        """Replace running batch-norm statistics by their average over ``feats``.

        Uses training-mode batch statistics of the current weights, without
        touching parameters or optimizer state.
        """
        feats = np.asarray(feats)
        count = self.buffers["bn_count"].copy()
        self.buffers["bn_count"][:] = 0
        self._bn_cap = 1.0
        try:
            for lo in range(0, feats.shape[0], batch_size):
                chunk = feats[lo:lo + batch_size]
                if chunk.shape[0] >= self.cfg.bn_min_batch:
                    self.forward(chunk, train=True, update_stats=True)
        finally:
            self._bn_cap = None
            self.buffers["bn_count"][:] = count

    def step(self, grads: dict) -> None:
        self.optimizer.step(self.params, grads)

    def backward_and_step(self, cache: ForwardCache, d_cvr, d_rfr) -> dict:
        grads = self.backward(cache, d_cvr, d_rfr)
        self.step(grads)
        return grads


def forward(model: CascadeModel, feats, mode: str = "eval"):
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    return model.forward(feats, train=(mode == "train"))


def backward_and_step(model: CascadeModel, cache: ForwardCache, loss_grads, optimizer_cfg=None) -> CascadeModel:
    """Apply one Adam step from logit gradients ``(d_cvr, d_rfr)``.

    Raises ``NonFiniteGradientError`` (leaving the model untouched) when any
    gradient is NaN or infinite.
    """
    if optimizer_cfg is not None:
        model.optimizer.cfg = optimizer_cfg
    d_cvr, d_rfr = loss_grads
    model.backward_and_step(cache, d_cvr, d_rfr)
    return model


__all__ = [
    "CascadeModel", "ModelConfig", "Predictions", "ForwardCache", "NonFiniteGradientError",
    "forward", "backward_and_step", "VARIANTS",
]
