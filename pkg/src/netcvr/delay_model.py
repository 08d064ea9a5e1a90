"""Pretrained estimators of the delay-tail probabilities used by the debiasing weights.

The conversion tail model is a logistic classifier fit on attributed
conversions with label ``1{h_v > w_obs_v}``; the refund tail model does the
same on attributed refunds with ``1{h_r > w_obs_r}``. Each model has its own
small per-field embeddings and a linear head. After fitting it is frozen.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .domain import N_FIELDS, EventTable, WindowConfig, resolve_labels_array
from .nn import Adam, AdamConfig, aggregate_rows, sigmoid, softplus


@dataclass(frozen=True)
class DelayHyper:
    d_emb: int = 4
    epochs: int = 4
    batch_size: int = 2048
    lr: float = 0.01
    l2: float = 1e-5
    min_positives: int = 200
    seed: int = 0
    mode: str = "model"  # or "empirical" for a feature-free constant

    def __post_init__(self):
        if self.mode not in ("model", "empirical"):
            raise ValueError("mode must be 'model' or 'empirical'")


@dataclass
class DelayTailModel:
    """Frozen tail-probability predictor for one observation window."""

    window: float
    field_cardinalities: Sequence[int]
    metadata: dict
    constant: Optional[float] = None
    emb: Optional[np.ndarray] = None
    head: Optional[np.ndarray] = None
    bias: float = 0.0
    offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cards = np.asarray(self.field_cardinalities, dtype=np.int64)
        self._cards = cards
        self.offsets = np.concatenate([[0], np.cumsum(cards + 1)[:-1]])

    def _index(self, feats):
        feats = np.atleast_2d(np.asarray(feats, dtype=np.int64))
        known = (feats >= 0) & (feats < self._cards)
        return self.offsets + np.where(known, feats, self._cards)

    def logits(self, feats) -> np.ndarray:
        idx = self._index(feats)
        e = self.emb[idx].reshape(idx.shape[0], -1)
        return e @ self.head + self.bias

    def predict(self, feats) -> np.ndarray:
        """P(delay > window | outcome happened) for each feature row."""
        n = np.atleast_2d(np.asarray(feats)).shape[0]
        if self.constant is not None:
            return np.full(n, self.constant)
        return sigmoid(self.logits(feats))

    def fingerprint(self) -> str:
        h = hashlib.sha256(repr((self.window, self.constant, self.bias)).encode())
        for arr in (self.emb, self.head):
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "field_cardinalities": list(self.field_cardinalities),
            "metadata": self.metadata,
            "constant": self.constant,
            "emb": None if self.emb is None else self.emb.tolist(),
            "head": None if self.head is None else self.head.tolist(),
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DelayTailModel":
        emb = None if data.get("emb") is None else np.asarray(data["emb"], dtype=np.float64)
        head = None if data.get("head") is None else np.asarray(data["head"], dtype=np.float64)
        return cls(
            data["window"], data["field_cardinalities"], data["metadata"],
            data["constant"], emb, head, data["bias"],
        )


def _fit_logistic(feats, labels, cards, window, hyper: DelayHyper, meta) -> DelayTailModel:
    rng = np.random.default_rng([hyper.seed, 21])
    shell = DelayTailModel(window, cards, meta)
    vocab = int((np.asarray(cards) + 1).sum())
    params = {
        "emb": rng.normal(0.0, 0.05, (vocab, hyper.d_emb)),
        "head": rng.normal(0.0, 0.1, N_FIELDS * hyper.d_emb),
        # start from the empirical rate
        "bias": np.array([np.log((labels.mean() + 1e-3) / (1 - labels.mean() + 1e-3))]),
    }
    opt = Adam(AdamConfig(lr=hyper.lr))
    idx_all = shell._index(feats)
    n = labels.size
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            b = order[start:start + hyper.batch_size]
            idx = idx_all[b]
            e = params["emb"][idx].reshape(b.size, -1)
            o = e @ params["head"] + params["bias"][0]
            g = (sigmoid(o) - labels[b]) / b.size
            d_e = np.outer(g, params["head"]).reshape(-1, hyper.d_emb)
            grads = {
                "head": e.T @ g + hyper.l2 * params["head"],
                "bias": np.array([g.sum()]),
                "emb": aggregate_rows(idx.ravel(), d_e, np.float64),
            }
            opt.step(params, grads)
    shell.emb, shell.head, shell.bias = params["emb"], params["head"], float(params["bias"][0])
    o = shell.logits(feats)
    meta["train_logloss"] = float(np.mean(labels * softplus(-o) + (1 - labels) * softplus(o)))
    return shell


def _fit_tail(feats, delays, window, cards, hyper: DelayHyper, kind: str) -> DelayTailModel:
    labels = (delays > window).astype(np.float64)
    n = int(labels.size)
    meta = {
        "kind": kind, "window": window, "n_positives": n, "epochs": hyper.epochs,
        "seed": hyper.seed, "mode": hyper.mode, "fallback": None,
    }
    if n == 0:
        warnings.warn(f"{kind} tail: no positives in the pretrain chunk; tail fixed at 0", RuntimeWarning)
        meta["fallback"] = "no_positives"
        return DelayTailModel(window, cards, meta, constant=0.0)
    rate = float(labels.mean())
    if hyper.mode == "empirical":
        meta["fallback"] = "empirical_mode"
        return DelayTailModel(window, cards, meta, constant=rate)
    if n < hyper.min_positives:
        warnings.warn(f"{kind} tail: only {n} positives; using the empirical constant", RuntimeWarning)
        meta["fallback"] = "too_few_positives"
        return DelayTailModel(window, cards, meta, constant=rate)
    if rate in (0.0, 1.0):
        meta["fallback"] = "single_class"
        return DelayTailModel(window, cards, meta, constant=rate)
    return _fit_logistic(feats, labels, cards, window, hyper, meta)


def fit_conversion_tail(
    pretrain: EventTable, windows: WindowConfig, cards: Sequence[int], hyper: DelayHyper = DelayHyper()
) -> DelayTailModel:
    lab = resolve_labels_array(pretrain, windows)
    conv = lab["y"].astype(bool)
    return _fit_tail(pretrain.feats[conv], pretrain.h_v[conv], windows.w_obs_v, cards, hyper, "conversion")


def fit_refund_tail(
    pretrain: EventTable, windows: WindowConfig, cards: Sequence[int], hyper: DelayHyper = DelayHyper()
) -> DelayTailModel:
    lab = resolve_labels_array(pretrain, windows)
    ref = lab["z"].astype(bool)
    return _fit_tail(pretrain.feats[ref], pretrain.h_r[ref], windows.w_obs_r, cards, hyper, "refund")
