"""Loss mathematics: importance weights, debiased BCE, delay-aware ranking loss.

Every loss returns its value together with the gradient w.r.t. the logits it
consumed. Importance weights are computed from a detached prediction snapshot
and enter the losses as constants.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .domain import MINUTES_PER_DAY
from .nn import sigmoid, softplus

LOGIT_CLAMP = 15.0

SAMPLING_MODES = ("low_uncertainty_softmax", "literal_linear", "random", "high_uncertainty")


@dataclass(frozen=True)
class ImportanceWeights:
    w_pos: np.ndarray
    w_neg: np.ndarray
    tail: np.ndarray


def _weights(p, tail):
    p = np.asarray(p, dtype=np.float64)
    tail = np.asarray(tail, dtype=np.float64)
    boost = 1.0 + p * tail
    w_pos = boost
    w_neg = (1.0 - p) * boost / (1.0 - p + p * tail)
    return w_pos, w_neg


def cvr_weights(p_hat_v, tail_v):
    """Positive/negative weights for conversion labels censored by the window.

    ``p_hat_v`` is the streaming model's own estimate, ``tail_v`` the
    probability that a true conversion lands after the observation window.
    """
    return _weights(p_hat_v, tail_v)


def rfr_weights(p_hat_r, tail_r):
    """Same correction for refund labels censored by the refund window."""
    return _weights(p_hat_r, tail_r)


def observed_distribution(p_true, tail):
    """Label distribution seen in a stream with duplicated late positives.

    Returns ``(q_pos, q_neg)``; dividing the true probabilities by these
    recovers the importance weights.
    """
    p = np.asarray(p_true, dtype=np.float64)
    tail = np.asarray(tail, dtype=np.float64)
    norm = 1.0 + p * tail
    return p / norm, (1.0 - p + p * tail) / norm


def weighted_bce(labels, logits, w_pos=None, w_neg=None, clamp: float = LOGIT_CLAMP):
    """``-sum[y w+ log p + (1-y) w- log(1-p)]`` and its logit gradient.

    Logits are clamped to ``[-clamp, clamp]`` before the sigmoid; the gradient
    is taken as ``weight * (p - y)`` at the clamped value.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        return 0.0, np.zeros(0)
    o = np.clip(np.asarray(logits, dtype=np.float64), -clamp, clamp)
    w_pos = np.ones_like(o) if w_pos is None else np.asarray(w_pos, dtype=np.float64)
    w_neg = np.ones_like(o) if w_neg is None else np.asarray(w_neg, dtype=np.float64)
    # log p = -softplus(-o), log(1 - p) = -softplus(o)
    loss = float(np.sum(y * w_pos * softplus(-o) + (1.0 - y) * w_neg * softplus(o)))
    weight = y * w_pos + (1.0 - y) * w_neg
    grad = weight * (sigmoid(o) - y)
    return loss, grad


@dataclass
class TrainingBatch:
    """Positions of CVR and RFR samples within one forward batch.

    ``P_v``/``N_v`` (and the refund counterparts) are the observed positive
    and negative index sets; ``h_v``/``h_r`` hold the delays of the positives
    in days, aligned with ``P_v``/``P_r``.
    """

    P_v: np.ndarray
    N_v: np.ndarray
    P_r: np.ndarray
    N_r: np.ndarray
    h_v: np.ndarray
    h_r: np.ndarray


def debiased_bce(batch: TrainingBatch, o_cvr, o_rfr, weights_v=None, weights_r=None):
    """``(L_v, L_r, d_o_cvr, d_o_rfr)`` over the full forward batch.

    ``weights_v``/``weights_r`` are ``(w_pos, w_neg)`` arrays aligned with the
    whole batch; ``None`` means unweighted.
    """
    o_cvr = np.asarray(o_cvr, dtype=np.float64)
    o_rfr = np.asarray(o_rfr, dtype=np.float64)
    out = []
    for P, N, o, w in ((batch.P_v, batch.N_v, o_cvr, weights_v), (batch.P_r, batch.N_r, o_rfr, weights_r)):
        idx = np.concatenate([P, N]).astype(np.int64)
        lab = np.concatenate([np.ones(len(P)), np.zeros(len(N))])
        wp = wn = None
        if w is not None:
            wp, wn = w[0][idx], w[1][idx]
        loss, g = weighted_bce(lab, o[idx], wp, wn)
        grad = np.zeros_like(o)
        np.add.at(grad, idx, g)
        out.append((loss, grad))
    (l_v, g_v), (l_r, g_r) = out
    return l_v, l_r, g_v, g_r


@dataclass(frozen=True)
class RankingConfig:
    alpha: float = 1.0
    w_min: float = 0.2
    tau: float = 1.0
    K: int = 4
    sampling_mode: str = "low_uncertainty_softmax"
    positive_weighting: bool = True
    delay_unit_minutes: bool = True
    include_duplicates: bool = True

    def __post_init__(self):
        if self.alpha <= 0 or self.w_min <= 0 or self.tau <= 0:
            raise ValueError("alpha, w_min and tau must be positive")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("K must be an integer >= 1")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode must be one of {SAMPLING_MODES}")


@dataclass(frozen=True)
class BatchDelayStats:
    m: float
    s: float


def delay_stats(delays) -> BatchDelayStats:
    """Median and clamped sample standard deviation (``s >= 1``)."""
    h = np.asarray(delays, dtype=np.float64)
    if h.size == 0:
        raise ValueError("empty delay list")
    std = float(np.std(h, ddof=1)) if h.size > 1 else 0.0
    return BatchDelayStats(float(np.median(h)), max(std, 1.0))


def positive_weights(delays, cfg: RankingConfig) -> np.ndarray:
    """``w_min + alpha * sigmoid((median - h) / s)`` per positive.

    ``delays`` are in the unit the caller wants the statistics in; the
    training loop passes minutes.
    """
    stats = delay_stats(delays)
    h = np.asarray(delays, dtype=np.float64)
    return cfg.w_min + cfg.alpha * sigmoid((stats.m - h) / stats.s)


def delays_for_weighting(delays_days, cfg: RankingConfig) -> np.ndarray:
    h = np.asarray(delays_days, dtype=np.float64)
    return h * MINUTES_PER_DAY if cfg.delay_unit_minutes else h


def sampling_probabilities(p_hat_neg, cfg: RankingConfig) -> np.ndarray:
    """Selection distribution over the negatives of a batch."""
    p = np.asarray(p_hat_neg, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no negatives to sample from")
    mode = cfg.sampling_mode
    if mode == "random":
        return np.full(p.size, 1.0 / p.size)
    if mode == "literal_linear":
        score = (1.0 - p) / cfg.tau
        total = score.sum()
        if not total > 0:
            warnings.warn("all negatives have p_hat = 1; sampling uniformly", RuntimeWarning)
            return np.full(p.size, 1.0 / p.size)
        return score / total
    logits = (1.0 - p) / cfg.tau if mode == "low_uncertainty_softmax" else p / cfg.tau
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def sample_negatives(p_hat_neg, cfg: RankingConfig, n_pos: int, rng: np.random.Generator) -> np.ndarray:
    """``(n_pos, K)`` indices into the negatives, drawn with replacement."""
    pi = sampling_probabilities(p_hat_neg, cfg)
    return rng.choice(pi.size, size=(n_pos, cfg.K), replace=True, p=pi)


def dar_loss(o_pos, o_neg, w):
    """Weighted pairwise logistic loss.

    ``o_pos`` has shape ``(P,)``, ``o_neg`` ``(P, K)`` holds the logits of the
    negatives paired with each positive, ``w`` the positive weights. Returns
    ``(loss, d_o_pos, d_o_neg)``.
    """
    o_pos = np.asarray(o_pos, dtype=np.float64)
    o_neg = np.asarray(o_neg, dtype=np.float64)
    if o_pos.size == 0:
        return 0.0, np.zeros(0), np.zeros(o_neg.shape)
    w = np.asarray(w, dtype=np.float64)
    K = o_neg.shape[1]
    diff = o_pos[:, None] - o_neg
    # -log sigmoid(d) = softplus(-d)
    loss = float(np.sum(w[:, None] * softplus(-diff)) / K)
    g = -(w[:, None] / K) * sigmoid(-diff)
    return loss, g.sum(axis=1), -g


def total_loss(L_v, L_r, L_dar_v, L_dar_r, coef=(1.0, 1.0, 1.0, 1.0)) -> float:
    return float(coef[0] * L_v + coef[1] * L_r + coef[2] * L_dar_v + coef[3] * L_dar_r)
