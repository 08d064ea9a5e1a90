"""Training steps shared by every regime: pretraining, stream updates, batch updates."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .domain import EventTable, WindowConfig, resolve_labels_array
from .model import CascadeModel
from .nn import NonFiniteGradientError
from .objective import (
    RankingConfig, cvr_weights, dar_loss, delays_for_weighting, positive_weights, rfr_weights,
    sample_negatives, total_loss, weighted_bce,
)
from .stream import DeliveryKind, Schedule


class TrainingDivergedError(FloatingPointError):
    def __init__(self, segment: int, detail: str):
        self.segment = segment
        super().__init__(f"training diverged at segment {segment}: {detail}")


@dataclass
class TrainConfig:
    pretrain_lr: float = 2e-3
    stream_lr: float = 3e-4
    pretrain_epochs: int = 1
    pretrain_batch: int = 1024
    bdl_batch: int = 1024
    loss_coef: tuple = (1.0, 1.0, 1.0, 1.0)
    trace_auc_every: int = 100
    # "running": stream updates normalise with the running statistics;
    # "batch": with the statistics of each update batch
    stream_bn: str = "running"
    recompute_bn: bool = True

    def __post_init__(self):
        self.loss_coef = tuple(float(c) for c in self.loss_coef)
        if self.stream_bn not in ("running", "batch"):
            raise ValueError("stream_bn must be 'running' or 'batch'")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss_coef"] = list(self.loss_coef)
        return out


@dataclass
class StepFlags:
    """Loss options for one schedule-driven update."""

    cvr_debias: bool = False
    rfr_debias: bool = False
    fixed_cvr_tail: Optional[float] = None
    use_dar: bool = False
    direct: bool = False
    ranking: RankingConfig = field(default_factory=RankingConfig)
    loss_coef: tuple = (1.0, 1.0, 1.0, 1.0)
    batch_stats: bool = True


def _check(value, what):
    if not np.isfinite(value):
        raise NonFiniteGradientError(f"non-finite {what}")


def _dar_term(logits, p_hat, pos, neg, delays_days, ranking: RankingConfig, rng, grad):
    """Adds the delay-aware ranking loss for one tower into ``grad``."""
    if pos.size == 0 or neg.size == 0:
        return 0.0
    if ranking.positive_weighting:
        w = positive_weights(delays_for_weighting(delays_days, ranking), ranking)
    else:
        w = np.ones(pos.size)
    j = sample_negatives(p_hat[neg], ranking, pos.size, rng)
    loss, g_pos, g_neg = dar_loss(logits[pos], logits[neg][j], w)
    np.add.at(grad, pos, g_pos)
    np.add.at(grad, neg[j].ravel(), g_neg.ravel())
    return loss


def schedule_step(
    model: CascadeModel, recs: Schedule, tails_v, tails_r, flags: StepFlags, rng: np.random.Generator
) -> dict:
    """One update on the records delivered in a segment.

    ``tails_v``/``tails_r`` are per-event tail probabilities aligned with the
    schedule's event table.
    """
    if len(recs) == 0:
        return {}
    preds, cache = model.forward(recs.feats, train=True, direct=flags.direct, batch_stats=flags.batch_stats)
    o_v = preds.o_cvr.astype(np.float64)
    o_r = preds.o_rfr.astype(np.float64)
    p_v, p_r = preds.p_v.astype(np.float64), preds.p_r.astype(np.float64)
    kind = recs.kind
    cvr = np.flatnonzero(kind <= DeliveryKind.CVR_POSITIVE_DUPLICATE)
    rfr = np.flatnonzero(kind >= DeliveryKind.RFR_NEGATIVE_WINDOW)
    d_v = np.zeros(len(recs))
    d_r = np.zeros(len(recs))

    y_v = recs.y[cvr].astype(np.float64)
    w_pos = w_neg = None
    if flags.cvr_debias:
        tail = np.ones(cvr.size) * flags.fixed_cvr_tail if flags.fixed_cvr_tail is not None else tails_v[recs.row[cvr]]
        w_pos, w_neg = cvr_weights(p_v[cvr], tail)
    L_v, g = weighted_bce(y_v, o_v[cvr], w_pos, w_neg)
    d_v[cvr] = g

    if flags.direct:
        # second tower learns net labels: conversions not yet refunded are
        # positive, every observed refund adds a negative duplicate
        ref_pos = rfr[np.isin(kind[rfr], (DeliveryKind.RFR_POSITIVE_WINDOW, DeliveryKind.RFR_POSITIVE_DUPLICATE))]
        idx = np.concatenate([cvr, ref_pos])
        lab = np.concatenate([(recs.y[cvr] * (1 - recs.z[cvr])).astype(np.float64), np.zeros(ref_pos.size)])
        L_r, g = weighted_bce(lab, o_r[idx])
        np.add.at(d_r, idx, g)
    else:
        z = recs.z[rfr].astype(np.float64)
        w_pos = w_neg = None
        if flags.rfr_debias:
            w_pos, w_neg = rfr_weights(p_r[rfr], tails_r[recs.row[rfr]])
        L_r, g = weighted_bce(z, o_r[rfr], w_pos, w_neg)
        d_r[rfr] = g

    L_dv = L_dr = 0.0
    a_v = np.zeros(len(recs))
    a_r = np.zeros(len(recs))
    if flags.use_dar:
        rk = flags.ranking
        pos_v = cvr[y_v == 1]
        if not rk.include_duplicates:
            pos_v = pos_v[kind[pos_v] != DeliveryKind.CVR_POSITIVE_DUPLICATE]
        neg_v = cvr[y_v == 0]
        L_dv = _dar_term(o_v, p_v, pos_v, neg_v, recs.h_v[pos_v], rk, rng, a_v)
        if not flags.direct:
            z_r = recs.z[rfr]
            pos_r = rfr[z_r == 1]
            if not rk.include_duplicates:
                pos_r = pos_r[kind[pos_r] != DeliveryKind.RFR_POSITIVE_DUPLICATE]
            neg_r = rfr[z_r == 0]
            L_dr = _dar_term(o_r, p_r, pos_r, neg_r, recs.h_r[pos_r], rk, rng, a_r)

    c = flags.loss_coef
    loss = total_loss(L_v, L_r, L_dv, L_dr, c)
    _check(loss, "loss")
    model.backward_and_step(cache, c[0] * d_v + c[2] * a_v, c[1] * d_r + c[3] * a_r)
    return {"loss": loss, "L_v": L_v, "L_r": L_r, "L_dar_v": L_dv, "L_dar_r": L_dr}


def labeled_step(model: CascadeModel, feats, y, z, direct: bool = False, batch_stats: bool = True) -> dict:
    """Plain cross-entropy update on fully labelled clicks."""
    if len(y) == 0:
        return {}
    preds, cache = model.forward(feats, train=True, direct=direct, batch_stats=batch_stats)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    L_v, d_v = weighted_bce(y, preds.o_cvr)
    d_r = np.zeros(y.size)
    if direct:
        L_r, d_r = weighted_bce(y * (1 - z), preds.o_rfr)
    else:
        conv = np.flatnonzero(y == 1)
        L_r, g = weighted_bce(z[conv], preds.o_rfr[conv])
        d_r[conv] = g
    _check(L_v + L_r, "loss")
    model.backward_and_step(cache, d_v, d_r)
    return {"loss": L_v + L_r, "L_v": L_v, "L_r": L_r}


def train_labeled(
    model: CascadeModel, clicks: EventTable, windows: WindowConfig, batch_size: int,
    epochs: int, rng: np.random.Generator, direct: bool = False,
) -> int:
    """Shuffled minibatch passes over fully labelled clicks; returns the step count."""
    lab = resolve_labels_array(clicks, windows)
    n = len(clicks)
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            b = order[start:start + batch_size]
            labeled_step(model, clicks.feats[b], lab["y"][b], lab["z"][b], direct)
            steps += 1
    return steps


def pretrain(
    model: CascadeModel, clicks: EventTable, windows: WindowConfig, cfg: TrainConfig,
    seed: int, direct: bool = False,
) -> CascadeModel:
    """Fit the starting checkpoint on the pretrain chunk with complete labels."""
    model.optimizer.cfg.lr = cfg.pretrain_lr
    rng = np.random.default_rng([seed, 31])
    train_labeled(model, clicks, windows, cfg.pretrain_batch, cfg.pretrain_epochs, rng, direct)
    if cfg.recompute_bn:
        model.recompute_bn_stats(clicks.feats, cfg.pretrain_batch)
    return model
