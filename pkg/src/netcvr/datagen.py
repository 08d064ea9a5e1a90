"""Synthetic click logs with known conversion/refund probabilities and delays.

The generator is the ground truth every debiasing test is checked against:
``probe_truth`` returns the exact probabilities and delay tails that
``generate_table`` sampled from.

Latent model for a click with feature values ``x``::

    cvr logit   s_v(x) = base_cvr + sum_f cvr_weights[f][x_f] + log(hourly_modulation[hour])
    rfr logit   s_r(x) = base_rfr + sum_f rfr_weights[f][x_f]
    conv delay  h_v ~ Weibull(shape, rate = lambda_v * exp(sum_f delay_v_offsets[f][x_f]))
    refund delay h_r ~ Weibull(shape, rate = lambda_r * exp(sum_f delay_r_offsets[f][x_f]))

``shape = 1`` gives exponential delays. The hourly factor multiplies the
conversion odds, which keeps every probability inside (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from .domain import HOUR_FIELD, N_FIELDS, ClickEvent, EventTable

DEFAULT_CARDINALITIES = (
    # user: id, age, gender, level, city, device, purchase power, tenure
    50_000, 8, 3, 10, 40, 5, 6, 4,
    # item: id, category, brand, shop, price band, seller level
    20_000, 120, 400, 800, 10, 5,
    # context: hour, weekday, scene, position, channel, network, page, slot
    24, 7, 10, 8, 12, 3, 6, 4,
)

# per-field std multipliers for randomly drawn logistic weights
DEFAULT_FIELD_SCALES = (
    1.0, 0.5, 0.3, 0.5, 0.4, 0.3, 0.6, 0.3,
    1.4, 0.8, 0.6, 0.6, 0.5, 0.4,
    0.0, 0.1, 0.4, 0.4, 0.3, 0.1, 0.2, 0.2,
)

# late-night dip, evening peak
DEFAULT_HOURLY = (
    0.55, 0.45, 0.4, 0.4, 0.5, 0.7, 0.85, 0.95, 1.0, 1.0, 1.05, 1.1,
    1.05, 1.0, 1.0, 1.05, 1.1, 1.15, 1.2, 1.3, 1.35, 1.3, 1.1, 0.8,
)


class GroundTruthError(ValueError):
    pass


@dataclass
class GroundTruthConfig:
    """Parameters of the synthetic world.

    Weight tables left as ``None`` are drawn from ``seed``: ``cvr_weights`` as
    independent normals scaled by ``cvr_weight_scale * field_scales[f]``;
    ``rfr_weights`` as ``-rfr_cvr_coupling * cvr_weights`` plus an independent
    part; delay offsets as ``delay_v_coupling * cvr_weights`` and
    ``delay_r_coupling * rfr_weights`` (so high-CVR users convert faster and
    high-RFR users refund faster when the couplings are positive).

    ``item_lifetime`` turns on item churn: each item is clickable only during
    ``[launch, launch + item_lifetime)``. ``refund_upsample`` multiplies the
    click propensity of the top decile of users by refund risk.
    """

    n_clicks: int = 2_000_000
    n_users: int = 50_000
    n_items: int = 20_000
    horizon: float = 25.0
    seed: int = 0
    field_cardinalities: Sequence[int] = DEFAULT_CARDINALITIES
    field_scales: Sequence[float] = DEFAULT_FIELD_SCALES
    base_cvr: float = -2.9
    base_rfr: float = 0.0
    cvr_weight_scale: float = 0.55
    rfr_weight_scale: float = 0.3
    rfr_cvr_coupling: float = 1.0
    lambda_v: float = 8.0
    lambda_r: float = 40.0
    delay_v_coupling: float = 0.4
    delay_r_coupling: float = 0.5
    delay_shape: float = 1.0
    hourly_modulation: Sequence[float] = DEFAULT_HOURLY
    item_lifetime: Optional[float] = 1.0
    user_zipf: float = 0.6
    refund_upsample: float = 1.0
    cvr_weights: Optional[list] = None
    rfr_weights: Optional[list] = None
    delay_v_offsets: Optional[list] = None
    delay_r_offsets: Optional[list] = None

    def __post_init__(self):
        self.field_cardinalities = tuple(int(c) for c in self.field_cardinalities)
        self.field_scales = tuple(float(s) for s in self.field_scales)
        self.hourly_modulation = tuple(float(m) for m in self.hourly_modulation)
        if len(self.field_cardinalities) != N_FIELDS or len(self.field_scales) != N_FIELDS:
            raise GroundTruthError(f"need {N_FIELDS} field cardinalities and scales")
        if self.field_cardinalities[HOUR_FIELD] != 24:
            raise GroundTruthError("hour field must have cardinality 24")
        if len(self.hourly_modulation) != 24 or min(self.hourly_modulation) <= 0:
            raise GroundTruthError("hourly_modulation needs 24 positive entries")
        if self.lambda_v <= 0 or self.lambda_r <= 0 or self.delay_shape <= 0:
            raise GroundTruthError("delay rates and shape must be positive")
        if self.n_clicks < 0 or self.n_users < 1 or self.n_items < 1 or self.horizon <= 0:
            raise GroundTruthError("invalid population sizes or horizon")
        if self.item_lifetime is not None and self.item_lifetime <= 0:
            raise GroundTruthError("item_lifetime must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("field_cardinalities", "field_scales", "hourly_modulation"):
            out[key] = list(out[key])
        for key in ("cvr_weights", "rfr_weights", "delay_v_offsets", "delay_r_offsets"):
            if out[key] is not None:
                out[key] = [np.asarray(w, dtype=float).tolist() for w in out[key]]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise GroundTruthError(f"unknown ground-truth keys: {sorted(unknown)}")
        return cls(**data)

    def truth(self) -> "GroundTruth":
        return GroundTruth(self)


@dataclass
class TruthProbe:
    """Exact probabilities and delay laws for a batch of feature vectors."""

    p_v: np.ndarray
    p_r: np.ndarray
    rate_v: np.ndarray
    rate_r: np.ndarray
    shape: float = 1.0

    @property
    def p_n(self) -> np.ndarray:
        return self.p_v * (1.0 - self.p_r)

    def tail_v(self, window: float) -> np.ndarray:
        """P(h_v > window | converted)."""
        return np.exp(-np.power(self.rate_v * window, self.shape))

    def tail_r(self, window: float) -> np.ndarray:
        """P(h_r > window | refunded)."""
        return np.exp(-np.power(self.rate_r * window, self.shape))


def _as_tables(tables, cards, name) -> list[np.ndarray]:
    if len(tables) != N_FIELDS:
        raise GroundTruthError(f"{name} needs {N_FIELDS} per-field tables")
    out = []
    for f, (w, card) in enumerate(zip(tables, cards)):
        w = np.asarray(w, dtype=np.float64).ravel()
        if w.size == 1:
            w = np.full(card, float(w[0]))
        if w.size != card:
            raise GroundTruthError(f"{name}[{f}] has {w.size} entries, cardinality is {card}")
        out.append(w)
    return out


class GroundTruth:
    """Materialised weight tables and populations for one config."""

    def __init__(self, cfg: GroundTruthConfig):
        self.cfg = cfg
        cards = cfg.field_cardinalities
        rng = np.random.default_rng([cfg.seed, 1])

        drawn_v = [rng.normal(0.0, cfg.cvr_weight_scale * s, c) for s, c in zip(cfg.field_scales, cards)]
        drawn_r = [rng.normal(0.0, cfg.rfr_weight_scale * s, c) for s, c in zip(cfg.field_scales, cards)]
        c = cfg.rfr_cvr_coupling
        if cfg.cvr_weights is None:
            self.cvr_w = drawn_v
        else:
            self.cvr_w = _as_tables(cfg.cvr_weights, cards, "cvr_weights")
        if cfg.rfr_weights is None:
            ratio = cfg.rfr_weight_scale / cfg.cvr_weight_scale if cfg.cvr_weight_scale else 0.0
            self.rfr_w = [
                -c * ratio * wv + math.sqrt(max(1.0 - c * c, 0.0)) * wr
                for wv, wr in zip(self.cvr_w, drawn_r)
            ]
        else:
            self.rfr_w = _as_tables(cfg.rfr_weights, cards, "rfr_weights")
        if cfg.delay_v_offsets is None:
            self.delay_v = [cfg.delay_v_coupling * w for w in self.cvr_w]
        else:
            self.delay_v = _as_tables(cfg.delay_v_offsets, cards, "delay_v_offsets")
        if cfg.delay_r_offsets is None:
            self.delay_r = [cfg.delay_r_coupling * w for w in self.rfr_w]
        else:
            self.delay_r = _as_tables(cfg.delay_r_offsets, cards, "delay_r_offsets")
        # the hour effect lives entirely in hourly_modulation
        for tables in (self.cvr_w, self.rfr_w, self.delay_v, self.delay_r):
            tables[HOUR_FIELD] = np.zeros(24)
        self.log_hourly = np.log(np.asarray(cfg.hourly_modulation))
        self._check_saturation()

        # populations: user and item attribute rows
        pop = np.random.default_rng([cfg.seed, 2])
        self.users = np.empty((cfg.n_users, 8), dtype=np.int64)
        self.users[:, 0] = np.arange(cfg.n_users) % cards[0]
        for f in range(1, 8):
            self.users[:, f] = pop.integers(0, cards[f], cfg.n_users)
        self.items = np.empty((cfg.n_items, 6), dtype=np.int64)
        self.items[:, 0] = np.arange(cfg.n_items) % cards[8]
        for f in range(1, 6):
            self.items[:, f] = pop.integers(0, cards[8 + f], cfg.n_items)
        if cfg.item_lifetime is None:
            self.item_launch = None
        else:
            self.item_launch = np.sort(pop.uniform(-cfg.item_lifetime, cfg.horizon, cfg.n_items))

        weights = np.arange(1, cfg.n_users + 1, dtype=np.float64) ** -cfg.user_zipf
        pop.shuffle(weights)
        if cfg.refund_upsample != 1.0:
            risk = sum(self.rfr_w[f][self.users[:, f]] for f in range(8))
            weights[risk >= np.quantile(risk, 0.9)] *= cfg.refund_upsample
        self.user_p = weights / weights.sum()

    def _check_saturation(self):
        hi_v = self.cfg.base_cvr + sum(w.max() for w in self.cvr_w) + self.log_hourly.max()
        lo_v = self.cfg.base_cvr + sum(w.min() for w in self.cvr_w) + self.log_hourly.min()
        hi_r = self.cfg.base_rfr + sum(w.max() for w in self.rfr_w)
        lo_r = self.cfg.base_rfr + sum(w.min() for w in self.rfr_w)
        for lo, hi, name in ((lo_v, hi_v, "cvr"), (lo_r, hi_r, "rfr")):
            if expit(hi) >= 1.0 or expit(lo) <= 0.0:
                raise GroundTruthError(f"{name} logistic output saturates to 0 or 1")

    @staticmethod
    def _lookup(tables: list[np.ndarray], feats: np.ndarray) -> np.ndarray:
        total = np.zeros(feats.shape[0])
        for f, w in enumerate(tables):
            col = feats[:, f]
            known = (col >= 0) & (col < w.size)
            total += np.where(known, w[np.clip(col, 0, w.size - 1)], 0.0)
        return total

    def probe(self, feats) -> TruthProbe:
        """Exact truth for an ``(n, 22)`` feature matrix (or one 22-vector).

        Hashed values outside a field's vocabulary contribute nothing, so such
        a field falls back to the intercept.
        """
        feats = np.atleast_2d(np.asarray(feats, dtype=np.int64))
        if feats.shape[1] != N_FIELDS:
            raise GroundTruthError(f"feature vectors need {N_FIELDS} fields")
        hour = feats[:, HOUR_FIELD]
        hour_ok = (hour >= 0) & (hour < 24)
        log_mod = np.where(hour_ok, self.log_hourly[np.clip(hour, 0, 23)], 0.0)
        p_v = expit(self.cfg.base_cvr + self._lookup(self.cvr_w, feats) + log_mod)
        p_r = expit(self.cfg.base_rfr + self._lookup(self.rfr_w, feats))
        rate_v = self.cfg.lambda_v * np.exp(self._lookup(self.delay_v, feats))
        rate_r = self.cfg.lambda_r * np.exp(self._lookup(self.delay_r, feats))
        return TruthProbe(p_v, p_r, rate_v, rate_r, self.cfg.delay_shape)

    def sample_features(self, t_c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        n = t_c.size
        cards = cfg.field_cardinalities
        users = rng.choice(cfg.n_users, size=n, p=self.user_p)
        if self.item_launch is None:
            items = rng.integers(0, cfg.n_items, n)
        else:
            lo = np.searchsorted(self.item_launch, t_c - cfg.item_lifetime, side="right")
            hi = np.searchsorted(self.item_launch, t_c, side="right")
            hi = np.maximum(hi, np.minimum(lo + 1, cfg.n_items))
            lo = np.minimum(lo, hi - 1)
            items = lo + np.floor(rng.random(n) * (hi - lo)).astype(np.int64)
        ctx = np.empty((n, 8), dtype=np.int64)
        ctx[:, 0] = np.minimum((np.mod(t_c, 1.0) * 24).astype(np.int64), 23)
        for f in range(1, 8):
            ctx[:, f] = rng.integers(0, cards[HOUR_FIELD + f], n)
        return np.hstack([self.users[users], self.items[items], ctx])


def _sample_delay(rate: np.ndarray, shape: float, rng: np.random.Generator) -> np.ndarray:
    e = rng.exponential(1.0, rate.size)
    if shape != 1.0:
        e = np.power(e, 1.0 / shape)
    return e / rate


def generate_table(cfg: GroundTruthConfig, truth: Optional[GroundTruth] = None) -> EventTable:
    """Columnar ``generate_log``; events are sorted by click time."""
    truth = truth or GroundTruth(cfg)
    rng = np.random.default_rng([cfg.seed, 3])
    n = cfg.n_clicks
    t_c = np.sort(rng.uniform(0.0, cfg.horizon, n))
    feats = truth.sample_features(t_c, rng)
    probe = truth.probe(feats)
    y = rng.random(n) < probe.p_v
    h_v = _sample_delay(probe.rate_v, cfg.delay_shape, rng)
    z = y & (rng.random(n) < probe.p_r)
    h_r = _sample_delay(probe.rate_r, cfg.delay_shape, rng)
    t_v = np.where(y, t_c + h_v, np.nan)
    t_r = np.where(z, t_v + h_r, np.nan)
    return EventTable(np.arange(n), feats, t_c, t_v, t_r, meta={"source": "synthetic", "seed": cfg.seed})


def generate_log(cfg: GroundTruthConfig) -> Iterator[ClickEvent]:
    """Stream of ``ClickEvent`` in click-time order."""
    yield from generate_table(cfg)


def probe_truth(cfg_or_truth, x) -> TruthProbe:
    truth = cfg_or_truth if isinstance(cfg_or_truth, GroundTruth) else GroundTruth(cfg_or_truth)
    return truth.probe(x)


def zero_weight_config(p_v: float, p_r: float, **overrides) -> GroundTruthConfig:
    """A feature-free world with constant CVR and RFR and fixed delay rates."""
    params = dict(
        base_cvr=float(logit(p_v)), base_rfr=float(logit(p_r)),
        cvr_weight_scale=0.0, rfr_weight_scale=0.0,
        delay_v_coupling=0.0, delay_r_coupling=0.0,
        hourly_modulation=(1.0,) * 24, item_lifetime=None,
    )
    params.update(overrides)
    return GroundTruthConfig(**params)
