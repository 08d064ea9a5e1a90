"""Training regimes sharing one model, one stream and one evaluation protocol.

Every regime starts from the same pretrained checkpoint and scores segment
``k`` after training on what it was allowed to see by the start of that
segment. Regimes differ only in the samples they train on and the loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .delay_model import DelayTailModel
from .domain import EventTable, WindowConfig
from .metrics import MetricsReport, StreamingEvaluator, auc
from .model import CascadeModel
from .nn import NonFiniteGradientError
from .objective import RankingConfig
from .stream import (
    SplitPlan, bdl_batches, build_delivery_schedule, iterate_protocol, stream_events,
)
from .training import StepFlags, TrainConfig, TrainingDivergedError, labeled_step, schedule_step

REGIMES = ("pretrained", "oracle", "bdl", "fnc", "fnw", "esdfm", "tesla")
VARIANTS = ("hybrid", "shared", "separate")


class RegimeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegimeSpec:
    """Regime name, architecture variant and loss switches.

    ``use_refund_obs_window`` delays the first refund label by ``w_obs_r``;
    without it refunds are reported when they happen. ``cvr_debias`` and
    ``rfr_debias`` turn on the importance weights for each stage.
    ``direct_netcvr_head`` makes the second tower predict net labels.
    """

    regime: str = "tesla"
    variant: str = "hybrid"
    use_refund_obs_window: bool = True
    cvr_debias: bool = True
    rfr_debias: bool = True
    use_dar: bool = True
    direct_netcvr_head: bool = False
    ranking: RankingConfig = field(default_factory=RankingConfig)

    @classmethod
    def preset(cls, regime: str, variant: str = "hybrid", **overrides) -> "RegimeSpec":
        """Canonical flags for a named regime."""
        if regime not in REGIMES:
            raise RegimeConfigError(f"unknown regime {regime!r}; expected one of {REGIMES}")
        online = {
            "tesla": dict(use_refund_obs_window=True, cvr_debias=True, rfr_debias=True, use_dar=True),
            "esdfm": dict(use_refund_obs_window=False, cvr_debias=True, rfr_debias=False, use_dar=False),
            "fnw": dict(use_refund_obs_window=False, cvr_debias=True, rfr_debias=False, use_dar=False),
        }
        flags = online.get(regime, dict(use_refund_obs_window=False, cvr_debias=False, rfr_debias=False, use_dar=False))
        flags.update(overrides)
        spec = cls(regime=regime, variant=variant, **flags)
        spec.validate()
        return spec

    @property
    def online(self) -> bool:
        return self.regime in ("fnc", "fnw", "esdfm", "tesla")

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise RegimeConfigError(f"unknown regime {self.regime!r}")
        if self.variant not in VARIANTS:
            raise RegimeConfigError(f"unknown variant {self.variant!r}")
        any_debias = self.cvr_debias or self.rfr_debias
        if not self.online:
            if any_debias or self.use_dar or self.use_refund_obs_window:
                raise RegimeConfigError(f"{self.regime} takes no delivery, debias or ranking flags")
        if self.regime == "fnc" and (any_debias or self.use_dar or self.use_refund_obs_window):
            raise RegimeConfigError("fnc forbids debias weights, ranking loss and the refund window")
        if self.regime in ("fnw", "esdfm") and (self.rfr_debias or self.use_dar or self.use_refund_obs_window):
            raise RegimeConfigError(f"{self.regime} debiases the conversion stage only")
        if self.regime in ("fnw", "esdfm") and not self.cvr_debias:
            raise RegimeConfigError(f"{self.regime} requires conversion debiasing")
        if self.rfr_debias and not self.use_refund_obs_window:
            raise RegimeConfigError("refund debiasing needs the refund observation window")
        if self.direct_netcvr_head and (self.rfr_debias or self.use_dar):
            raise RegimeConfigError("the direct NetCVR head is trained without refund weights or ranking loss")

    def delivery_windows(self, windows: WindowConfig) -> WindowConfig:
        """Windows actually used to build this regime's training stream."""
        if self.online and not self.use_refund_obs_window:
            return windows.replace(w_obs_r=0.0)
        return windows

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ranking"] = asdict(self.ranking)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RegimeSpec":
        data = dict(data)
        data["ranking"] = RankingConfig(**data.get("ranking", {}))
        spec = cls(**data)
        spec.validate()
        return spec


# ablation presets keyed by short name
def ablation_spec(name: str, variant: str = "hybrid") -> RegimeSpec:
    """Named switches on top of the full method.

    ``NR`` drops the ranking loss; ``RN``/``LN``/``HN`` sample negatives
    randomly, by low or by high uncertainty, without positive weighting;
    ``DAR`` is ``LN`` plus positive weighting. ``ROW-DS-``, ``ROW+DS-``,
    ``ROW-DS+`` and ``ROW+DS+`` toggle the refund window and refund debias.
    """
    base = RegimeSpec.preset("tesla", variant)
    rk = base.ranking
    table = {
        "NR": dict(use_dar=False),
        "RN": dict(ranking=replace(rk, sampling_mode="random", positive_weighting=False)),
        "LN": dict(ranking=replace(rk, sampling_mode="low_uncertainty_softmax", positive_weighting=False)),
        "HN": dict(ranking=replace(rk, sampling_mode="high_uncertainty", positive_weighting=False)),
        "DAR": dict(ranking=replace(rk, sampling_mode="low_uncertainty_softmax", positive_weighting=True)),
        "ROW-DS-": dict(use_refund_obs_window=False, rfr_debias=False),
        "ROW+DS-": dict(use_refund_obs_window=True, rfr_debias=False),
        "ROW+DS+": dict(use_refund_obs_window=True, rfr_debias=True),
    }
    if name not in table:
        raise RegimeConfigError(f"unknown ablation {name!r}; expected one of {sorted(table)}")
    spec = replace(base, **table[name])
    spec.validate()
    return spec


@dataclass
class StreamData:
    """Everything a regime needs besides the model: clicks, plan, tail models."""

    clicks: EventTable
    plan: SplitPlan
    windows: WindowConfig
    tail_v: Optional[DelayTailModel] = None
    tail_r: Optional[DelayTailModel] = None

    @classmethod
    def from_table(cls, table: EventTable, plan: SplitPlan, windows: WindowConfig, tail_v=None, tail_r=None):
        return cls(stream_events(table, plan), plan, windows, tail_v, tail_r)


@dataclass
class RunResult:
    spec: RegimeSpec
    report: MetricsReport
    final_quarter: MetricsReport
    trace: list
    model: CascadeModel
    n_updates: int

    def summary(self) -> dict:
        return {
            "regime": self.spec.to_dict(),
            "report": self.report.to_dict(),
            "final_quarter": self.final_quarter.to_dict(),
            "n_updates": self.n_updates,
        }


def _step_flags(spec: RegimeSpec, cfg: TrainConfig) -> StepFlags:
    return StepFlags(
        cvr_debias=spec.cvr_debias,
        rfr_debias=spec.rfr_debias,
        # FNW reweights every observed negative as possibly fake: tail fixed at 1
        fixed_cvr_tail=1.0 if spec.regime == "fnw" else None,
        use_dar=spec.use_dar,
        direct=spec.direct_netcvr_head,
        ranking=spec.ranking,
        loss_coef=cfg.loss_coef,
        batch_stats=cfg.stream_bn == "batch",
    )


def run_regime(
    spec: RegimeSpec, data: StreamData, model: CascadeModel, cfg: TrainConfig = TrainConfig(),
    sampling_seed: int = 0, aggregation: str = "pooled",
) -> RunResult:
    """Replay the stream under one regime.

    ``model`` is copied, so the caller's pretrained checkpoint is untouched.
    Raises ``TrainingDivergedError`` naming the segment if an update produces
    non-finite values.
    """
    spec.validate()
    if spec.variant != model.variant:
        raise RegimeConfigError(f"spec variant {spec.variant!r} does not match the checkpoint's {model.variant!r}")
    if (spec.cvr_debias and spec.regime != "fnw" and data.tail_v is None) or (spec.rfr_debias and data.tail_r is None):
        raise RegimeConfigError("debiasing requires fitted delay-tail models")
    model = model.copy()
    model.optimizer.cfg.lr = cfg.stream_lr
    rng = np.random.default_rng([sampling_seed, 41])
    plan, windows, clicks = data.plan, data.windows, data.clicks
    delivery = spec.delivery_windows(windows)
    schedule = build_delivery_schedule(clicks, delivery)
    flags = _step_flags(spec, cfg)
    tails_v = data.tail_v.predict(clicks.feats) if spec.cvr_debias and data.tail_v is not None else None
    tails_r = data.tail_r.predict(clicks.feats) if spec.rfr_debias else None
    pending = bdl_batches(clicks, plan, windows) if spec.regime == "bdl" else []
    direct = spec.direct_netcvr_head

    evaluator = StreamingEvaluator()
    trace = []
    previous = None
    n_updates = 0
    for step in iterate_protocol(schedule, clicks, plan, delivery if spec.online else windows):
        seg_start, _ = plan.segment_bounds(step.eval.segment)
        info = {}
        try:
            if spec.online:
                info = schedule_step(model, step.train, tails_v, tails_r, flags, rng)
            elif spec.regime == "oracle" and previous is not None:
                info = labeled_step(model, previous.clicks.feats, previous.y, previous.z, direct, flags.batch_stats)
            elif spec.regime == "bdl":
                while pending and pending[0].delivered_at <= seg_start + 1e-12:
                    batch = pending.pop(0)
                    order = rng.permutation(len(batch.y))
                    for lo in range(0, order.size, cfg.bdl_batch):
                        b = order[lo:lo + cfg.bdl_batch]
                        info = labeled_step(
                            model, batch.clicks.feats[b], batch.y[b], batch.z[b], direct, flags.batch_stats
                        )
                        n_updates += 1
        except (NonFiniteGradientError, FloatingPointError) as err:
            raise TrainingDivergedError(step.eval.segment, str(err)) from err
        if info and spec.regime != "bdl":
            n_updates += 1

        ev = step.eval
        preds, _ = model.forward(ev.clicks.feats, train=False, direct=direct)
        if not (np.all(np.isfinite(preds.o_cvr)) and np.all(np.isfinite(preds.o_rfr))):
            raise TrainingDivergedError(ev.segment, "non-finite predictions")
        cum = evaluator.add(ev.segment, preds.p_v, preds.p_n, ev.y, ev.net)
        row = {
            "segment": ev.segment, "n_train": len(step.train) if spec.online else 0, "n_eval": len(ev.y),
            "loss": info.get("loss"), **cum, "cum_auc_netcvr": None,
        }
        if cfg.trace_auc_every and (ev.segment + 1) % cfg.trace_auc_every == 0:
            _, _, p_n, _, net = evaluator.arrays()
            row["cum_auc_netcvr"] = auc(p_n, net)
        trace.append(row)
        previous = ev

    report = evaluator.report(aggregation)
    quarter_start = plan.n_segments - max(plan.n_segments // 4, 1)
    final_quarter = evaluator.report(aggregation, min_segment=quarter_start)
    return RunResult(spec, report, final_quarter, trace, model, n_updates)


def probe_predictions(model: CascadeModel, feats) -> np.ndarray:
    """Initial scores on a fixed probe batch, for checkpoint-identity checks."""
    preds, _ = model.forward(feats, train=False)
    return np.stack([preds.o_cvr, preds.o_rfr])


TRACE_COLUMNS = (
    "segment", "n_train", "n_eval", "loss", "cum_clicks", "cum_pcoc_cvr", "cum_pcoc_netcvr",
    "cum_nll_netcvr", "cum_auc_netcvr",
)


def format_trace_value(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)
