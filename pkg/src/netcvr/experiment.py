"""Orchestration: data, delay models, pretraining, runs, sweeps and reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import TRACE_COLUMNS, RegimeSpec, RunResult, StreamData, format_trace_value, run_regime
from .checkpoint import load_checkpoint_bundle, save_checkpoint
from .config import ConfigError, RunConfig
from .datagen import generate_table
from .delay_model import DelayTailModel, fit_conversion_tail, fit_refund_tail
from .domain import EventTable, WindowConfig, classify_trajectory_array, trajectory_counts
from .metrics import MetricsReport
from .model import CascadeModel
from .stream import SplitPlan, pretrain_events, read_event_table
from .training import pretrain

SWEEP_AXES = ("w_obs_v", "w_obs_r", "w_attr_r")


@dataclass
class Prepared:
    """Log, split and delay-tail models for one configuration."""

    table: EventTable
    plan: SplitPlan
    windows: WindowConfig
    cards: tuple
    tail_v: DelayTailModel
    tail_r: DelayTailModel

    @property
    def pretrain_chunk(self) -> EventTable:
        return pretrain_events(self.table, self.plan)

    def stream_data(self) -> StreamData:
        return StreamData.from_table(self.table, self.plan, self.windows, self.tail_v, self.tail_r)


def load_table(cfg: RunConfig) -> EventTable:
    if cfg.paths.log:
        return read_event_table(cfg.paths.log)
    return generate_table(cfg.data_config())


def field_cardinalities(cfg: RunConfig, table: EventTable) -> tuple:
    """Vocabulary sizes: the generator's, widened if the log holds larger ids."""
    cards = np.asarray(cfg.ground_truth.field_cardinalities, dtype=np.int64)
    if len(table):
        cards = np.maximum(cards, table.feats.max(axis=0) + 1)
    return tuple(int(c) for c in cards)


def prepare(cfg: RunConfig, table: Optional[EventTable] = None, tails: Optional[dict] = None) -> Prepared:
    """Load or generate the log and fit the delay-tail models on the pretrain chunk.

    Tail models passed in ``tails`` (as stored in a checkpoint) are reused
    when they were fit for the configured observation windows.
    """
    table = table if table is not None else load_table(cfg)
    plan = SplitPlan.from_windows(cfg.pretrain_end, cfg.windows, cfg.ground_truth.horizon)
    if plan.n_segments < 1:
        raise ConfigError("the log leaves no streaming segment after the pretrain chunk and gap")
    cards = field_cardinalities(cfg, table)
    chunk = pretrain_events(table, plan)
    hyper = cfg.delay_hyper()
    tails = tails or {}
    tail_v = tails.get("tail_v")
    if tail_v is None or tail_v.window != cfg.windows.w_obs_v:
        tail_v = fit_conversion_tail(chunk, cfg.windows, cards, hyper)
    tail_r = tails.get("tail_r")
    if tail_r is None or tail_r.window != cfg.windows.w_obs_r:
        tail_r = fit_refund_tail(chunk, cfg.windows, cards, hyper)
    return Prepared(table, plan, cfg.windows, cards, tail_v, tail_r)


def pretrain_key(cfg: RunConfig, variant: Optional[str] = None) -> str:
    """Identity of a pretrained checkpoint: everything that influences it."""
    parts = {
        "data": cfg.data_config().to_dict() if not cfg.paths.log else {"log": cfg.paths.log},
        "w_attr": [cfg.windows.w_attr_v, cfg.windows.w_attr_r],
        "pretrain_end": cfg.pretrain_end,
        "model": cfg.to_dict()["model"],
        "variant": variant or cfg.regime.variant,
        "init": cfg.seeds.init,
        "sampling": cfg.seeds.sampling,
        "train": {k: v for k, v in cfg.train.to_dict().items() if k.startswith("pretrain") or k == "recompute_bn"},
        "direct": cfg.regime.direct_netcvr_head,
    }
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


_PRETRAIN_CACHE: dict = {}


def pretrained_model(
    cfg: RunConfig, prepared: Prepared, variant: Optional[str] = None, cache_dir=None
) -> CascadeModel:
    """The shared starting checkpoint; memoised in-process and optionally on disk."""
    variant = variant or cfg.regime.variant
    key = pretrain_key(cfg, variant)
    if key in _PRETRAIN_CACHE:
        return _PRETRAIN_CACHE[key].copy()
    path = Path(cache_dir) / f"pretrained-{key}.ckpt" if cache_dir else None
    if path is not None and path.exists():
        model = load_checkpoint_bundle(path)[0]
    else:
        model = CascadeModel(replace(cfg.model_config(prepared.cards), variant=variant))
        pretrain(
            model, prepared.pretrain_chunk, cfg.windows, cfg.train, cfg.seeds.sampling,
            direct=cfg.regime.direct_netcvr_head,
        )
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, path, {"key": key, "variant": variant})
    _PRETRAIN_CACHE[key] = model.copy()
    return model


def clear_pretrain_cache() -> None:
    _PRETRAIN_CACHE.clear()


def data_summary(prepared: Prepared) -> dict:
    stream = prepared.stream_data().clicks
    codes = classify_trajectory_array(stream, prepared.windows)
    return {
        "n_clicks": len(prepared.table),
        "n_pretrain": len(prepared.pretrain_chunk),
        "n_stream": len(stream),
        "n_segments": prepared.plan.n_segments,
        "stream_start": prepared.plan.stream_start,
        "stream_trajectories": trajectory_counts(codes),
        "tail_v": prepared.tail_v.metadata,
        "tail_r": prepared.tail_r.metadata,
    }


def load_supplied_checkpoint(cfg: RunConfig):
    """``(model, tails)`` from ``paths.checkpoint``, or ``(None, {})``."""
    if not cfg.paths.checkpoint:
        return None, {}
    path = Path(cfg.paths.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    model, tails = load_checkpoint_bundle(path)
    if model.variant != cfg.regime.variant:
        raise ConfigError(f"checkpoint variant {model.variant!r} differs from the configured {cfg.regime.variant!r}")
    return model, tails


def run(cfg: RunConfig, prepared: Optional[Prepared] = None, base: Optional[CascadeModel] = None,
        cache_dir=None) -> RunResult:
    if base is None:
        base, tails = load_supplied_checkpoint(cfg)
        prepared = prepared or prepare(cfg, tails=tails)
        if base is None:
            base = pretrained_model(cfg, prepared, cache_dir=cache_dir)
    prepared = prepared or prepare(cfg)
    return run_regime(cfg.regime, prepared.stream_data(), base, cfg.train, cfg.seeds.sampling, cfg.aggregation)


def _clean(obj):
    """JSON-safe copy: NaN becomes None, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def build_report(cfg: RunConfig, result: RunResult, prepared: Prepared, base_fingerprint: str) -> dict:
    return _clean({
        "config": cfg.to_dict(),
        "data": data_summary(prepared),
        "pretrained_fingerprint": base_fingerprint,
        "metrics": result.report.to_dict(),
        "final_quarter": result.final_quarter.to_dict(),
        "n_updates": result.n_updates,
    })


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_trace(path, trace: list) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([format_trace_value(row.get(c)) for c in TRACE_COLUMNS])
    return path


def execute(cfg: RunConfig, table: Optional[EventTable] = None, cache_dir=None, write: bool = True) -> dict:
    """Full ``run``: prepare, pretrain (or load), replay, and persist outputs."""
    base, tails = load_supplied_checkpoint(cfg)
    prepared = prepare(cfg, table, tails)
    if base is None:
        base = pretrained_model(cfg, prepared, cache_dir=cache_dir)
    result = run(cfg, prepared, base)
    report = build_report(cfg, result, prepared, base.fingerprint())
    if write:
        out = cfg.out_dir()
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(dumps_report(report))
        write_trace(out / "trace.csv", result.trace)
        save_checkpoint(result.model, out / "final.ckpt", {"regime": cfg.regime.regime})
        cfg.save(out / "config.json")
    return report


def sweep_config(cfg: RunConfig, axis: str, value: float) -> RunConfig:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
    try:
        windows = cfg.windows.replace(**{axis: float(value)})
    except ValueError as err:
        raise ConfigError(f"{axis}={value}: {err}") from err
    return cfg.with_overrides(windows=windows)


def sweep(cfg: RunConfig, axis: str, values: Sequence[float], table: Optional[EventTable] = None,
          cache_dir=None) -> list[dict]:
    """One run per window value; other windows fixed. Returns a row per value."""
    configs = [sweep_config(cfg, axis, v) for v in values]
    for c in configs:
        c.validate()
    table = table if table is not None else load_table(cfg)
    rows = []
    for value, c in zip(values, configs):
        prepared = prepare(c, table)
        base = pretrained_model(c, prepared, cache_dir=cache_dir)
        result = run(c, prepared, base)
        rows.append(sweep_row(axis, value, result.report))
    return rows


def sweep_row(axis: str, value: float, report: MetricsReport) -> dict:
    return _clean({
        "axis": axis, "value": float(value),
        "cvr_auc": report.cvr.auc, "cvr_prauc": report.cvr.prauc,
        "netcvr_auc": report.netcvr.auc, "netcvr_prauc": report.netcvr.prauc,
        "netcvr_nll": report.netcvr.nll,
    })


def write_rows(path, rows: list) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: format_trace_value(v) for k, v in row.items()})
    return path


def compare_reports(reports: dict, pretrained: Optional[str] = None, oracle: Optional[str] = None) -> list[dict]:
    """Metrics table over named run reports, with RI columns when references are given."""
    parsed = {name: MetricsReport.from_dict(rep["metrics"]) for name, rep in reports.items()}
    ref_pre = parsed.get(pretrained) if pretrained else None
    ref_orc = parsed.get(oracle) if oracle else None
    if (pretrained and ref_pre is None) or (oracle and ref_orc is None):
        raise ConfigError("reference run names must be among the compared reports")
    rows = []
    for name, rep in parsed.items():
        if ref_pre is not None and ref_orc is not None:
            rep = rep.with_reference(ref_pre, ref_orc)
        row = {"run": name}
        for task in ("cvr", "netcvr"):
            m = getattr(rep, task)
            row.update({
                f"{task}_auc": m.auc, f"{task}_prauc": m.prauc, f"{task}_nll": m.nll, f"{task}_pcoc": m.pcoc,
                f"{task}_ri_auc": m.ri_auc, f"{task}_ri_prauc": m.ri_prauc,
            })
        rows.append(_clean(row))
    return rows
