"""Deterministic replay of a click log into a training sample stream.

Delivery rules, per click:

* conversion inside ``w_obs_v``: one ``cvr_positive_window`` at ``t_c + w_obs_v``;
* otherwise one ``cvr_negative_initial`` at ``t_c + w_obs_v``, followed by a
  ``cvr_positive_duplicate`` at ``t_v`` if an attributed conversion arrives.

Per attributed conversion the refund side mirrors this, with the window
starting at ``t_v``: ``rfr_positive_window`` or ``rfr_negative_window`` at
``t_v + w_obs_r`` and an ``rfr_positive_duplicate`` at ``t_r`` for a late
refund. A late positive never retracts the earlier negative.

Output is ordered by delivery time, then event id, then kind.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .domain import N_FIELDS, ClickEvent, EventTable, InvalidEventError, WindowConfig, resolve_labels_array


class DeliveryKind(enum.IntEnum):
    CVR_NEGATIVE_INITIAL = 0
    CVR_POSITIVE_WINDOW = 1
    CVR_POSITIVE_DUPLICATE = 2
    RFR_NEGATIVE_WINDOW = 3
    RFR_POSITIVE_WINDOW = 4
    RFR_POSITIVE_DUPLICATE = 5

    @property
    def is_cvr(self) -> bool:
        return self <= DeliveryKind.CVR_POSITIVE_DUPLICATE

    @property
    def positive(self) -> bool:
        return self not in (DeliveryKind.CVR_NEGATIVE_INITIAL, DeliveryKind.RFR_NEGATIVE_WINDOW)


CVR_KINDS = (0, 1, 2)
RFR_KINDS = (3, 4, 5)
POSITIVE_KINDS = (1, 2, 4, 5)


class LogFormatError(ValueError):
    """A malformed or out-of-order line in a JSONL event log."""

    def __init__(self, message: str, line: Optional[int] = None, event_id: Optional[int] = None):
        self.line = line
        self.event_id = event_id
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class DeliveryRecord:
    event_id: int
    features: tuple[int, ...]
    t_o: float
    kind: DeliveryKind
    observed_y: int
    observed_z: int
    h_v: Optional[float]
    h_r: Optional[float]
    e_v: float
    e_r: Optional[float]


def _opt(x: float) -> Optional[float]:
    return None if math.isnan(x) else float(x)


@dataclass
class Schedule:
    """Columnar delivery stream.

    ``row`` indexes into the ``EventTable`` the schedule was built from; the
    other arrays are per-record fields. NaN marks unknown delays.
    """

    events: EventTable
    row: np.ndarray
    t_o: np.ndarray
    kind: np.ndarray
    y: np.ndarray
    z: np.ndarray
    h_v: np.ndarray
    h_r: np.ndarray

    def __len__(self) -> int:
        return len(self.row)

    @property
    def event_id(self) -> np.ndarray:
        return self.events.ids[self.row]

    @property
    def feats(self) -> np.ndarray:
        return self.events.feats[self.row]

    @property
    def e_v(self) -> np.ndarray:
        return self.t_o - self.events.t_c[self.row]

    @property
    def e_r(self) -> np.ndarray:
        t_v = self.events.t_v[self.row]
        with np.errstate(invalid="ignore"):
            return np.where(t_v <= self.t_o, self.t_o - t_v, np.nan)

    @property
    def is_cvr(self) -> np.ndarray:
        return self.kind <= DeliveryKind.CVR_POSITIVE_DUPLICATE

    def take(self, index) -> "Schedule":
        return Schedule(
            self.events, self.row[index], self.t_o[index], self.kind[index],
            self.y[index], self.z[index], self.h_v[index], self.h_r[index],
        )

    def delivered_between(self, start: float, stop: float) -> "Schedule":
        lo, hi = np.searchsorted(self.t_o, [start, stop], side="left")
        return self.take(slice(lo, hi))

    def record(self, i: int) -> DeliveryRecord:
        e_r = self.e_r[i]
        return DeliveryRecord(
            event_id=int(self.events.ids[self.row[i]]),
            features=tuple(int(f) for f in self.events.feats[self.row[i]]),
            t_o=float(self.t_o[i]),
            kind=DeliveryKind(int(self.kind[i])),
            observed_y=int(self.y[i]),
            observed_z=int(self.z[i]),
            h_v=_opt(self.h_v[i]),
            h_r=_opt(self.h_r[i]),
            e_v=float(self.e_v[i]),
            e_r=_opt(e_r),
        )

    def __iter__(self) -> Iterator[DeliveryRecord]:
        for i in range(len(self)):
            yield self.record(i)


def build_delivery_schedule(events, windows: WindowConfig) -> Schedule:
    """Expand clicks into their time-ordered delivery records."""
    table = events if isinstance(events, EventTable) else EventTable.from_events(events)
    n = len(table)
    labels = resolve_labels_array(table, windows)
    conv = labels["y"].astype(bool)
    refund = labels["z"].astype(bool)
    rows = np.arange(n)
    t_c, t_v, t_r = table.t_c, table.t_v, table.t_r
    h_v, h_r = table.h_v, table.h_r
    nan = np.full(n, np.nan)
    with np.errstate(invalid="ignore"):
        imm_v = conv & (h_v <= windows.w_obs_v)
        imm_r = refund & (h_r <= windows.w_obs_r)
    late_v = conv & ~imm_v
    late_r = refund & ~imm_r

    parts = []

    def emit(mask, t_o, kind, y, h_v_known, h_r_known):
        idx = rows[mask]
        t_o = np.broadcast_to(t_o, (n,))[mask]
        # refund already visible at delivery time
        with np.errstate(invalid="ignore"):
            z = (refund[mask] & (t_r[mask] <= t_o)).astype(np.int8)
        parts.append((
            idx, t_o, np.full(idx.size, kind, np.int8), np.full(idx.size, y, np.int8), z,
            h_v_known[mask], h_r_known[mask],
        ))

    w_end_v = t_c + windows.w_obs_v
    emit(imm_v, w_end_v, DeliveryKind.CVR_POSITIVE_WINDOW, 1, h_v, nan)
    emit(~imm_v, w_end_v, DeliveryKind.CVR_NEGATIVE_INITIAL, 0, nan, nan)
    emit(late_v, t_v, DeliveryKind.CVR_POSITIVE_DUPLICATE, 1, h_v, nan)
    w_end_r = t_v + windows.w_obs_r
    emit(imm_r, w_end_r, DeliveryKind.RFR_POSITIVE_WINDOW, 1, h_v, h_r)
    emit(conv & ~imm_r, w_end_r, DeliveryKind.RFR_NEGATIVE_WINDOW, 1, h_v, nan)
    emit(late_r, t_r, DeliveryKind.RFR_POSITIVE_DUPLICATE, 1, h_v, h_r)

    row, t_o, kind, y, z, hv, hr = (np.concatenate(cols) for cols in zip(*parts))
    # for refund records observed_z is the refund label itself
    rfr = kind >= DeliveryKind.RFR_NEGATIVE_WINDOW
    z = np.where(rfr, np.isin(kind, (4, 5)).astype(np.int8), z)
    order = np.lexsort((kind, table.ids[row], t_o))
    return Schedule(table, row[order], t_o[order], kind[order], y[order], z[order], hv[order], hr[order])


@dataclass(frozen=True)
class SplitPlan:
    """Pretrain chunk, leakage gap, and streaming segments."""

    pretrain_end: float
    w_attr_v: float
    w_attr_r: float
    segment_len: float
    horizon: float

    @classmethod
    def from_windows(cls, pretrain_end: float, windows: WindowConfig, horizon: float) -> "SplitPlan":
        return cls(pretrain_end, windows.w_attr_v, windows.w_attr_r, windows.segment_len, horizon)

    @property
    def gap_end(self) -> float:
        return self.pretrain_end + self.w_attr_v + self.w_attr_r

    @property
    def stream_start(self) -> float:
        return self.gap_end

    @property
    def n_segments(self) -> int:
        # tolerance keeps 14 / 0.01 from rounding down to 1399
        return max(int(math.floor((self.horizon - self.stream_start) / self.segment_len + 1e-9)), 0)

    def segment_bounds(self, k: int) -> tuple[float, float]:
        start = self.stream_start + k * self.segment_len
        return start, start + self.segment_len

    def segment_of(self, t: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(t) - self.stream_start) / self.segment_len).astype(np.int64)


@dataclass
class EvalBatch:
    segment: int
    clicks: EventTable
    y: np.ndarray
    z: np.ndarray
    net: np.ndarray


@dataclass
class ProtocolStep:
    """Train on records delivered in ``train_segment``, then score ``eval``.

    ``train_segment`` is ``eval.segment - 1``; the first step has
    ``train_segment == -1`` and an empty training batch, so segment 0 is scored
    by the untouched starting model.
    """

    train_segment: int
    train: Schedule
    eval: EvalBatch


def iterate_protocol(
    schedule: Schedule, clicks: EventTable, plan: SplitPlan, windows: WindowConfig
) -> Iterator[ProtocolStep]:
    labels = resolve_labels_array(clicks, windows)
    click_bounds = np.searchsorted(
        clicks.t_c, plan.stream_start + np.arange(plan.n_segments + 1) * plan.segment_len
    )
    rec_bounds = np.searchsorted(
        schedule.t_o, plan.stream_start + np.arange(-1, plan.n_segments + 1) * plan.segment_len
    )
    for k in range(plan.n_segments):
        lo, hi = click_bounds[k], click_bounds[k + 1]
        ev = EvalBatch(
            k, clicks.take(slice(lo, hi)), labels["y"][lo:hi], labels["z"][lo:hi], labels["net"][lo:hi]
        )
        if k == 0:
            train = schedule.take(slice(0, 0))
        else:
            train = schedule.take(slice(rec_bounds[k], rec_bounds[k + 1]))
        yield ProtocolStep(k - 1, train, ev)


def stream_events(table: EventTable, plan: SplitPlan) -> EventTable:
    """Clicks of the streaming chunk, ``stream_start <= t_c < horizon``."""
    return table.click_range(plan.stream_start, plan.horizon)


def pretrain_events(table: EventTable, plan: SplitPlan) -> EventTable:
    return table.click_range(-math.inf, plan.pretrain_end)


@dataclass
class LabeledBatch:
    """Clicks with fully attributed labels (oracle and batch training)."""

    clicks: EventTable
    y: np.ndarray
    z: np.ndarray
    delivered_at: float


def bdl_batches(clicks: EventTable, plan: SplitPlan, windows: WindowConfig) -> list[LabeledBatch]:
    """Daily fully-labelled batches, each released ``w_attr_v + w_attr_r`` after its day ends."""
    labels = resolve_labels_array(clicks, windows)
    delay = windows.w_attr_v + windows.w_attr_r
    out = []
    day = 0
    while True:
        start = plan.stream_start + day
        release = start + 1.0 + delay
        if release > plan.horizon + 1e-9:
            break
        lo, hi = np.searchsorted(clicks.t_c, [start, start + 1.0])
        out.append(LabeledBatch(clicks.take(slice(lo, hi)), labels["y"][lo:hi], labels["z"][lo:hi], release))
        day += 1
    return out


# --- JSONL event log -------------------------------------------------------

def _event_to_json(event_id, feats, t_c, t_v, t_r) -> str:
    def num(x):
        return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)

    return json.dumps(
        {"id": int(event_id), "feat": [int(f) for f in feats], "tc": float(t_c), "tv": num(t_v), "tr": num(t_r)},
        separators=(",", ":"),
    )


def write_cascade_jsonl(events, path) -> int:
    """Write events (``EventTable`` or iterable of ``ClickEvent``); returns the line count."""
    table = events if isinstance(events, EventTable) else EventTable.from_events(events)
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for i in range(len(table)):
            fh.write(_event_to_json(table.ids[i], table.feats[i], table.t_c[i], table.t_v[i], table.t_r[i]))
            fh.write("\n")
    return len(table)


def _parse_line(text: str, lineno: int) -> ClickEvent:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LogFormatError(f"invalid JSON ({exc.msg})", line=lineno) from None
    if not isinstance(obj, dict) or set(obj) != {"id", "feat", "tc", "tv", "tr"}:
        raise LogFormatError("expected keys id, feat, tc, tv, tr", line=lineno)
    ev_id, feat = obj["id"], obj["feat"]
    if not isinstance(ev_id, int) or isinstance(ev_id, bool):
        raise LogFormatError("id must be an integer", line=lineno)
    if not isinstance(feat, list) or len(feat) != N_FIELDS or not all(
        isinstance(f, int) and not isinstance(f, bool) for f in feat
    ):
        raise LogFormatError(f"feat must be a list of {N_FIELDS} integers", line=lineno, event_id=ev_id)
    times = []
    for key in ("tc", "tv", "tr"):
        val = obj[key]
        if val is None and key != "tc":
            times.append(None)
        elif isinstance(val, (int, float)) and not isinstance(val, bool) and math.isfinite(val):
            times.append(float(val))
        else:
            raise LogFormatError(f"{key} must be a finite number", line=lineno, event_id=ev_id)
    try:
        return ClickEvent(ev_id, tuple(feat), *times)
    except InvalidEventError as exc:
        raise LogFormatError(str(exc), line=lineno, event_id=ev_id) from None


def ingest_cascade_jsonl(path) -> Iterator[ClickEvent]:
    """Validated ``ClickEvent`` stream from a JSONL log.

    Raises ``LogFormatError`` carrying the line number for malformed lines,
    and the first offending id when click times go backwards.
    """
    last_tc = -math.inf
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            event = _parse_line(text, lineno)
            if event.t_c < last_tc:
                raise LogFormatError(
                    f"click times out of order at id {event.event_id}", line=lineno, event_id=event.event_id
                )
            last_tc = event.t_c
            yield event


def read_event_table(path) -> EventTable:
    table = EventTable.from_events(ingest_cascade_jsonl(path))
    table.meta["source"] = str(path)
    return table
