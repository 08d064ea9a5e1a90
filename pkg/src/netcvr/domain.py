"""Core value types, window arithmetic and trajectory classification.

Times are float days relative to the log epoch. A conversion or refund that
lands exactly on a window boundary counts as inside the window.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

N_USER_FIELDS = 8
N_ITEM_FIELDS = 6
N_CONTEXT_FIELDS = 8
N_FIELDS = N_USER_FIELDS + N_ITEM_FIELDS + N_CONTEXT_FIELDS

USER_FIELDS = slice(0, N_USER_FIELDS)
ITEM_FIELDS = slice(N_USER_FIELDS, N_USER_FIELDS + N_ITEM_FIELDS)
CONTEXT_FIELDS = slice(N_USER_FIELDS + N_ITEM_FIELDS, N_FIELDS)

# column of the hour-of-day context field
HOUR_FIELD = N_USER_FIELDS + N_ITEM_FIELDS

MINUTES_PER_DAY = 1440.0


class InvalidEventError(ValueError):
    pass


@dataclass(frozen=True)
class ClickEvent:
    """One click with its 22 hashed categorical features.

    ``t_v`` and ``t_r`` are the raw conversion and refund times from the log,
    recorded regardless of attribution windows.
    """

    event_id: int
    features: tuple[int, ...]
    t_c: float
    t_v: Optional[float] = None
    t_r: Optional[float] = None

    def __post_init__(self):
        if len(self.features) != N_FIELDS:
            raise InvalidEventError(
                f"event {self.event_id}: expected {N_FIELDS} fields, got {len(self.features)}"
            )
        if self.t_v is not None and not self.t_v >= self.t_c:
            raise InvalidEventError(f"event {self.event_id}: t_v < t_c")
        if self.t_r is not None:
            if self.t_v is None:
                raise InvalidEventError(f"event {self.event_id}: refund without conversion")
            if not self.t_r >= self.t_v:
                raise InvalidEventError(f"event {self.event_id}: t_r < t_v")

    @property
    def user_features(self) -> list[tuple[int, int]]:
        return list(enumerate(self.features))[USER_FIELDS]

    @property
    def item_features(self) -> list[tuple[int, int]]:
        return list(enumerate(self.features))[ITEM_FIELDS]

    @property
    def context_features(self) -> list[tuple[int, int]]:
        return list(enumerate(self.features))[CONTEXT_FIELDS]


@dataclass(frozen=True)
class WindowConfig:
    """Observation/attribution windows (days) and evaluation segment length."""

    w_obs_v: float = 0.01
    w_obs_r: float = 0.01
    w_attr_v: float = 3.0
    w_attr_r: float = 3.0
    segment_len: float = 0.01

    def __post_init__(self):
        if not 0 < self.w_obs_v <= self.w_attr_v:
            raise ValueError("need 0 < w_obs_v <= w_attr_v")
        if not 0 <= self.w_obs_r <= self.w_attr_r:
            raise ValueError("need 0 <= w_obs_r <= w_attr_r")
        if not self.segment_len > 0:
            raise ValueError("segment_len must be positive")

    def replace(self, **changes) -> "WindowConfig":
        return replace(self, **changes)


class TrajectoryType(enum.Enum):
    N_CONV = "nConv"
    I_CONV = "iConv"
    D_CONV = "dConv"
    I_CONV_I_REFUND = "iConv_iRefund"
    I_CONV_D_REFUND = "iConv_dRefund"
    D_CONV_I_REFUND = "dConv_iRefund"
    D_CONV_D_REFUND = "dConv_dRefund"

    @property
    def code(self) -> int:
        return _TRAJECTORY_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "TrajectoryType":
        return _TRAJECTORIES[int(code)]

    @property
    def converted(self) -> bool:
        return self is not TrajectoryType.N_CONV

    @property
    def refunded(self) -> bool:
        return self.value.endswith("Refund")


_TRAJECTORIES = list(TrajectoryType)
_TRAJECTORY_CODES = {t: i for i, t in enumerate(_TRAJECTORIES)}


@dataclass(frozen=True)
class ResolvedLabels:
    y: int
    z: int
    net: int

    def __post_init__(self):
        if self.z and not self.y:
            raise ValueError("z = 1 requires y = 1")
        if self.net != self.y * (1 - self.z):
            raise ValueError("net must equal y * (1 - z)")


def _delays(event: ClickEvent) -> tuple[float, float]:
    h_v = math.inf if event.t_v is None else event.t_v - event.t_c
    h_r = math.inf if event.t_r is None else event.t_r - event.t_v
    return h_v, h_r


def resolve_labels(event: ClickEvent, windows: WindowConfig) -> ResolvedLabels:
    """Ground-truth labels after the full attribution windows have elapsed."""
    h_v, h_r = _delays(event)
    y = int(h_v <= windows.w_attr_v)
    z = int(y == 1 and h_r <= windows.w_attr_r)
    return ResolvedLabels(y, z, y * (1 - z))


def classify_trajectory(event: ClickEvent, windows: WindowConfig) -> TrajectoryType:
    labels = resolve_labels(event, windows)
    if not labels.y:
        return TrajectoryType.N_CONV
    h_v, h_r = _delays(event)
    conv = "i" if h_v <= windows.w_obs_v else "d"
    if not labels.z:
        return TrajectoryType(f"{conv}Conv")
    refund = "i" if h_r <= windows.w_obs_r else "d"
    return TrajectoryType(f"{conv}Conv_{refund}Refund")


@dataclass
class EventTable:
    """Columnar click log: the array form of a sequence of ``ClickEvent``.

    Missing conversion/refund times are NaN.
    """

    ids: np.ndarray
    feats: np.ndarray
    t_c: np.ndarray
    t_v: np.ndarray
    t_r: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.feats = np.asarray(self.feats, dtype=np.int64).reshape(len(self.ids), N_FIELDS)
        self.t_c = np.asarray(self.t_c, dtype=np.float64)
        self.t_v = np.asarray(self.t_v, dtype=np.float64)
        self.t_r = np.asarray(self.t_r, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_events(cls, events: Iterable[ClickEvent]) -> "EventTable":
        events = list(events)
        nan = float("nan")
        return cls(
            ids=[e.event_id for e in events],
            feats=np.array([e.features for e in events], dtype=np.int64).reshape(-1, N_FIELDS),
            t_c=[e.t_c for e in events],
            t_v=[nan if e.t_v is None else e.t_v for e in events],
            t_r=[nan if e.t_r is None else e.t_r for e in events],
        )

    def event(self, i: int) -> ClickEvent:
        t_v = None if np.isnan(self.t_v[i]) else float(self.t_v[i])
        t_r = None if np.isnan(self.t_r[i]) else float(self.t_r[i])
        return ClickEvent(
            int(self.ids[i]), tuple(int(f) for f in self.feats[i]), float(self.t_c[i]), t_v, t_r
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.event(i)

    def take(self, index) -> "EventTable":
        return EventTable(
            self.ids[index], self.feats[index], self.t_c[index], self.t_v[index],
            self.t_r[index], dict(self.meta),
        )

    def click_range(self, start: float, stop: float) -> "EventTable":
        """Events with ``start <= t_c < stop``; the table must be click-time sorted."""
        lo, hi = np.searchsorted(self.t_c, [start, stop], side="left")
        return self.take(slice(lo, hi))

    @property
    def h_v(self) -> np.ndarray:
        return self.t_v - self.t_c

    @property
    def h_r(self) -> np.ndarray:
        return self.t_r - self.t_v


def resolve_labels_array(table: EventTable, windows: WindowConfig) -> dict[str, np.ndarray]:
    """Vectorised ``resolve_labels``; returns int8 arrays ``y``, ``z``, ``net``."""
    with np.errstate(invalid="ignore"):
        y = table.h_v <= windows.w_attr_v
        z = y & (table.h_r <= windows.w_attr_r)
    y = y.astype(np.int8)
    z = z.astype(np.int8)
    return {"y": y, "z": z, "net": (y * (1 - z)).astype(np.int8)}


def classify_trajectory_array(table: EventTable, windows: WindowConfig) -> np.ndarray:
    """Vectorised ``classify_trajectory``; returns ``TrajectoryType.code`` values."""
    lab = resolve_labels_array(table, windows)
    y, z = lab["y"].astype(bool), lab["z"].astype(bool)
    with np.errstate(invalid="ignore"):
        i_conv = table.h_v <= windows.w_obs_v
        i_ref = table.h_r <= windows.w_obs_r
    codes = np.full(len(table), TrajectoryType.N_CONV.code, dtype=np.int8)
    pick = [
        (y & ~z & i_conv, TrajectoryType.I_CONV),
        (y & ~z & ~i_conv, TrajectoryType.D_CONV),
        (z & i_conv & i_ref, TrajectoryType.I_CONV_I_REFUND),
        (z & i_conv & ~i_ref, TrajectoryType.I_CONV_D_REFUND),
        (z & ~i_conv & i_ref, TrajectoryType.D_CONV_I_REFUND),
        (z & ~i_conv & ~i_ref, TrajectoryType.D_CONV_D_REFUND),
    ]
    for mask, kind in pick:
        codes[mask] = kind.code
    return codes


def trajectory_counts(codes: Sequence[int]) -> dict[str, int]:
    counts = np.bincount(np.asarray(codes, dtype=np.int64), minlength=len(_TRAJECTORIES))
    return {t.value: int(counts[t.code]) for t in _TRAJECTORIES}
