"""Descriptive tables over an event log.

Four tables, each with explicit bin edges and counts:

* ``hourly``: clicks, CVR and NetCVR per click hour (hour = floor(24 * frac(t_c))).
* ``cvr_bins``: users grouped by their empirical CVR; mean RFR and NetCVR per bin.
  Only users with at least ``min_user_clicks`` clicks are binned.
* ``delay_by_group``: mean/std of conversion delay per user-CVR tercile and of
  refund delay per user-RFR tercile (days). RFR terciles use users with at
  least ``min_user_conversions`` conversions.
* ``delay_cdf``: empirical CDF of attributed conversion and refund delays on
  a fixed grid (days).

Labels follow the attribution windows; delays are those of attributed outcomes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import EventTable, WindowConfig, resolve_labels_array

DEFAULT_CVR_EDGES = (0.0, 0.02, 0.05, 0.1, 0.2, 0.4, 1.0)
DEFAULT_CDF_GRID = (0.003, 0.01, 0.02, 0.05, 0.1, 0.125, 0.25, 0.5, 1.0, 2.0, 3.0)


@dataclass
class AnalysisReport:
    hourly: list
    cvr_bins: list
    delay_by_group: list
    delay_cdf: list
    meta: dict = field(default_factory=dict)

    TABLES = ("hourly", "cvr_bins", "delay_by_group", "delay_cdf")

    def to_dict(self) -> dict:
        return {"meta": self.meta, **{name: getattr(self, name) for name in self.TABLES}}

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name in self.TABLES:
            rows = getattr(self, name)
            path = out / f"{name}.csv"
            with path.open("w", newline="") as fh:
                if rows:
                    writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
                    writer.writeheader()
                    writer.writerows(rows)
            written.append(path)
        path = out / "analysis.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(path)
        return written


def _rate(num, den):
    return float(num / den) if den else None


def hourly_table(table: EventTable, labels: dict) -> list:
    hours = np.floor((table.t_c % 1.0) * 24).astype(np.int64) % 24
    rows = []
    for h in range(24):
        m = hours == h
        n = int(m.sum())
        rows.append({
            "hour": h, "clicks": n, "conversions": int(labels["y"][m].sum()),
            "cvr": _rate(labels["y"][m].sum(), n), "netcvr": _rate(labels["net"][m].sum(), n),
        })
    return rows


def _user_totals(table: EventTable, labels: dict):
    users, inv = np.unique(table.feats[:, 0], return_inverse=True)
    clicks = np.bincount(inv)
    conv = np.bincount(inv, weights=labels["y"])
    refunds = np.bincount(inv, weights=labels["z"])
    return users, inv, clicks, conv, refunds


def cvr_bin_table(table: EventTable, labels: dict, edges=DEFAULT_CVR_EDGES, min_user_clicks: int = 5) -> list:
    _, _, clicks, conv, refunds = _user_totals(table, labels)
    keep = clicks >= min_user_clicks
    user_cvr = np.where(clicks > 0, conv / np.maximum(clicks, 1), 0.0)
    rows = []
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        last = i == len(edges) - 2
        m = keep & (user_cvr >= lo) & ((user_cvr <= hi) if last else (user_cvr < hi))
        c, v, r = clicks[m].sum(), conv[m].sum(), refunds[m].sum()
        rows.append({
            "cvr_lo": lo, "cvr_hi": hi, "users": int(m.sum()), "clicks": int(c), "conversions": int(v),
            "cvr": _rate(v, c), "rfr": _rate(r, v), "netcvr": _rate(v - r, c),
        })
    return rows


def _terciles(values):
    qs = np.quantile(values, [1 / 3, 2 / 3]) if values.size else np.array([np.nan, np.nan])
    return np.digitize(values, qs, right=True), qs


def delay_group_table(
    table: EventTable, labels: dict, min_user_clicks: int = 5, min_user_conversions: int = 2
) -> list:
    _, inv, clicks, conv, refunds = _user_totals(table, labels)
    rows = []
    names = ("low", "mid", "high")

    user_cvr = conv / np.maximum(clicks, 1)
    ok = clicks >= min_user_clicks
    group, qs = _terciles(user_cvr[ok])
    user_group = np.full(clicks.size, -1)
    user_group[ok] = group
    g_click = user_group[inv]
    y = labels["y"].astype(bool)
    for g in range(3):
        d = table.h_v[y & (g_click == g)]
        rows.append({
            "grouping": "cvr", "group": names[g], "boundary_lo": None if g == 0 else float(qs[g - 1]),
            "boundary_hi": None if g == 2 else float(qs[g]), "users": int((user_group == g).sum()),
            "delay": "conversion", "n": int(d.size),
            "mean_days": float(d.mean()) if d.size else None,
            "std_days": float(d.std()) if d.size else None,
        })

    user_rfr = refunds / np.maximum(conv, 1)
    ok = conv >= min_user_conversions
    group, qs = _terciles(user_rfr[ok])
    user_group = np.full(clicks.size, -1)
    user_group[ok] = group
    g_click = user_group[inv]
    z = labels["z"].astype(bool)
    for g in range(3):
        d = table.h_r[z & (g_click == g)]
        rows.append({
            "grouping": "rfr", "group": names[g], "boundary_lo": None if g == 0 else float(qs[g - 1]),
            "boundary_hi": None if g == 2 else float(qs[g]), "users": int((user_group == g).sum()),
            "delay": "refund", "n": int(d.size),
            "mean_days": float(d.mean()) if d.size else None,
            "std_days": float(d.std()) if d.size else None,
        })
    return rows


def delay_cdf_table(table: EventTable, labels: dict, grid=DEFAULT_CDF_GRID) -> list:
    hv = np.sort(table.h_v[labels["y"].astype(bool)])
    hr = np.sort(table.h_r[labels["z"].astype(bool)])
    rows = []
    for x in grid:
        rows.append({
            "delay_days": float(x),
            "conversion_cdf": _rate(np.searchsorted(hv, x, side="right"), hv.size),
            "refund_cdf": _rate(np.searchsorted(hr, x, side="right"), hr.size),
            "n_conversions": int(hv.size), "n_refunds": int(hr.size),
        })
    return rows


def analyze(
    table: EventTable, windows: WindowConfig = WindowConfig(), cvr_edges=DEFAULT_CVR_EDGES,
    cdf_grid=DEFAULT_CDF_GRID, min_user_clicks: int = 5, min_user_conversions: int = 2,
) -> AnalysisReport:
    labels = resolve_labels_array(table, windows)
    meta = {
        "n_clicks": len(table), "w_attr_v": windows.w_attr_v, "w_attr_r": windows.w_attr_r,
        "cvr_edges": list(cvr_edges), "cdf_grid": list(cdf_grid),
        "min_user_clicks": min_user_clicks, "min_user_conversions": min_user_conversions,
        "hour_rule": "floor(24 * frac(t_c))",
    }
    return AnalysisReport(
        hourly_table(table, labels),
        cvr_bin_table(table, labels, cvr_edges, min_user_clicks),
        delay_group_table(table, labels, min_user_clicks, min_user_conversions),
        delay_cdf_table(table, labels, cdf_grid),
        meta,
    )
