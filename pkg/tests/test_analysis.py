import csv
import json
import math

import numpy as np
import pytest

from conftest import random_table
from netcvr.analysis import analyze
from netcvr.datagen import generate_table, zero_weight_config
from netcvr.domain import WindowConfig

WIN = WindowConfig()


def flat_world(**kw):
    params = dict(n_clicks=120_000, n_users=2000, n_items=500, horizon=10.0, seed=4, lambda_v=8.0, lambda_r=40.0)
    params.update(kw)
    return generate_table(zero_weight_config(0.1, 0.3, **params))


def test_constant_rate_gives_flat_hourly_cvr():
    rep = analyze(flat_world())
    total = sum(r["conversions"] for r in rep.hourly) / sum(r["clicks"] for r in rep.hourly)
    for row in rep.hourly:
        sigma = math.sqrt(total * (1 - total) / row["clicks"])
        assert abs(row["cvr"] - total) < 4.5 * sigma


def test_night_dip_is_visible():
    dip = tuple(0.3 if h < 4 else 1.0 for h in range(24))
    rep = analyze(flat_world(hourly_modulation=dip))
    night = [r["cvr"] for r in rep.hourly if r["hour"] < 4]
    day = [r["cvr"] for r in rep.hourly if r["hour"] >= 4]
    assert max(night) < min(day)
    # odds scaled by 0.3 at p = 0.1 (attribution removes almost nothing)
    expected = 0.3 * (0.1 / 0.9) / (1 + 0.3 * (0.1 / 0.9))
    assert abs(np.mean(night) - expected) < 0.01


def test_delay_cdf_matches_truncated_exponential():
    rep = analyze(flat_world())
    for row in rep.delay_cdf:
        x = row["delay_days"]
        for rate, key, n_key, w in ((8.0, "conversion_cdf", "n_conversions", WIN.w_attr_v),
                                    (40.0, "refund_cdf", "n_refunds", WIN.w_attr_r)):
            F = -math.expm1(-rate * min(x, w)) / -math.expm1(-rate * w)
            sigma = math.sqrt(max(F * (1 - F), 1e-12) / row[n_key])
            assert abs(row[key] - F) < 4.5 * sigma + 1e-12


def test_hourly_counts_match_a_direct_count():
    table = random_table(3000, seed=2)
    rep = analyze(table)
    clicks, conv = [0] * 24, [0] * 24
    for i in range(len(table)):
        h = int(24 * (table.t_c[i] - math.floor(table.t_c[i]))) % 24
        clicks[h] += 1
        conv[h] += int(table.h_v[i] <= WIN.w_attr_v)
    assert [r["clicks"] for r in rep.hourly] == clicks
    assert [r["conversions"] for r in rep.hourly] == conv


def test_bins_and_groups_document_their_edges():
    rep = analyze(flat_world(n_clicks=30_000))
    edges = rep.meta["cvr_edges"]
    assert [(r["cvr_lo"], r["cvr_hi"]) for r in rep.cvr_bins] == list(zip(edges[:-1], edges[1:]))
    users = {int(u) for u in np.unique(generate_table(zero_weight_config(
        0.1, 0.3, n_clicks=30_000, n_users=2000, n_items=500, horizon=10.0, seed=4)).feats[:, 0])}
    assert sum(r["users"] for r in rep.cvr_bins) <= len(users)
    cvr_rows = [r for r in rep.delay_by_group if r["grouping"] == "cvr"]
    assert [r["group"] for r in cvr_rows] == ["low", "mid", "high"]
    assert cvr_rows[0]["boundary_lo"] is None and cvr_rows[2]["boundary_hi"] is None
    assert cvr_rows[0]["boundary_hi"] <= cvr_rows[2]["boundary_lo"]


def test_faster_converters_show_shorter_delays():
    from netcvr.datagen import GroundTruthConfig
    table = generate_table(GroundTruthConfig(n_clicks=150_000, n_users=3000, n_items=2000, horizon=10.0, seed=1))
    rows = {r["group"]: r for r in analyze(table).delay_by_group if r["grouping"] == "cvr"}
    assert rows["high"]["mean_days"] < rows["low"]["mean_days"]


def test_write_emits_csv_and_json(tmp_path):
    rep = analyze(random_table(500, seed=0))
    paths = rep.write(tmp_path)
    assert sorted(p.name for p in paths) == sorted(
        ["hourly.csv", "cvr_bins.csv", "delay_by_group.csv", "delay_cdf.csv", "analysis.json"])
    with (tmp_path / "hourly.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 24
    assert json.loads((tmp_path / "analysis.json").read_text())["meta"]["n_clicks"] == 500


def test_empty_log():
    rep = analyze(random_table(0, seed=0))
    assert all(r["clicks"] == 0 and r["cvr"] is None for r in rep.hourly)
    assert all(r["conversion_cdf"] is None for r in rep.delay_cdf)
