import math

import numpy as np
import pytest

from netcvr.datagen import DEFAULT_CARDINALITIES, GroundTruthConfig, generate_table, probe_truth, zero_weight_config
from netcvr.delay_model import DelayHyper, DelayTailModel, fit_conversion_tail, fit_refund_tail
from netcvr.domain import WindowConfig, resolve_labels_array

CARDS = DEFAULT_CARDINALITIES


def world(**kw):
    base = dict(n_clicks=60_000, n_users=3_000, n_items=1_000, horizon=5.0)
    base.update(kw)
    return generate_table(zero_weight_config(0.5, 0.4, **base))


def converted(tab, w):
    return tab.feats[resolve_labels_array(tab, w)["y"].astype(bool)]


def test_feature_free_tail_matches_closed_form():
    tab = world(lambda_v=10.0)
    w = WindowConfig(w_obs_v=0.05)
    model = fit_conversion_tail(tab, w, CARDS)
    assert model.metadata["n_positives"] > 20_000 and model.metadata["fallback"] is None
    assert model.predict(converted(tab, w)).mean() == pytest.approx(math.exp(-0.5), abs=0.02)


def test_two_cohorts_are_separated():
    offsets = [0.0] * 22
    offsets[2] = [0.0, math.log(4.0), 0.0]  # gender 1 converts four times faster
    tab = world(lambda_v=5.0, delay_v_offsets=offsets, n_clicks=100_000)
    w = WindowConfig(w_obs_v=0.05)
    model = fit_conversion_tail(tab, w, CARDS)
    x = converted(tab, w)
    pred = model.predict(x)
    fast = x[:, 2] == 1
    assert pred[~fast].mean() == pytest.approx(math.exp(-0.25), abs=0.03)
    assert pred[fast].mean() == pytest.approx(math.exp(-1.0), abs=0.03)


def test_calibrated_on_featureful_world():
    cfg = GroundTruthConfig(n_clicks=200_000, n_users=5_000, n_items=2_000, horizon=5.0, lambda_v=8.0,
                            delay_v_coupling=1.0)
    tab = generate_table(cfg)
    w = WindowConfig(w_obs_v=0.1)
    model = fit_conversion_tail(tab, w, CARDS)
    assert model.metadata["n_positives"] >= 10_000
    x = converted(tab, w)
    truth = probe_truth(cfg, x).tail_v(0.1)
    assert abs(model.predict(x).mean() - truth.mean()) < 0.03
    assert np.corrcoef(model.predict(x), truth)[0, 1] > 0.5


def test_tiny_window_tail_is_one():
    tab = world(lambda_v=10.0, n_clicks=5_000)
    model = fit_conversion_tail(tab, WindowConfig(w_obs_v=1e-9), CARDS)
    assert np.all(model.predict(tab.feats[:50]) == 1.0)
    assert model.metadata["fallback"] == "single_class"


def test_refund_tail_closed_form():
    tab = world(lambda_r=20.0)
    w = WindowConfig(w_obs_r=0.05)
    model = fit_refund_tail(tab, w, CARDS)
    refunded = tab.feats[resolve_labels_array(tab, w)["z"].astype(bool)]
    assert model.predict(refunded).mean() == pytest.approx(math.exp(-1.0), abs=0.02)


def test_refund_window_equal_to_attribution_gives_zero_tail():
    tab = world(lambda_r=1.0, n_clicks=10_000)
    model = fit_refund_tail(tab, WindowConfig(w_obs_r=3.0), CARDS)
    assert np.all(model.predict(tab.feats[:10]) == 0.0)


def test_no_refunds_falls_back_with_warning():
    tab = generate_table(zero_weight_config(0.3, 1e-9, n_clicks=2_000, n_users=100, n_items=100, horizon=2.0))
    with pytest.warns(RuntimeWarning, match="no positives"):
        model = fit_refund_tail(tab, WindowConfig(), CARDS)
    assert model.constant == 0.0 and model.metadata["fallback"] == "no_positives"


def test_few_positives_use_empirical_constant():
    tab = world(lambda_v=10.0, n_clicks=200)
    with pytest.warns(RuntimeWarning, match="empirical constant"):
        model = fit_conversion_tail(tab, WindowConfig(w_obs_v=0.05), CARDS)
    assert model.metadata["fallback"] == "too_few_positives"
    assert 0.0 < model.constant < 1.0


def test_empirical_mode():
    tab = world(lambda_v=10.0, n_clicks=20_000)
    w = WindowConfig(w_obs_v=0.05)
    model = fit_conversion_tail(tab, w, CARDS, DelayHyper(mode="empirical"))
    h = tab.h_v[resolve_labels_array(tab, w)["y"].astype(bool)]
    assert model.constant == pytest.approx(np.mean(h > 0.05))
    with pytest.raises(ValueError):
        DelayHyper(mode="kaplan")


def test_outputs_strictly_inside_unit_interval_and_serialisable():
    tab = world(lambda_v=10.0, n_clicks=20_000)
    model = fit_conversion_tail(tab, WindowConfig(w_obs_v=0.05), CARDS)
    p = model.predict(tab.feats)
    assert np.all((p > 0) & (p < 1))
    back = DelayTailModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(back.predict(tab.feats), p)
    assert back.fingerprint() == model.fingerprint()


def test_fit_is_deterministic():
    tab = world(lambda_v=10.0, n_clicks=20_000)
    w = WindowConfig(w_obs_v=0.05)
    assert fit_conversion_tail(tab, w, CARDS).fingerprint() == fit_conversion_tail(tab, w, CARDS).fingerprint()
