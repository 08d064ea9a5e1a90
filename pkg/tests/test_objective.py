import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from netcvr.objective import (
    RankingConfig, TrainingBatch, cvr_weights, dar_loss, debiased_bce, delay_stats, observed_distribution,
    positive_weights, rfr_weights, sample_negatives, sampling_probabilities, total_loss, weighted_bce,
)

probs = st.floats(1e-6, 1 - 1e-6)
tails = st.floats(0.0, 1.0)


def test_cvr_weight_examples():
    assert tuple(np.array(cvr_weights(0.3, 0.0), float)) == (1.0, 1.0)
    wp, wn = cvr_weights(0.5, 0.5)
    assert wp == pytest.approx(1.25) and wn == pytest.approx(5 / 6)
    wp, wn = cvr_weights(0.1, 0.9)
    assert wp == pytest.approx(1.09) and wn == pytest.approx(0.99091, abs=1e-5)


def test_rfr_weight_examples():
    assert tuple(np.array(rfr_weights(0.7, 0.0), float)) == (1.0, 1.0)
    assert rfr_weights(0.5, 1.0)[1] == pytest.approx(0.75)
    wp, wn = rfr_weights(0.3, 0.4)
    assert wp == pytest.approx(1.12)
    # (0.7 * 1.12) / (0.7 + 0.12) evaluated by hand
    assert wn == pytest.approx(0.784 / 0.82, rel=1e-12)
    assert wn == pytest.approx(0.956098, abs=1e-6)


def test_observed_distribution_examples():
    q_pos, q_neg = observed_distribution(0.5, 0.5)
    assert (q_pos, q_neg) == (pytest.approx(0.4), pytest.approx(0.6))
    q_pos, q_neg = observed_distribution(0.3, 0.0)
    assert (q_pos, q_neg) == (pytest.approx(0.3), pytest.approx(0.7))


@settings(max_examples=300)
@given(probs, tails)
def test_weights_undo_observation_bias(p, tail):
    wp, wn = cvr_weights(p, tail)
    q_pos, q_neg = observed_distribution(p, tail)
    assert q_pos + q_neg == pytest.approx(1.0, abs=1e-15)
    assert abs(wp * q_pos - p) < 1e-12 and abs(wn * q_neg - (1 - p)) < 1e-12
    assert 1.0 <= wp < 2.0 and 0.0 < wn <= 1.0 + 1e-15


def test_observed_distribution_matches_simulated_stream():
    # every click emits one initial label; late positives are duplicated, so the
    # positive share among emitted records is p / (1 + p * tail)
    rng = np.random.default_rng(0)
    p, tail, n = 0.3, 0.6, 400_000
    y = rng.random(n) < p
    late = y & (rng.random(n) < tail)
    positives = np.sum(y & ~late) + np.sum(late)
    total = n + np.sum(late)
    q_pos = observed_distribution(p, tail)[0]
    assert abs(positives / total - q_pos) < 4 * math.sqrt(q_pos * (1 - q_pos) / total)


def test_weighted_bce_examples():
    loss, g = weighted_bce([1], [0.0])
    assert loss == pytest.approx(math.log(2)) and g[0] == pytest.approx(-0.5)
    loss, g = weighted_bce([0], [math.log(0.25 / 0.75)], w_neg=[0.8])
    assert loss == pytest.approx(0.8 * -math.log(0.75)) and loss == pytest.approx(0.2301, abs=1e-4)
    assert g[0] == pytest.approx(0.8 * 0.25)


def test_weighted_bce_unit_weights_match_plain_cross_entropy():
    rng = np.random.default_rng(1)
    o = rng.normal(0, 3, 200)
    y = rng.random(200) < 0.3
    p = 1 / (1 + np.exp(-o))
    plain = -np.sum(np.where(y, np.log(p), np.log(1 - p)))
    loss, g = weighted_bce(y, o, np.ones(200), np.ones(200))
    assert loss == pytest.approx(plain, rel=1e-12)
    np.testing.assert_allclose(g, p - y, atol=1e-15)


def test_weighted_bce_gradient_is_weight_times_residual():
    o = np.array([-1.0, 2.0])
    y = np.array([1, 0])
    _, g = weighted_bce(y, o, w_pos=np.array([1.5, 9.0]), w_neg=np.array([9.0, 0.7]))
    p = 1 / (1 + np.exp(-o))
    np.testing.assert_allclose(g, [1.5 * (p[0] - 1), 0.7 * p[1]])


def test_logit_clamp_keeps_loss_finite():
    loss, g = weighted_bce([1, 0], [-1e6, 1e6])
    assert loss == pytest.approx(2 * 15.0, rel=1e-6) and np.all(np.isfinite(g))


def test_debiased_bce_routes_sets_and_empty():
    batch = TrainingBatch(P_v=np.array([0]), N_v=np.array([1]), P_r=np.array([2]), N_r=np.array([], int),
                          h_v=np.array([0.1]), h_r=np.array([0.2]))
    o = np.zeros(3)
    wv = (np.full(3, 2.0), np.full(3, 0.5))
    l_v, l_r, g_v, g_r = debiased_bce(batch, o, o, wv, None)
    assert l_v == pytest.approx(2.5 * math.log(2)) and l_r == pytest.approx(math.log(2))
    np.testing.assert_allclose(g_v, [-1.0, 0.25, 0.0])
    np.testing.assert_allclose(g_r, [0.0, 0.0, -0.5])
    empty = TrainingBatch(*(np.array([], int) for _ in range(4)), np.array([]), np.array([]))
    l_v, l_r, g_v, g_r = debiased_bce(empty, np.zeros(0), np.zeros(0))
    assert l_v == l_r == 0.0 and g_v.size == 0


def test_positive_weight_examples():
    cfg = RankingConfig(alpha=1.0, w_min=0.2)
    w = positive_weights([10.0, 50.0, 100.0, 200.0, 500.0], cfg)
    s = float(np.std([10, 50, 100, 200, 500], ddof=1))
    assert s == pytest.approx(196.6469, abs=1e-4)
    assert w[1] == pytest.approx(0.2 + 1 / (1 + math.exp(-50 / s)))
    assert w[1] == pytest.approx(0.76323, abs=1e-5)
    assert w[2] == pytest.approx(0.2 + 0.5)
    assert positive_weights([1e9] + [0.0] * 1000, cfg)[0] == pytest.approx(0.2, abs=1e-12)
    assert positive_weights([42.0], cfg)[0] == pytest.approx(0.7)


def test_delay_stats_clamp():
    assert delay_stats([3.0, 3.0, 3.0]).s == 1.0
    assert delay_stats([1.0]).m == 1.0
    with pytest.raises(ValueError):
        delay_stats([])


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=40), st.floats(0.1, 3), st.floats(0.01, 1))
def test_positive_weight_bounds(delays, alpha, w_min):
    w = positive_weights(delays, RankingConfig(alpha=alpha, w_min=w_min))
    assert np.all(w >= w_min - 1e-12) and np.all(w <= w_min + alpha + 1e-12)
    order = np.argsort(delays, kind="stable")
    assert np.all(np.diff(w[order]) <= 1e-12)


def test_sampling_probability_examples():
    pi = sampling_probabilities([0.2, 0.8], RankingConfig(sampling_mode="literal_linear"))
    np.testing.assert_allclose(pi, [0.8, 0.2])
    for mode in ("low_uncertainty_softmax", "literal_linear", "random", "high_uncertainty"):
        np.testing.assert_allclose(sampling_probabilities([0.3] * 4, RankingConfig(sampling_mode=mode)), 0.25)
    pi = sampling_probabilities([0.1, 0.9], RankingConfig(tau=1e9))
    np.testing.assert_allclose(pi, 0.5, atol=1e-8)
    pi = sampling_probabilities([0.1, 0.9], RankingConfig())
    assert pi[0] == pytest.approx(math.exp(0.9) / (math.exp(0.9) + math.exp(0.1)))
    pi = sampling_probabilities([0.1, 0.9], RankingConfig(sampling_mode="high_uncertainty"))
    assert pi[1] > pi[0]


def test_literal_mode_ignores_tau():
    a = sampling_probabilities([0.1, 0.5, 0.7], RankingConfig(sampling_mode="literal_linear", tau=0.1))
    b = sampling_probabilities([0.1, 0.5, 0.7], RankingConfig(sampling_mode="literal_linear", tau=10.0))
    np.testing.assert_allclose(a, b)


def test_all_certain_negatives_fall_back_to_uniform():
    with pytest.warns(RuntimeWarning):
        pi = sampling_probabilities([1.0, 1.0], RankingConfig(sampling_mode="literal_linear"))
    np.testing.assert_allclose(pi, 0.5)


def test_sampling_frequencies_match_distribution():
    p_hat = np.array([0.05, 0.2, 0.5, 0.9, 0.99])
    cfg = RankingConfig(tau=0.3, K=5)
    pi = sampling_probabilities(p_hat, cfg)
    idx = sample_negatives(p_hat, cfg, 20_000, np.random.default_rng(3))
    assert idx.shape == (20_000, 5)
    counts = np.bincount(idx.ravel(), minlength=5)
    chi2 = stats.chisquare(counts, pi * counts.sum())
    assert chi2.pvalue > 1e-3


def test_dar_loss_examples():
    loss, d_pos, d_neg = dar_loss([0.3], [[0.3]], [1.0])
    assert loss == pytest.approx(math.log(2))
    loss, d_pos, d_neg = dar_loss([2.0], [[0.0]], [1.0])
    assert loss == pytest.approx(-math.log(1 / (1 + math.exp(-2))))
    assert loss == pytest.approx(0.1269, abs=1e-4)
    assert d_pos[0] == pytest.approx(-(1 - 1 / (1 + math.exp(-2))))
    assert d_neg[0, 0] == pytest.approx(-d_pos[0])
    loss, d_pos, d_neg = dar_loss(np.zeros(0), np.zeros((0, 2)), np.zeros(0))
    assert loss == 0.0


def test_dar_loss_linear_in_weights_and_shift_invariant():
    rng = np.random.default_rng(4)
    o_pos, o_neg, w = rng.normal(size=6), rng.normal(size=(6, 3)), rng.uniform(0.2, 1.2, 6)
    l1, gp1, gn1 = dar_loss(o_pos, o_neg, w)
    l2, gp2, gn2 = dar_loss(o_pos, o_neg, 2 * w)
    assert l2 == pytest.approx(2 * l1)
    np.testing.assert_allclose(gp2, 2 * gp1)
    np.testing.assert_allclose(gn2, 2 * gn1)
    l3, gp3, gn3 = dar_loss(o_pos + 7.5, o_neg + 7.5, w)
    assert l3 == pytest.approx(l1)
    np.testing.assert_allclose(gp3, gp1)
    np.testing.assert_allclose(gn3, gn1)


def test_dar_gradient_finite_differences():
    rng = np.random.default_rng(5)
    o_pos, o_neg, w = rng.normal(size=4), rng.normal(size=(4, 3)), rng.uniform(0.2, 1.2, 4)
    _, gp, gn = dar_loss(o_pos, o_neg, w)
    h = 1e-6
    for arr, g in ((o_pos, gp), (o_neg, gn)):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = dar_loss(o_pos, o_neg, w)[0]
            flat[i] = old - h
            down = dar_loss(o_pos, o_neg, w)[0]
            flat[i] = old
            num = (up - down) / (2 * h)
            assert abs(num - gflat[i]) <= 1e-4 * max(abs(num), abs(gflat[i]), 1e-8)


def test_total_loss():
    assert total_loss(1, 1, 1, 1) == 4
    assert total_loss(0.5, 0, 0.25, 0) == 0.75
    assert total_loss(1, 2, 3, 4, coef=(1, 0, 1, 0)) == 4


@pytest.mark.parametrize("kw", [dict(alpha=0), dict(w_min=-1), dict(tau=0), dict(K=0), dict(K=1.5),
                                dict(sampling_mode="greedy")])
def test_ranking_config_validation(kw):
    with pytest.raises(ValueError):
        RankingConfig(**kw)
