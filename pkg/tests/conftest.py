import numpy as np
import pytest
from hypothesis import strategies as st

from netcvr.domain import N_FIELDS, ClickEvent, EventTable


def event(eid=0, t_c=0.0, t_v=None, t_r=None, feats=None):
    feats = tuple(feats) if feats is not None else (0,) * N_FIELDS
    return ClickEvent(eid, feats, t_c, t_v, t_r)


def random_table(n, seed=0, p_conv=0.4, p_refund=0.4, conv_scale=0.3, refund_scale=0.3, span=5.0, card=7):
    """Click-time sorted table with exponential delays; some delays fall past 3 days."""
    rng = np.random.default_rng(seed)
    t_c = np.sort(rng.uniform(0, span, n))
    conv = rng.random(n) < p_conv
    t_v = np.where(conv, t_c + rng.exponential(conv_scale, n), np.nan)
    refd = conv & (rng.random(n) < p_refund)
    t_r = np.where(refd, t_v + rng.exponential(refund_scale, n), np.nan)
    feats = rng.integers(0, card, size=(n, N_FIELDS))
    return EventTable(np.arange(n), feats, t_c, t_v, t_r)


@st.composite
def event_tables(draw, max_size=60):
    n = draw(st.integers(1, max_size))
    seed = draw(st.integers(0, 2**31 - 1))
    scale = draw(st.sampled_from([0.003, 0.02, 0.5, 2.0]))
    return random_table(n, seed, conv_scale=scale, refund_scale=scale, span=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(out_dir="runs/tiny", **changes):
    """A RunConfig small enough to pretrain and replay in about a second."""
    from dataclasses import replace

    from netcvr.config import ModelHyper, Paths, RunConfig
    from netcvr.datagen import GroundTruthConfig
    from netcvr.delay_model import DelayHyper
    from netcvr.domain import WindowConfig
    from netcvr.training import TrainConfig

    cfg = RunConfig(
        paths=Paths(out_dir=str(out_dir)),
        windows=WindowConfig(w_obs_v=0.01, w_obs_r=0.01, w_attr_v=0.25, w_attr_r=0.25, segment_len=0.05),
        ground_truth=GroundTruthConfig(n_clicks=6000, n_users=400, n_items=300, horizon=2.0,
                                       lambda_v=20.0, item_lifetime=None),
        model=ModelHyper(d_emb=2, d_shared=4, hidden=(8, 4)),
        train=TrainConfig(pretrain_batch=256, bdl_batch=256, trace_auc_every=5),
        delay=DelayHyper(epochs=1, min_positives=20),
        pretrain_end=1.0,
    )
    return replace(cfg, **changes) if changes else cfg


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
