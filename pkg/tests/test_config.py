import json
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_config
from netcvr.baselines import RegimeSpec, ablation_spec
from netcvr.config import SCHEMA_VERSION, ConfigError, RunConfig, resolve_output
from netcvr.objective import RankingConfig


def test_default_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_json(cfg.to_json()) == cfg
    assert json.loads(cfg.to_json())["schema_version"] == SCHEMA_VERSION


@settings(max_examples=40, deadline=None)
@given(
    w_obs_v=st.floats(0.001, 0.25), w_obs_r=st.floats(0.0, 0.25), seg=st.sampled_from([0.01, 0.02, 0.05]),
    regime=st.sampled_from(["pretrained", "oracle", "bdl", "fnc", "fnw", "esdfm", "tesla"]),
    variant=st.sampled_from(["hybrid", "shared", "separate"]),
    seeds=st.tuples(st.integers(0, 2**31), st.integers(0, 2**31), st.integers(0, 2**31)),
    hidden=st.lists(st.integers(1, 64), min_size=1, max_size=4), k=st.integers(1, 8),
)
def test_round_trip_property(w_obs_v, w_obs_r, seg, regime, variant, seeds, hidden, k):
    base = tiny_config()
    regime_spec = RegimeSpec.preset(regime, variant)
    if regime_spec.use_dar:
        regime_spec = replace(regime_spec, ranking=RankingConfig(K=k))
    cfg = replace(
        base, windows=base.windows.replace(w_obs_v=w_obs_v, w_obs_r=w_obs_r, segment_len=seg),
        regime=regime_spec, model=replace(base.model, hidden=tuple(hidden)),
        seeds=replace(base.seeds, data=seeds[0], init=seeds[1], sampling=seeds[2]),
    )
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg and again.to_json() == cfg.to_json()


@pytest.mark.parametrize("doc,match", [
    ({"bogus": 1}, "unknown config keys"),
    ({"windows": {"w_obs_v": 0.01, "w_obs": 1}}, "windows: unknown"),
    ({"model": {"depth": 3}}, "model: unknown"),
    ({"train": {"lr": 0.1}}, "train: unknown"),
    ({"seeds": {"data": 1, "noise": 2}}, "seeds: unknown"),
    ({"ground_truth": {"n_click": 5}}, "ground_truth"),
    ({"regime": {"regime": "fnc", "cvr_debias": True}}, "regime"),
    ({"windows": {"w_obs_v": 5.0}}, "windows"),
    ({"schema_version": 2}, "schema_version"),
    ({"aggregation": "median"}, "aggregation"),
    ({"pretrain_end": 30.0}, "no streaming segment"),
    ({"windows": []}, "expected an object"),
])
def test_rejections(doc, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_dict(doc)


def test_invalid_json():
    with pytest.raises(ConfigError, match="not valid JSON"):
        RunConfig.from_json("{nope")


def test_seeds_flow_into_components():
    cfg = replace(tiny_config(), seeds=replace(tiny_config().seeds, data=7, init=8, sampling=9))
    assert cfg.data_config().seed == 7
    assert cfg.model_config().init_seed == 8
    assert cfg.delay_hyper().seed == 8


def test_ablation_regime_round_trips():
    cfg = replace(tiny_config(), regime=ablation_spec("RN", "separate"))
    assert RunConfig.from_json(cfg.to_json()).regime == cfg.regime


def test_output_root(monkeypatch, tmp_path):
    monkeypatch.setenv("NETCVR_OUTPUT_ROOT", str(tmp_path))
    assert resolve_output("a/b") == tmp_path / "a" / "b"
    assert str(resolve_output("/abs/x")) == "/abs/x"
    monkeypatch.delenv("NETCVR_OUTPUT_ROOT")
    assert str(resolve_output("a/b")) == "a/b"


def test_save_and_load(tmp_path):
    cfg = tiny_config()
    path = cfg.save(tmp_path / "deep" / "cfg.json")
    assert RunConfig.load(path) == cfg
