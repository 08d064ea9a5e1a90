"""Every training regime on one stream, from one pretrained checkpoint.

Attribution windows are shortened to one day so that the batch regime (which
waits for complete days plus both attribution windows) gets a few updates in
a ten-day log. Takes a couple of minutes on one core.

Run: python demos/03_regimes.py
"""

import time
from dataclasses import replace

from netcvr.baselines import RegimeSpec
from netcvr.config import RunConfig
from netcvr.experiment import prepare, pretrained_model, run

cfg = RunConfig()
cfg = replace(
    cfg,
    windows=cfg.windows.replace(w_attr_v=1.0, w_attr_r=1.0),
    ground_truth=replace(cfg.ground_truth, n_clicks=300_000, horizon=10.0),
    pretrain_end=3.0,
)
prepared = prepare(cfg)
print(f"stream: {prepared.plan.n_segments} segments from day {prepared.plan.stream_start:g}")
print("conversion tail model:", prepared.tail_v.metadata)
base = pretrained_model(cfg, prepared)

reports = {}
for regime in ("pretrained", "bdl", "fnc", "fnw", "esdfm", "tesla", "oracle"):
    t = time.time()
    spec = RegimeSpec.preset(regime)
    result = run(replace(cfg, regime=spec), prepared, base)
    reports[regime] = result.report
    print(f"{regime:<10} {time.time() - t:5.1f}s  updates {result.n_updates}")

print("\nregime      NetCVR AUC  PRAUC    RI-AUC    CVR PCOC  NetCVR PCOC")
for regime, rep in reports.items():
    rep = rep.with_reference(reports["pretrained"], reports["oracle"])
    n, c = rep.netcvr, rep.cvr
    print(f"{regime:<10}  {n.auc:.4f}      {n.prauc:.4f}  {n.ri_auc:7.2f}%  {c.pcoc:.3f}     {n.pcoc:.3f}")
