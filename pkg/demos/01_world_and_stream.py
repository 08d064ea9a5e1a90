"""A small synthetic world, its label census, and how its clicks reach training.

Run: python demos/01_world_and_stream.py
"""

import numpy as np

from netcvr.analysis import analyze
from netcvr.datagen import GroundTruthConfig, generate_table
from netcvr.domain import WindowConfig, classify_trajectory_array, trajectory_counts
from netcvr.stream import DeliveryKind, build_delivery_schedule

windows = WindowConfig()  # 0.01-day observation windows, 3-day attribution windows
table = generate_table(GroundTruthConfig(n_clicks=100_000, n_users=5_000, n_items=3_000, horizon=10.0, seed=1))
print(f"{len(table)} clicks over {table.t_c.max():.2f} days")

# seven trajectory types: when (if ever) a click converts and refunds
for name, count in trajectory_counts(classify_trajectory_array(table, windows)).items():
    print(f"  {name:<12} {count:>7}")

# late-night hours convert less often
report = analyze(table, windows)
for row in report.hourly[::4]:
    print(f"hour {row['hour']:>2}: clicks {row['clicks']:>6}  cvr {row['cvr']:.4f}  netcvr {row['netcvr']:.4f}")

# the delivery schedule: one record per emitted training label
sched = build_delivery_schedule(table, windows)
kinds = np.bincount(sched.kind.astype(int), minlength=len(DeliveryKind))
for kind in DeliveryKind:
    print(f"{kind.name:<28} {kinds[kind]:>7}")

# most conversions arrive after the short observation window, so they show
# up first as a negative and later as a duplicate positive
late = kinds[DeliveryKind.CVR_POSITIVE_DUPLICATE] / max(kinds[1] + kinds[2], 1)
print(f"share of conversions delivered as duplicates: {late:.3f}")

first = sched.row == sched.row[np.flatnonzero(sched.kind == DeliveryKind.CVR_POSITIVE_DUPLICATE)[0]]
print("records of one late converter:")
for r in np.flatnonzero(first):
    print(f"  t={sched.t_o[r]:.4f}  {DeliveryKind(sched.kind[r]).name}")
