"""Command line: generate, analyze, pretrain, run, sweep, report.

Every subcommand takes ``--config`` (a RunConfig JSON file); individual flags
override single fields of it. Relative output paths go under
``$NETCVR_OUTPUT_ROOT`` when that variable is set.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .analysis import analyze
from .baselines import REGIMES, VARIANTS, RegimeSpec, ablation_spec
from .checkpoint import save_checkpoint
from .config import ConfigError, RunConfig, resolve_output
from .datagen import generate_table
from .experiment import (
    SWEEP_AXES, compare_reports, execute, load_table, prepare, pretrained_model, sweep, write_rows,
)
from .stream import LogFormatError, write_cascade_jsonl
from .training import TrainingDivergedError


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from err


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from err


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON file")
    g = p.add_argument_group("overrides")
    g.add_argument("--log", help="input JSONL event log (instead of generating)")
    g.add_argument("--out", help="output directory")
    g.add_argument("--checkpoint", help="pretrained checkpoint path")
    g.add_argument("--n-clicks", type=int)
    g.add_argument("--horizon", type=float)
    g.add_argument("--pretrain-end", type=float)
    g.add_argument("--w-obs-v", type=float)
    g.add_argument("--w-obs-r", type=float)
    g.add_argument("--w-attr-v", type=float)
    g.add_argument("--w-attr-r", type=float)
    g.add_argument("--segment-len", type=float)
    g.add_argument("--regime", choices=REGIMES)
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--ablation", help="named ablation of the full method, e.g. NR, RN, LN, DAR, ROW-DS-")
    g.add_argument("--direct-netcvr-head", action="store_true")
    g.add_argument("--d-emb", type=int)
    g.add_argument("--hidden", type=_ints)
    g.add_argument("--bn-momentum", type=float)
    g.add_argument("--lr", type=float, help="streaming learning rate")
    g.add_argument("--pretrain-lr", type=float)
    g.add_argument("--batch-size", type=int, help="pretraining/batch-regime minibatch size")
    g.add_argument("--seed-data", type=int)
    g.add_argument("--seed-init", type=int)
    g.add_argument("--seed-sampling", type=int)
    g.add_argument("--aggregation", choices=("pooled", "segment_mean"))


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    paths = cfg.paths
    if args.log:
        paths = replace(paths, log=args.log)
    if args.out:
        paths = replace(paths, out_dir=args.out)
    if args.checkpoint:
        paths = replace(paths, checkpoint=args.checkpoint)
    gt = cfg.ground_truth
    if args.n_clicks is not None:
        gt = replace(gt, n_clicks=args.n_clicks)
    if args.horizon is not None:
        gt = replace(gt, horizon=args.horizon)
    win = {k: getattr(args, k) for k in ("w_obs_v", "w_obs_r", "w_attr_v", "w_attr_r", "segment_len")}
    win = {k: v for k, v in win.items() if v is not None}
    try:
        windows = cfg.windows.replace(**win)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    regime = cfg.regime
    if args.ablation:
        regime = ablation_spec(args.ablation, args.variant or regime.variant)
    elif args.regime:
        regime = RegimeSpec.preset(args.regime, args.variant or regime.variant)
    elif args.variant:
        regime = replace(regime, variant=args.variant)
    if args.direct_netcvr_head:
        regime = replace(regime, direct_netcvr_head=True)
    model = cfg.model
    for flag, key in (("d_emb", "d_emb"), ("hidden", "hidden"), ("bn_momentum", "bn_momentum")):
        if getattr(args, flag) is not None:
            model = replace(model, **{key: getattr(args, flag)})
    train = cfg.train
    if args.lr is not None:
        train = replace(train, stream_lr=args.lr)
    if args.pretrain_lr is not None:
        train = replace(train, pretrain_lr=args.pretrain_lr)
    if args.batch_size is not None:
        train = replace(train, pretrain_batch=args.batch_size, bdl_batch=args.batch_size)
    seeds = cfg.seeds
    for flag, key in (("seed_data", "data"), ("seed_init", "init"), ("seed_sampling", "sampling")):
        if getattr(args, flag) is not None:
            seeds = replace(seeds, **{key: getattr(args, flag)})
    return RunConfig(
        paths=paths, windows=windows, ground_truth=gt, regime=regime, model=model, train=train,
        delay=cfg.delay, pretrain_end=args.pretrain_end if args.pretrain_end is not None else cfg.pretrain_end,
        seeds=seeds, aggregation=args.aggregation or cfg.aggregation,
    )


def cmd_generate(args) -> int:
    cfg = build_config(args)
    out = resolve_output(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_cascade_jsonl(generate_table(cfg.data_config()), out)
    cfg.save(out.with_name(out.name + ".config.json"))
    print(f"wrote {n} events to {out}")
    return 0


def cmd_analyze(args) -> int:
    cfg = build_config(args)
    table = load_table(cfg)
    report = analyze(table, cfg.windows)
    out = cfg.out_dir()
    for path in report.write(out):
        print(path)
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_config(args)
    prepared = prepare(cfg)
    model = pretrained_model(cfg, prepared)
    target = resolve_output(cfg.paths.checkpoint or cfg.out_dir() / "pretrained.ckpt")
    target.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        model, target, {"config": cfg.to_dict()}, tails={"tail_v": prepared.tail_v, "tail_r": prepared.tail_r}
    )
    print(f"wrote {target}")
    return 0


def cmd_run(args) -> int:
    cfg = build_config(args)
    report = execute(cfg)
    m = report["metrics"]
    print(json.dumps({"netcvr_auc": m["netcvr"]["auc"], "cvr_auc": m["cvr"]["auc"],
                      "netcvr_pcoc": m["netcvr"]["pcoc"], "out_dir": str(cfg.out_dir())}))
    return 0


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    rows = sweep(cfg, args.axis, args.values)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / f"sweep_{args.axis}.csv", rows)
    (out / f"sweep_{args.axis}.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    for row in rows:
        print(f"{row['axis']}={row['value']:g}  netcvr_auc={row['netcvr_auc']}  netcvr_prauc={row['netcvr_prauc']}")
    return 0


def cmd_report(args) -> int:
    reports = {}
    for spec in args.runs:
        name, path = spec.split("=", 1) if "=" in spec else (None, spec)
        path = Path(path)
        file = path / "report.json" if path.is_dir() else path
        reports[name or (path.name if path.is_dir() else path.stem)] = json.loads(file.read_text())
    rows = compare_reports(reports, args.pretrained, args.oracle)
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "comparison.csv", rows)
    (out / "comparison.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    for row in rows:
        print(f"{row['run']:<16} netcvr_auc={row['netcvr_auc']} netcvr_prauc={row['netcvr_prauc']} "
              f"ri_auc={row['netcvr_ri_auc']}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netcvr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic JSONL event log")
    _common(p)
    p.add_argument("output", help="JSONL file to write")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="hourly, CVR-bin, delay-group and delay-CDF tables")
    _common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("pretrain", help="fit and save the shared starting checkpoint")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="replay the stream under one regime")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="one run per window value")
    _common(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", type=_floats, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="compare finished runs, with RI columns")
    p.add_argument("runs", nargs="+", help="run directories or report files, optionally NAME=PATH")
    p.add_argument("--pretrained", help="name of the pretrained reference run")
    p.add_argument("--oracle", help="name of the oracle reference run")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, LogFormatError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingDivergedError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
