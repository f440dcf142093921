"""Batch command line: ``ranmtl <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import harness
from .scenario import PRESETS, ScenarioConfig, build_datasets, save_datasets
from .weighting import STRATEGIES


def _scenario_from_file(path: str | None, preset: str) -> ScenarioConfig:
    base = PRESETS[preset].to_dict()
    if path:
        data = yaml.safe_load(Path(path).read_text()) or {}
        preset = data.pop("preset", None)
        if preset:
            base = PRESETS[preset].to_dict()
        base.update(data)
    return ScenarioConfig.from_dict(base)


def _experiment(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    over = {}
    for key in ("seed", "epochs", "repeats", "workers"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "data", None):
        over["dataset"] = args.data
    return replace(cfg, **over)


def cmd_generate(args) -> int:
    config = _scenario_from_file(args.config, args.preset)
    nodes = build_datasets(config, args.seed)
    paths = save_datasets(nodes, args.out)
    for n, p in zip(nodes, paths):
        print(f"{p}  {n!r}")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    report = harness.run_experiment(cfg, log_dir=args.out)
    paths = harness.emit_report(report, args.out)
    print(json.dumps(report.summary[cfg.name], indent=1, default=str))
    print("wrote", ", ".join(map(str, paths)))
    return 0


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    nodes = harness.resolve_dataset(cfg.dataset, cfg.data_seed)
    table = harness.sweep_design_space(
        nodes, args.architectures or harness.SWEEP_ARCHITECTURES, args.weightings or STRATEGIES,
        repeats=cfg.repeats, seed=cfg.seed, epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        workers=cfg.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = table.write_csv(out / "sweep.csv")
    for r in table.ranked():
        print(f"{r['architecture']:>9} {r['weighting']:>9}  q25={r['omega_q25']:+.4f}  mean={r['omega_mean']:+.4f}")
    print("wrote", path)
    return 0


def cmd_topology(args) -> int:
    cfg = _experiment(args)
    nodes = harness.resolve_dataset(cfg.dataset, cfg.data_seed)
    report = harness.topology_comparison(nodes, cfg, args.variants or harness.COMPARISON, log_dir=args.out)
    harness.emit_report(report, args.out)
    for exp, imp in report.summary["improvement_pct"].items():
        print(exp, " ".join(f"{t}={v:+.2f}%" for t, v in imp.items()))
    return 0


def cmd_grouping(args) -> int:
    cfg = _experiment(args)
    nodes = harness.resolve_dataset(cfg.dataset, cfg.data_seed)
    rows, report = harness.grouping_sweep(nodes, base=cfg)
    harness.emit_report(report, args.out)
    path = Path(args.out) / "grouping.json"
    path.write_text(json.dumps(rows, indent=1))
    for r in rows:
        print(f"{r['task']:>4} {r['group']:<16} {r['value']:.6g}{'  *' if r['best'] else ''}")
    return 0


def cmd_sparse(args) -> int:
    nodes = harness.resolve_dataset(args.data, args.data_seed)
    sparse = harness.sparsify(nodes, args.fraction, args.seed)
    for p, n in zip(save_datasets(sparse, args.out), sparse):
        print(f"{p}  {n!r}")
    return 0


def cmd_report(args) -> int:
    if args.params:
        for r in harness.param_report():
            print(f"{r['model']:>8} {r['total']:>7}  shared={r['shared']:<6} {r['note']}")
        return 0
    if not args.dir:
        print("report: give a report directory or --params", file=sys.stderr)
        return 2
    report = harness.read_report(args.dir)
    print(report.header["omega"])
    for exp in report.experiments():
        means = report.final_means(exp)
        print(exp, " ".join(f"{t}={v:.6g}" for t, v in means.items()))
    for exp, imp in harness.improvement_table(report).items():
        print("improvement", exp, " ".join(f"{t}={v:+.2f}%" for t, v in imp.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ranmtl", description="Multi-task learning benchmark for RAN tasks")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build the synthetic node datasets")
    g.add_argument("--config", help="YAML/JSON scenario overrides (may name a preset)")
    g.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    def experiment_args(sp, out_default):
        sp.add_argument("--config", help="YAML/JSON experiment config")
        sp.add_argument("--data", help="dataset directory or preset name")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--repeats", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out", default=out_default)

    t = sub.add_parser("train", help="run one experiment config")
    experiment_args(t, "results/train")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="architecture x weighting design-space sweep")
    experiment_args(s, "results/sweep")
    s.add_argument("--architectures", nargs="+")
    s.add_argument("--weightings", nargs="+")
    s.set_defaults(func=cmd_sweep)

    tp = sub.add_parser("topology", help="compare local, global and federated training")
    experiment_args(tp, "results/topology")
    tp.add_argument("--variants", nargs="+", choices=harness.COMPARISON)
    tp.set_defaults(func=cmd_topology)

    gr = sub.add_parser("grouping", help="train every task subset")
    experiment_args(gr, "results/grouping")
    gr.set_defaults(func=cmd_grouping)

    sp = sub.add_parser("sparse", help="subsample train splits")
    sp.add_argument("--data", default="desk")
    sp.add_argument("--data-seed", type=int, default=0)
    sp.add_argument("--fraction", type=float, default=0.01)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sparse)

    r = sub.add_parser("report", help="summarize an emitted report")
    r.add_argument("dir", nargs="?")
    r.add_argument("--params", action="store_true", help="print parameter counts")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
