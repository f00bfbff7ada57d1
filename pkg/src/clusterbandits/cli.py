"""Command line interface: generate instances, run experiments, scaling
studies, assumption checks, and plot re-rendering.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench, checker, env


def _load_config(path: str, seed_list: str | None) -> bench.ExperimentConfig:
    config = bench.parse_config(Path(path).read_text())
    if seed_list:
        config.experiment["seeds"] = seed_list
    return config


def _cmd_generate(args) -> int:
    config = _load_config(args.config, None)
    instance = bench.build_instance(config.instance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    env.save_instance(instance, out / "instance.txt")
    print(f"wrote {out / 'instance.txt'}")
    if args.check or config.check:
        report = checker.assumption_report(instance)
        (out / "assumptions.txt").write_text(report.to_text())
        print(f"wrote {out / 'assumptions.txt'}")
    return 0


def _cmd_run(args) -> int:
    config = _load_config(args.config, args.seed_list)
    if args.full_history:
        config.experiment["full_history"] = "true"
    if args.check:
        config.experiment["check"] = "true"
    report = bench.run_experiment(
        config,
        progress=lambda a, T, s, r: print(f"{a} T={T} seed={s}: final regret {r:.1f}"),
    )
    paths = bench.emit_report(report, args.out)
    for name, p in sorted(paths.items()):
        print(f"wrote {p}")
    return 0


def _cmd_bench(args) -> int:
    config = _load_config(args.config, args.seed_list)
    if len(config.horizons) < 2:
        raise bench.ConfigError("experiment.horizons: scaling studies need several horizons")
    report = bench.run_experiment(
        config,
        progress=lambda a, T, s, r: print(f"{a} T={T} seed={s}: final regret {r:.1f}"),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = bench.scaling_rows(report)
    bench.write_csv(out / "scaling.csv", ["algorithm", "horizon", "seed", "final_regret"], rows)
    print(f"wrote {out / 'scaling.csv'}")
    for algo in dict.fromkeys(name for name, _ in config.algorithms):
        slope = bench.scaling_slope(rows, algo)
        print(f"{algo}: final-regret log-log slope vs horizon = {slope:.3f}")
    bench.emit_report(report, out)
    return 0


def _cmd_check(args) -> int:
    if args.instance:
        instance = env.load_instance(args.instance)
    else:
        config = _load_config(args.config, None)
        instance = bench.build_instance(config.instance)
    report = checker.assumption_report(instance)
    text = report.to_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "assumptions.txt").write_text(text)
        print(f"wrote {out / 'assumptions.txt'}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_plot(args) -> int:
    rows = bench.read_csv(Path(args.out) / "regret.csv")
    if not rows:
        raise bench.ConfigError("regret.csv: no rows to plot")
    summary = bench.summarize(rows)
    bench.write_csv(Path(args.out) / "summary.csv", bench.SUMMARY_FIELDS, summary)
    bench.write_regret_svg(summary, Path(args.out) / "regret.svg")
    print(f"wrote {Path(args.out) / 'regret.svg'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clusterbandits",
        description="Benchmark harness for multi-user bandits with latent cluster structure",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write an instance file from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed-list", default=None)
    p.add_argument("--check", action="store_true")
    p.add_argument("--full-history", action="store_true")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("bench", help="regret-scaling study over several horizons")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed-list", default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("check", help="assumption report for an instance")
    p.add_argument("--config", default=None)
    p.add_argument("--instance", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("plot", help="re-render regret.svg from regret.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except bench.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
