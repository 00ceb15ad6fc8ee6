"""Command-line entry points: run, probe, compare.

Exit codes: 0 success, 2 configuration/usage errors, 3 data errors
(missing or malformed dataset files), 1 anything else.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import engine, metrics, probe
from .config import RunConfig, parse_config
from .errors import ConfigError, DataError

OUT_ROOT_ENV = "FEDAUG_OUT"


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = parse_config(path=args.config, overrides=args.set)
    if args.seed is not None:
        cfg.schedule.seed = args.seed
    return cfg


def _resolve_out_dir(args: argparse.Namespace, cfg: RunConfig, default_name: str) -> str:
    if args.out:
        return args.out
    if cfg.output.dir:
        return cfg.output.dir
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return os.path.join(root, default_name)


def _check_collision(out_dir: str, force: bool, markers: tuple[str, ...]) -> None:
    existing = [m for m in markers if os.path.exists(os.path.join(out_dir, m))]
    if existing and not force:
        raise ConfigError(
            f"output dir {out_dir} already holds {existing[0]}; pass --force to overwrite"
        )


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    name = f"{cfg.dataset.kind}-{cfg.algorithm.kind}-s{cfg.schedule.seed}"
    out_dir = _resolve_out_dir(args, cfg, name)
    _check_collision(out_dir, args.force, (metrics.CSV_NAME, metrics.REPORT_NAME))
    report = engine.run_simulation(cfg)
    metrics.export_run(report, out_dir)
    s = report.summary
    final = s["final_mean_acc"]
    worst = s["final_worst_acc"]
    print(
        f"{cfg.algorithm.kind}: rounds={cfg.schedule.rounds} "
        f"final_mean_acc={final:.4f} final_worst_acc={worst:.4f} out={out_dir}"
        if final is not None
        else f"{cfg.algorithm.kind}: no evaluated rounds, out={out_dir}"
    )
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out_dir = _resolve_out_dir(args, cfg, f"probe-{cfg.dataset.kind}-s{cfg.schedule.seed}")
    _check_collision(out_dir, args.force, ("probe_report.json",))
    ds = engine.load_base_dataset(cfg)
    p = cfg.probe
    report, artifacts = probe.run_probe(
        ds, p.classes, p.epochs, p.lr, cfg.schedule.seed,
        hidden=tuple(cfg.model.hidden), batch_size=p.batch_size,
        holdout=p.holdout, n_pairs=p.pairs,
    )
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "probe_report.json"), "w", encoding="utf-8") as f:
        json.dump(dataclasses.asdict(report), f, indent=2)
        f.write("\n")
    probe.export_features(
        artifacts.local_model.phi, artifacts.x1_held,
        os.path.join(out_dir, "features_local_seen.csv"),
    )
    probe.export_features(
        artifacts.local_model.phi, artifacts.x2_held,
        os.path.join(out_dir, "features_local_unseen.csv"),
    )
    probe.export_features(
        artifacts.global_model.phi, artifacts.x1_held,
        os.path.join(out_dir, "features_global_seen.csv"),
    )
    probe.export_features(
        artifacts.global_model.phi, artifacts.x2_held,
        os.path.join(out_dir, "features_global_unseen.csv"),
    )
    print(
        f"probe: classifier_bias={report.classifier_bias:.4f} "
        f"s_cross={report.s_cross:.4f} s_local={report.s_local:.4f} out={out_dir}"
    )
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    print(compare_table(args.dirs, threshold=args.threshold))
    return 0


def compare_table(dirs: list[str], threshold: float | None = None) -> str:
    """Summarize several run dirs side by side; the first one is the baseline."""
    loaded = []
    for d in dirs:
        report = metrics.load_report(os.path.join(d, metrics.REPORT_NAME))
        ts, means, worsts, _ = metrics.load_metrics_csv(os.path.join(d, metrics.CSV_NAME))
        loaded.append((d, report, ts, means, worsts))
    cadences = {r.config["schedule"]["eval_every"] for _, r, _, _, _ in loaded}
    if len(cadences) > 1:
        raise ConfigError(f"runs have incompatible eval cadences: {sorted(cadences)}")
    thr = threshold if threshold is not None else loaded[0][1].config["output"]["threshold_acc"]

    rows = []
    base_rounds = None
    for i, (d, report, ts, means, worsts) in enumerate(loaded):
        top_mean = metrics.top_k_mean(list(means), 5)
        top_worst = metrics.top_k_mean(list(worsts), 5)
        reach = metrics.rounds_to_threshold(ts, list(means), thr)
        if i == 0:
            base_rounds = reach
        sp = metrics.speedup(base_rounds, reach)
        rows.append(
            (
                d,
                report.config["algorithm"]["kind"],
                f"{100 * top_mean:.2f}",
                f"{100 * top_worst:.2f}",
                "-" if reach is None else str(reach),
                "-" if sp is None else f"{sp:.1f}x",
            )
        )
    header = ("run", "algorithm", "acc(top5)", "worst(top5)", f"rounds@{100 * thr:.0f}%", "speedup")
    widths = [max(len(header[j]), *(len(r[j]) for r in rows)) for j in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header)]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedaug",
        description="Deterministic federated-learning simulator with pseudo-data "
        "augmentation algorithms and a local-bias probe.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="config file (defaults apply if omitted)")
        p.add_argument(
            "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable)",
        )
        p.add_argument("--seed", type=int, default=None, help="override schedule.seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p_run = sub.add_parser("run", help="run a federated training simulation")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_probe = sub.add_parser("probe", help="measure local learning bias on a class split")
    common(p_probe)
    p_probe.set_defaults(func=cmd_probe)

    p_cmp = sub.add_parser("compare", help="tabulate several finished runs")
    p_cmp.add_argument("dirs", nargs="+", help="run directories (first is the baseline)")
    p_cmp.add_argument("--threshold", type=float, default=None, help="accuracy threshold")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "compare" and len(args.dirs) < 2:
        parser.error("compare needs at least two run directories")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
