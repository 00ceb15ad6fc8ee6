"""Run statistics and artifact serialization.

Summary numbers are pure functions of the metric series, so everything in
summary.txt can be recomputed from metrics.csv alone.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError

CSV_NAME = "metrics.csv"
REPORT_NAME = "report.json"
SUMMARY_NAME = "summary.txt"


@dataclass
class RoundMetrics:
    t: int
    client_accs: list[float]
    mean_acc: float
    worst_acc: float
    mean_train_loss: float

    def __post_init__(self) -> None:
        if self.client_accs:
            best = max(self.client_accs)
            if not (self.worst_acc <= self.mean_acc + 1e-12 and self.mean_acc <= best + 1e-12):
                raise ValueError("round metrics must satisfy worst <= mean <= best")


@dataclass
class RunReport:
    config: dict
    rounds: list[RoundMetrics]
    summary: dict
    duration_sec: float

    def __post_init__(self) -> None:
        ts = [r.t for r in self.rounds]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("round series must be strictly increasing in t")


def top_k_mean(series: list[float], k: int) -> float:
    """Mean of the k largest values; k is clamped to the series length."""
    if not len(series):
        raise ValueError("empty series")
    if k < 1:
        raise ValueError("k must be >= 1")
    ordered = sorted(series, reverse=True)
    top = ordered[: min(k, len(ordered))]
    return float(sum(top) / len(top))


def rounds_to_threshold(ts: list[int], values: list[float], threshold: float) -> int | None:
    """First round index whose value reaches the threshold, or None."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    for t, v in zip(ts, values):
        if v >= threshold:
            return t
    return None


def speedup(baseline_rounds: int | None, alg_rounds: int | None) -> float | None:
    if baseline_rounds is None or alg_rounds is None or alg_rounds <= 0:
        return None
    return baseline_rounds / alg_rounds


def build_summary(
    rounds: list[RoundMetrics], threshold_acc: float, threshold_worst: float, k: int = 5
) -> dict:
    ts = [r.t for r in rounds]
    mean_series = [r.mean_acc for r in rounds]
    worst_series = [r.worst_acc for r in rounds]
    return {
        "top5_mean_acc": top_k_mean(mean_series, k) if rounds else None,
        "top5_worst_acc": top_k_mean(worst_series, k) if rounds else None,
        "rounds_to_mean_threshold": rounds_to_threshold(ts, mean_series, threshold_acc),
        "rounds_to_worst_threshold": rounds_to_threshold(ts, worst_series, threshold_worst),
        "threshold_acc": threshold_acc,
        "threshold_worst": threshold_worst,
        "final_mean_acc": mean_series[-1] if rounds else None,
        "final_worst_acc": worst_series[-1] if rounds else None,
    }


def _fmt(value: float) -> str:
    return repr(float(value))


def _pct(value: float | None) -> str:
    return "-" if value is None else f"{100.0 * value:.2f}"


def _rounds_cell(value: int | None) -> str:
    return "-" if value is None else str(value)


def export_run(report: RunReport, out_dir: str) -> None:
    """Write metrics.csv, report.json, summary.txt and per-metric TSVs."""
    os.makedirs(out_dir, exist_ok=True)
    n_clients = len(report.rounds[0].client_accs) if report.rounds else 0
    header = ["t", "mean_acc", "worst_acc", "mean_train_loss"] + [
        f"acc_c{i}" for i in range(n_clients)
    ]
    lines = [",".join(header)]
    for r in report.rounds:
        row = [str(r.t), _fmt(r.mean_acc), _fmt(r.worst_acc), _fmt(r.mean_train_loss)]
        row += [_fmt(a) for a in r.client_accs]
        lines.append(",".join(row))
    _write_text(os.path.join(out_dir, CSV_NAME), "\n".join(lines) + "\n")

    payload = {
        "config": report.config,
        "rounds": [
            {
                "t": r.t,
                "mean_acc": r.mean_acc,
                "worst_acc": r.worst_acc,
                "mean_train_loss": r.mean_train_loss,
                "client_accs": r.client_accs,
            }
            for r in report.rounds
        ],
        "summary": report.summary,
        "duration_sec": report.duration_sec,
    }
    _write_text(os.path.join(out_dir, REPORT_NAME), json.dumps(payload, indent=2) + "\n")

    s = report.summary
    alg = report.config.get("algorithm", {}).get("kind", "?")
    summary_lines = [
        f"algorithm                     {alg}",
        f"evaluated rounds              {len(report.rounds)}",
        f"top-5 mean accuracy           {_pct(s['top5_mean_acc'])}",
        f"top-5 worst-client accuracy   {_pct(s['top5_worst_acc'])}",
        f"rounds to mean acc >= {_pct(s['threshold_acc'])}%   {_rounds_cell(s['rounds_to_mean_threshold'])}",
        f"rounds to worst acc >= {_pct(s['threshold_worst'])}%  {_rounds_cell(s['rounds_to_worst_threshold'])}",
        f"final mean accuracy           {_pct(s['final_mean_acc'])}",
    ]
    _write_text(os.path.join(out_dir, SUMMARY_NAME), "\n".join(summary_lines) + "\n")

    for name, getter in (("mean_acc", lambda r: r.mean_acc), ("worst_acc", lambda r: r.worst_acc)):
        rows = [f"{r.t}\t{_fmt(getter(r))}" for r in report.rounds]
        _write_text(os.path.join(out_dir, f"{name}.tsv"), "\n".join(rows) + ("\n" if rows else ""))


def _write_text(path: str, content: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(content)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def load_report(path: str) -> RunReport:
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rounds = [
        RoundMetrics(
            t=r["t"],
            client_accs=list(r["client_accs"]),
            mean_acc=r["mean_acc"],
            worst_acc=r["worst_acc"],
            mean_train_loss=r["mean_train_loss"],
        )
        for r in payload["rounds"]
    ]
    return RunReport(
        config=payload["config"],
        rounds=rounds,
        summary=payload["summary"],
        duration_sec=payload["duration_sec"],
    )


def load_metrics_csv(path: str) -> tuple[list[int], np.ndarray, np.ndarray, np.ndarray]:
    """Read back (ts, mean_acc, worst_acc, per-client accuracy matrix)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln for ln in f.read().splitlines() if ln]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not lines or not lines[0].startswith("t,mean_acc,worst_acc"):
        raise DataError(f"{path}: not a metrics.csv file")
    ts, means, worsts, clients = [], [], [], []
    for ln in lines[1:]:
        cells = ln.split(",")
        ts.append(int(cells[0]))
        means.append(float(cells[1]))
        worsts.append(float(cells[2]))
        clients.append([float(c) for c in cells[4:]])
    return ts, np.asarray(means), np.asarray(worsts), np.asarray(clients)
