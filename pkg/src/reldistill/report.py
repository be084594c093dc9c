"""Aggregation of run results into comparison tables and sweep plots."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .engine import RunResult
from .errors import UsageError


def method_label(config: dict) -> str:
    """Human-readable method name derived from the loss weights."""
    alpha = config.get("alpha", 0)
    beta1 = config.get("beta1", 0)
    beta2 = config.get("beta2", 0)
    if beta1 > 0 and beta2 > 0:
        return "relation-distill(f+g)"
    if beta1 > 0:
        return "relation-distill(f)"
    if beta2 > 0:
        return "relation-distill(g)"
    if alpha > 0:
        return "kd"
    return "supervised"


def load_results(runs_dir: str | Path) -> list[RunResult]:
    """Collect every result.json under ``runs_dir`` (sorted by path)."""
    paths = sorted(Path(runs_dir).glob("**/result.json"))
    return [RunResult.from_json(p.read_text()) for p in paths]


def _group_key(result: RunResult) -> str:
    cfg = dict(result.config)
    cfg.pop("seed", None)
    if isinstance(cfg.get("data"), dict):
        cfg = dict(cfg)
        cfg["data"] = {k: v for k, v in cfg["data"].items() if k != "seed"}
    return json.dumps(cfg, sort_keys=True, default=list)


def fmt(x: float) -> str:
    return f"{x:.4g}"


def aggregate(results: list[RunResult]) -> list[dict]:
    """One row per config group: mean and std of top-1 across seeds."""
    if not results:
        raise UsageError("empty run set")
    groups: dict[str, list[RunResult]] = {}
    for res in results:
        groups.setdefault(_group_key(res), []).append(res)
    rows = []
    for key in sorted(groups):
        members = groups[key]
        cfg = members[0].config
        finals = np.array([m.final_top1 for m in members], dtype=np.float64)
        bests = np.array([m.best_top1 for m in members], dtype=np.float64)
        rows.append({
            "method": method_label(cfg),
            "teacher": Path(cfg.get("teacher_checkpoint", "") or "-").stem,
            "student": f"{cfg['student']['arch']}{cfg['student'].get('depth', '')}",
            "seeds": len(members),
            "top1_mean": float(finals.mean()),
            "top1_std": float(finals.std(ddof=0)),
            "best_mean": float(bests.mean()),
            "negatives": cfg.get("negatives"),
            "tau": cfg.get("tau"),
        })
    rows.sort(key=lambda r: (-r["top1_mean"], r["method"]))
    return rows


def write_table(rows: list[dict], out_dir: str | Path, fmt_kind: str = "csv") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt_kind == "json":
        path = out_dir / "comparison.json"
        lines = [json.dumps({k: (fmt(v) if isinstance(v, float) else v)
                             for k, v in row.items()}, sort_keys=True)
                 for row in rows]
        path.write_text("\n".join(lines) + "\n")
        return path
    if fmt_kind != "csv":
        raise UsageError(f"unknown format {fmt_kind!r}")
    path = out_dir / "comparison.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (fmt(v) if isinstance(v, float) else v)
                             for k, v in row.items()})
    return path


def plot_sweep(results: list[RunResult], axis: str, out_dir: str | Path) -> Path:
    """Line plot of mean top-1 (with std whiskers) against one config axis."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values: dict[float, list[float]] = {}
    for res in results:
        key = res.config.get(axis)
        if key is None:
            raise UsageError(f"axis {axis!r} not in run configs")
        values.setdefault(key, []).append(res.final_top1)
    xs = sorted(values)
    means = [float(np.mean(values[x])) for x in xs]
    stds = [float(np.std(values[x])) for x in xs]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"sweep_{axis}.png"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3)
    ax.set_xlabel(axis)
    ax.set_ylabel("test top-1")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def emit_report(results: list[RunResult], out_dir: str | Path,
                fmt_kind: str = "csv", axes: tuple = ()) -> dict:
    """Write the comparison table plus one sweep plot per requested axis."""
    rows = aggregate(results)
    table_path = write_table(rows, out_dir, fmt_kind)
    plots = [str(plot_sweep(results, axis, out_dir)) for axis in axes]
    return {"table": str(table_path), "plots": plots, "rows": rows}
