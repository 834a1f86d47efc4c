"""Figure and table rendering for a finished experiment directory.

``generate_report`` reads ``results.json`` from a run directory and writes
a ``report/`` folder holding one matplotlib figure per protocol view plus a
delimited CSV with exactly the numbers each figure plots, so every chart
can be rebuilt or audited without re-running the experiment.  Training-loss
curves are rendered when the run kept per-epoch history files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 150


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def _write_csv(path: Path, columns: list[str], rows: list[list[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def _seed_mean(per_seed: dict[str, dict[str, float]], key: str) -> float:
    return float(np.mean([cell[key] for cell in per_seed.values()]))


def _grouped_bars(ax, group_labels: list[str], series: dict[str, list[float]]) -> None:
    x = np.arange(len(group_labels))
    width = 0.8 / max(len(series), 1)
    for i, (name, values) in enumerate(series.items()):
        ax.bar(x + (i - (len(series) - 1) / 2) * width, values, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(group_labels, rotation=20, ha="right")
    ax.legend(fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.grid(axis="y", alpha=0.3)


def _report_base_to_new(payload: dict, out: Path) -> list[Path]:
    cells = payload["cells"]
    learners = list(cells)
    series = {
        key: [_seed_mean(cells[alias], key) for alias in learners]
        for key in ("base", "new", "h")
    }
    fig, ax = plt.subplots(figsize=(7, 4))
    _grouped_bars(ax, learners, {"base": series["base"], "new": series["new"], "H": series["h"]})
    ax.set_title("base-to-new accuracy by learner (mean over seeds)")
    rows = [
        [alias, series["base"][i], series["new"][i], series["h"][i]]
        for i, alias in enumerate(learners)
    ]
    return [
        _save(fig, out / "base_to_new.png"),
        _write_csv(out / "base_to_new.csv", ["learner", "base", "new", "H"], rows),
    ]


def _report_cross_dataset(payload: dict, out: Path) -> list[Path]:
    cells = payload["cells"]
    learners = list(cells)
    first = next(iter(cells[learners[0]].values()))
    target_names = list(first["targets"])
    columns = ["source"] + target_names
    series = {}
    for alias in learners:
        per_seed = cells[alias].values()
        vals = [float(np.mean([c["source"] for c in per_seed]))]
        for name in target_names:
            vals.append(float(np.mean([c["targets"][name] for c in cells[alias].values()])))
        series[alias] = vals
    fig, ax = plt.subplots(figsize=(7, 4))
    _grouped_bars(ax, columns, series)
    ax.set_title("source and transfer accuracy by dataset (mean over seeds)")
    rows = [[alias] + series[alias] for alias in learners]
    return [
        _save(fig, out / "cross_dataset.png"),
        _write_csv(out / "cross_dataset.csv", ["learner"] + columns, rows),
    ]


def _report_domain_shift(payload: dict, out: Path) -> list[Path]:
    cells = payload["cells"]
    severities = payload["config"]["severities"]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    rows = []
    for alias, per_seed in cells.items():
        acc = np.array([cell["accuracy"] for cell in per_seed.values()]).mean(axis=0)
        ax.plot(severities, acc, marker="o", label=alias)
        rows.append([alias] + [float(v) for v in acc])
    ax.set_xlabel("shift severity")
    ax.set_ylabel("accuracy (%)")
    ax.set_title("robustness to distribution shift (mean over seeds)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return [
        _save(fig, out / "domain_shift.png"),
        _write_csv(
            out / "domain_shift.csv",
            ["learner"] + [f"severity_{s:g}" for s in severities], rows,
        ),
    ]


def _report_ablation_posterior(payload: dict, out: Path) -> list[Path]:
    cells = payload["cells"]
    families = payload["config"]["sampler_families"]
    series = {
        alias: [float(np.mean([cell[f] for cell in per_seed.values()])) for f in families]
        for alias, per_seed in cells.items()
    }
    fig, ax = plt.subplots(figsize=(6.5, 4))
    _grouped_bars(ax, list(families), series)
    ax.set_title("new-class accuracy by prediction-time sampler (mean over seeds)")
    rows = [[alias] + series[alias] for alias in cells]
    return [
        _save(fig, out / "ablation_posterior.png"),
        _write_csv(out / "ablation_posterior.csv", ["learner"] + list(families), rows),
    ]


def _report_ablation_mc(payload: dict, out: Path) -> list[Path]:
    cells = payload["cells"]
    k_values = payload["config"]["k_values"]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    rows = []
    for alias, per_seed in cells.items():
        curves = np.array([cell["accuracy"] for cell in per_seed.values()])
        for curve in curves:
            ax.plot(k_values, curve, color="gray", alpha=0.35, linewidth=0.8)
        mean_curve = curves.mean(axis=0)
        ax.plot(k_values, mean_curve, marker="o", label=f"{alias} (mean)")
        rows.append([alias] + [float(v) for v in mean_curve])
    ax.set_xlabel("prediction-time samples K")
    ax.set_ylabel("new-class accuracy (%)")
    ax.set_title("accuracy vs Monte Carlo sample count")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return [
        _save(fig, out / "ablation_mc.png"),
        _write_csv(out / "ablation_mc.csv", ["learner"] + [f"K{k}" for k in k_values], rows),
    ]


def _report_ablation_init(payload: dict, out: Path) -> list[Path]:
    cells = payload["cells"]
    learners = list(cells)
    modes = list(next(iter(cells.values())))
    series = {
        mode: [_seed_mean(cells[alias][mode], "h") for alias in learners] for mode in modes
    }
    fig, ax = plt.subplots(figsize=(6.5, 4))
    _grouped_bars(ax, learners, series)
    ax.set_title("harmonic-mean accuracy by context initialization")
    rows = []
    for alias in learners:
        for mode in modes:
            rows.append([
                alias, mode,
                _seed_mean(cells[alias][mode], "base"),
                _seed_mean(cells[alias][mode], "new"),
                _seed_mean(cells[alias][mode], "h"),
            ])
    return [
        _save(fig, out / "ablation_init.png"),
        _write_csv(out / "ablation_init.csv", ["learner", "init", "base", "new", "H"], rows),
    ]


_REPORTERS = {
    "base_to_new": _report_base_to_new,
    "cross_dataset": _report_cross_dataset,
    "domain_shift": _report_domain_shift,
    "ablation_posterior": _report_ablation_posterior,
    "ablation_mc": _report_ablation_mc,
    "ablation_init": _report_ablation_init,
}


def _report_histories(results_dir: Path, out: Path) -> list[Path]:
    files = sorted((results_dir / "history").glob("*.csv"))
    if not files:
        return []
    fig, ax = plt.subplots(figsize=(7, 4))
    for path in files:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            records = [(int(r["epoch"]), float(r["mean_loss"])) for r in reader]
        if records:
            ax.plot([e for e, _ in records], [v for _, v in records],
                    label=path.stem, alpha=0.8, linewidth=1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.set_title("training-loss histories")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=6, ncol=2)
    return [_save(fig, out / "loss_history.png")]


def generate_report(results_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render figures and CSVs for a run directory; returns written paths."""
    results_dir = Path(results_dir)
    results_path = results_dir / "results.json"
    if not results_path.exists():
        raise FileNotFoundError(f"{results_path} not found; expected a finished run directory")
    payload = json.loads(results_path.read_text())
    protocol = payload.get("protocol")
    if protocol not in _REPORTERS:
        raise ValueError(f"results file names unknown protocol {protocol!r}")
    if payload.get("status") != "ok":
        raise ValueError(f"cannot report on a run with status {payload.get('status')!r}")
    out = Path(out_dir) if out_dir is not None else results_dir / "report"
    written = _REPORTERS[protocol](payload, out)
    written.extend(_report_histories(results_dir, out))
    return written
