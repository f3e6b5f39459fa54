"""Render PNG figures from the CSV files a results directory already holds.

Nothing here trains or evaluates; every figure is a view over files
written by the run and tau-sweep commands.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({"figure.dpi": 110, "axes.spines.top": False, "axes.spines.right": False, "font.size": 9})


def _rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_accuracy_matrix(csv_path: Path) -> Path:
    rows = _rows(csv_path)
    T = max(int(r["i"]) for r in rows)
    a = np.full((T, T), np.nan)
    for r in rows:
        a[int(r["i"]) - 1, int(r["j"]) - 1] = float(r["a"])
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(a, vmin=0.0, vmax=1.0, cmap="viridis")
    for i in range(T):
        for j in range(i + 1):
            ax.text(j, i, f"{a[i, j]:.2f}", ha="center", va="center", fontsize=7,
                    color="white" if a[i, j] < 0.6 else "black")
    ax.set_xticks(range(T), [str(j + 1) for j in range(T)])
    ax.set_yticks(range(T), [str(i + 1) for i in range(T)])
    ax.set_xlabel("evaluated task j")
    ax.set_ylabel("trained through task i")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, csv_path.with_suffix(".png"))


def plot_loss_log(csv_path: Path, window: int = 25) -> Path:
    rows = _rows(csv_path)
    step = np.array([int(r["step"]) for r in rows])
    loss = np.array([float(r["loss"]) for r in rows])
    tau_s = np.array([float(r["tau_s"]) for r in rows])
    task = np.array([int(r["task"]) for r in rows])
    fig, ax = plt.subplots(figsize=(5.5, 3.0))
    ax.plot(step, loss, lw=0.4, color="0.7")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(step[window - 1:], smooth, lw=1.2, color="C0")
    for b in step[1:][np.diff(task) != 0]:
        ax.axvline(b, color="0.5", lw=0.6, ls=":")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(step, tau_s, lw=0.8, color="C3")
    ax2.set_ylabel("temperature", color="C3")
    return _save(fig, csv_path.with_suffix(".png"))


def plot_curve(csv_path: Path) -> Path:
    rows = _rows(csv_path)
    fig, ax = plt.subplots(figsize=(5.0, 2.8))
    ax.plot([int(r["step"]) for r in rows], [float(r["accuracy"]) for r in rows], marker=".", ms=3)
    ax.set_xlabel("step")
    ax.set_ylabel("accuracy on seen tasks")
    ax.set_ylim(0, 1)
    return _save(fig, csv_path.with_suffix(".png"))


def plot_grad_audit(csv_path: Path) -> Path:
    steps = defaultdict(lambda: defaultdict(float))
    for r in _rows(csv_path):
        key = (r["age"], r["sign"])
        steps[key][int(r["step"])] += float(r["grad"])
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    for (age, sign), per_step in sorted(steps.items()):
        s = sorted(per_step)
        ax.plot(s, np.cumsum([per_step[k] for k in s]), label=f"{age} {sign}")
    ax.axhline(0.0, color="0.5", lw=0.6)
    ax.set_xlabel("step")
    ax.set_ylabel("cumulative proxy gradient")
    if steps:
        ax.legend(frameon=False, fontsize=7)
    return _save(fig, csv_path.with_suffix(".png"))


def plot_aggregate(csv_path: Path) -> Path:
    rows = [r for r in _rows(csv_path) if r["metric"] == "A_T"]
    labels = [f"{r['method']}\nM={r['buffer_size']}" for r in rows]
    mean = np.array([float(r["mean"]) for r in rows])
    ci = np.nan_to_num(np.array([float(r["ci95"]) for r in rows]))
    fig, ax = plt.subplots(figsize=(max(3.0, 0.8 * len(rows) + 1), 3.0))
    ax.bar(range(len(rows)), mean, yerr=ci, capsize=3, color="C0")
    ax.set_xticks(range(len(rows)), labels, fontsize=7)
    ax.set_ylabel("final average accuracy")
    ax.set_ylim(0, 1)
    return _save(fig, csv_path.with_suffix(".png"))


def plot_tau_sweep(csv_path: Path) -> Path:
    rows = _rows(csv_path)
    his = sorted({float(r["tau_max"]) for r in rows})
    los = sorted({float(r["tau_min"]) for r in rows})
    grid = np.full((len(los), len(his)), np.nan)
    for r in rows:
        i, j = los.index(float(r["tau_min"])), his.index(float(r["tau_max"]))
        grid[i, j] = np.nanmax([grid[i, j], float(r["A_T"])])
    fig, ax = plt.subplots(figsize=(3.8, 3.0))
    im = ax.imshow(grid, origin="lower", cmap="magma", aspect="auto")
    ax.set_xticks(range(len(his)), [f"{v:g}" for v in his])
    ax.set_yticks(range(len(los)), [f"{v:g}" for v in los])
    ax.set_xlabel("tau_max")
    ax.set_ylabel("tau_min")
    fig.colorbar(im, ax=ax, label="A_T (best over cycles)")
    return _save(fig, csv_path.with_suffix(".png"))


_PLOTTERS = {
    "accuracy_matrix.csv": plot_accuracy_matrix,
    "loss_log.csv": plot_loss_log,
    "curve.csv": plot_curve,
    "grad_audit.csv": plot_grad_audit,
    "aggregate.csv": plot_aggregate,
    "tau_sweep.csv": plot_tau_sweep,
}


def plot_results(root) -> list[Path]:
    """Write a PNG beside every recognised CSV under ``root``."""
    written = []
    for path in sorted(Path(root).rglob("*.csv")):
        fn = _PLOTTERS.get(path.name)
        if fn is not None:
            written.append(fn(path))
    return written
