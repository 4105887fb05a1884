"""
    Plots of experiment result tables (results.csv) and run histories (history.jsonl)
"""
import argparse
import logging
import os

import numpy as np
from matplotlib import pyplot as pp

from src.experiments import RESULTS_FILE, read_results
from src.pseudo_loop import HISTORY_FILE, RunHistory
from src.utils import read_json

logger = logging.getLogger("plot_results")


def get_axis(figsize=(6, 4)):
    color = 'black'
    color_minor = 'gray'
    linewidth, linewidth_minor = 0.3, 0.2
    alpha, alpha_minor = 0.4, 0.3

    fig, ax = pp.subplots(figsize=figsize)
    ax.grid(linestyle="-", which='major', color=color, linewidth=linewidth, alpha=alpha)
    ax.grid(linestyle="--", which='minor', color=color_minor, linewidth=linewidth_minor, alpha=alpha_minor)
    pp.minorticks_on()
    return fig, ax


def mean_std_by(rows, key, metric, arm=None):
    """{key value: (mean, std)} over seeds, for one metric (and arm)."""
    groups = {}
    for r in rows:
        if r["metric"] != metric or (arm is not None and r["arm"] != arm):
            continue
        groups.setdefault(r[key], []).append(r["value"])
    return {k: (np.mean(v), np.std(v)) for k, v in groups.items()}


def _errorbar(ax, curve, label, sort_key=float):
    xs = sorted(curve, key=sort_key)
    ys = np.array([curve[x][0] for x in xs])
    es = np.array([curve[x][1] for x in xs])
    positions = [sort_key(x) for x in xs]
    ax.plot(positions, ys, marker="o", label=label)
    ax.fill_between(positions, ys - es, ys + es, alpha=0.2)


def plot_noise_curve(rows, ax):
    for arm in sorted({r["arm"] for r in rows}):
        _errorbar(ax, mean_std_by(rows, "grid_value", "test_accuracy", arm), label=arm)
    ax.set_xlabel("label noise rate")
    ax.set_ylabel("clean test accuracy")


def plot_confidence_curve(rows, ax):
    curve = mean_std_by(rows, "grid_value", "accuracy")
    xs = sorted(curve, key=float)
    ax.bar([float(x) for x in xs], [curve[x][0] for x in xs], yerr=[curve[x][1] for x in xs], alpha=0.7)
    ax.set_xlabel("confidence bucket")
    ax.set_ylabel("accuracy")


def plot_trajectories(rows, ax, x_metric="iteration"):
    """One line per (arm, alpha); x is the iteration or the cumulative number of pseudo labels."""
    for arm in sorted({r["arm"] for r in rows}):
        for alpha in sorted({r["grid_value"] for r in rows if r["arm"] == arm}, key=float):
            sel = [r for r in rows if r["arm"] == arm and r["grid_value"] == alpha]
            acc = mean_std_by(sel, "iteration", "test_accuracy")
            if x_metric == "iteration":
                xs = {i: i for i in acc}
            else:
                xs = {i: m for i, (m, _) in mean_std_by(sel, "iteration", "cumulative_added").items()}
            its = sorted(acc)
            label = f"alpha={alpha}" if arm in ("framework",) else f"{arm} alpha={alpha}"
            ax.plot([xs[i] for i in its], [acc[i][0] for i in its], marker=".", label=label)
    ax.set_xlabel("iteration" if x_metric == "iteration" else "pseudo labels added")
    ax.set_ylabel("test accuracy")


def plot_categories(rows, ax, metric="test_accuracy"):
    curve = mean_std_by(rows, "grid_value", metric)
    labels = list(dict.fromkeys(r["grid_value"] for r in rows if r["metric"] == metric))
    ax.bar(range(len(labels)), [curve[l][0] for l in labels], yerr=[curve[l][1] for l in labels], alpha=0.7)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_ylabel(metric)


def plot_history(history: RunHistory, ax):
    its = [e.iteration for e in history.entries]
    ax.plot(its, [e.test_accuracy for e in history.entries], marker="o", label="test")
    if any(e.val_accuracy is not None for e in history.entries):
        ax.plot(its, [e.val_accuracy for e in history.entries], marker="x", label="validation")
    ax.axvline(history.best_iteration, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("accuracy")


PLOTS = {
    "noise_curve": plot_noise_curve,
    "confidence_curve": plot_confidence_curve,
    "alpha_sweep": plot_trajectories,
    "ssl_ablation": plot_trajectories,
    "mixup_layer_ablation": plot_categories,
    "benchmark": lambda rows, ax: plot_categories([{**r, "grid_value": r["arm"]} for r in rows], ax, "test_error"),
}


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Plot experiment results or a run history')
    parser.add_argument('path', help='experiment output directory or run directory')
    parser.add_argument('--x', default='iteration', choices=('iteration', 'cumulative_added'),
                        help='x axis for trajectories')
    parser.add_argument('--show', action='store_true')
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    fig, ax = get_axis()
    results = os.path.join(args.path, RESULTS_FILE)
    if os.path.isfile(results):
        experiment = read_json(os.path.join(args.path, "summary.json"))["experiment"]
        if experiment not in PLOTS:
            raise SystemExit(f"no plot for {experiment}")
        rows = read_results(results)
        if PLOTS[experiment] is plot_trajectories:
            plot_trajectories(rows, ax, args.x)
        else:
            PLOTS[experiment](rows, ax)
        name = experiment
    else:
        history = RunHistory.from_jsonl(os.path.join(args.path, HISTORY_FILE),
                                        read_json(os.path.join(args.path, "run_manifest.json"))["summary"]["best_iteration"])
        plot_history(history, ax)
        name = "history"
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    out = os.path.join(args.path, f"{name}.png")
    fig.savefig(out, dpi=150, bbox_inches="tight")
    logger.info("saved %s", out)
    if args.show:
        pp.show()
