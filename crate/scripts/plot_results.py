#!/usr/bin/env python3
"""Render the study figures from the CSV files the harness emits.

Usage:
    python3 scripts/plot_results.py <results_dir> [--out <figures_dir>]

Reads whichever of these exist in <results_dir>:
    results.csv          open-/closed-loop metric rows
    tradeoff.csv         per-(mode, epsilon, n) summary
    tube_sections.csv    tube cross sections (from `wtmpc tube`)
    nominal_plans.csv    nominal trajectories (from `wtmpc tube`)
"""

import argparse
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def plot_violation_sweeps(results, outdir):
    wt = results[results["mode"] == "wt_simple"]
    if wt.empty:
        return
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    by_eps = wt.groupby("epsilon")["violation_frequency"]
    axes[0].errorbar(
        by_eps.mean().index,
        by_eps.mean().values,
        yerr=by_eps.std().values,
        marker="o",
        capsize=3,
    )
    axes[0].set_xscale("symlog", linthresh=1e-3)
    axes[0].set_xlabel("Wasserstein radius")
    axes[0].set_ylabel("violation frequency")
    by_n = wt.groupby("n")["violation_frequency"]
    axes[1].errorbar(
        by_n.mean().index,
        by_n.mean().values,
        yerr=by_n.std().values,
        marker="s",
        capsize=3,
    )
    axes[1].set_xlabel("sample trajectories n")
    axes[1].set_ylabel("violation frequency")
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "violation_sweeps.png"), dpi=150)
    plt.close(fig)


def plot_tradeoff(tradeoff, outdir):
    wt = tradeoff[tradeoff["mode"] == "wt_simple"]
    if wt.empty:
        return
    fig, ax = plt.subplots(figsize=(5, 4))
    for n, grp in wt.groupby("n"):
        grp = grp.sort_values("epsilon")
        ax.plot(
            grp["mean_violation_frequency"],
            grp["mean_cost"],
            marker="o",
            label=f"n = {n}",
        )
    rob = tradeoff[tradeoff["mode"] == "robust"]
    if not rob.empty:
        ax.axhline(rob["mean_cost"].iloc[0], ls="--", c="k", label="robust")
    ax.set_xlabel("violation frequency")
    ax.set_ylabel("closed-loop cost")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "tradeoff.png"), dpi=150)
    plt.close(fig)


def angle_sorted(points):
    import numpy as np

    pts = points.to_numpy()
    ang = np.arctan2(pts[:, 1] - pts[:, 1].mean(), pts[:, 0] - pts[:, 0].mean())
    return pts[np.argsort(ang)]


def plot_tube(sections, plans, outdir):
    fig, ax = plt.subplots(figsize=(7, 5))
    if plans is not None:
        for mode, grp in plans.groupby("mode"):
            grp = grp.sort_values("k")
            color = "tab:red" if mode == "robust" else "tab:green"
            ax.plot(grp["x1"], grp["x2"], "-o", ms=3, color=color, label=f"{mode} nominal")
            if mode != "robust" or sections is None:
                continue
            # error-tube sections ride on the robust nominal trajectory
            for k, poly in sections[sections["set"] == "robust_tube"].groupby("k"):
                row = grp[grp["k"] == k]
                if row.empty:
                    continue
                pts = angle_sorted(poly[["x1", "x2"]])
                ax.fill(
                    pts[:, 0] + row["x1"].iloc[0],
                    pts[:, 1] + row["x2"].iloc[0],
                    alpha=0.2,
                    color="pink",
                    lw=0,
                )
    if sections is not None:
        # the DR-CVaR admissible region is an absolute set in the state plane
        for _, poly in sections[sections["set"] == "cvar_region"].groupby("k"):
            pts = angle_sorted(poly[["x1", "x2"]])
            ax.fill(pts[:, 0], pts[:, 1], alpha=0.08, color="lightgreen", lw=0)
        term = sections[sections["set"] == "terminal"]
        if not term.empty:
            pts = angle_sorted(term[["x1", "x2"]])
            ax.fill(pts[:, 0], pts[:, 1], alpha=0.3, color="grey", label="terminal set")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "tube.png"), dpi=150)
    plt.close(fig)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("results_dir")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    outdir = args.out or args.results_dir
    os.makedirs(outdir, exist_ok=True)

    def read(name):
        path = os.path.join(args.results_dir, name)
        return pd.read_csv(path) if os.path.exists(path) else None

    results = read("results.csv")
    if results is not None and not results.empty:
        plot_violation_sweeps(results, outdir)
    tradeoff = read("tradeoff.csv")
    if tradeoff is not None and not tradeoff.empty:
        plot_tradeoff(tradeoff, outdir)
    sections = read("tube_sections.csv")
    plans = read("nominal_plans.csv")
    if sections is not None or plans is not None:
        plot_tube(sections, plans, outdir)
    print(f"figures written to {outdir}")


if __name__ == "__main__":
    sys.exit(main())
