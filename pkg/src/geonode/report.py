"""Benchmark reporting: delimited outputs plus rendered figures.

Every artifact written here embeds the tool version, graph name, seed, and
profile so a stray file can always be traced back to its run.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import ExperimentReport  # noqa: E402


def run_meta(report: ExperimentReport, version: str) -> dict:
    return {"tool": "geonode", "version": version, "graph": report.graph_name,
            "seed": report.seed, "profile": report.profile,
            "variants": report.variants}


def report_to_dict(report: ExperimentReport, version: str) -> dict:
    d = asdict(report)
    d["meta"] = run_meta(report, version)
    return d


def write_json(report: ExperimentReport, path, version: str) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(report, version), fh, indent=2)


def write_csv(report: ExperimentReport, path, version: str) -> None:
    recs = report.records
    cont = sorted(recs[0].metrics.continuous_err_cm) if recs else []
    disc = sorted(recs[0].metrics.discrete_ok) if recs else []
    meta = run_meta(report, version)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta) + "\n")
        w = csv.writer(fh)
        w.writerow(["scene_seed", "variant", "best_total", "tau",
                    "evals_to_tau", "evaluations", "refine_evaluations",
                    "wall_seconds", "rotation_err_deg", "translation_err_cm",
                    "chamfer_cm", "vertices", "faces"]
                   + [f"err_cm:{c}" for c in cont]
                   + [f"ok:{b}" for b in disc])
        for r in recs:
            w.writerow([r.scene_seed, r.variant, f"{r.best_total:.6g}",
                        f"{r.tau:.6g}",
                        "" if r.evals_to_tau is None else r.evals_to_tau,
                        r.evaluations, r.refine_evaluations,
                        f"{r.wall_seconds:.3f}",
                        f"{r.metrics.rotation_err_deg:.4f}",
                        f"{r.metrics.translation_err_cm:.4f}",
                        f"{r.metrics.chamfer_cm:.4f}",
                        r.metrics.vertices, r.metrics.faces]
                       + [f"{r.metrics.continuous_err_cm[c]:.4f}" for c in cont]
                       + [int(r.metrics.discrete_ok[b]) for b in disc])


def _stamp(fig, meta: dict) -> None:
    fig.text(0.01, 0.005,
             f"geonode v{meta['version']}  graph={meta['graph']}  "
             f"seed={meta['seed']}  profile={meta['profile']}",
             fontsize=6, color="0.45")


_COLORS = {"full": "tab:blue", "no_refine": "tab:orange",
           "no_refine_no_exploit": "tab:green", "random": "tab:red"}


def render_figures(report: ExperimentReport, out_dir, version: str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = run_meta(report, version)
    agg = report.aggregates
    variants = [v for v in report.variants if v in agg]
    written = []

    # recovery quality: continuous MAE and discrete accuracy per variant
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.2))
    cont = sorted(next(iter(agg.values()))["mae_cm"]) if agg else []
    x = np.arange(len(cont))
    bw = 0.8 / max(len(variants), 1)
    for i, v in enumerate(variants):
        vals = [agg[v]["mae_cm"][c] for c in cont]
        axes[0].bar(x + i * bw, vals, bw, label=v,
                    color=_COLORS.get(v, "gray"))
    axes[0].set_xticks(x + 0.4 - bw / 2)
    axes[0].set_xticklabels(cont, rotation=30, ha="right", fontsize=7)
    axes[0].set_ylabel("MAE (cm)")
    axes[0].set_title("Continuous parameter recovery")
    axes[0].legend(fontsize=7)
    disc = sorted(next(iter(agg.values()))["discrete_accuracy"]) if agg else []
    x = np.arange(len(disc))
    for i, v in enumerate(variants):
        vals = [100.0 * agg[v]["discrete_accuracy"][d] for d in disc]
        axes[1].bar(x + i * bw, vals, bw, label=v,
                    color=_COLORS.get(v, "gray"))
    axes[1].set_xticks(x + 0.4 - bw / 2)
    axes[1].set_xticklabels(disc, rotation=30, ha="right", fontsize=7)
    axes[1].set_ylabel("accuracy (%)")
    axes[1].set_ylim(0, 105)
    axes[1].set_title("Discrete parameter recovery")
    fig.suptitle(f"{report.graph_name}: recovery by search variant")
    fig.tight_layout(rect=(0, 0.02, 1, 1))
    _stamp(fig, meta)
    p = out / "recovery.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    written.append(p)

    # efficiency: evaluations needed to reach the scene threshold
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    xs = np.arange(len(variants))
    means = [agg[v]["evals_to_tau_mean"] for v in variants]
    ax.bar(xs, means, 0.6,
           color=[_COLORS.get(v, "gray") for v in variants])
    for i, v in enumerate(variants):
        c = agg[v]["censored"]
        n = agg[v]["scenes"]
        ax.text(i, means[i], f"{c}/{n} censored", ha="center", va="bottom",
                fontsize=7)
    ax.set_xticks(xs)
    ax.set_xticklabels(variants, rotation=15, fontsize=8)
    ax.set_ylabel("objective evaluations to threshold (mean)")
    ax.set_title(f"{report.graph_name}: evaluations to reach 2x floor")
    fig.tight_layout(rect=(0, 0.03, 1, 1))
    _stamp(fig, meta)
    p = out / "efficiency.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    written.append(p)

    # chamfer distance of the recovered shape
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    vals = [agg[v]["chamfer_cm_mean"] for v in variants]
    ax.bar(np.arange(len(variants)), vals, 0.6,
           color=[_COLORS.get(v, "gray") for v in variants])
    ax.set_xticks(np.arange(len(variants)))
    ax.set_xticklabels(variants, rotation=15, fontsize=8)
    ax.set_ylabel("chamfer distance to ground truth (cm)")
    ax.set_title(f"{report.graph_name}: recovered surface error")
    fig.tight_layout(rect=(0, 0.03, 1, 1))
    _stamp(fig, meta)
    p = out / "surface_error.png"
    fig.savefig(p, dpi=130)
    plt.close(fig)
    written.append(p)
    return written
