"""Report generation: a human-readable accuracy table, a machine-readable
results file, gradient-obfuscation sanity verdicts, and matplotlib figures
rendered next to the delimited outputs.
"""

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .config import ExperimentConfig, config_hash

SANITY_TOLERANCE = 0.01  # one accuracy point


def _load_rows(stage_root):
    with open(os.path.join(stage_root, "attack", "results.json")) as fh:
        return json.load(fh)["rows"]


def _read_tsv(path):
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        cols = {h: [] for h in header}
        for line in fh:
            for h, cell in zip(header, line.rstrip("\n").split("\t")):
                if cell:
                    cols[h].append(float(cell))
    return cols


def sanity_checks(rows):
    """FGSM accuracy must not fall below PGD accuracy, and black-box
    (transfer) accuracy must not fall below white-box PGD accuracy."""
    acc = {(r["condition"], r["attack"]): r["accuracy"] for r in rows}
    verdicts = {}
    for cond in sorted({r["condition"] for r in rows}):
        checks = {}
        if (cond, "fgsm") in acc and (cond, "pgd") in acc:
            checks["fgsm_ge_pgd"] = (
                acc[(cond, "fgsm")] >= acc[(cond, "pgd")] - SANITY_TOLERANCE)
        if (cond, "transfer") in acc and (cond, "pgd") in acc:
            checks["blackbox_ge_whitebox"] = (
                acc[(cond, "transfer")] >= acc[(cond, "pgd")] - SANITY_TOLERANCE)
        verdicts[cond] = checks
    return verdicts


def _fig_accuracy(rows, path):
    conditions = sorted({r["condition"] for r in rows})
    attacks = []
    for r in rows:
        if r["attack"] not in attacks:
            attacks.append(r["attack"])
    acc = {(r["condition"], r["attack"]): r["accuracy"] for r in rows}
    width = 0.8 / max(len(conditions), 1)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    xs = np.arange(len(attacks))
    for i, cond in enumerate(conditions):
        ys = [acc.get((cond, a), np.nan) for a in attacks]
        ax.bar(xs + i * width, ys, width, label=cond)
    ax.set_xticks(xs + width * (len(conditions) - 1) / 2)
    ax.set_xticklabels(attacks)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_hist_pair(cols, path, xlabel):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, values in cols.items():
        ax.hist(values, bins=30, alpha=0.6, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_ablation(cols, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogx(cols["beta"], cols["robust_only_acc"], "o-",
                label="robust channels only")
    ax.semilogx(cols["beta"], cols["nonrobust_only_acc"], "s-",
                label="non-robust channels only")
    ax.set_xlabel("beta")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def generate_report(cfg: ExperimentConfig, stage_root, out_dir):
    """Render report.txt / report.json plus figures; returns sanity verdicts."""
    rows = _load_rows(stage_root)
    verdicts = sanity_checks(rows)
    analyze_dir = os.path.join(stage_root, "analyze")

    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    _fig_accuracy(rows, os.path.join(fig_dir, "accuracy.png"))
    grad_cols = _read_tsv(os.path.join(analyze_dir, "gradient_norms.tsv"))
    _fig_hist_pair(grad_cols, os.path.join(fig_dir, "gradient_norms.png"),
                   "non-robust gradient L2 norm")
    sim_cols = _read_tsv(os.path.join(analyze_dir, "similarity.tsv"))
    _fig_hist_pair(sim_cols, os.path.join(fig_dir, "similarity.png"),
                   "same-class cosine similarity")
    abl_cols = _read_tsv(os.path.join(analyze_dir, "beta_ablation.tsv"))
    _fig_ablation(abl_cols, os.path.join(fig_dir, "beta_ablation.png"))

    # Delimited accuracy table next to the figures.
    with open(os.path.join(out_dir, "results.tsv"), "w") as fh:
        fh.write("condition\tattack\taccuracy\tmean_norm\n")
        for r in rows:
            fh.write(f"{r['condition']}\t{r['attack']}\t"
                     f"{r['accuracy']:.6f}\t{r['mean_norm']:.6f}\n")

    lines = ["robustproxy report",
             f"config hash: {config_hash(cfg)}",
             "",
             f"{'condition':<12} {'attack':<10} {'accuracy':>9}"]
    for r in rows:
        lines.append(f"{r['condition']:<12} {r['attack']:<10} "
                     f"{r['accuracy']:>9.4f}")
    lines.append("")
    lines.append("gradient-obfuscation sanity checks:")
    for cond, checks in verdicts.items():
        for check, ok in checks.items():
            lines.append(f"  {cond:<12} {check:<24} "
                         f"{'PASS' if ok else 'FAIL'}")
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")

    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump({"config_hash": config_hash(cfg), "rows": rows,
                   "sanity": verdicts}, fh, indent=2, sort_keys=True)
    return verdicts
