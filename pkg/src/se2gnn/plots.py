"""Figure rendering for the CLI report paths.

Everything draws through the Agg backend straight to files; no display is
ever opened. Callers pass data already computed for the JSON/CSV reports,
so skipping figures never changes any numbers.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _finish(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    return out_path


def training_curves(metrics_csv, out_path) -> Path:
    """Loss and validation error per epoch from a metrics CSV."""
    with open(metrics_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    train_rows = [(int(r["epoch"]), float(r["loss"])) for r in rows
                  if r["split"] == "train" and r["loss"]]
    val_rows = [(int(r["epoch"]), float(r["one_step"])) for r in rows
                if r["split"] == "val" and r["one_step"]]
    fig, ax = plt.subplots(figsize=(6, 4))
    if train_rows:
        ax.semilogy(*zip(*train_rows), label="train loss", color="tab:blue")
    if val_rows:
        ax.semilogy(*zip(*val_rows), label="val one-step", color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("error")
    ax.set_title("training curves")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _finish(fig, out_path)


def rollout_curve(report: dict, out_path) -> Path:
    """Rollout SMSE per horizon for the model and the identity baseline."""
    fig, ax = plt.subplots(figsize=(6, 4))
    horizons = range(1, len(report["rollout_per_step"]) + 1)
    ax.semilogy(horizons, report["rollout_per_step"], "o-", label="model",
                color="tab:blue")
    if report.get("identity_rollout_per_step"):
        ax.semilogy(horizons, report["identity_rollout_per_step"], "s--",
                    label="identity baseline", color="tab:gray")
    ax.set_xlabel("rollout horizon")
    ax.set_ylabel("SMSE")
    ax.set_title("rollout error")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _finish(fig, out_path)


def fourier_trend(rows: list[dict], activation_error: float, out_path) -> Path:
    """Mean equivariance error of the sampled nonlinearity vs sample count."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ns = [r["n_samples"] for r in rows]
    ax.loglog(ns, [r["mean_error"] for r in rows], "o-", label="fourier nonlinearity",
              color="tab:blue")
    ax.axhline(activation_error, linestyle="--", color="tab:gray",
               label="gated activation")
    ax.set_xlabel("direction samples")
    ax.set_ylabel("mean equivariance error")
    ax.set_title("sampled nonlinearity equivariance")
    ax.set_xticks(ns, [str(n) for n in ns])
    ax.legend()
    ax.grid(True, alpha=0.3, which="both")
    return _finish(fig, out_path)


def field_snapshot(u, out_path, title="smoke density") -> Path:
    """One scalar grid field, origin at the lower-left corner."""
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(u.T, origin="lower", cmap="magma")
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_title(title)
    ax.set_xlabel("x cell")
    ax.set_ylabel("y cell")
    return _finish(fig, out_path)
