"""Report figures rendered to files (headless backend)."""

from __future__ import annotations

import math
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "svg.hashsalt": "revprop",
}


def _figure(width=5.0, ncols=1):
    fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, width * GOLDEN), squeeze=False)
    return fig, axes[0]


def _save(fig, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        # PNG metadata would otherwise carry the matplotlib version and a timestamp
        fig.savefig(tmp, format="png", bbox_inches="tight", metadata={"Software": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if tmp.exists():
            tmp.unlink()


def plot_profile(rows, path) -> None:
    """Peak activation elements and forward op counts against N per mode."""
    with plt.rc_context(STYLE):
        fig, (ax_mem, ax_ops) = _figure(ncols=2)
        for mode, marker in (("naive", "o"), ("efficient", "s")):
            sel = sorted((r for r in rows if r["mode"] == mode), key=lambda r: r["n_blocks"])
            if not sel:
                continue
            ns = [r["n_blocks"] for r in sel]
            ax_mem.plot(ns, [r["peak_activation_elements"] for r in sel], marker=marker, label=mode)
            ax_ops.plot(ns, [r["fwd_ops"] for r in sel], marker=marker, label=mode)
        ax_mem.set_xlabel("RevNet blocks per stack (N)")
        ax_mem.set_ylabel("peak activation elements")
        ax_ops.set_xlabel("RevNet blocks per stack (N)")
        ax_ops.set_ylabel("forward conv invocations")
        ax_mem.legend()
        _save(fig, path)


def plot_training(records, path) -> None:
    """Training loss and validation RMSE per epoch, one line per seed."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_val) = _figure(ncols=2)
        for rec in records:
            ep = [e.epoch for e in rec.epochs]
            ax_loss.plot(ep, [e.train_loss for e in rec.epochs], label=f"seed {rec.seed}")
            ax_val.plot(ep, [e.val_rmse for e in rec.epochs], label=f"seed {rec.seed}")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("training loss (RMSE)")
        ax_val.set_xlabel("epoch")
        ax_val.set_ylabel("validation RMSE")
        ax_loss.legend()
        _save(fig, path)


def plot_eval(per_subject, path) -> None:
    """Total RMSE per test subject, one marker series per model."""
    with plt.rc_context(STYLE):
        fig, (ax,) = _figure()
        models = list(dict.fromkeys(r["model"] for r in per_subject))
        for i, m in enumerate(models):
            sel = [r for r in per_subject if r["model"] == m]
            xs = [r["subject"] + 0.1 * (i - (len(models) - 1) / 2) for r in sel]
            ys = [float("nan") if r["rmse_total"] is None else r["rmse_total"] for r in sel]
            ax.plot(xs, ys, "o", label=m)
        ax.set_xlabel("test subject")
        ax.set_ylabel("total RMSE")
        ax.legend()
        _save(fig, path)
