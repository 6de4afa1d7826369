"""Matplotlib renderers for report artifacts.

Every report path of the CLI drops figures next to its delimited/JSON
outputs. Rendering is headless (Agg) and byte-deterministic: fixed dpi and a
fixed PNG metadata block, so repeated runs with the same seed produce
identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["save_loss_curve", "save_accuracy_bars", "save_tiou_histogram", "save_bench_bars"]

_DPI = 120
_PNG_META = {"Software": "tvp"}


def _finish(fig, path: Path | str) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
    plt.close(fig)


def save_loss_curve(history: list[dict], path: Path | str) -> None:
    """Training loss (left axis) and held-out accuracies (right axis) per epoch."""
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(epochs, [row["train_loss"] for row in history], marker="o", label="train loss")
    if "val_loss" in history[0]:
        ax.plot(epochs, [row["val_loss"] for row in history], marker="s", ms=3, ls="--",
                label="held-out loss")
    ax.axhline(0.24, color="grey", lw=0.8, ls="--", label="loss floor")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    acc_keys = sorted(k for k in history[0] if k.startswith("val_acc@"))
    if acc_keys:
        ax2 = ax.twinx()
        for key in acc_keys:
            ax2.plot(epochs, [row[key] for row in history], marker=".", ls=":", label=key)
        ax2.set_ylabel("held-out accuracy")
        ax2.set_ylim(0, 1)
        handles, labels = ax.get_legend_handles_labels()
        h2, l2 = ax2.get_legend_handles_labels()
        ax.legend(handles + h2, labels + l2, fontsize=7, loc="center right")
    else:
        ax.legend(fontsize=7)
    _finish(fig, path)


def save_accuracy_bars(report_doc: dict, path: Path | str) -> None:
    """Accuracy at each tIoU threshold for one evaluation run."""
    accs = report_doc["accuracies"]
    labels = sorted(accs, key=float)
    values = [accs[k] for k in labels]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(range(len(labels)), values, color="#4878cf")
    ax.set_xticks(range(len(labels)), [f"IoU>{k}" for k in labels])
    ax.set_ylim(0, 1)
    ax.set_ylabel("Acc(R@1)")
    ax.axhline(report_doc["mean_tiou"], color="darkorange", lw=1.0, ls="--",
               label=f"mean tIoU = {report_doc['mean_tiou']:.3f}")
    ax.legend(fontsize=8)
    for i, v in enumerate(values):
        ax.text(i, v + 0.02, f"{v:.2f}", ha="center", fontsize=8)
    _finish(fig, path)


def save_tiou_histogram(per_sample: list[dict], path: Path | str) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.hist([row["tiou"] for row in per_sample], bins=20, range=(0, 1), color="#6acc65",
            edgecolor="black", linewidth=0.4)
    ax.set_xlabel("tIoU with ground truth")
    ax.set_ylabel("samples")
    _finish(fig, path)


def save_bench_bars(report_doc: dict, path: Path | str) -> None:
    """FLOPs per frame and wall-clock mean for the 2D vs 3D encoders."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 3.2))
    flops = report_doc["flops"]
    ax1.bar([0, 1], [flops["per_frame_2d"], flops["per_frame_3d"]], color=["#4878cf", "#d65f5f"])
    ax1.set_xticks([0, 1], ["2D", "3D"])
    ax1.set_ylabel("FLOPs per frame")
    ax1.set_title(f"analytic ratio {report_doc['flop_ratio']:.2f}x", fontsize=9)
    wc = report_doc["wall_clock_s"]
    ax2.bar([0, 1], [wc["mean_2d"], wc["mean_3d"]],
            yerr=[wc["std_2d"], wc["std_3d"]], capsize=4, color=["#4878cf", "#d65f5f"])
    ax2.set_xticks([0, 1], ["2D", "3D"])
    ax2.set_ylabel("forward wall-clock (s)")
    title = f"measured ratio {report_doc['time_ratio']:.2f}x"
    if report_doc.get("noisy"):
        title += " (noisy)"
    ax2.set_title(title, fontsize=9)
    _finish(fig, path)
