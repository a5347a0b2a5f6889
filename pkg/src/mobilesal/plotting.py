"""Report figures: precision-recall curve and training loss history."""

from __future__ import annotations

import io
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .imageio import atomic_write  # noqa: E402
from .metrics import PrecisionRecallCurve, f_beta  # noqa: E402

# fixed metadata so identical data renders to identical bytes
_PNG_META = {"Software": None}


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    atomic_write(path, buf.getvalue())
    return path


def plot_pr_curve(curve: PrecisionRecallCurve, path: str | os.PathLike, title: str = "",
                  beta_sq: float = 0.3) -> Path:
    """Precision against recall, with the F-measure-maximizing threshold marked."""
    fig, (ax_pr, ax_f) = plt.subplots(1, 2, figsize=(9, 4))
    ax_pr.plot(curve.recall, curve.precision, lw=1.5)
    ax_pr.set_xlabel("recall")
    ax_pr.set_ylabel("precision")
    ax_pr.set_xlim(0, 1.02)
    ax_pr.set_ylim(0, 1.02)
    ax_pr.grid(alpha=0.3)

    f = f_beta(curve.precision, curve.recall, beta_sq)
    best = int(f.argmax())
    ax_pr.scatter([curve.recall[best]], [curve.precision[best]], color="C3", zorder=3)
    ax_f.plot(curve.thresholds, f, lw=1.5, color="C1")
    ax_f.axvline(curve.thresholds[best], color="C3", ls="--", lw=1)
    ax_f.set_xlabel("threshold")
    ax_f.set_ylabel("F-measure")
    ax_f.set_xlim(0, 1)
    ax_f.set_ylim(0, 1.02)
    ax_f.grid(alpha=0.3)
    ax_f.set_title(f"max {f[best]:.4f} at t={curve.thresholds[best]:.3f}", fontsize=9)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_history(history: Sequence, path: str | os.PathLike, title: str = "") -> Path:
    """Total, saliency and depth-restoration loss per epoch.

    ``history`` holds ``EpochRecord`` objects or their JSON dicts.
    """
    rows = [h if isinstance(h, dict) else vars(h) for h in history]
    if not rows:
        raise ValueError("empty history")
    epochs = [r["epoch"] + 1 for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["loss_total"] for r in rows], label="total")
    ax.plot(epochs, [r["loss_sal"] for r in rows], label="saliency")
    idr = [r.get("loss_idr") for r in rows]
    if any(v for v in idr):
        ax.plot(epochs, [v or 0.0 for v in idr], label="depth restoration")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3, which="both")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
