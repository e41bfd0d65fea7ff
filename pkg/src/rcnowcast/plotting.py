"""Report figures, rendered headless to PNG."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import SweepResult  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_sweep(sweep: SweepResult, path, labels: Mapping | None = None) -> Path:
    """CSI against decision threshold, one line per region key; best thresholds marked."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for key, reg in sweep.regions.items():
            ps = [p for p in sweep.thresholds if reg.reports[p].csi is not None]
            line, = ax.plot(ps, [reg.reports[p].csi for p in ps], marker="o", ms=3, lw=1,
                            label=(labels or {}).get(key, str(key)))
            if reg.best_threshold is not None:
                ax.plot([reg.best_threshold], [reg.best_report.csi], marker="*", ms=9, color=line.get_color())
        ax.set_xlabel("threshold p")
        ax.set_ylabel("CSI")
        ax.set_xticks(list(sweep.thresholds))
        ax.legend(ncol=2, frameon=False)
        return _save(fig, path)


def plot_training(logs: Mapping[str, Sequence[dict]], path) -> Path:
    """Training loss and validation CSI per epoch for each stage log that has them."""
    with plt.rc_context(RC):
        fig, (ax_l, ax_c) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for name, rows in logs.items():
            epochs = [int(r["epoch"]) for r in rows]
            ax_l.plot(epochs, [float(r["train_loss"]) for r in rows], lw=1, label=name)
            csi = [(int(r["epoch"]), float(r["val_CSI"])) for r in rows if r.get("val_CSI") not in (None, "")]
            if csi:
                ax_c.plot(*zip(*csi), lw=1, label=name)
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("loss")
        ax_c.set_xlabel("epoch")
        ax_c.set_ylabel("validation CSI")
        ax_l.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_region_scores(scores: Mapping[str, float | None], overall: float | None, path) -> Path:
    with plt.rc_context(RC):
        names = list(scores)
        vals = [scores[n] if scores[n] is not None else 0.0 for n in names]
        fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(names)), 3.0))
        ax.bar(range(len(names)), vals, color="tab:blue")
        if overall is not None:
            ax.axhline(overall, color="k", lw=0.8, ls="--", label=f"overall {overall:.3f}")
            ax.legend(frameon=False)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=60, ha="right")
        ax.set_ylabel("CSI at best threshold")
        return _save(fig, path)
