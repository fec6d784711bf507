"""Figures written next to the machine-readable reports.

All functions take an output path, draw with the non-interactive Agg
backend and close their figure before returning.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .corpus import VALID_RATINGS, Dataset, count_tokens  # noqa: E402
from .evaluation import COLUMNS, MetricsReport  # noqa: E402

# PNG metadata without a software/version stamp so reruns give identical files.
_PNG_META = {"Software": None}

_STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META if path.suffix.lower() == ".png" else None)
    plt.close(fig)
    return path


def rating_distribution(ds: Dataset, path) -> Path:
    """Overall, per-language and per-domain rating histograms side by side."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2), sharey=False)
        x = np.arange(len(VALID_RATINGS))
        counts = [sum(1 for r in ds if r.rating == k) for k in VALID_RATINGS]
        axes[0].bar(x, counts, color="0.35")
        axes[0].set_title("overall")

        for ax, attr in ((axes[1], "language"), (axes[2], "domain")):
            groups = sorted({getattr(r, attr).value for r in ds})
            width = 0.8 / max(1, len(groups))
            for j, g in enumerate(groups):
                c = [sum(1 for r in ds if getattr(r, attr).value == g and r.rating == k) for k in VALID_RATINGS]
                ax.bar(x + (j - (len(groups) - 1) / 2) * width, c, width, label=g)
            ax.set_title(f"by {attr}")
            ax.set_ylim(0, ax.get_ylim()[1] * 1.25)
            ax.legend(frameon=False, ncol=len(groups), loc="upper center")
        for ax in axes:
            ax.set_xticks(x, [str(k) for k in VALID_RATINGS])
            ax.set_xlabel("rating")
        axes[0].set_ylabel("reviews")
        return _save(fig, path)


def token_distribution(ds: Dataset, path, bins: int = 50) -> Path:
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
        for ax, field in zip(axes, ("text", "title")):
            counts = [count_tokens(getattr(r, field)) for r in ds]
            ax.hist(counts, bins=bins, color="0.35")
            ax.set_yscale("log")
            ax.set_xlabel(f"{field} tokens")
        axes[0].set_ylabel("reviews")
        return _save(fig, path)


def training_curves(log: list[dict], path) -> Path:
    """Per-step losses, the lambda trajectory and validation macro-F1 per epoch."""
    steps = [e for e in log if e["type"] == "step"]
    epochs = [e for e in log if e["type"] == "epoch"]
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
        s = [e["step"] for e in steps]
        for key in ("L_rating", "L_domain", "L_lang", "L_total"):
            axes[0].plot(s, [e[key] for e in steps], lw=0.8, label=key)
        axes[0].set_xlabel("step")
        axes[0].legend(frameon=False)
        axes[1].plot(s, [e["lambda1"] for e in steps], label="lambda1 (domain)")
        axes[1].plot(s, [e["lambda2"] for e in steps], ls="--", label="lambda2 (lang)")
        axes[1].set_ylim(-0.05, 2.05)
        axes[1].set_xlabel("step")
        axes[1].legend(frameon=False)
        axes[2].plot([e["epoch"] for e in epochs], [e["val_macro_f1"] for e in epochs], marker="o")
        axes[2].set_xlabel("epoch")
        axes[2].set_ylabel("validation macro-F1")
        return _save(fig, path)


def metrics_bars(report: MetricsReport, path, label: str = "") -> Path:
    """Accuracy and macro-F1 for the Books/Movies/Music/IT/RO/Avg columns."""
    cols = report.columns()
    acc = [np.nan if m is None else m.acc for m in cols]
    f1 = [np.nan if m is None else m.f1 for m in cols]
    x = np.arange(len(COLUMNS))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(7, 3.2))
        ax.bar(x - 0.2, acc, 0.4, label="Acc.", color="0.55")
        ax.bar(x + 0.2, f1, 0.4, label="F1", color="0.2")
        ax.set_xticks(x, COLUMNS)
        ax.set_ylim(0, 100)
        ax.set_ylabel("%")
        if label:
            ax.set_title(label)
        ax.legend(frameon=False)
        return _save(fig, path)
