"""Report figures written next to the CSV/JSON outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
}
_COLORS = {"sensitivity": "#c0392b", "specificity": "#2471a3", "accuracy": "#444444"}


def _save(fig, path):
    # drop the version stamp so identical data gives identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training_log(history, path, title="Sequencer discovery"):
    """Loss and accuracy per epoch for a list of EpochRecord."""
    with plt.rc_context(_STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3))
        epochs = [r.epoch + 1 for r in history]
        ax_loss.plot(epochs, [r.train_loss for r in history], color="k")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("mean training loss")
        ax_acc.plot(epochs, [r.train_acc for r in history], label="train", color="#2471a3")
        val = [np.nan if r.val_acc is None else r.val_acc for r in history]
        if not np.all(np.isnan(val)):
            ax_acc.plot(epochs, val, label="validation", color="#c0392b")
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("accuracy")
        ax_acc.set_ylim(0, 1.02)
        ax_acc.legend(loc="lower right")
        fig.suptitle(title)
        fig.tight_layout()
        _save(fig, path)


def plot_cv_report(report, path):
    """Per-fold sensitivity, specificity and accuracy at both levels."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(10, 3.2), sharey=True)
        folds = np.arange(len(report.folds))
        width = 0.26
        for ax, level in zip(axes, ("lesion", "patient")):
            for j, metric in enumerate(("sensitivity", "specificity", "accuracy")):
                vals = [getattr(getattr(f, level), metric) for f in report.folds]
                vals = [np.nan if v is None else v for v in vals]
                ax.bar(folds + (j - 1) * width, vals, width, label=metric, color=_COLORS[metric])
                mean = report.mean(level, metric)
                if mean is not None:
                    ax.axhline(mean, color=_COLORS[metric], lw=0.8, ls="--")
            ax.plot(folds, [f.baseline_accuracy for f in report.folds], "k:", marker=".",
                    lw=0.8, label="majority baseline")
            ax.set_xticks(folds)
            ax.set_xticklabels([str(f.fold) for f in report.folds])
            ax.set_xlabel("fold")
            ax.set_title(f"{level} level")
            ax.set_ylim(0, 1.05)
        axes[0].set_ylabel("rate")
        axes[1].legend(loc="lower right", fontsize=7)
        fig.tight_layout()
        _save(fig, path)


def plot_patches(archive, path, n=8):
    """Grid of the first ``n`` patches of each class."""
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(2, n, figsize=(1.2 * n, 2.8), squeeze=False)
        for row, label in enumerate((0, 1)):
            chosen = [p for p in archive.patches if p.label == label][:n]
            for col in range(n):
                ax = axes[row, col]
                ax.axis("off")
                if col < len(chosen):
                    ax.imshow(chosen[col].pixels, cmap="gray", vmin=0, vmax=1)
            axes[row, 0].set_title("benign" if label == 0 else "malignant", loc="left", fontsize=8)
        fig.tight_layout()
        _save(fig, path)
