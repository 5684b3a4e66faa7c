import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

# Visualization configurations
CONFUSION_FIGURE_SIZE = (4.5, 4)
COMPARISON_FIGURE_SIZE = (10, 6)
STRIP_FRAME_INCHES = 1.2
MAX_STRIP_FRAMES = 12
FONT_SIZE = 12
DPI = 300
BAR_WIDTH = 0.25
METRIC_KEYS = ("f1_drone", "f1_bird", "f1_macro")
METRIC_LABELS = {"f1_drone": "F1 drone", "f1_bird": "F1 bird", "f1_macro": "F1 macro"}


def plot_confusion_matrix(counts, class_names, output_filename, title=None, normalize_rows=False):
    """Annotated confusion matrix; rows are true labels, columns predicted labels"""
    counts = np.asarray(counts)
    values = counts.astype(float)
    if normalize_rows:
        row_sums = values.sum(axis=1, keepdims=True)
        values = np.divide(values, row_sums, out=np.zeros_like(values), where=row_sums > 0)

    fig, ax = plt.subplots(figsize=CONFUSION_FIGURE_SIZE)
    image = ax.imshow(values, cmap="Blues", vmin=0)
    fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04)

    threshold = values.max() / 2 if values.max() > 0 else 0.5
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            text = f"{values[i, j]:.2f}" if normalize_rows else f"{counts[i, j]:d}"
            ax.text(j, i, text, ha="center", va="center", fontsize=FONT_SIZE, fontweight="bold",
                    color="white" if values[i, j] > threshold else "black")

    ax.set_xticks(range(len(class_names)))
    ax.set_yticks(range(len(class_names)))
    ax.set_xticklabels(class_names)
    ax.set_yticklabels(class_names)
    ax.set_xlabel("Predicted label")
    ax.set_ylabel("True label")
    if title:
        ax.set_title(title)

    plt.tight_layout()
    plt.savefig(output_filename, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return output_filename


def plot_modality_comparison(results, output_filename, title="Validation F1 by modality"):
    """Grouped bars of F1 scores, one group per result ({'name': ..., 'f1_drone': ..., ...})"""
    names = [r["name"] for r in results]
    x = np.arange(len(names))

    fig, ax = plt.subplots(figsize=COMPARISON_FIGURE_SIZE)
    for k, key in enumerate(METRIC_KEYS):
        ys = [100 * r.get(key, 0.0) for r in results]
        ax.bar(x + (k - 1) * BAR_WIDTH, ys, BAR_WIDTH, label=METRIC_LABELS[key])
        for xi, y in zip(x, ys):
            ax.text(xi + (k - 1) * BAR_WIDTH, y + 1, f"{y:.1f}", ha="center", va="bottom", fontsize=8)

    ax.set_ylim(0, 110)
    ax.set_ylabel("F1 (%)")
    ax.set_title(title)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.legend()
    ax.grid(True, axis="y", linestyle="--", alpha=0.6)

    plt.tight_layout()
    plt.savefig(output_filename, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return output_filename


def render_clip_strip(original_crops, resized_frames, output_filename, title=None):
    """Upper row: native-size track crops; lower row: the uniformly resized stored frames"""
    n = min(len(original_crops), len(resized_frames), MAX_STRIP_FRAMES)
    if n == 0:
        raise ValueError("no frames to render")

    fig, axes = plt.subplots(2, n, figsize=(STRIP_FRAME_INCHES * n, STRIP_FRAME_INCHES * 2.2), squeeze=False)
    for i in range(n):
        for row, frames in enumerate((original_crops, resized_frames)):
            ax = axes[row][i]
            ax.imshow(frames[i])
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0][0].set_ylabel("crop")
    axes[1][0].set_ylabel("resized")
    if title:
        fig.suptitle(title)

    plt.tight_layout()
    plt.savefig(output_filename, dpi=DPI // 2, bbox_inches="tight")
    plt.close(fig)
    return output_filename


def main():
    """Re-render confusion plots and the comparison table from a metrics.json"""
    import argparse

    import evaluation

    parser = argparse.ArgumentParser(description="Render evaluation report files from metrics.json")
    parser.add_argument("metrics_file", help="metrics.json written by an eval or report run")
    parser.add_argument("--output", "-o", default=None, help="output directory (default: next to the metrics file)")
    args = parser.parse_args()

    reports = evaluation.load_metrics(args.metrics_file)
    out_dir = args.output or os.path.dirname(os.path.abspath(args.metrics_file))
    files = evaluation.render_report(reports, out_dir)
    for path in files.values():
        print(path)
    return 0


if __name__ == "__main__":
    exit(main())
