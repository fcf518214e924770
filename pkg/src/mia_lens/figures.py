"""Rendering for run artifacts: overlays, grid charts, summaries.

Pure functions from in-memory data to PNG files; nothing here reads run
directories or decides what to draw.  The pipeline owns those choices
and calls in with whatever series exist.
"""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _ensure_dir(path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)


def _grayscale(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {image.shape}")
    return image.mean(axis=2)


def render_overlay(image, target_map, attack_map, path, membership=None, score=None):
    """Side-by-side attribution overlays on the grayscale input.

    Left: what drove the predicted class.  Right: what drove the
    membership call.  Shared diverging scale per panel, centered at 0.
    """
    _ensure_dir(path)
    gray = _grayscale(image)
    fig, axes = plt.subplots(1, 2, figsize=(6.4, 3.4))
    panels = (
        (target_map, "class evidence"),
        (attack_map, "membership evidence"),
    )
    for ax, (amap, title) in zip(axes, panels):
        overlay = amap.channel_summed()
        extent = float(np.abs(overlay).max()) or 1.0
        ax.imshow(gray, cmap="gray", vmin=0.0, vmax=1.0)
        drawn = ax.imshow(
            overlay, cmap="coolwarm", alpha=0.6, vmin=-extent, vmax=extent
        )
        fig.colorbar(drawn, ax=ax, fraction=0.046)
        ax.set_title(title, fontsize=10)
        ax.set_axis_off()
    caption = []
    if membership is not None:
        caption.append("member" if membership else "non-member")
    if score is not None:
        caption.append(f"map agreement {score:.3f}")
    if caption:
        fig.suptitle(", ".join(caption), fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def grid_accuracy_figure(rows, layer, path):
    """Attack accuracy against selected-neuron fraction, one line per
    selection method; the full-width baseline is a dashed reference."""
    _ensure_dir(path)
    fig, ax = plt.subplots(figsize=(5.6, 3.8))
    methods = []
    for row in rows:
        if row["method"] not in methods and row["method"] != "baseline":
            methods.append(row["method"])
    for method in methods:
        points = sorted(
            ((r["threshold"], r["accuracy"]) for r in rows if r["method"] == method)
        )
        ax.plot(
            [p[0] for p in points],
            [p[1] for p in points],
            marker="o",
            label=method,
        )
    baseline = [r["accuracy"] for r in rows if r["method"] == "baseline"]
    if baseline:
        ax.axhline(
            baseline[0], linestyle="--", color="gray", label="all neurons"
        )
    ax.set_xlabel("selected neuron fraction")
    ax.set_ylabel("attack accuracy")
    ax.set_title(f"layer {layer}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def column_label(method, threshold, layer):
    return f"{method} {int(round(float(threshold) * 100))}% {layer}"


def importance_bar_figure(ranking_rows, path, top=10):
    """Horizontal bars for the most important model columns."""
    _ensure_dir(path)
    rows = sorted(ranking_rows, key=lambda r: int(r["rank"]))[:top]
    labels = [
        column_label(r["method"], r["threshold"], r["layer"]) for r in rows
    ]
    values = [float(r["importance"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6.0, 0.42 * len(rows) + 1.2))
    positions = np.arange(len(rows))
    ax.barh(positions, values, color="tab:blue")
    ax.set_yticks(positions)
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("mean |Shapley value|")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def beeswarm_figure(phi, values, order, labels, path, top=10):
    """Per-row Shapley values for the top columns, colored by the
    column's probability output; jitter is seeded, so re-renders agree."""
    _ensure_dir(path)
    top_cols = list(order[:top])
    rng = np.random.default_rng(0)
    fig, ax = plt.subplots(figsize=(6.4, 0.5 * len(top_cols) + 1.4))
    drawn = None
    for position, col in enumerate(top_cols):
        jitter = rng.uniform(-0.22, 0.22, size=len(phi))
        drawn = ax.scatter(
            phi[:, col],
            np.full(len(phi), position) + jitter,
            c=values[:, col],
            cmap="coolwarm",
            vmin=0.0,
            vmax=1.0,
            s=9,
            alpha=0.8,
        )
    ax.set_yticks(np.arange(len(top_cols)))
    ax.set_yticklabels([labels[c] for c in top_cols], fontsize=8)
    ax.invert_yaxis()
    ax.axvline(0.0, color="gray", linewidth=0.8)
    ax.set_xlabel("Shapley value")
    if drawn is not None:
        fig.colorbar(drawn, ax=ax, label="model probability")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def sweep_figure(rows, path):
    """Ensemble accuracy as a function of how many models stack."""
    _ensure_dir(path)
    ks = [int(r["k"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5.6, 3.8))
    ax.plot(
        ks,
        [float(r["shadow_accuracy"]) for r in rows],
        marker="o",
        label="shadow holdout",
    )
    ax.plot(
        ks,
        [float(r["target_accuracy"]) for r in rows],
        marker="s",
        label="target",
    )
    ax.set_xlabel("ensemble size k")
    ax.set_ylabel("accuracy")
    ax.set_xticks(ks)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def ssim_box_figure(member_scores, nonmember_scores, path):
    """Distribution of target-vs-attack map agreement by membership."""
    _ensure_dir(path)
    groups, labels = [], []
    if len(member_scores):
        groups.append(member_scores)
        labels.append("members")
    if len(nonmember_scores):
        groups.append(nonmember_scores)
        labels.append("non-members")
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    ax.boxplot(groups, tick_labels=labels)
    ax.set_ylabel("SSIM between attribution maps")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def pca_figure(coords, membership, title, path):
    """Two-component projection scattered by membership."""
    _ensure_dir(path)
    coords = np.asarray(coords, dtype=np.float64)
    membership = np.asarray(membership)
    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    for value, label, color in (
        (1, "members", "tab:red"),
        (0, "non-members", "tab:blue"),
    ):
        rows = membership == value
        ax.scatter(
            coords[rows, 0],
            coords[rows, 1],
            s=8,
            alpha=0.55,
            label=label,
            color=color,
        )
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
