"""Attack models over the method-by-threshold grid.

One attack model is five encoders plus a classifier: the activation,
posterior, and predicted-label branches are two-layer fully connected
encoders (hidden 128, embedding 64), the scalar loss gets the same
treatment from width 1, and the gradient block passes through a 5x5
convolution, batch-norm, 2x2 max-pool, then fully connected layers
256-128-64.  The five 64-wide embeddings concatenate to 320 and feed a
stack of 256-128-64-2 linear layers; member-probability is the softmax
mass on class 1.  Decision threshold is fixed at 0.5.
"""

import os
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.metrics import f1_score
from torch import nn

from .errors import (
    DependencyError,
    InvalidDatasetError,
    InvalidInputError,
    TrainingDivergedError,
)
from .features import apply_mask, featurize
from .models import TrainConfig
from .seeding import derive_seed
from .selection import METHODS, SelectionMask, select_top_fraction

GRID_THRESHOLDS = (0.2, 0.4, 0.6, 0.8)
BASELINE_METHOD = "baseline"
_PROB_EPS = 1e-7


def attack_train_defaults(seed=0):
    """Attack-model recipe: lr 1e-5, 50 epochs, batch 64, binary CE."""
    return TrainConfig(
        learning_rate=1e-5,
        epochs=50,
        batch_size=64,
        loss="binary_cross_entropy",
        seed=seed,
    )


def _fc_encoder(width_in, dropout=0.2):
    return nn.Sequential(
        nn.Linear(width_in, 128),
        nn.ReLU(),
        nn.Dropout(dropout),
        nn.Linear(128, 64),
        nn.ReLU(),
    )


class AttackModel(nn.Module):
    def __init__(self, activation_width, num_classes, gradient_shape, dropout=0.2):
        super().__init__()
        if activation_width < 1:
            raise InvalidInputError("activation width must be at least 1")
        gh, gw = gradient_shape
        self.activation_width = int(activation_width)
        self.num_classes = int(num_classes)
        self.gradient_shape = (int(gh), int(gw))

        self.activation_encoder = _fc_encoder(activation_width, dropout)
        self.posterior_encoder = _fc_encoder(num_classes, dropout)
        self.label_encoder = _fc_encoder(num_classes, dropout)
        self.loss_encoder = _fc_encoder(1, dropout)

        pool = (2 if gh >= 2 else 1, 2 if gw >= 2 else 1)
        self.gradient_conv = nn.Sequential(
            nn.Conv2d(1, 1, kernel_size=5, padding=2),
            nn.BatchNorm2d(1),
            nn.MaxPool2d(pool),
            nn.Flatten(),
        )
        with torch.no_grad():
            flat = self.gradient_conv(torch.zeros(1, 1, gh, gw)).shape[1]
        self.gradient_fc = nn.Sequential(
            nn.Linear(flat, 256),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(256, 128),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(128, 64),
            nn.ReLU(),
        )
        self.classifier = nn.Sequential(
            nn.Linear(5 * 64, 256),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(256, 128),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(128, 64),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(64, 2),
        )

    def forward(self, activations, posteriors, labels, losses, gradients):
        parts = [
            self.activation_encoder(activations),
            self.posterior_encoder(posteriors),
            self.label_encoder(labels),
            self.loss_encoder(losses),
            self.gradient_fc(self.gradient_conv(gradients)),
        ]
        return self.classifier(torch.cat(parts, dim=1))

    def member_probability(self, *features):
        return torch.softmax(self.forward(*features), dim=1)[:, 1]


def _dataset_tensors(ds):
    return (
        torch.from_numpy(np.asarray(ds.activations, dtype=np.float32)),
        torch.from_numpy(np.asarray(ds.posteriors, dtype=np.float32)),
        torch.from_numpy(np.asarray(ds.labels_onehot, dtype=np.float32)),
        torch.from_numpy(np.asarray(ds.losses, dtype=np.float32))[:, None],
        torch.from_numpy(np.asarray(ds.gradients, dtype=np.float32))[:, None],
    )


@dataclass
class TrainedAttackModel:
    """An AttackModel plus the feature shapes it was fit to."""

    model: AttackModel
    config: TrainConfig

    def member_probabilities(self, ds, batch_size=512):
        """Member-probability per record, in input order, as float64."""
        if ds.activation_width != self.model.activation_width:
            raise InvalidInputError(
                f"activation width {ds.activation_width} does not match "
                f"model width {self.model.activation_width}"
            )
        tensors = _dataset_tensors(ds)
        self.model.eval()
        chunks = []
        with torch.no_grad():
            for start in range(0, len(ds), batch_size):
                batch = [t[start : start + batch_size] for t in tensors]
                chunks.append(self.model.member_probability(*batch).numpy())
        return np.concatenate(chunks).astype(np.float64)

    def save(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        torch.save(
            {
                "state_dict": self.model.state_dict(),
                "activation_width": self.model.activation_width,
                "num_classes": self.model.num_classes,
                "gradient_shape": list(self.model.gradient_shape),
                "config": vars(self.config).copy(),
            },
            path,
        )

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise DependencyError(f"attack model {path} does not exist")
        payload = torch.load(path, weights_only=False)
        model = AttackModel(
            payload["activation_width"],
            payload["num_classes"],
            tuple(payload["gradient_shape"]),
        )
        model.load_state_dict(payload["state_dict"])
        model.eval()
        return cls(model=model, config=TrainConfig(**payload["config"]))


def train_attack_model(train, config=None):
    """Fit an attack model on an AttackDataset; deterministic per seed."""
    if config is None:
        config = attack_train_defaults()
    if len(train) == 0:
        raise InvalidDatasetError("attack training set is empty")
    classes = np.unique(train.membership)
    if len(classes) < 2:
        raise InvalidDatasetError("attack training set must contain both labels")
    torch.manual_seed(config.seed)
    model = AttackModel(train.activation_width, train.num_classes, train.gradient_shape)
    tensors = _dataset_tensors(train)
    targets = torch.from_numpy(np.asarray(train.membership, dtype=np.float32))
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    else:
        optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate)
    bce = nn.BCELoss()
    shuffler = torch.Generator().manual_seed(config.seed)

    model.train()
    n = len(train)
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=shuffler)
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            batch = [t[rows] for t in tensors]
            optimizer.zero_grad()
            prob = model.member_probability(*batch)
            prob = torch.clamp(prob, _PROB_EPS, 1.0 - _PROB_EPS)
            loss = bce(prob, targets[rows])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite attack loss at epoch {epoch}", epoch=epoch
                )
            loss.backward()
            optimizer.step()
    model.eval()
    return TrainedAttackModel(model=model, config=config)


@dataclass
class AttackMetrics:
    """Accuracy and member-positive F1 at threshold 0.5, plus the
    per-sample member-probabilities over the full evaluation input."""

    accuracy: float
    f1: float
    member_probs: np.ndarray
    eval_indices: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0 or not 0.0 <= self.f1 <= 1.0:
            raise InvalidInputError("metrics must lie in [0, 1]")


def balanced_indices(membership, seed):
    """Seeded subsample of the larger class so both classes match."""
    membership = np.asarray(membership)
    members = np.flatnonzero(membership == 1)
    nonmembers = np.flatnonzero(membership == 0)
    if len(members) == 0 or len(nonmembers) == 0:
        raise InvalidDatasetError("balancing needs both classes present")
    size = min(len(members), len(nonmembers))
    rng = np.random.default_rng(seed)
    if len(members) > size:
        members = np.sort(rng.choice(members, size=size, replace=False))
    if len(nonmembers) > size:
        nonmembers = np.sort(rng.choice(nonmembers, size=size, replace=False))
    return np.sort(np.concatenate([members, nonmembers]))


def evaluate_attack(trained, eval_ds, seed=0):
    """Balanced accuracy and F1; probabilities for every input row."""
    probs = trained.member_probabilities(eval_ds)
    keep = balanced_indices(eval_ds.membership, seed)
    preds = (probs[keep] >= 0.5).astype(np.int64)
    truth = eval_ds.membership[keep]
    accuracy = float((preds == truth).mean())
    f1 = float(f1_score(truth, preds, pos_label=1, zero_division=0.0))
    return AttackMetrics(
        accuracy=accuracy, f1=f1, member_probs=probs, eval_indices=keep
    )


@dataclass
class CellResult:
    layer: str
    method: str
    threshold: float
    mask_indices: np.ndarray
    shadow_metrics: AttackMetrics
    target_metrics: AttackMetrics
    model: TrainedAttackModel | None = None


@dataclass
class GridResult:
    """All trained cells plus the shared shadow train/eval row split."""

    cells: dict
    layers: list
    grid_layers: list
    methods: tuple
    thresholds: tuple
    seed: int
    attack_train_rows: np.ndarray
    shadow_eval_rows: np.ndarray
    shadow_eval_labels: np.ndarray
    target_labels: np.ndarray

    def cell(self, method, threshold, layer):
        key = (method, float(threshold), layer)
        if key not in self.cells:
            raise DependencyError(f"grid cell {key} missing")
        return self.cells[key]

    def canonical_cell_keys(self, include_baselines=False):
        """Documented canonical order: per grid layer, methods in registry
        order, thresholds ascending; baselines (T=1.0 per layer) last."""
        keys = [
            (method, T, layer)
            for layer in self.grid_layers
            for method in self.methods
            for T in self.thresholds
        ]
        if include_baselines:
            keys += [(BASELINE_METHOD, 1.0, layer) for layer in self.layers]
        return keys


def stratified_row_split(membership, train_fraction, seed):
    """Per-class row split keeping ``train_fraction`` for attack training."""
    membership = np.asarray(membership)
    rng = np.random.default_rng(seed)
    train_rows, eval_rows = [], []
    for value in (1, 0):
        rows = np.flatnonzero(membership == value)
        rows = rows[rng.permutation(len(rows))]
        cut = int(round(train_fraction * len(rows)))
        train_rows.append(rows[:cut])
        eval_rows.append(rows[cut:])
    return np.sort(np.concatenate(train_rows)), np.sort(np.concatenate(eval_rows))


def _full_mask(ranking_width, layer):
    return SelectionMask(
        layer=layer,
        method=BASELINE_METHOD,
        threshold=1.0,
        indices=np.arange(ranking_width),
    )


def run_attack_grid(
    shadow_ckpt,
    target_ckpt,
    rankings,
    layers,
    seed,
    *,
    shadow_members,
    shadow_nonmembers,
    target_members,
    target_nonmembers,
    grid_layers=None,
    methods=METHODS,
    thresholds=GRID_THRESHOLDS,
    attack_config=None,
    attack_train_fraction=0.8,
    out_dir=None,
    on_cell_complete=None,
    keep_models=True,
    batch_size=256,
    precomputed=None,
):
    """Train and evaluate the method-by-threshold grid.

    ``rankings`` maps (layer, method) to a NeuronRanking computed on the
    shadow model's activations; masks transfer unchanged to the target
    side (the attack never re-ranks on target data).  Full grids run on
    ``grid_layers`` (default: the deepest entry of ``layers``); every
    layer in ``layers`` also gets a T=1.0 baseline cell.  With
    ``out_dir`` set, completed cells persist and later calls skip them.
    ``precomputed`` may map a layer to its (shadow, target) FullFeatures
    pair to avoid re-featurizing.
    """
    layers = list(layers)
    if not layers:
        raise InvalidInputError("at least one layer required")
    grid_layers = list(grid_layers) if grid_layers is not None else [layers[-1]]
    thresholds = tuple(float(t) for t in thresholds)
    for layer in grid_layers:
        for method in methods:
            if (layer, method) not in rankings:
                raise DependencyError(f"missing ranking for ({layer}, {method})")

    shadow_feats, target_feats = {}, {}
    if precomputed:
        for layer, (full_shadow, full_target) in precomputed.items():
            shadow_feats[layer] = full_shadow
            target_feats[layer] = full_target

    def features_for(layer):
        if layer not in shadow_feats:
            shadow_feats[layer] = featurize(
                shadow_ckpt,
                np.concatenate([shadow_members.images, shadow_nonmembers.images]),
                np.concatenate(
                    [shadow_members.class_labels, shadow_nonmembers.class_labels]
                ),
                np.concatenate(
                    [
                        np.ones(len(shadow_members), dtype=np.int64),
                        np.zeros(len(shadow_nonmembers), dtype=np.int64),
                    ]
                ),
                layer,
                batch_size=batch_size,
            )
            target_feats[layer] = featurize(
                target_ckpt,
                np.concatenate([target_members.images, target_nonmembers.images]),
                np.concatenate(
                    [target_members.class_labels, target_nonmembers.class_labels]
                ),
                np.concatenate(
                    [
                        np.ones(len(target_members), dtype=np.int64),
                        np.zeros(len(target_nonmembers), dtype=np.int64),
                    ]
                ),
                layer,
                batch_size=batch_size,
            )
        return shadow_feats[layer], target_feats[layer]

    shadow_membership = np.concatenate(
        [
            np.ones(len(shadow_members), dtype=np.int64),
            np.zeros(len(shadow_nonmembers), dtype=np.int64),
        ]
    )
    train_rows, eval_rows = stratified_row_split(
        shadow_membership, attack_train_fraction, derive_seed(seed, "attack-split")
    )

    cells = {}
    keys = [
        (method, T, layer)
        for layer in grid_layers
        for method in methods
        for T in thresholds
    ] + [(BASELINE_METHOD, 1.0, layer) for layer in layers]

    for method, T, layer in keys:
        cell_tag = f"{layer}-{method}-{int(round(T * 100))}"
        cell_path = os.path.join(out_dir, "cells", cell_tag) if out_dir else None
        if cell_path and os.path.exists(cell_path + ".npz") and os.path.exists(
            cell_path + ".pt"
        ):
            cells[(method, T, layer)] = _load_cell(cell_path, method, T, layer)
            continue

        full_shadow, full_target = features_for(layer)
        if method == BASELINE_METHOD:
            mask = _full_mask(full_shadow.activations_full.shape[1], layer)
        else:
            mask = select_top_fraction(rankings[(layer, method)], T)
        shadow_ds = apply_mask(full_shadow, mask, {"role": "shadow"})
        target_ds = apply_mask(full_target, mask, {"role": "target"})

        cell_config = attack_config or attack_train_defaults()
        cell_config = TrainConfig(
            **{
                **vars(cell_config),
                "seed": derive_seed(seed, "attack", layer, method, T),
            }
        )
        trained = train_attack_model(shadow_ds.subset(train_rows), cell_config)
        shadow_metrics = evaluate_attack(
            trained, shadow_ds.subset(eval_rows), seed=derive_seed(seed, "shadow-balance")
        )
        target_metrics = evaluate_attack(
            trained, target_ds, seed=derive_seed(seed, "target-balance")
        )
        result = CellResult(
            layer=layer,
            method=method,
            threshold=T,
            mask_indices=mask.indices.copy(),
            shadow_metrics=shadow_metrics,
            target_metrics=target_metrics,
            model=trained if keep_models else None,
        )
        cells[(method, T, layer)] = result
        if cell_path:
            _save_cell(cell_path, result, trained)
        if on_cell_complete is not None:
            on_cell_complete(result)

    return GridResult(
        cells=cells,
        layers=layers,
        grid_layers=grid_layers,
        methods=tuple(methods),
        thresholds=thresholds,
        seed=int(seed),
        attack_train_rows=train_rows,
        shadow_eval_rows=eval_rows,
        shadow_eval_labels=shadow_membership[eval_rows],
        target_labels=np.concatenate(
            [
                np.ones(len(target_members), dtype=np.int64),
                np.zeros(len(target_nonmembers), dtype=np.int64),
            ]
        ),
    )


def _save_cell(cell_path, result, trained):
    os.makedirs(os.path.dirname(cell_path), exist_ok=True)
    np.savez(
        cell_path + ".npz",
        mask_indices=result.mask_indices,
        shadow_accuracy=result.shadow_metrics.accuracy,
        shadow_f1=result.shadow_metrics.f1,
        shadow_probs=result.shadow_metrics.member_probs,
        shadow_eval_indices=result.shadow_metrics.eval_indices,
        target_accuracy=result.target_metrics.accuracy,
        target_f1=result.target_metrics.f1,
        target_probs=result.target_metrics.member_probs,
        target_eval_indices=result.target_metrics.eval_indices,
    )
    trained.save(cell_path + ".pt")


def _load_cell(cell_path, method, T, layer):
    with np.load(cell_path + ".npz") as payload:
        shadow_metrics = AttackMetrics(
            accuracy=float(payload["shadow_accuracy"]),
            f1=float(payload["shadow_f1"]),
            member_probs=payload["shadow_probs"],
            eval_indices=payload["shadow_eval_indices"],
        )
        target_metrics = AttackMetrics(
            accuracy=float(payload["target_accuracy"]),
            f1=float(payload["target_f1"]),
            member_probs=payload["target_probs"],
            eval_indices=payload["target_eval_indices"],
        )
        mask = payload["mask_indices"]
    return CellResult(
        layer=layer,
        method=method,
        threshold=T,
        mask_indices=mask,
        shadow_metrics=shadow_metrics,
        target_metrics=target_metrics,
        model=TrainedAttackModel.load(cell_path + ".pt"),
    )


def write_grid_csv(grid, path):
    """``method,threshold,layer,split,accuracy,f1`` rows in canonical order."""
    import csv

    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "threshold", "layer", "split", "accuracy", "f1"])
        for key in grid.canonical_cell_keys(include_baselines=True):
            cell = grid.cells[key]
            for split, metrics in (
                ("shadow", cell.shadow_metrics),
                ("target", cell.target_metrics),
            ):
                writer.writerow(
                    [
                        cell.method,
                        f"{cell.threshold:.1f}",
                        cell.layer,
                        split,
                        f"{metrics.accuracy:.6f}",
                        f"{metrics.f1:.6f}",
                    ]
                )
