"""Combining grid cells into an ensemble of attack models.

Every trained cell scores every evaluation sample with a
member-probability, giving a samples-by-cells probability matrix.  A
small five-layer network fit on that matrix acts as the subject of a
Shapley-value analysis: sampled feature permutations (antithetic pairs,
column-mean background) estimate each cell's contribution, and cells
rank by mean absolute contribution.  The deployable ensemble then stacks
the top-k cells with decision-tree, random-forest, and RBF support
vector bases under a logistic meta-learner fit on out-of-fold
probabilities.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import clone
from sklearn.ensemble import RandomForestClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import f1_score
from sklearn.model_selection import StratifiedKFold
from sklearn.svm import SVC
from sklearn.tree import DecisionTreeClassifier
from torch import nn

from .errors import (
    DependencyError,
    InvalidDatasetError,
    InvalidInputError,
    TrainingDivergedError,
)
from .models import TrainConfig
from .seeding import derive_seed

DEFAULT_K = 8
SHAPLEY_PERMUTATIONS = 256
_PROB_EPS = 1e-7


def meta_train_defaults(seed=0):
    """Meta-network recipe: lr 1e-3, 10 epochs, batch 32."""
    return TrainConfig(
        learning_rate=1e-3,
        epochs=10,
        batch_size=32,
        loss="binary_cross_entropy",
        seed=seed,
    )


@dataclass
class ProbabilityMatrix:
    """Member-probabilities of every grid cell over one evaluation split.

    Rows are samples, columns are cells in canonical grid order; the
    column key tuples (method, threshold, layer) travel with the data.
    """

    values: np.ndarray
    columns: list
    labels: np.ndarray
    split: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2:
            raise InvalidInputError("probability matrix must be 2-D")
        if self.values.shape[1] != len(self.columns):
            raise InvalidInputError("column keys must match matrix width")
        if len(self.labels) != len(self.values):
            raise InvalidInputError("labels must align with matrix rows")
        if len(self.values) and (
            self.values.min() < 0.0 or self.values.max() > 1.0
        ):
            raise InvalidInputError("probabilities must lie in [0, 1]")

    @property
    def num_models(self):
        return self.values.shape[1]

    def __len__(self):
        return len(self.values)

    def subset(self, rows):
        return ProbabilityMatrix(
            values=self.values[rows],
            columns=list(self.columns),
            labels=self.labels[rows],
            split=self.split,
        )


def collect_model_probabilities(grid, split="shadow"):
    """Assemble the probability matrix for one evaluation split.

    Columns follow the grid's canonical cell order and exclude the
    T=1.0 baselines, which exist for reference, not ensembling.
    """
    if split not in ("shadow", "target"):
        raise InvalidInputError("split must be 'shadow' or 'target'")
    keys = grid.canonical_cell_keys(include_baselines=False)
    cols = []
    for key in keys:
        if key not in grid.cells:
            raise DependencyError(f"grid cell {key} missing from results")
        cell = grid.cells[key]
        metrics = cell.shadow_metrics if split == "shadow" else cell.target_metrics
        cols.append(np.clip(metrics.member_probs, 0.0, 1.0))
    labels = grid.shadow_eval_labels if split == "shadow" else grid.target_labels
    return ProbabilityMatrix(
        values=np.stack(cols, axis=1), columns=keys, labels=labels, split=split
    )


class MetaNetwork(nn.Module):
    """Five stacked linear layers shrinking to a two-way output."""

    def __init__(self, width_in):
        super().__init__()
        self.stack = nn.Sequential(
            nn.Linear(width_in, 64),
            nn.ReLU(),
            nn.Linear(64, 32),
            nn.ReLU(),
            nn.Linear(32, 16),
            nn.ReLU(),
            nn.Linear(16, 8),
            nn.ReLU(),
            nn.Linear(8, 2),
        )

    def forward(self, x):
        return self.stack(x)

    def member_probability(self, x):
        return torch.softmax(self.forward(x), dim=1)[:, 1]


@dataclass
class TrainedMetaModel:
    model: MetaNetwork
    width_in: int
    config: TrainConfig

    def predict(self, values):
        """Member-probability per row of a (rows, width_in) array."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.width_in:
            raise InvalidInputError(
                f"expected (rows, {self.width_in}) input, got {values.shape}"
            )
        self.model.eval()
        with torch.no_grad():
            tensor = torch.from_numpy(values.astype(np.float32))
            return self.model.member_probability(tensor).numpy().astype(np.float64)


def train_meta_model(matrix, config=None):
    """Fit the meta-network on a probability matrix."""
    if config is None:
        config = meta_train_defaults()
    if len(matrix) == 0:
        raise InvalidDatasetError("probability matrix is empty")
    if len(np.unique(matrix.labels)) < 2:
        raise InvalidDatasetError("meta training needs both membership labels")
    torch.manual_seed(config.seed)
    model = MetaNetwork(matrix.num_models)
    inputs = torch.from_numpy(matrix.values.astype(np.float32))
    targets = torch.from_numpy(matrix.labels.astype(np.float32))
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    else:
        optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate)
    bce = nn.BCELoss()
    shuffler = torch.Generator().manual_seed(config.seed)
    model.train()
    n = len(matrix)
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=shuffler)
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            optimizer.zero_grad()
            prob = torch.clamp(
                model.member_probability(inputs[rows]), _PROB_EPS, 1.0 - _PROB_EPS
            )
            loss = bce(prob, targets[rows])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite meta loss at epoch {epoch}", epoch=epoch
                )
            loss.backward()
            optimizer.step()
    model.eval()
    return TrainedMetaModel(model=model, width_in=matrix.num_models, config=config)


def permutation_shapley(predict, values, background, permutations=SHAPLEY_PERMUTATIONS, seed=0):
    """Sampled-permutation Shapley values of ``predict`` at each row.

    ``predict`` maps a (rows, width) array to per-row scalars.  Features
    enter one at a time in permutation order, starting from the
    ``background`` row; each feature's value is its average marginal
    contribution.  Permutations come in antithetic pairs (each drawn
    order also runs reversed), which cancels most position bias.  Each
    single permutation telescopes exactly, so summed values reproduce
    predict(x) - predict(background) up to float round-off.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise InvalidInputError("expected a 2-D feature array")
    n, width = values.shape
    background = np.asarray(background, dtype=np.float64).reshape(1, width)
    if permutations < 2 or permutations % 2:
        raise InvalidInputError("permutation count must be even and at least 2")
    rng = np.random.default_rng(seed)

    phi = np.zeros((n, width), dtype=np.float64)
    base_rows = np.repeat(background, n, axis=0)
    for _ in range(permutations // 2):
        forward = rng.permutation(width)
        for order in (forward, forward[::-1]):
            current = base_rows.copy()
            previous = predict(current)
            for j in order:
                current[:, j] = values[:, j]
                nxt = predict(current)
                phi[:, j] += nxt - previous
                previous = nxt
    phi /= permutations
    base_value = float(predict(background)[0])
    return phi, base_value


@dataclass
class ModelRanking:
    """Cells ordered by mean absolute Shapley contribution."""

    columns: list
    importance: np.ndarray
    order: np.ndarray
    phi: np.ndarray
    base_value: float
    meta: TrainedMetaModel
    seed: int

    def top_k(self, k):
        if not 1 <= k <= len(self.columns):
            raise InvalidInputError(
                f"k must lie in [1, {len(self.columns)}], got {k}"
            )
        return self.order[:k]


def rank_models(matrix, seed=0, permutations=SHAPLEY_PERMUTATIONS, meta_config=None):
    """Fit the meta-network, then Shapley-rank its input cells."""
    config = meta_config or meta_train_defaults(seed=derive_seed(seed, "meta"))
    meta = train_meta_model(matrix, config)
    background = matrix.values.mean(axis=0)
    phi, base_value = permutation_shapley(
        meta.predict,
        matrix.values,
        background,
        permutations=permutations,
        seed=derive_seed(seed, "shapley"),
    )
    importance = np.abs(phi).mean(axis=0)
    order = np.lexsort((np.arange(len(importance)), -importance))
    return ModelRanking(
        columns=list(matrix.columns),
        importance=importance,
        order=order,
        phi=phi,
        base_value=base_value,
        meta=meta,
        seed=int(seed),
    )


def write_model_ranking_csv(ranking, path):
    """``rank,method,threshold,layer,importance`` rows, best first."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "method", "threshold", "layer", "importance"])
        for rank, col in enumerate(ranking.order, start=1):
            method, threshold, layer = ranking.columns[col]
            writer.writerow(
                [rank, method, f"{threshold:.1f}", layer,
                 f"{ranking.importance[col]:.10g}"]
            )


@dataclass
class StackedEnsemble:
    """Top-k cells stacked under tree, forest, and SVM bases with a
    logistic combiner fit on out-of-fold base probabilities."""

    column_positions: np.ndarray
    columns: list
    bases: list
    combiner: LogisticRegression
    k: int
    seed: int


def _member_column(estimator):
    classes = list(estimator.classes_)
    if 1 not in classes:
        raise InvalidDatasetError("base learner never saw member rows")
    return classes.index(1)


def _base_probability(estimator, values):
    return estimator.predict_proba(values)[:, _member_column(estimator)]


def build_stacked_ensemble(matrix, k=DEFAULT_K, ranking=None, seed=0):
    """Stack the k most important cells of ``matrix``.

    Base learners see only the selected columns; the combiner trains on
    their out-of-fold member-probabilities so it never reads a base's
    fit-set predictions.
    """
    if ranking is None:
        ranking = rank_models(matrix, seed=seed)
    positions = ranking.top_k(k)
    X = matrix.values[:, positions]
    y = matrix.labels
    counts = np.bincount(y, minlength=2)
    if counts.min() < 2:
        raise InvalidDatasetError("stacking needs at least 2 rows per class")
    folds = min(5, int(counts.min()))

    bases = [
        DecisionTreeClassifier(random_state=derive_seed(seed, "tree")),
        RandomForestClassifier(
            n_estimators=100, random_state=derive_seed(seed, "forest"), n_jobs=1
        ),
        SVC(kernel="rbf", probability=True, random_state=derive_seed(seed, "svm")),
    ]
    oof = np.zeros((len(y), len(bases)), dtype=np.float64)
    splitter = StratifiedKFold(
        n_splits=folds, shuffle=True, random_state=derive_seed(seed, "folds") % (2**31)
    )
    for fit_rows, held_rows in splitter.split(X, y):
        for b, base in enumerate(bases):
            fold_base = clone(base)
            fold_base.fit(X[fit_rows], y[fit_rows])
            oof[held_rows, b] = _base_probability(fold_base, X[held_rows])
    for base in bases:
        base.fit(X, y)
    combiner = LogisticRegression(max_iter=1000)
    combiner.fit(oof, y)
    return StackedEnsemble(
        column_positions=positions.copy(),
        columns=[matrix.columns[p] for p in positions],
        bases=bases,
        combiner=combiner,
        k=int(k),
        seed=int(seed),
    )


def predict_ensemble(ensemble, values):
    """Member-probability per row of a (rows, k) cell-probability array."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[None, :]
    if values.ndim != 2 or values.shape[1] != ensemble.k:
        raise InvalidInputError(
            f"expected (rows, {ensemble.k}) probabilities, got {values.shape}"
        )
    if len(values) and (values.min() < 0.0 or values.max() > 1.0):
        raise InvalidInputError("cell probabilities must lie in [0, 1]")
    stacked = np.column_stack(
        [_base_probability(base, values) for base in ensemble.bases]
    )
    return _base_probability(
        _CombinerAdapter(ensemble.combiner), stacked
    )


class _CombinerAdapter:
    """Presents the combiner through the same probability accessor."""

    def __init__(self, combiner):
        self.combiner = combiner
        self.classes_ = combiner.classes_

    def predict_proba(self, values):
        return self.combiner.predict_proba(values)


def ensemble_accuracy(ensemble, matrix):
    """Accuracy and member-positive F1 of the ensemble on a matrix."""
    probs = predict_ensemble(ensemble, matrix.values[:, ensemble.column_positions])
    preds = (probs >= 0.5).astype(np.int64)
    accuracy = float((preds == matrix.labels).mean())
    f1 = float(f1_score(matrix.labels, preds, pos_label=1, zero_division=0.0))
    return accuracy, f1


@dataclass
class SweepResult:
    """Per-k metrics on the shadow holdout and the target split."""

    rows: list
    kmax: int
    seed: int

    @property
    def best_k(self):
        best = max(self.rows, key=lambda r: (r["shadow_accuracy"], -r["k"]))
        return best["k"]

    def row(self, k):
        for r in self.rows:
            if r["k"] == k:
                return r
        raise InvalidInputError(f"no sweep row for k={k}")


def sweep_ensemble(
    shadow_matrix,
    target_matrix,
    kmax=12,
    seed=0,
    ranking=None,
    holdout_fraction=0.3,
):
    """Fit stacked ensembles for k = 1..kmax and score each.

    The shadow matrix splits into a fit part and a holdout part
    (stratified); reported shadow metrics come from the holdout so k
    selection never reads fit-set performance.
    """
    if shadow_matrix.columns != target_matrix.columns:
        raise InvalidInputError("shadow and target matrices disagree on columns")
    kmax = int(kmax)
    if not 1 <= kmax <= shadow_matrix.num_models:
        raise InvalidInputError(
            f"kmax must lie in [1, {shadow_matrix.num_models}], got {kmax}"
        )
    from .attack import stratified_row_split

    fit_rows, holdout_rows = stratified_row_split(
        shadow_matrix.labels, 1.0 - holdout_fraction, derive_seed(seed, "sweep-split")
    )
    fit = shadow_matrix.subset(fit_rows)
    holdout = shadow_matrix.subset(holdout_rows)
    if ranking is None:
        ranking = rank_models(fit, seed=seed)
    rows = []
    for k in range(1, kmax + 1):
        ens = build_stacked_ensemble(fit, k=k, ranking=ranking, seed=derive_seed(seed, "stack", k))
        shadow_acc, shadow_f1 = ensemble_accuracy(ens, holdout)
        target_acc, target_f1 = ensemble_accuracy(ens, target_matrix)
        rows.append(
            {
                "k": k,
                "shadow_accuracy": shadow_acc,
                "shadow_f1": shadow_f1,
                "target_accuracy": target_acc,
                "target_f1": target_f1,
            }
        )
    return SweepResult(rows=rows, kmax=kmax, seed=int(seed))


def write_sweep_csv(sweep, path):
    """``k,shadow_accuracy,shadow_f1,target_accuracy,target_f1`` rows."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["k", "shadow_accuracy", "shadow_f1", "target_accuracy", "target_f1"]
        )
        for row in sweep.rows:
            writer.writerow(
                [
                    row["k"],
                    f"{row['shadow_accuracy']:.6f}",
                    f"{row['shadow_f1']:.6f}",
                    f"{row['target_accuracy']:.6f}",
                    f"{row['target_f1']:.6f}",
                ]
            )
