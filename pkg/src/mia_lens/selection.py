"""Per-neuron membership-divergence scoring and top-fraction masks.

Five methods rank neurons by how differently they activate on member
versus non-member inputs: Welch's two-sample t-test, the two-sample
Kolmogorov-Smirnov test, a histogram KL-divergence estimate, the mean
absolute bootstrapped difference of central tendency, and random-forest
impurity importance.  Test-based methods order by ascending p-value,
score-based methods by descending score; ties always break toward the
lower neuron index so rankings are deterministic.
"""

import csv
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats
from sklearn.ensemble import RandomForestClassifier

from .errors import InvalidInputError

METHODS = ("t_test", "ks2samp", "kl_divergence", "bootstrap", "random_forest")
THRESHOLDS = (0.2, 0.4, 0.6, 0.8, 1.0)

KL_BINS = 50
KL_SMOOTHING = 0.05  # pseudo-count per bin; keeps empty-bin penalties bounded
BOOTSTRAP_RESAMPLES = 1000
RF_TREES = 100
SIGNIFICANCE_LEVEL = 0.05


@dataclass
class NeuronRanking:
    """Full per-neuron ordering for one (layer, method) pair.

    ``order`` lists neuron indices most significant first.  For t_test,
    ``significant_count`` records how many neurons cleared p < 0.05; masks
    are always padded from the next-best p-values to their full size.
    """

    layer: str
    method: str
    scores: np.ndarray
    p_values: np.ndarray | None
    order: np.ndarray
    seed: int
    significant_count: int | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.order = np.asarray(self.order, dtype=np.int64)
        if self.p_values is not None:
            self.p_values = np.asarray(self.p_values, dtype=np.float64)

    @property
    def num_neurons(self):
        return len(self.scores)


@dataclass
class SelectionMask:
    """Materialized top-fraction neuron index set."""

    layer: str
    method: str
    threshold: float
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(self.indices) == 0:
            raise InvalidInputError("selection mask must keep at least one neuron")
        if len(np.unique(self.indices)) != len(self.indices):
            raise InvalidInputError("selection mask indices must be unique")

    def __len__(self):
        return len(self.indices)


def _as_column(vec, side):
    arr = np.asarray(vec, dtype=np.float64).ravel()
    if len(arr) < 2:
        raise InvalidInputError(f"{side} sample needs length >= 2, got {len(arr)}")
    return arr


def _welch_columns(mem, non):
    """Vectorized Welch t-test over columns with the zero-variance contract:
    when both samples of a column are constant, score 0 and p 1."""
    with np.errstate(divide="ignore", invalid="ignore"), warnings.catch_warnings():
        # constant columns trip scipy's precision warning; the guard below
        # overrides those results anyway
        warnings.simplefilter("ignore", RuntimeWarning)
        t, p = stats.ttest_ind(mem, non, axis=0, equal_var=False)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    dead = (mem.var(axis=0) == 0) & (non.var(axis=0) == 0)
    dead |= ~np.isfinite(t) | ~np.isfinite(p)
    return np.where(dead, 0.0, t), np.where(dead, 1.0, p)


def _ks_column(mem, non):
    if mem.var() == 0 and non.var() == 0:
        return 0.0, 1.0
    result = stats.ks_2samp(mem, non)
    return float(result.statistic), float(result.pvalue)


def kl_divergence_histogram(mem, non, bins=KL_BINS, smoothing=KL_SMOOTHING):
    """KL(mem || non) between histogram estimates on the pooled range.

    Equal-width bins over the pooled min-max of both samples; a
    pseudo-count of ``smoothing`` is added to every bin before
    normalizing, so empty bins contribute a bounded penalty instead of
    an infinite one.  Identical samples give exactly 0.
    """
    lo = min(mem.min(), non.min())
    hi = max(mem.max(), non.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(mem, bins=edges)[0].astype(np.float64) + smoothing
    q = np.histogram(non, bins=edges)[0].astype(np.float64) + smoothing
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def _bootstrap_matrix(mem, non, seed, resamples, statistic):
    """Mean |bootstrapped difference| per column; one shared index draw
    across columns so per-column and whole-matrix calls agree exactly."""
    n1, n0 = len(mem), len(non)
    rng = np.random.default_rng(seed)
    idx1 = rng.integers(0, n1, size=(resamples, n1))
    idx0 = rng.integers(0, n0, size=(resamples, n0))
    if statistic == "mean":
        w1 = np.zeros((resamples, n1))
        w0 = np.zeros((resamples, n0))
        for b in range(resamples):
            w1[b] = np.bincount(idx1[b], minlength=n1)
            w0[b] = np.bincount(idx0[b], minlength=n0)
        stat1 = (w1 @ mem) / n1
        stat0 = (w0 @ non) / n0
        return np.abs(stat1 - stat0).mean(axis=0)
    if statistic == "median":
        cols = mem.shape[1]
        scores = np.empty(cols)
        for j in range(cols):
            med1 = np.median(mem[:, j][idx1], axis=1)
            med0 = np.median(non[:, j][idx0], axis=1)
            scores[j] = np.abs(med1 - med0).mean()
        return scores
    raise InvalidInputError(f"unknown bootstrap statistic {statistic!r}")


def score_neuron(
    mem_col,
    nonmem_col,
    method,
    seed=0,
    kl_bins=KL_BINS,
    kl_smoothing=KL_SMOOTHING,
    bootstrap_resamples=BOOTSTRAP_RESAMPLES,
    bootstrap_statistic="mean",
):
    """Score one neuron's member/non-member divergence.

    Returns (score, p_value); the p-value is populated for t_test and
    ks2samp only.  random_forest needs the whole layer at once and is
    served by rank_neurons.
    """
    if method not in METHODS:
        raise InvalidInputError(f"unknown method {method!r}; known: {METHODS}")
    if method == "random_forest":
        raise InvalidInputError(
            "random_forest scores come from rank_neurons over the full layer"
        )
    mem = _as_column(mem_col, "member")
    non = _as_column(nonmem_col, "non-member")
    if method == "t_test":
        t, p = _welch_columns(mem[:, None], non[:, None])
        return float(t[0]), float(p[0])
    if method == "ks2samp":
        return _ks_column(mem, non)
    if method == "kl_divergence":
        return kl_divergence_histogram(mem, non, kl_bins, kl_smoothing), None
    score = _bootstrap_matrix(
        mem[:, None], non[:, None], seed, bootstrap_resamples, bootstrap_statistic
    )
    return float(score[0]), None


def _ordering(scores, p_values, method, n):
    """Most significant first; ties break toward the lower neuron index."""
    index = np.arange(n)
    if method in ("t_test", "ks2samp"):
        return np.lexsort((index, p_values))
    return np.lexsort((index, -scores))


def rank_neurons(
    mem,
    nonmem,
    method,
    seed=0,
    kl_bins=KL_BINS,
    kl_smoothing=KL_SMOOTHING,
    bootstrap_resamples=BOOTSTRAP_RESAMPLES,
    bootstrap_statistic="mean",
    rf_trees=RF_TREES,
):
    """Rank every neuron of a layer; inputs are the member and non-member
    ActivationMatrix views of the same layer."""
    if method not in METHODS:
        raise InvalidInputError(f"unknown method {method!r}; known: {METHODS}")
    if mem.layer != nonmem.layer:
        raise InvalidInputError(
            f"layer mismatch: {mem.layer!r} vs {nonmem.layer!r}"
        )
    if mem.num_neurons != nonmem.num_neurons:
        raise InvalidInputError("member and non-member matrices disagree on width")
    if len(mem) < 2 or len(nonmem) < 2:
        raise InvalidInputError("need at least 2 rows per class")
    a = mem.values.astype(np.float64)
    b = nonmem.values.astype(np.float64)
    n = a.shape[1]
    p_values = None
    significant = None

    if method == "t_test":
        t, p_values = _welch_columns(a, b)
        scores = t
        significant = int((p_values < SIGNIFICANCE_LEVEL).sum())
    elif method == "ks2samp":
        pairs = [_ks_column(a[:, j], b[:, j]) for j in range(n)]
        scores = np.array([s for s, _ in pairs])
        p_values = np.array([p for _, p in pairs])
    elif method == "kl_divergence":
        scores = np.array(
            [
                kl_divergence_histogram(a[:, j], b[:, j], kl_bins, kl_smoothing)
                for j in range(n)
            ]
        )
    elif method == "bootstrap":
        scores = _bootstrap_matrix(a, b, seed, bootstrap_resamples, bootstrap_statistic)
    else:
        X = np.concatenate([a, b])
        y = np.concatenate([np.ones(len(a)), np.zeros(len(b))])
        forest = RandomForestClassifier(
            n_estimators=rf_trees, random_state=seed, n_jobs=1
        )
        forest.fit(X, y)
        scores = forest.feature_importances_.astype(np.float64)

    order = _ordering(scores, p_values, method, n)
    return NeuronRanking(
        layer=mem.layer,
        method=method,
        scores=scores,
        p_values=p_values,
        order=order,
        seed=int(seed),
        significant_count=significant,
    )


def canonical_threshold(T):
    for known in THRESHOLDS:
        if math.isclose(float(T), known, abs_tol=1e-9):
            return known
    raise InvalidInputError(f"threshold {T!r} not in {THRESHOLDS}")


def select_top_fraction(ranking, T):
    """First floor(T*n) indices of the ranking; T=1.0 keeps all."""
    T = canonical_threshold(T)
    n = ranking.num_neurons
    count = n if T == 1.0 else int(math.floor(T * n))
    if count < 1:
        raise InvalidInputError(
            f"threshold {T} keeps no neurons out of {n}; layer too narrow"
        )
    return SelectionMask(
        layer=ranking.layer,
        method=ranking.method,
        threshold=T,
        indices=ranking.order[:count].copy(),
    )


def write_rankings_csv(rankings, path):
    """Persist rankings as ``layer,method,neuron,score,p_value,rank`` rows.

    Rows are grouped per ranking in neuron order; ``rank`` is the position
    of the neuron in the significance ordering (0 = most significant).
    """
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "method", "neuron", "score", "p_value", "rank"])
        for ranking in rankings:
            position = np.empty(ranking.num_neurons, dtype=np.int64)
            position[ranking.order] = np.arange(ranking.num_neurons)
            for neuron in range(ranking.num_neurons):
                p = (
                    f"{ranking.p_values[neuron]:.10g}"
                    if ranking.p_values is not None
                    else ""
                )
                writer.writerow(
                    [
                        ranking.layer,
                        ranking.method,
                        neuron,
                        f"{ranking.scores[neuron]:.10g}",
                        p,
                        int(position[neuron]),
                    ]
                )


def load_rankings_csv(path):
    """Inverse of write_rankings_csv; returns {(layer, method): NeuronRanking}."""
    if not os.path.exists(path):
        raise InvalidInputError(f"rankings file {path} does not exist")
    groups = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["layer"], row["method"])
            groups.setdefault(key, []).append(row)
    rankings = {}
    for (layer, method), rows in groups.items():
        rows.sort(key=lambda r: int(r["neuron"]))
        scores = np.array([float(r["score"]) for r in rows])
        has_p = any(r["p_value"] != "" for r in rows)
        p_values = (
            np.array([float(r["p_value"]) for r in rows]) if has_p else None
        )
        position = np.array([int(r["rank"]) for r in rows])
        order = np.argsort(position, kind="stable")
        rankings[(layer, method)] = NeuronRanking(
            layer=layer,
            method=method,
            scores=scores,
            p_values=p_values,
            order=order,
            seed=0,
        )
    return rankings
