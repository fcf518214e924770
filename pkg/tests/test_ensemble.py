"""Probability matrix, Shapley ranking, and stacked ensemble tests."""

import csv

import numpy as np
import pytest

from mia_lens.attack import AttackMetrics, CellResult, GridResult
from mia_lens.ensemble import (
    ProbabilityMatrix,
    build_stacked_ensemble,
    collect_model_probabilities,
    ensemble_accuracy,
    meta_train_defaults,
    permutation_shapley,
    predict_ensemble,
    rank_models,
    sweep_ensemble,
    train_meta_model,
    write_model_ranking_csv,
    write_sweep_csv,
)
from mia_lens.errors import DependencyError, InvalidDatasetError, InvalidInputError
from mia_lens.models import TrainConfig


def meta_config(seed=0, epochs=40, lr=1e-2):
    return TrainConfig(
        learning_rate=lr, epochs=epochs, batch_size=32,
        loss="binary_cross_entropy", seed=seed,
    )


def graded_matrix(n=240, cols=6, flip_start=0.05, flip_step=0.08, seed=0,
                  split="shadow"):
    """Column j predicts the label with flip probability rising in j."""
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    rng.shuffle(labels)
    values = np.empty((n, cols))
    for j in range(cols):
        flip = rng.random(n) < (flip_start + flip_step * j)
        noisy = np.where(flip, 1 - labels, labels).astype(np.float64)
        values[:, j] = np.clip(noisy * 0.8 + 0.1 + rng.normal(0, 0.03, n), 0.0, 1.0)
    columns = [(f"m{j}", 0.2, "L") for j in range(cols)]
    return ProbabilityMatrix(values=values, columns=columns, labels=labels, split=split)


def stub_grid():
    """Hand-built grid whose cell j carries constant probability .1*(j+1)."""
    methods, thresholds, layer = ("m1", "m2"), (0.2, 0.4), "L"
    eval_labels = np.array([1, 1, 0, 0], dtype=np.int64)
    target_labels = np.array([1, 0], dtype=np.int64)
    keys = [(m, t, layer) for m in methods for t in thresholds]
    keys.append(("baseline", 1.0, layer))
    cells = {}
    for j, key in enumerate(keys):
        value = 0.1 * (j + 1)
        cells[key] = CellResult(
            layer=layer, method=key[0], threshold=key[1],
            mask_indices=np.arange(3),
            shadow_metrics=AttackMetrics(0.5, 0.5, np.full(4, value), np.arange(4)),
            target_metrics=AttackMetrics(0.5, 0.5, np.full(2, value), np.arange(2)),
        )
    return GridResult(
        cells=cells, layers=[layer], grid_layers=[layer], methods=methods,
        thresholds=thresholds, seed=0, attack_train_rows=np.arange(0),
        shadow_eval_rows=np.arange(4), shadow_eval_labels=eval_labels,
        target_labels=target_labels,
    )


class TestProbabilityMatrix:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            ProbabilityMatrix(np.zeros((3, 2)), [("m", 0.2, "L")], np.zeros(3), "shadow")
        with pytest.raises(InvalidInputError):
            ProbabilityMatrix(
                np.zeros((3, 1)), [("m", 0.2, "L")], np.zeros(2), "shadow"
            )
        with pytest.raises(InvalidInputError):
            ProbabilityMatrix(
                np.full((3, 1), 1.5), [("m", 0.2, "L")], np.zeros(3), "shadow"
            )

    def test_collect_orders_columns_canonically(self):
        grid = stub_grid()
        matrix = collect_model_probabilities(grid, split="shadow")
        assert matrix.columns == [
            ("m1", 0.2, "L"), ("m1", 0.4, "L"), ("m2", 0.2, "L"), ("m2", 0.4, "L")
        ]
        for j in range(4):
            assert matrix.values[:, j] == pytest.approx(0.1 * (j + 1))
        assert np.array_equal(matrix.labels, np.array([1, 1, 0, 0]))
        assert matrix.split == "shadow"

    def test_collect_target_split(self):
        matrix = collect_model_probabilities(stub_grid(), split="target")
        assert matrix.values.shape == (2, 4)
        assert np.array_equal(matrix.labels, np.array([1, 0]))

    def test_collect_missing_cell(self):
        grid = stub_grid()
        del grid.cells[("m2", 0.4, "L")]
        with pytest.raises(DependencyError):
            collect_model_probabilities(grid)

    def test_subset_keeps_columns(self):
        matrix = graded_matrix(n=40)
        part = matrix.subset(np.arange(10))
        assert len(part) == 10
        assert part.columns == matrix.columns


class TestMetaModel:
    def test_separable_matrix_fits(self):
        matrix = graded_matrix(n=300, flip_start=0.0, flip_step=0.0, seed=1)
        meta = train_meta_model(matrix, meta_config(seed=2))
        preds = (meta.predict(matrix.values) >= 0.5).astype(np.int64)
        assert (preds == matrix.labels).mean() >= 0.95

    def test_default_recipe(self):
        config = meta_train_defaults()
        assert config.learning_rate == 1e-3
        assert config.epochs == 10
        assert config.batch_size == 32

    def test_single_class_rejected(self):
        matrix = graded_matrix(n=40, seed=3)
        rows = np.flatnonzero(matrix.labels == 1)
        with pytest.raises(InvalidDatasetError):
            train_meta_model(matrix.subset(rows), meta_config())

    def test_width_guard(self):
        matrix = graded_matrix(n=60, seed=4)
        meta = train_meta_model(matrix, meta_config(epochs=1))
        with pytest.raises(InvalidInputError):
            meta.predict(np.zeros((5, matrix.num_models + 1)))


class TestPermutationShapley:
    def test_linear_model_closed_form(self):
        rng = np.random.default_rng(5)
        w = np.array([0.7, -1.2, 0.4, 2.0])
        values = rng.random((6, 4))
        background = rng.random(4)
        phi, base = permutation_shapley(
            lambda arr: arr @ w, values, background, permutations=2, seed=0
        )
        expected = w[None, :] * (values - background[None, :])
        assert phi == pytest.approx(expected, abs=1e-9)
        assert base == pytest.approx(float(background @ w), abs=1e-12)

    def test_efficiency_telescopes(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=5)

        def predict(arr):
            return 1.0 / (1.0 + np.exp(-(arr @ w + 0.4 * arr[:, 0] * arr[:, 1])))

        values = rng.random((8, 5))
        background = values.mean(axis=0)
        phi, base = permutation_shapley(predict, values, background,
                                        permutations=16, seed=1)
        assert phi.sum(axis=1) + base == pytest.approx(predict(values), abs=1e-9)

    def test_ignored_feature_gets_zero(self):
        rng = np.random.default_rng(7)
        w = np.array([1.0, 0.5, 0.0, -0.8])

        def predict(arr):
            return np.tanh(arr @ w)

        phi, _ = permutation_shapley(
            predict, rng.random((5, 4)), rng.random(4), permutations=8, seed=2
        )
        assert np.abs(phi[:, 2]).max() <= 1e-12

    def test_identical_columns_share_credit(self):
        rng = np.random.default_rng(8)
        values = rng.random((40, 4))
        values[:, 1] = values[:, 0]

        def predict(arr):
            return 1.0 / (1.0 + np.exp(-2.0 * (arr[:, 0] + arr[:, 1])))

        phi, _ = permutation_shapley(
            predict, values, values.mean(axis=0), permutations=64, seed=3
        )
        assert np.abs(phi[:, 0] - phi[:, 1]).max() <= 1e-9

    def test_deterministic_and_validates(self):
        rng = np.random.default_rng(9)
        values = rng.random((4, 3))
        predict = lambda arr: arr.sum(axis=1)
        a, _ = permutation_shapley(predict, values, values.mean(0), 8, seed=4)
        b, _ = permutation_shapley(predict, values, values.mean(0), 8, seed=4)
        assert np.array_equal(a, b)
        with pytest.raises(InvalidInputError):
            permutation_shapley(predict, values, values.mean(0), permutations=7)


class TestModelRanking:
    def test_planted_column_ranks_first(self):
        for seed in range(5):
            matrix = graded_matrix(
                n=300, cols=6, flip_start=0.0, flip_step=0.0, seed=seed
            )
            rng = np.random.default_rng(100 + seed)
            noise = rng.random((300, 6))
            noise[:, 3] = matrix.values[:, 3]
            matrix = ProbabilityMatrix(
                values=noise, columns=matrix.columns,
                labels=matrix.labels, split="shadow",
            )
            ranking = rank_models(
                matrix, seed=seed, permutations=64,
                meta_config=meta_config(seed=seed),
            )
            assert ranking.order[0] == 3

    def test_removing_informative_column_hurts(self):
        matrix = graded_matrix(n=300, cols=4, flip_start=0.0, flip_step=0.0, seed=11)
        rng = np.random.default_rng(12)
        noise = rng.random((300, 4))
        noise[:, 2] = matrix.values[:, 2]
        informative = ProbabilityMatrix(noise, matrix.columns, matrix.labels, "shadow")
        meta_full = train_meta_model(informative, meta_config(seed=13))
        full_acc = ((meta_full.predict(informative.values) >= 0.5) ==
                    informative.labels).mean()
        blinded = noise.copy()
        blinded[:, 2] = rng.random(300)
        stripped = ProbabilityMatrix(blinded, matrix.columns, matrix.labels, "shadow")
        meta_blind = train_meta_model(stripped, meta_config(seed=13))
        blind_acc = ((meta_blind.predict(stripped.values) >= 0.5) ==
                     stripped.labels).mean()
        assert full_acc >= 0.95
        assert blind_acc <= 0.75

    def test_ranking_csv_round_trip(self, tmp_path):
        matrix = graded_matrix(n=200, seed=14)
        ranking = rank_models(
            matrix, seed=14, permutations=16, meta_config=meta_config(epochs=5)
        )
        path = str(tmp_path / "ranking.csv")
        write_model_ranking_csv(ranking, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["rank", "method", "threshold", "layer", "importance"]
        assert len(rows) == 1 + matrix.num_models
        importances = [float(r[4]) for r in rows[1:]]
        assert importances == sorted(importances, reverse=True)

    def test_top_k_bounds(self):
        matrix = graded_matrix(n=120, seed=15)
        ranking = rank_models(
            matrix, seed=15, permutations=8, meta_config=meta_config(epochs=2)
        )
        with pytest.raises(InvalidInputError):
            ranking.top_k(0)
        with pytest.raises(InvalidInputError):
            ranking.top_k(matrix.num_models + 1)


class TestStackedEnsemble:
    def test_single_strong_cell_suffices(self):
        fit = graded_matrix(n=240, flip_start=0.0, flip_step=0.0, seed=16)
        held = graded_matrix(n=120, flip_start=0.0, flip_step=0.0, seed=17)
        ranking = rank_models(
            fit, seed=16, permutations=16, meta_config=meta_config(seed=16)
        )
        ens = build_stacked_ensemble(fit, k=1, ranking=ranking, seed=16)
        accuracy, f1 = ensemble_accuracy(ens, held)
        assert accuracy >= 0.99
        assert f1 >= 0.99

    def test_identical_columns_degenerate_but_stable(self):
        rng = np.random.default_rng(18)
        labels = np.zeros(100, dtype=np.int64)
        labels[:50] = 1
        rng.shuffle(labels)
        values = np.repeat(
            np.clip(labels * 0.6 + 0.2 + rng.normal(0, 0.05, 100), 0, 1)[:, None],
            4, axis=1,
        )
        matrix = ProbabilityMatrix(
            values, [(f"m{j}", 0.2, "L") for j in range(4)], labels, "shadow"
        )
        ranking = rank_models(
            matrix, seed=18, permutations=8, meta_config=meta_config(seed=18)
        )
        ens = build_stacked_ensemble(matrix, k=4, ranking=ranking, seed=18)
        accuracy, _ = ensemble_accuracy(ens, matrix)
        assert accuracy >= 0.9

    def test_uninformative_columns_predict_near_prior(self):
        rng = np.random.default_rng(19)
        labels = np.zeros(200, dtype=np.int64)
        labels[:100] = 1
        rng.shuffle(labels)
        values = np.full((200, 3), 0.5)
        matrix = ProbabilityMatrix(
            values, [(f"m{j}", 0.2, "L") for j in range(3)], labels, "shadow"
        )
        ranking = rank_models(
            matrix, seed=19, permutations=8, meta_config=meta_config(epochs=2)
        )
        ens = build_stacked_ensemble(matrix, k=3, ranking=ranking, seed=19)
        probs = predict_ensemble(ens, matrix.values[:, ens.column_positions])
        assert probs.mean() == pytest.approx(0.5, abs=0.15)

    def test_predict_validates_input(self):
        matrix = graded_matrix(n=120, seed=20)
        ranking = rank_models(
            matrix, seed=20, permutations=8, meta_config=meta_config(epochs=2)
        )
        ens = build_stacked_ensemble(matrix, k=2, ranking=ranking, seed=20)
        with pytest.raises(InvalidInputError):
            predict_ensemble(ens, np.zeros((4, 3)))
        with pytest.raises(InvalidInputError):
            predict_ensemble(ens, np.full((4, 2), 1.2))
        probs = predict_ensemble(ens, np.full((4, 2), 0.5))
        assert probs.shape == (4,)
        assert (probs >= 0).all() and (probs <= 1).all()

    def test_build_is_deterministic(self):
        matrix = graded_matrix(n=160, seed=21)
        ranking = rank_models(
            matrix, seed=21, permutations=8, meta_config=meta_config(epochs=3)
        )
        probe = matrix.values[:20, :]
        first = build_stacked_ensemble(matrix, k=3, ranking=ranking, seed=21)
        second = build_stacked_ensemble(matrix, k=3, ranking=ranking, seed=21)
        assert np.array_equal(
            predict_ensemble(first, probe[:, first.column_positions]),
            predict_ensemble(second, probe[:, second.column_positions]),
        )


class TestSweep:
    def test_sweep_rows_and_csv(self, tmp_path):
        shadow = graded_matrix(n=260, seed=22)
        target = graded_matrix(n=140, seed=23, split="target")
        sweep = sweep_ensemble(shadow, target, kmax=4, seed=22)
        assert [row["k"] for row in sweep.rows] == [1, 2, 3, 4]
        for row in sweep.rows:
            for key in ("shadow_accuracy", "shadow_f1",
                        "target_accuracy", "target_f1"):
                assert 0.0 <= row[key] <= 1.0
        assert 1 <= sweep.best_k <= 4
        path_a = str(tmp_path / "a.csv")
        path_b = str(tmp_path / "b.csv")
        write_sweep_csv(sweep, path_a)
        write_sweep_csv(sweep_ensemble(shadow, target, kmax=4, seed=22), path_b)
        with open(path_a, "rb") as fa, open(path_b, "rb") as fb:
            assert fa.read() == fb.read()
        with open(path_a) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["k", "shadow_accuracy", "shadow_f1",
                           "target_accuracy", "target_f1"]
        assert len(rows) == 5

    def test_sweep_validates_inputs(self):
        shadow = graded_matrix(n=80, seed=24)
        target = graded_matrix(n=40, cols=5, seed=25, split="target")
        with pytest.raises(InvalidInputError):
            sweep_ensemble(shadow, target, kmax=3, seed=0)
        matched = graded_matrix(n=40, seed=26, split="target")
        with pytest.raises(InvalidInputError):
            sweep_ensemble(shadow, matched, kmax=shadow.num_models + 1, seed=0)

    def test_best_k_prefers_smaller_on_ties(self):
        from mia_lens.ensemble import SweepResult

        sweep = SweepResult(
            rows=[
                {"k": 1, "shadow_accuracy": 0.9, "shadow_f1": 0.9,
                 "target_accuracy": 0.8, "target_f1": 0.8},
                {"k": 2, "shadow_accuracy": 0.9, "shadow_f1": 0.9,
                 "target_accuracy": 0.9, "target_f1": 0.9},
            ],
            kmax=2, seed=0,
        )
        assert sweep.best_k == 1
