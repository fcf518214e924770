"""End-to-end run orchestration: stages, artifact layout, reports.

A run lives in ``<out_dir>/run-<config hash>``.  Stages execute in a
fixed order, each leaving its artifacts plus a completion marker under
``stages/``; re-running skips stages whose marker matches the config
hash, so a killed run resumes where it stopped and a finished run is a
no-op.  All randomness flows from the root seed through labeled
derivations (stage name first, then role, layer, method as applicable),
which keeps every stage independently reproducible.

The report stage reads its numbers back from the persisted CSVs rather
than from anything held in memory, so a resumed process reports exactly
what an uninterrupted one would.
"""

import csv
import hashlib
import json
import logging
import os
import pickle

import numpy as np

from .activations import ActivationMatrix, load_activations, save_activations
from .activations import extract_activations
from .attack import (
    BASELINE_METHOD,
    TrainedAttackModel,
    run_attack_grid,
    stratified_row_split,
    write_grid_csv,
)
from .config import config_hash, config_text, parse_mask_alias
from .data import SplitSpec, label_membership, load_dataset, partition
from .ensemble import (
    build_stacked_ensemble,
    collect_model_probabilities,
    ensemble_accuracy,
    rank_models,
    sweep_ensemble,
    write_model_ranking_csv,
    write_sweep_csv,
)
from .errors import DependencyError, InvalidInputError, StageFailureError
from .explain import (
    SSIMReport,
    cascade,
    compare_maps,
    explain_pair,
    mean_image_baseline,
    pca_project,
    write_ssim_csv,
)
from .features import featurize, load_full_features, save_full_features
from .models import load_checkpoint, save_checkpoint, train_classifier
from .seeding import derive_seed
from .selection import NeuronRanking, SelectionMask, rank_neurons, write_rankings_csv

log = logging.getLogger(__name__)

STAGES = (
    "split",
    "train_target",
    "train_shadow",
    "extract",
    "rank",
    "features",
    "grid",
    "ensemble",
    "explain",
    "report",
)

_STAGE_DEPS = {
    "split": (),
    "train_target": ("split",),
    "train_shadow": ("split",),
    "extract": ("split", "train_target", "train_shadow"),
    "rank": ("extract",),
    "features": ("split", "train_target", "train_shadow"),
    "grid": ("rank", "features"),
    "ensemble": ("grid",),
    "explain": ("train_target", "grid"),
    "report": tuple(s for s in STAGES if s != "report"),
}

_ROLES = ("target", "shadow")
_TEXT_EXTENSIONS = (".csv", ".json", ".txt")
_BINARY_EXTENSIONS = (".bin", ".ckpt", ".pt", ".npz", ".png", ".pkl")


class RunPaths:
    """Filesystem layout of one run directory."""

    def __init__(self, root):
        self.root = root

    def _join(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def config_file(self):
        return self._join("config.txt")

    def stage_marker(self, stage):
        return self._join("stages", stage + ".json")

    def failed_marker(self, stage):
        return self._join("stages", stage + ".failed.json")

    def split_file(self, name):
        return self._join("splits", name + ".json")

    def checkpoint(self, role, arch, dataset):
        return self._join("checkpoints", f"{role}-{arch}-{dataset}.ckpt")

    def activations_prefix(self, role, layer):
        return self._join("activations", f"{role}-{layer}")

    def features_prefix(self, role, layer):
        return self._join("features", f"{role}-{layer}")

    @property
    def rankings_csv(self):
        return self._join("rank", "rankings.csv")

    @property
    def rankings_npz(self):
        return self._join("rank", "rankings.npz")

    @property
    def grid_dir(self):
        return self._join("grid")

    def cell_prefix(self, layer, method, threshold):
        tag = f"{layer}-{method}-{int(round(threshold * 100))}"
        return self._join("grid", "cells", tag)

    @property
    def grid_csv(self):
        return self._join("grid", "results.csv")

    @property
    def model_ranking_csv(self):
        return self._join("ensemble", "ranking.csv")

    @property
    def sweep_csv(self):
        return self._join("ensemble", "sweep.csv")

    @property
    def shapley_npz(self):
        return self._join("ensemble", "shapley.npz")

    @property
    def ensemble_blob(self):
        return self._join("ensemble", "stacked.pkl")

    @property
    def ensemble_summary(self):
        return self._join("ensemble", "summary.json")

    @property
    def explain_cell_file(self):
        return self._join("explain", "cell.json")

    def explain_png(self, sample_id):
        return self._join("explain", f"{sample_id:05d}.png")

    @property
    def ssim_csv(self):
        return self._join("explain", "ssim.csv")

    def figure(self, name):
        return self._join("figures", name)

    @property
    def report_file(self):
        return self._join("report.json")


def run_directory(config):
    return os.path.join(config.out_dir, "run-" + config_hash(config))


def resolve_layer_selector(selector, names):
    """Concrete layer names for ``all``/``last``/``last2``/``last3``.

    Models with fewer observable layers than the selector asks for
    contribute what they have.
    """
    names = list(names)
    if selector == "all":
        return names
    depth = {"last": 1, "last2": 2, "last3": 3}.get(selector)
    if depth is None:
        raise InvalidInputError(f"unknown layer selector {selector!r}")
    return names[-depth:]


def _write_json(payload, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


class RunState:
    """Shared stage context with lazy, cached artifact access.

    Stages never pass objects to each other directly; everything flows
    through files, so a stage works the same whether the previous one
    ran in this process or in a dead one.  The cache only avoids
    re-reading within one process.
    """

    def __init__(self, config, paths):
        self.config = config
        self.paths = paths
        self._cache = {}

    def _cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def dataset(self):
        return self._cached(
            "dataset",
            lambda: load_dataset(self.config.dataset, self.config.data_root),
        )

    def split(self):
        def build():
            parts = {}
            seed = None
            for name in ("target_train", "target_test", "shadow_train", "shadow_test"):
                payload = _read_json(self.paths.split_file(name))
                parts[name] = np.asarray(payload["indices"], dtype=np.int64)
                seed = int(payload["seed"])
            return SplitSpec(seed=seed, **parts)

        return self._cached("split", build)

    def checkpoint(self, role):
        path = self.paths.checkpoint(role, self.config.arch, self.config.dataset)
        return self._cached(("checkpoint", role), lambda: load_checkpoint(path))

    def observable_layers(self):
        return [info.name for info in self.checkpoint("target").layers]

    def layers(self):
        return resolve_layer_selector(self.config.layers, self.observable_layers())

    def grid_layers(self):
        return resolve_layer_selector(
            self.config.grid_layers, self.observable_layers()
        )

    def all_layers(self):
        merged = list(self.layers())
        for layer in self.grid_layers():
            if layer not in merged:
                merged.append(layer)
        return merged

    def role_rows(self, role):
        """(images, class labels, membership labels) for one model role,
        members first."""

        def build():
            dataset = self.dataset()
            members = label_membership(self.split(), role)
            return (
                dataset.images[members.indices],
                dataset.class_labels[members.indices],
                members.labels,
            )

        return self._cached(("rows", role), build)

    def role_datasets(self, role):
        dataset = self.dataset()
        split = self.split()
        if role == "target":
            train, test = split.target_train, split.target_test
        else:
            train, test = split.shadow_train, split.shadow_test
        return dataset.subset(train), dataset.subset(test)

    def features(self, role, layer):
        prefix = self.paths.features_prefix(role, layer)
        return self._cached(
            ("features", role, layer), lambda: load_full_features(prefix)
        )

    def rankings(self):
        return self._cached(
            "rankings", lambda: _load_rankings(self.paths.rankings_npz)
        )

    def grid(self):
        """GridResult rebuilt from the per-cell artifacts (no training
        happens when every cell file is present)."""

        def build():
            shadow_members, shadow_nonmembers = self.role_datasets("shadow")
            target_members, target_nonmembers = self.role_datasets("target")
            return run_attack_grid(
                self.checkpoint("shadow"),
                self.checkpoint("target"),
                self.rankings(),
                self.layers(),
                self.config.seed,
                shadow_members=shadow_members,
                shadow_nonmembers=shadow_nonmembers,
                target_members=target_members,
                target_nonmembers=target_nonmembers,
                grid_layers=self.grid_layers(),
                methods=self.config.methods,
                thresholds=self.config.thresholds,
                attack_config=self.config.attack_train_config(0),
                attack_train_fraction=self.config.attack_train_fraction,
                out_dir=self.paths.grid_dir,
                keep_models=False,
            )

        return self._cached("grid", build)

    def grid_rows(self):
        return self._cached("grid_rows", lambda: read_grid_csv(self.paths.grid_csv))


def read_grid_csv(path):
    """Grid result rows with numeric fields parsed."""
    if not os.path.exists(path):
        raise DependencyError(f"grid results {path} do not exist")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["threshold"] = float(row["threshold"])
        row["accuracy"] = float(row["accuracy"])
        row["f1"] = float(row["f1"])
    return rows


def _save_rankings(rankings, path):
    arrays = {"keys": np.array([f"{r.layer}|{r.method}" for r in rankings])}
    for ranking in rankings:
        tag = f"{ranking.layer}|{ranking.method}"
        arrays[tag + "|scores"] = ranking.scores
        arrays[tag + "|order"] = ranking.order
        if ranking.p_values is not None:
            arrays[tag + "|p_values"] = ranking.p_values
        arrays[tag + "|meta"] = np.array(
            [
                ranking.seed,
                -1 if ranking.significant_count is None else ranking.significant_count,
            ],
            dtype=np.int64,
        )
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    np.savez(path, **arrays)


def _load_rankings(path):
    if not os.path.exists(path):
        raise DependencyError(f"neuron rankings {path} do not exist")
    rankings = {}
    with np.load(path) as payload:
        for tag in payload["keys"]:
            layer, method = str(tag).split("|")
            meta = payload[tag + "|meta"]
            p_key = tag + "|p_values"
            rankings[(layer, method)] = NeuronRanking(
                layer=layer,
                method=method,
                scores=payload[tag + "|scores"],
                p_values=payload[p_key] if p_key in payload else None,
                order=payload[tag + "|order"],
                seed=int(meta[0]),
                significant_count=None if meta[1] < 0 else int(meta[1]),
            )
    return rankings


def _stage_split(state):
    config = state.config
    dataset = state.dataset()
    split = partition(dataset, config.split_sizes, derive_seed(config.seed, "split"))
    for name in ("target_train", "target_test", "shadow_train", "shadow_test"):
        _write_json(
            {
                "seed": int(split.seed),
                "sizes": list(config.split_sizes),
                "indices": [int(i) for i in getattr(split, name)],
            },
            state.paths.split_file(name),
        )
    state._cache["split"] = split


def _train_role(state, role):
    config = state.config
    members, nonmembers = state.role_datasets(role)
    train_config = config.target_train_config(derive_seed(config.seed, "train", role))
    ckpt = train_classifier(config.arch, members, nonmembers, train_config)
    save_checkpoint(ckpt, state.paths.checkpoint(role, config.arch, config.dataset))
    state._cache[("checkpoint", role)] = ckpt
    log.info(
        "%s model: train accuracy %.4f, test accuracy %.4f",
        role,
        ckpt.train_accuracy,
        ckpt.test_accuracy,
    )


def _stage_train_target(state):
    _train_role(state, "target")


def _stage_train_shadow(state):
    _train_role(state, "shadow")


def _stage_extract(state):
    for role in _ROLES:
        ckpt = state.checkpoint(role)
        images, _, membership = state.role_rows(role)
        for layer in state.grid_layers():
            matrix = extract_activations(
                ckpt,
                layer,
                images,
                membership=membership,
                role=role,
                flatten_mode=state.config.flatten_mode,
            )
            save_activations(matrix, state.paths.activations_prefix(role, layer))


def _stage_rank(state):
    config = state.config
    rankings = []
    for layer in state.grid_layers():
        matrix = load_activations(state.paths.activations_prefix("shadow", layer))
        mem_values, non_values = matrix.by_membership()
        mem = ActivationMatrix(
            layer=layer, values=mem_values, membership=None, role="shadow"
        )
        non = ActivationMatrix(
            layer=layer, values=non_values, membership=None, role="shadow"
        )
        for method in config.methods:
            rankings.append(
                rank_neurons(
                    mem,
                    non,
                    method,
                    seed=derive_seed(config.seed, "rank", layer, method),
                )
            )
    write_rankings_csv(rankings, state.paths.rankings_csv)
    _save_rankings(rankings, state.paths.rankings_npz)
    state._cache["rankings"] = {(r.layer, r.method): r for r in rankings}


def _stage_features(state):
    config = state.config
    for role in _ROLES:
        ckpt = state.checkpoint(role)
        images, class_labels, membership = state.role_rows(role)
        for layer in state.all_layers():
            full = featurize(
                ckpt,
                images,
                class_labels,
                membership,
                layer,
                flatten_mode=config.flatten_mode,
            )
            save_full_features(full, state.paths.features_prefix(role, layer))


def _stage_grid(state):
    config = state.config
    shadow_members, shadow_nonmembers = state.role_datasets("shadow")
    target_members, target_nonmembers = state.role_datasets("target")
    precomputed = {
        layer: (state.features("shadow", layer), state.features("target", layer))
        for layer in state.all_layers()
    }
    grid = run_attack_grid(
        state.checkpoint("shadow"),
        state.checkpoint("target"),
        state.rankings(),
        state.layers(),
        config.seed,
        shadow_members=shadow_members,
        shadow_nonmembers=shadow_nonmembers,
        target_members=target_members,
        target_nonmembers=target_nonmembers,
        grid_layers=state.grid_layers(),
        methods=config.methods,
        thresholds=config.thresholds,
        attack_config=config.attack_train_config(0),
        attack_train_fraction=config.attack_train_fraction,
        out_dir=state.paths.grid_dir,
        keep_models=False,
        on_cell_complete=lambda cell: log.info(
            "grid cell %s-%s-%d: shadow %.4f, target %.4f",
            cell.layer,
            cell.method,
            int(round(cell.threshold * 100)),
            cell.shadow_metrics.accuracy,
            cell.target_metrics.accuracy,
        ),
    )
    write_grid_csv(grid, state.paths.grid_csv)
    state._cache["grid"] = grid
    # feature blobs are no longer needed in memory once every cell exists
    for key in [k for k in state._cache if k[0] == "features"]:
        del state._cache[key]


def _stage_ensemble(state):
    config = state.config
    paths = state.paths
    grid = state.grid()
    shadow_matrix = collect_model_probabilities(grid, split="shadow")
    target_matrix = collect_model_probabilities(grid, split="target")

    seed = derive_seed(config.seed, "ensemble")
    fit_rows, _ = stratified_row_split(
        shadow_matrix.labels, 0.7, derive_seed(seed, "sweep-split")
    )
    fit = shadow_matrix.subset(fit_rows)
    ranking = rank_models(
        fit,
        seed=seed,
        permutations=config.shapley_permutations,
        meta_config=config.meta_train_config(derive_seed(seed, "meta")),
    )
    write_model_ranking_csv(ranking, paths.model_ranking_csv)
    os.makedirs(os.path.dirname(paths.shapley_npz), exist_ok=True)
    np.savez(
        paths.shapley_npz,
        phi=ranking.phi,
        values=fit.values,
        labels=fit.labels,
        importance=ranking.importance,
        order=ranking.order,
        base_value=ranking.base_value,
        col_methods=np.array([c[0] for c in ranking.columns]),
        col_thresholds=np.array([float(c[1]) for c in ranking.columns]),
        col_layers=np.array([c[2] for c in ranking.columns]),
    )

    kmax = min(config.sweep_kmax, shadow_matrix.num_models)
    if kmax < config.sweep_kmax:
        log.info("sweep clipped to the %d available model columns", kmax)
    sweep = sweep_ensemble(
        shadow_matrix, target_matrix, kmax=kmax, seed=seed, ranking=ranking
    )
    write_sweep_csv(sweep, paths.sweep_csv)

    final_k = min(config.ensemble_k, shadow_matrix.num_models)
    if final_k < config.ensemble_k:
        log.info("ensemble size clipped to the %d available columns", final_k)
    stacked = build_stacked_ensemble(
        shadow_matrix,
        k=final_k,
        ranking=ranking,
        seed=derive_seed(seed, "stack-final"),
    )
    with open(paths.ensemble_blob, "wb") as fh:
        pickle.dump(stacked, fh)
    target_accuracy, target_f1 = ensemble_accuracy(stacked, target_matrix)
    best = sweep.row(sweep.best_k)
    _write_json(
        {
            "k": final_k,
            "best_k": sweep.best_k,
            "best_k_shadow_accuracy": best["shadow_accuracy"],
            "best_k_target_accuracy": best["target_accuracy"],
            "target_accuracy": target_accuracy,
            "target_f1": target_f1,
            "kmax": kmax,
            "columns": shadow_matrix.num_models,
        },
        paths.ensemble_summary,
    )


def _resolve_explain_cell(state):
    """The grid cell whose mask and attack model feed the explainer."""
    config = state.config
    rows = [r for r in state.grid_rows() if r["split"] == "target"]
    if config.explain_mask == "best":
        candidates = [r for r in rows if r["method"] != BASELINE_METHOD]
        if not candidates:
            raise DependencyError("grid holds no non-baseline cells to explain")
        best = max(candidates, key=lambda r: r["accuracy"])
        return best["method"], best["threshold"], best["layer"]
    method, threshold, layer = parse_mask_alias(config.explain_mask)
    if layer is None:
        layer = state.grid_layers()[-1]
    matches = [
        r
        for r in rows
        if r["method"] == method
        and abs(r["threshold"] - threshold) < 1e-9
        and r["layer"] == layer
    ]
    if not matches:
        raise DependencyError(
            f"grid holds no cell for mask {method}-{int(round(threshold * 100))}"
            f" on layer {layer}"
        )
    return method, threshold, layer


def _stage_explain(state):
    config = state.config
    paths = state.paths
    method, threshold, layer = _resolve_explain_cell(state)
    prefix = paths.cell_prefix(layer, method, threshold)
    if not (os.path.exists(prefix + ".npz") and os.path.exists(prefix + ".pt")):
        raise DependencyError(f"grid cell artifacts {prefix} missing")
    with np.load(prefix + ".npz") as payload:
        mask_indices = payload["mask_indices"]
    mask = SelectionMask(
        layer=layer, method=method, threshold=threshold, indices=mask_indices
    )
    attack_model = TrainedAttackModel.load(prefix + ".pt")
    cascaded = cascade(
        state.checkpoint("target"),
        layer,
        mask,
        attack_model,
        flatten_mode=config.flatten_mode,
    )

    images, _, membership = state.role_rows("target")
    rng = np.random.default_rng(derive_seed(config.seed, "explain"))
    member_rows = np.flatnonzero(membership == 1)
    nonmember_rows = np.flatnonzero(membership == 0)
    want_members = config.explain_samples - config.explain_samples // 2
    chosen = np.concatenate(
        [
            np.sort(
                rng.choice(
                    member_rows,
                    min(want_members, len(member_rows)),
                    replace=False,
                )
            ),
            np.sort(
                rng.choice(
                    nonmember_rows,
                    min(config.explain_samples // 2, len(nonmember_rows)),
                    replace=False,
                )
            ),
        ]
    ).astype(np.int64)

    if config.explain_baseline == "mean":
        baseline = mean_image_baseline(images)
    else:
        baseline = np.zeros(images.shape[1:], dtype=np.float64)

    from . import figures

    scores = []
    for row in chosen:
        target_map, attack_map = explain_pair(
            state.checkpoint("target"), cascaded, images[row], baseline
        )
        score = compare_maps(target_map, attack_map)
        scores.append(score)
        figures.render_overlay(
            images[row],
            target_map,
            attack_map,
            paths.explain_png(int(row)),
            membership=int(membership[row]),
            score=score,
        )
        log.info(
            "explained sample %d (member=%d): map agreement %.4f",
            row,
            membership[row],
            score,
        )

    report = SSIMReport(
        sample_ids=chosen,
        membership=membership[chosen],
        scores=np.asarray(scores, dtype=np.float64),
        dataset=config.dataset,
        arch=config.arch,
    )
    write_ssim_csv(report, paths.ssim_csv)
    _write_json(
        {
            "layer": layer,
            "method": method,
            "threshold": threshold,
            "samples": [int(r) for r in chosen],
        },
        paths.explain_cell_file,
    )


def _hash_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _collect_artifacts(root):
    """(text manifest with hashes, binary existence list); stage markers
    and the report itself stay out so the report never references its
    own hash."""
    manifest = {}
    binaries = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        rel_dir = os.path.relpath(dirpath, root)
        if rel_dir == "stages" or rel_dir.startswith("stages" + os.sep):
            continue
        for name in sorted(filenames):
            rel = os.path.normpath(os.path.join(rel_dir, name)).replace(os.sep, "/")
            if rel == "report.json":
                continue
            full = os.path.join(dirpath, name)
            if name.endswith(_TEXT_EXTENSIONS):
                manifest[rel] = _hash_file(full)
            elif name.endswith(_BINARY_EXTENSIONS):
                binaries.append(rel)
    return manifest, sorted(binaries)


def _package_versions():
    import matplotlib
    import scipy
    import sklearn
    import torch

    return {
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "torch": torch.__version__,
        "matplotlib": matplotlib.__version__,
    }


def _checkpoint_summary(state, role):
    path = state.paths.checkpoint(role, state.config.arch, state.config.dataset)
    meta = _read_json(path + ".json")
    return {
        "train_accuracy": meta["train_accuracy"],
        "test_accuracy": meta["test_accuracy"],
    }


def _read_csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class _MissingSeries(Exception):
    """Internal: a figure's data series is absent; skip, don't fail."""


def _emit_figures(state, explain_cell, warnings):
    from . import figures

    paths = state.paths
    produced = []

    def attempt(name, builder):
        try:
            builder()
        except _MissingSeries as exc:
            message = f"figure {name} skipped: {exc}"
            log.warning(message)
            warnings.append(message)
            return
        produced.append("figures/" + name)

    target_rows = [r for r in state.grid_rows() if r["split"] == "target"]

    def grid_builder(layer):
        def build():
            rows = [r for r in target_rows if r["layer"] == layer]
            if not any(r["method"] != BASELINE_METHOD for r in rows):
                raise _MissingSeries(f"no grid cells on layer {layer}")
            figures.grid_accuracy_figure(
                rows, layer, paths.figure(f"grid-{layer}.png")
            )

        return build

    for layer in state.grid_layers():
        attempt(f"grid-{layer}.png", grid_builder(layer))

    def importance_build():
        if not os.path.exists(paths.model_ranking_csv):
            raise _MissingSeries("no model ranking")
        rows = _read_csv_rows(paths.model_ranking_csv)
        if not rows:
            raise _MissingSeries("model ranking is empty")
        figures.importance_bar_figure(rows, paths.figure("importance.png"))

    attempt("importance.png", importance_build)

    def beeswarm_build():
        if not os.path.exists(paths.shapley_npz):
            raise _MissingSeries("no stored Shapley values")
        with np.load(paths.shapley_npz) as payload:
            phi = payload["phi"]
            values = payload["values"]
            order = payload["order"]
            labels = [
                figures.column_label(m, t, l)
                for m, t, l in zip(
                    payload["col_methods"],
                    payload["col_thresholds"],
                    payload["col_layers"],
                )
            ]
        if phi.size == 0:
            raise _MissingSeries("Shapley values are empty")
        figures.beeswarm_figure(
            phi, values, order, labels, paths.figure("beeswarm.png")
        )

    attempt("beeswarm.png", beeswarm_build)

    def sweep_build():
        if not os.path.exists(paths.sweep_csv):
            raise _MissingSeries("no sweep results")
        rows = _read_csv_rows(paths.sweep_csv)
        if not rows:
            raise _MissingSeries("sweep is empty")
        figures.sweep_figure(rows, paths.figure("sweep.png"))

    attempt("sweep.png", sweep_build)

    def ssim_build():
        rows = _read_csv_rows(paths.ssim_csv)
        member = [float(r["ssim"]) for r in rows if r["membership"] == "1"]
        non = [float(r["ssim"]) for r in rows if r["membership"] == "0"]
        if not member and not non:
            raise _MissingSeries("no explained samples")
        figures.ssim_box_figure(member, non, paths.figure("ssim.png"))

    attempt("ssim.png", ssim_build)

    layer = explain_cell["layer"]
    method = explain_cell["method"]
    threshold = explain_cell["threshold"]
    mask_tag = f"{method}-{int(round(threshold * 100))}"
    prefix = paths.activations_prefix("target", layer)

    def pca_build(mask, tag, title):
        def build():
            if not os.path.exists(prefix + ".bin"):
                raise _MissingSeries(f"no stored activations for layer {layer}")
            matrix = load_activations(prefix)
            if matrix.membership is None:
                raise _MissingSeries("activations carry no membership tags")
            coords = pca_project(matrix, mask=mask)
            figures.pca_figure(
                coords, matrix.membership, title, paths.figure(f"pca-{tag}.png")
            )

        return build

    attempt(
        "pca-baseline-100.png",
        pca_build(None, "baseline-100", f"all {layer} activations"),
    )

    def masked_pca_build():
        cell_prefix = paths.cell_prefix(layer, method, threshold)
        if not os.path.exists(cell_prefix + ".npz"):
            raise _MissingSeries("no stored mask for the explained cell")
        with np.load(cell_prefix + ".npz") as payload:
            mask = SelectionMask(
                layer=layer,
                method=method,
                threshold=threshold,
                indices=payload["mask_indices"],
            )
        pca_build(mask, mask_tag, f"{mask_tag} activations on {layer}")()

    attempt(f"pca-{mask_tag}.png", masked_pca_build)

    return produced


def _stage_report(state):
    config = state.config
    paths = state.paths
    warnings = []

    grid_rows = state.grid_rows()
    target_rows = [r for r in grid_rows if r["split"] == "target"]
    candidates = [r for r in target_rows if r["method"] != BASELINE_METHOD]
    best = max(candidates, key=lambda r: r["accuracy"]) if candidates else None
    baselines = {
        r["layer"]: r["accuracy"]
        for r in target_rows
        if r["method"] == BASELINE_METHOD
    }

    ensemble_summary = _read_json(paths.ensemble_summary)
    explain_cell = _read_json(paths.explain_cell_file)
    ssim_rows = _read_csv_rows(paths.ssim_csv)
    member_scores = [float(r["ssim"]) for r in ssim_rows if r["membership"] == "1"]
    nonmember_scores = [float(r["ssim"]) for r in ssim_rows if r["membership"] == "0"]

    figure_files = _emit_figures(state, explain_cell, warnings)

    manifest, binaries = _collect_artifacts(paths.root)
    report = {
        "status": "complete",
        "config_hash": config_hash(config),
        "seed": config.seed,
        "dataset": config.dataset,
        "arch": config.arch,
        "models": {
            role: _checkpoint_summary(state, role) for role in _ROLES
        },
        "grid": {
            "csv": "grid/results.csv",
            "cells": len({(r["method"], r["threshold"], r["layer"]) for r in grid_rows}),
            "best": best,
            "baseline_accuracy": baselines,
        },
        "ensemble": {
            "ranking_csv": "ensemble/ranking.csv",
            "sweep_csv": "ensemble/sweep.csv",
            **ensemble_summary,
        },
        "explain": {
            "cell": {
                "layer": explain_cell["layer"],
                "method": explain_cell["method"],
                "threshold": explain_cell["threshold"],
            },
            "ssim_csv": "explain/ssim.csv",
            "samples": len(ssim_rows),
            "mean_ssim_members": (
                float(np.mean(member_scores)) if member_scores else None
            ),
            "mean_ssim_nonmembers": (
                float(np.mean(nonmember_scores)) if nonmember_scores else None
            ),
        },
        "figures": figure_files,
        "warnings": warnings,
        "versions": _package_versions(),
        "manifest": manifest,
        "binary_artifacts": binaries,
    }
    with open(paths.report_file, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")


_STAGE_FUNCS = {
    "split": _stage_split,
    "train_target": _stage_train_target,
    "train_shadow": _stage_train_shadow,
    "extract": _stage_extract,
    "rank": _stage_rank,
    "features": _stage_features,
    "grid": _stage_grid,
    "ensemble": _stage_ensemble,
    "explain": _stage_explain,
    "report": _stage_report,
}


def _marker_complete(paths, stage, expected_hash):
    path = paths.stage_marker(stage)
    if not os.path.exists(path):
        return False
    try:
        marker = _read_json(path)
    except (OSError, json.JSONDecodeError):
        return False
    return (
        marker.get("status") == "complete"
        and marker.get("config_hash") == expected_hash
    )


def _write_failure_report(paths, config, stage, exc, expected_hash):
    completed = [s for s in STAGES if _marker_complete(paths, s, expected_hash)]
    payload = {
        "status": "failed",
        "failed_stage": stage,
        "error": str(exc),
        "config_hash": expected_hash,
        "seed": config.seed,
        "completed_stages": completed,
    }
    try:
        with open(paths.report_file, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError:
        log.exception("could not write the failure report")


def _execute_stage(state, stage, expected_hash):
    paths = state.paths
    try:
        _STAGE_FUNCS[stage](state)
    except Exception as exc:
        _write_json(
            {
                "config_hash": expected_hash,
                "stage": stage,
                "status": "failed",
                "error": str(exc),
            },
            paths.failed_marker(stage),
        )
        _write_failure_report(paths, state.config, stage, exc, expected_hash)
        log.error("stage %s failed: %s", stage, exc)
        raise StageFailureError(f"stage {stage} failed: {exc}", stage=stage) from exc
    _write_json(
        {"config_hash": expected_hash, "stage": stage, "status": "complete"},
        paths.stage_marker(stage),
    )
    failed = paths.failed_marker(stage)
    if os.path.exists(failed):
        os.remove(failed)


def prepare_run(config):
    """Create the run directory and drop the canonical config copy."""
    paths = RunPaths(run_directory(config))
    os.makedirs(os.path.join(paths.root, "stages"), exist_ok=True)
    # out_dir stays out of the copy: the same experiment placed elsewhere
    # is byte-for-byte the same run
    stripped = "\n".join(
        line
        for line in config_text(config).splitlines()
        if not line.startswith("out_dir ")
    )
    with open(paths.config_file, "w", encoding="utf-8") as fh:
        fh.write(stripped + "\n")
    return paths


def run_stage(config, stage, resume=True):
    """Execute one named stage, requiring its prerequisites' markers."""
    if stage not in _STAGE_FUNCS:
        raise InvalidInputError(f"unknown stage {stage!r}; stages: {STAGES}")
    paths = prepare_run(config)
    state = RunState(config, paths)
    expected = config_hash(config)
    if resume and _marker_complete(paths, stage, expected):
        log.info("stage %s already complete", stage)
        return paths
    for dep in _STAGE_DEPS[stage]:
        if not _marker_complete(paths, dep, expected):
            raise DependencyError(
                f"stage {stage!r} needs {dep!r} completed first"
            )
    log.info("stage %s starting", stage)
    _execute_stage(state, stage, expected)
    log.info("stage %s complete", stage)
    return paths


def run_pipeline(config, resume=True):
    """All stages in order; returns the loaded run report."""
    paths = prepare_run(config)
    state = RunState(config, paths)
    expected = config_hash(config)
    for stage in STAGES:
        if resume and _marker_complete(paths, stage, expected):
            log.info("stage %s already complete, skipping", stage)
            continue
        log.info("stage %s starting", stage)
        _execute_stage(state, stage, expected)
        log.info("stage %s complete", stage)
    return load_report(paths.root)


def load_report(run_dir):
    path = os.path.join(run_dir, "report.json")
    if not os.path.exists(path):
        raise DependencyError(f"no report at {path}")
    return _read_json(path)


def verify_report(run_dir):
    """Re-check the report's artifact manifest against the directory.

    Every hashed artifact must exist with matching content; every listed
    binary artifact must exist.  Returns the verified report.
    """
    report = load_report(run_dir)
    problems = []
    for rel, expected in sorted(report.get("manifest", {}).items()):
        full = os.path.join(run_dir, rel)
        if not os.path.exists(full):
            problems.append(f"missing artifact {rel}")
        elif _hash_file(full) != expected:
            problems.append(f"artifact {rel} does not match its recorded hash")
    for rel in report.get("binary_artifacts", []):
        if not os.path.exists(os.path.join(run_dir, rel)):
            problems.append(f"missing binary artifact {rel}")
    if problems:
        raise DependencyError("; ".join(problems))
    return report
