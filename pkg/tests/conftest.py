"""Shared fixtures: synthetic datasets and completed pipeline runs.

The toy run exercises every stage on a 400-sample synthetic problem in
well under a minute; suites that only need finished artifacts (CLI,
report checks, resume behavior) share it instead of re-running stages.
The desk run is the acceptance suite's real experiment: a CNN memorizes
its 5,000-sample training split and the full grid, ensemble, and
explanation stages run at that scale.  It only builds when a test asks.
"""

import dataclasses
import time

import numpy as np
import pytest

from synthdata import template_images, write_fmnist_layout

from mia_lens.config import parse_config_text
from mia_lens.pipeline import RunPaths, run_directory, run_pipeline

TOY_CONFIG_TEMPLATE = """\
dataset = toy
data_root = {data_root}
arch = mlp
split_sizes = 100,100,100,100
seed = 0
layers = last
grid_layers = last
methods = t_test,kl_divergence
thresholds = 20,60
target_learning_rate = 0.001
target_epochs = 30
target_stop_at_train_accuracy = 1.0
attack_learning_rate = 0.001
attack_epochs = 6
meta_learning_rate = 0.01
meta_epochs = 20
sweep_kmax = 4
shapley_permutations = 16
ensemble_k = 2
explain_samples = 4
out_dir = {out_dir}
"""


@pytest.fixture(scope="session")
def toy_data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy-data")
    images, labels = template_images(
        400, num_classes=4, side=8, label_noise=0.25, seed=9
    )
    np.savez(root / "toy.npz", images=images, labels=labels)
    return str(root)


@pytest.fixture(scope="session")
def toy_config_factory(toy_data_root):
    def build(out_dir, **overrides):
        config = parse_config_text(
            TOY_CONFIG_TEMPLATE.format(data_root=toy_data_root, out_dir=out_dir)
        )
        if overrides:
            config = dataclasses.replace(config, **overrides)
        return config

    return build


@dataclasses.dataclass
class CompletedRun:
    config: object
    root: str
    paths: RunPaths
    report: dict
    elapsed: float = 0.0


@pytest.fixture(scope="session")
def toy_run(toy_config_factory, tmp_path_factory):
    out_dir = str(tmp_path_factory.mktemp("toy-out"))
    config = toy_config_factory(out_dir)
    started = time.monotonic()
    report = run_pipeline(config)
    root = run_directory(config)
    return CompletedRun(
        config=config,
        root=root,
        paths=RunPaths(root),
        report=report,
        elapsed=time.monotonic() - started,
    )


DESK_CONFIG_TEMPLATE = """\
dataset = fmnist
data_root = {data_root}
arch = desk
split_sizes = 5000,5000,5000,5000
seed = 7
layers = last3
grid_layers = last
methods = all
thresholds = 20,40,60,80
target_learning_rate = 0.001
target_epochs = 300
target_stop_at_train_accuracy = 1.0
attack_learning_rate = 0.001
attack_epochs = 25
meta_learning_rate = 0.01
meta_epochs = 20
sweep_kmax = 12
shapley_permutations = 256
ensemble_k = 8
explain_samples = 16
out_dir = {out_dir}
"""


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    data_root = str(tmp_path_factory.mktemp("desk-data"))
    write_fmnist_layout(data_root, n_train=12000, n_test=8000, seed=41)
    out_dir = str(tmp_path_factory.mktemp("desk-out"))
    config = parse_config_text(
        DESK_CONFIG_TEMPLATE.format(data_root=data_root, out_dir=out_dir)
    )
    started = time.monotonic()
    report = run_pipeline(config)
    root = run_directory(config)
    return CompletedRun(
        config=config,
        root=root,
        paths=RunPaths(root),
        report=report,
        elapsed=time.monotonic() - started,
    )
