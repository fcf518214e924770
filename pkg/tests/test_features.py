import numpy as np
import pytest
import torch

from mia_lens.data import LabeledDataset
from mia_lens.errors import CapabilityError, InvalidInputError, InvalidLayerError
from mia_lens.features import (
    AttackDataset,
    build_attack_dataset,
    compute_gradient_features,
    compute_prediction_features,
    featurize,
    load_attack_dataset,
    apply_mask,
    save_attack_dataset,
)
from mia_lens.models import (
    ModelCheckpoint,
    TrainConfig,
    build_model,
    probe_layers,
    train_classifier,
)
from mia_lens.selection import SelectionMask

from synthdata import template_images


def make_linear_ckpt(weight, bias):
    """Linear model with hand-set parameters over 1x1xD inputs."""
    K, D = weight.shape
    model = build_model("linear", (1, 1, D), K)
    with torch.no_grad():
        model.head.weight.copy_(torch.from_numpy(weight.astype(np.float32)))
        model.head.bias.copy_(torch.from_numpy(bias.astype(np.float32)))
    return ModelCheckpoint(
        arch="linear", input_shape=(1, 1, D), num_classes=K,
        state_dict=model.state_dict(), train_accuracy=1.0, test_accuracy=1.0,
        config=TrainConfig(epochs=1), layers=probe_layers(model, (1, 1, D)),
    )


@pytest.fixture(scope="module")
def toy_ckpt():
    images, labels = template_images(80, num_classes=4, side=10, seed=4, label_noise=0.0)
    ds = LabeledDataset(images, labels, "toy", 4)
    config = TrainConfig(learning_rate=1e-3, epochs=5, batch_size=16, seed=2)
    return train_classifier("desk", ds, ds, config), ds


class TestPredictionFeatures:
    def test_uniform_posterior_loss(self):
        # zero weights: logits all equal, posterior uniform over K=10
        ckpt = make_linear_ckpt(np.zeros((10, 4)), np.zeros(10))
        x = np.random.default_rng(0).random((1, 1, 4)).astype(np.float32)
        posterior, onehot, loss = compute_prediction_features(ckpt, x, y_true=3)
        np.testing.assert_allclose(posterior, 0.1, atol=1e-6)
        np.testing.assert_allclose(loss, np.log(10.0), rtol=1e-5)

    def test_onehot_at_argmax(self):
        weight = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 1.0]])
        ckpt = make_linear_ckpt(weight, np.zeros(3))
        x = np.array([[[1.0, 0.1]]], dtype=np.float32)
        posterior, onehot, _ = compute_prediction_features(ckpt, x, y_true=0)
        assert onehot.argmax() == posterior.argmax() == 1
        assert onehot.sum() == 1.0

    def test_perfect_prediction_zero_loss(self):
        weight = np.array([[100.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        ckpt = make_linear_ckpt(weight, np.zeros(3))
        x = np.array([[[1.0, 0.0]]], dtype=np.float32)
        _, _, loss = compute_prediction_features(ckpt, x, y_true=0)
        assert loss == 0.0


class TestGradientFeatures:
    def test_closed_form_oracle_single_linear_layer(self):
        # oracle: dL/dW = (p - onehot(y)) outer x for softmax + CE
        rng = np.random.default_rng(3)
        weight = rng.normal(0, 1, (3, 5))
        bias = rng.normal(0, 0.1, 3)
        ckpt = make_linear_ckpt(weight, bias)
        x = rng.random((1, 1, 5)).astype(np.float32)
        flat = x.ravel()
        logits = weight @ flat + bias
        p = np.exp(logits - logits.max())
        p /= p.sum()
        onehot = np.zeros(3)
        onehot[1] = 1.0
        want = np.outer(p - onehot, flat)
        got = compute_gradient_features(ckpt, x, y_true=1)
        assert got.shape == (3, 5)
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-6)

    def test_zero_loss_stationary_point(self):
        weight = np.array([[100.0, 0.0], [0.0, 0.0]])
        ckpt = make_linear_ckpt(weight, np.zeros(2))
        x = np.array([[[1.0, 0.0]]], dtype=np.float32)
        grad = compute_gradient_features(ckpt, x, y_true=0)
        assert np.abs(grad).max() < 1e-6

    def test_central_finite_difference_oracle(self, toy_ckpt):
        ckpt, ds = toy_ckpt
        x, y = ds.images[7], int(ds.class_labels[7])
        grad = compute_gradient_features(ckpt, x, y)

        # independent route: double-precision centered differences on the
        # head weights
        model = ckpt.build_model().double()
        tensor = torch.from_numpy(
            np.ascontiguousarray(x[None].transpose(0, 3, 1, 2), dtype=np.float64)
        )
        target = torch.tensor([y])

        def loss_at(delta):
            with torch.no_grad():
                model.head.weight.add_(torch.from_numpy(delta))
                value = torch.nn.functional.cross_entropy(model(tensor), target).item()
                model.head.weight.sub_(torch.from_numpy(delta))
            return value

        eps = 1e-4
        rng = np.random.default_rng(0)
        K, P = grad.shape
        for _ in range(12):
            i, j = int(rng.integers(K)), int(rng.integers(P))
            probe = np.zeros((K, P))
            probe[i, j] = eps
            fd = (loss_at(probe) - loss_at(-probe)) / (2 * eps)
            np.testing.assert_allclose(grad[i, j], fd, rtol=1e-3, atol=1e-5)

    def test_unknown_parameter_is_capability_error(self, toy_ckpt):
        ckpt, ds = toy_ckpt
        with pytest.raises(CapabilityError):
            compute_gradient_features(ckpt, ds.images[0], 0, param_name="nope.weight")

    def test_non_matrix_parameter_rejected(self, toy_ckpt):
        ckpt, ds = toy_ckpt
        with pytest.raises(CapabilityError):
            compute_gradient_features(ckpt, ds.images[0], 0, param_name="head.bias")

    def test_batched_closed_form_matches_autograd(self, toy_ckpt):
        ckpt, ds = toy_ckpt
        full = featurize(
            ckpt, ds.images[:6], ds.class_labels[:6], np.ones(6, dtype=np.int64), "fc1"
        )
        for i in range(6):
            single = compute_gradient_features(ckpt, ds.images[i], ds.class_labels[i])
            np.testing.assert_allclose(full.gradients[i], single, rtol=1e-4, atol=1e-6)


class TestBuildAttackDataset:
    def make_mask(self, ckpt, layer="fc1", count=20):
        width = {l.name: l.width for l in ckpt.layers}[layer]
        return SelectionMask(
            layer=layer, method="bootstrap", threshold=0.2,
            indices=np.arange(count) % width,
        )

    def test_cardinality_and_labels(self, toy_ckpt):
        ckpt, ds = toy_ckpt
        members, nonmembers = ds.subset(range(30)), ds.subset(range(30, 60))
        mask = self.make_mask(ckpt)
        built = build_attack_dataset(ckpt, members, nonmembers, mask)
        assert len(built) == 60
        assert (built.membership == 1).sum() == 30
        assert (built.membership == 0).sum() == 30
        assert built.activation_width == 20
        built.validate()

    def test_mask_restriction_consistency(self, toy_ckpt):
        ckpt, ds = toy_ckpt
        members, nonmembers = ds.subset(range(10)), ds.subset(range(10, 20))
        small = SelectionMask(layer="fc1", method="t_test", threshold=0.2,
                              indices=np.array([4, 9, 2]))
        big = SelectionMask(layer="fc1", method="t_test", threshold=0.4,
                            indices=np.array([4, 9, 2, 77, 31]))
        ds_small = build_attack_dataset(ckpt, members, nonmembers, small)
        ds_big = build_attack_dataset(ckpt, members, nonmembers, big)
        np.testing.assert_array_equal(ds_small.activations, ds_big.activations[:, :3])

    def test_member_loss_below_nonmember_on_overfit_model(self):
        images, labels = template_images(120, num_classes=4, side=10, seed=8,
                                         label_noise=0.3)
        ds = LabeledDataset(images, labels, "noisy", 4)
        train, holdout = ds.subset(range(60)), ds.subset(range(60, 120))
        config = TrainConfig(learning_rate=2e-3, epochs=60, batch_size=16, seed=0,
                             stop_at_train_accuracy=1.0)
        ckpt = train_classifier("desk", train, holdout, config)
        assert ckpt.train_accuracy == 1.0
        mask = self.make_mask(ckpt)
        built = build_attack_dataset(ckpt, train, holdout, mask)
        member_loss = built.losses[built.membership == 1].mean()
        nonmember_loss = built.losses[built.membership == 0].mean()
        assert member_loss < nonmember_loss

    def test_multi_layer_concatenation(self, toy_ckpt):
        ckpt, ds = toy_ckpt
        members, nonmembers = ds.subset(range(10)), ds.subset(range(10, 20))
        m1 = SelectionMask(layer="conv3", method="t_test", threshold=0.2,
                           indices=np.arange(5))
        m2 = SelectionMask(layer="fc1", method="t_test", threshold=0.2,
                           indices=np.arange(7))
        built = build_attack_dataset(ckpt, members, nonmembers, [m1, m2])
        assert built.activation_width == 12
        assert built.provenance["layer"] == "conv3+fc1"

    def test_unknown_layer_rejected(self, toy_ckpt):
        ckpt, ds = toy_ckpt
        mask = SelectionMask(layer="fc9", method="t_test", threshold=0.2,
                             indices=np.array([0]))
        with pytest.raises(InvalidLayerError):
            build_attack_dataset(ckpt, ds.subset(range(5)), ds.subset(range(5, 10)), mask)

    def test_rebuild_is_byte_identical(self, toy_ckpt, tmp_path):
        ckpt, ds = toy_ckpt
        members, nonmembers = ds.subset(range(15)), ds.subset(range(15, 30))
        mask = self.make_mask(ckpt)
        p1, p2 = str(tmp_path / "a"), str(tmp_path / "b")
        save_attack_dataset(build_attack_dataset(ckpt, members, nonmembers, mask), p1)
        save_attack_dataset(build_attack_dataset(ckpt, members, nonmembers, mask), p2)
        assert open(p1 + ".bin", "rb").read() == open(p2 + ".bin", "rb").read()
        assert open(p1 + ".json", "rb").read() == open(p2 + ".json", "rb").read()

    def test_save_load_round_trip(self, toy_ckpt, tmp_path):
        ckpt, ds = toy_ckpt
        built = build_attack_dataset(
            ckpt, ds.subset(range(12)), ds.subset(range(12, 24)), self.make_mask(ckpt)
        )
        prefix = str(tmp_path / "features")
        save_attack_dataset(built, prefix)
        loaded = load_attack_dataset(prefix)
        np.testing.assert_array_equal(loaded.activations, built.activations)
        np.testing.assert_array_equal(loaded.gradients, built.gradients)
        np.testing.assert_array_equal(loaded.membership, built.membership)
        assert loaded.provenance == built.provenance


class TestAttackDatasetValidation:
    def base_arrays(self, n=4, k=3):
        posteriors = np.full((n, k), 1.0 / k, dtype=np.float32)
        onehot = np.zeros((n, k), dtype=np.float32)
        onehot[:, 0] = 1.0
        return dict(
            activations=np.zeros((n, 5), dtype=np.float32),
            posteriors=posteriors,
            labels_onehot=onehot,
            losses=np.ones(n, dtype=np.float32),
            gradients=np.zeros((n, k, 4), dtype=np.float32),
            membership=np.array([1, 1, 0, 0]),
        )

    def test_valid_construction(self):
        AttackDataset(**self.base_arrays())

    def test_bad_simplex_rejected(self):
        arrays = self.base_arrays()
        arrays["posteriors"][0, 0] = 0.9
        with pytest.raises(InvalidInputError):
            AttackDataset(**arrays)

    def test_negative_loss_rejected(self):
        arrays = self.base_arrays()
        arrays["losses"][1] = -0.5
        with pytest.raises(InvalidInputError):
            AttackDataset(**arrays)

    def test_onehot_argmax_mismatch_rejected(self):
        arrays = self.base_arrays()
        arrays["posteriors"][:] = [[0.1, 0.8, 0.1]] * 4
        with pytest.raises(InvalidInputError):
            AttackDataset(**arrays)

    def test_mask_layer_mismatch_in_apply(self, toy_ckpt):
        ckpt, ds = toy_ckpt
        full = featurize(ckpt, ds.images[:6], ds.class_labels[:6],
                         np.ones(6, dtype=np.int64), "fc1")
        mask = SelectionMask(layer="conv2", method="t_test", threshold=0.2,
                             indices=np.array([0, 1]))
        with pytest.raises(InvalidInputError):
            apply_mask(full, mask)
