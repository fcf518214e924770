"""Attack feature assembly.

Each sample becomes one record of five feature groups: selected
activations of a capture layer, the posterior vector, the one-hot
predicted label, the per-sample cross-entropy loss, and the gradient of
that loss with respect to a designated 2-D parameter matrix (default:
the final classification layer's weights).  For the default parameter
the gradient has the closed form (p - onehot(y)) outer a_penult, which
the batched builder uses; arbitrary parameters go through autograd one
sample at a time.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .activations import TapRecorder, flatten_activation
from .errors import (
    CapabilityError,
    InvalidInputError,
    InvalidLayerError,
    NumericFaultError,
)
from .models import images_to_tensor

DEFAULT_GRADIENT_PARAM = "head.weight"
POSTERIOR_TOLERANCE = 1e-5


@dataclass
class AttackRecord:
    """One sample's feature tuple plus its membership label."""

    activation_block: np.ndarray
    posterior: np.ndarray
    predicted_label: np.ndarray
    loss: float
    gradient_block: np.ndarray
    membership: int


@dataclass
class AttackDataset:
    """Column-oriented store of attack records with shared shapes."""

    activations: np.ndarray
    posteriors: np.ndarray
    labels_onehot: np.ndarray
    losses: np.ndarray
    gradients: np.ndarray
    membership: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.activations = np.asarray(self.activations, dtype=np.float32)
        self.posteriors = np.asarray(self.posteriors, dtype=np.float32)
        self.labels_onehot = np.asarray(self.labels_onehot, dtype=np.float32)
        self.losses = np.asarray(self.losses, dtype=np.float32)
        self.gradients = np.asarray(self.gradients, dtype=np.float32)
        self.membership = np.asarray(self.membership, dtype=np.int64)
        self.validate()

    def __len__(self):
        return len(self.membership)

    @property
    def activation_width(self):
        return self.activations.shape[1]

    @property
    def num_classes(self):
        return self.posteriors.shape[1]

    @property
    def gradient_shape(self):
        return tuple(self.gradients.shape[1:])

    def validate(self):
        n = len(self.membership)
        for name in ("activations", "posteriors", "labels_onehot", "losses", "gradients"):
            if len(getattr(self, name)) != n:
                raise InvalidInputError(f"{name} row count does not match labels")
        if self.gradients.ndim != 3:
            raise InvalidInputError("gradient blocks must be 2-D per sample")
        if n == 0:
            return
        if not np.isin(self.membership, (0, 1)).all():
            raise InvalidInputError("membership labels must be 0 or 1")
        sums = self.posteriors.sum(axis=1)
        off = np.abs(sums - 1.0)
        if off.max() > POSTERIOR_TOLERANCE or self.posteriors.min() < 0:
            raise InvalidInputError("posteriors must lie on the probability simplex")
        if (self.losses < 0).any():
            raise InvalidInputError("losses must be non-negative")
        hot = self.labels_onehot
        if not np.array_equal(hot.sum(axis=1), np.ones(n, dtype=np.float32)):
            raise InvalidInputError("predicted labels must be one-hot")
        if not np.array_equal(hot.argmax(axis=1), self.posteriors.argmax(axis=1)):
            raise InvalidInputError("predicted label must sit at the posterior argmax")

    def record(self, i):
        return AttackRecord(
            activation_block=self.activations[i],
            posterior=self.posteriors[i],
            predicted_label=self.labels_onehot[i],
            loss=float(self.losses[i]),
            gradient_block=self.gradients[i],
            membership=int(self.membership[i]),
        )

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return AttackDataset(
            activations=self.activations[indices],
            posteriors=self.posteriors[indices],
            labels_onehot=self.labels_onehot[indices],
            losses=self.losses[indices],
            gradients=self.gradients[indices],
            membership=self.membership[indices],
            provenance=dict(self.provenance),
        )


def _resolve_parameter(model, name):
    params = dict(model.named_parameters())
    if name not in params:
        raise CapabilityError(f"model has no parameter {name!r}")
    param = params[name]
    if param.dim() != 2:
        raise CapabilityError(f"parameter {name!r} is not a 2-D matrix")
    if not param.requires_grad:
        raise CapabilityError(f"parameter {name!r} is frozen; gradient unavailable")
    return param


def _check_finite(tensor, what):
    finite = torch.isfinite(tensor)
    if not bool(finite.all()):
        bad = int(torch.nonzero(~finite.reshape(len(tensor), -1).all(dim=1))[0])
        raise NumericFaultError(f"non-finite {what} at sample {bad}", index=bad)


def compute_prediction_features(ckpt, x, y_true):
    """(posterior, one-hot predicted label, cross-entropy loss) for one image."""
    model = ckpt.build_model()
    tensor = images_to_tensor(np.asarray(x, dtype=np.float32)[None])
    with torch.no_grad():
        logits = model(tensor)
    posterior = torch.softmax(logits, dim=1)
    _check_finite(posterior, "posterior")
    posterior = posterior[0].numpy()
    onehot = np.zeros_like(posterior)
    onehot[int(posterior.argmax())] = 1.0
    log_probs = torch.log_softmax(logits, dim=1)[0].numpy()
    loss = float(max(-log_probs[int(y_true)], 0.0))
    return posterior, onehot, loss


def compute_gradient_features(ckpt, x, y_true, param_name=DEFAULT_GRADIENT_PARAM):
    """Gradient of the per-sample loss w.r.t. one designated 2-D parameter."""
    model = ckpt.build_model()
    param = _resolve_parameter(model, param_name)
    tensor = images_to_tensor(np.asarray(x, dtype=np.float32)[None])
    logits = model(tensor)
    loss = nn.functional.cross_entropy(logits, torch.tensor([int(y_true)]))
    if not torch.isfinite(loss):
        raise NumericFaultError("non-finite loss during gradient computation", index=0)
    model.zero_grad()
    loss.backward()
    return param.grad.detach().numpy().copy()


@dataclass
class FullFeatures:
    """Per-sample features with the capture layer kept at full width.

    Masks slice ``activations_full`` later, so one featurization pass
    serves every (method, threshold) cell of a grid.
    """

    layer: str
    activations_full: np.ndarray
    posteriors: np.ndarray
    labels_onehot: np.ndarray
    losses: np.ndarray
    gradients: np.ndarray
    membership: np.ndarray
    class_labels: np.ndarray


def featurize(
    ckpt,
    images,
    class_labels,
    membership,
    layer,
    batch_size=256,
    gradient_param=DEFAULT_GRADIENT_PARAM,
    flatten_mode="flatten",
):
    """One forward sweep computing every feature group at full layer width."""
    known = [l.name for l in ckpt.layers]
    if layer not in known:
        raise InvalidLayerError(f"layer {layer!r} not in {known}")
    model = ckpt.build_model()
    use_closed_form = gradient_param == DEFAULT_GRADIENT_PARAM and isinstance(
        model.head, nn.Linear
    )
    if not use_closed_form:
        _resolve_parameter(model, gradient_param)

    tensor = images_to_tensor(images)
    labels = np.asarray(class_labels, dtype=np.int64)
    acts, posts, losses, grads = [], [], [], []
    penult_box = {}

    def capture_penult(module, inputs, output):
        penult_box["value"] = inputs[0]

    handle = model.head.register_forward_hook(capture_penult)
    try:
        with torch.no_grad():
            with TapRecorder(model, [layer]) as recorder:
                for start in range(0, len(tensor), batch_size):
                    stop = start + batch_size
                    logits = model(tensor[start:stop])
                    posterior = torch.softmax(logits, dim=1)
                    _check_finite(posterior, "posterior")
                    batch_labels = torch.from_numpy(labels[start:stop])
                    log_probs = torch.log_softmax(logits, dim=1)
                    loss = -log_probs.gather(1, batch_labels[:, None])[:, 0]
                    loss = torch.clamp(loss, min=0.0)
                    acts.append(
                        flatten_activation(recorder.outputs[layer], flatten_mode).numpy()
                    )
                    posts.append(posterior.numpy())
                    losses.append(loss.numpy())
                    if use_closed_form:
                        onehot_true = torch.zeros_like(posterior)
                        onehot_true[torch.arange(len(batch_labels)), batch_labels] = 1.0
                        delta = posterior - onehot_true
                        grads.append(
                            (delta[:, :, None] * penult_box["value"][:, None, :]).numpy()
                        )
    finally:
        handle.remove()

    if not use_closed_form:
        grads = [
            compute_gradient_features(ckpt, images[i], labels[i], gradient_param)[None]
            for i in range(len(images))
        ]

    posteriors = np.concatenate(posts)
    onehot = np.zeros_like(posteriors)
    onehot[np.arange(len(posteriors)), posteriors.argmax(axis=1)] = 1.0
    return FullFeatures(
        layer=layer,
        activations_full=np.concatenate(acts),
        posteriors=posteriors,
        labels_onehot=onehot,
        losses=np.concatenate(losses),
        gradients=np.concatenate(grads).astype(np.float32),
        membership=np.asarray(membership, dtype=np.int64),
        class_labels=labels,
    )


def apply_mask(full, mask, provenance=None):
    """Slice full-width features down to one mask's attack dataset."""
    if mask.layer != full.layer:
        raise InvalidInputError(
            f"mask is for layer {mask.layer!r}, features for {full.layer!r}"
        )
    width = full.activations_full.shape[1]
    if mask.indices.max() >= width:
        raise InvalidInputError("mask indices exceed layer width")
    info = {
        "layer": mask.layer,
        "method": mask.method,
        "threshold": mask.threshold,
    }
    if provenance:
        info.update(provenance)
    return AttackDataset(
        activations=full.activations_full[:, mask.indices],
        posteriors=full.posteriors,
        labels_onehot=full.labels_onehot,
        losses=full.losses,
        gradients=full.gradients,
        membership=full.membership,
        provenance=info,
    )


def build_attack_dataset(ckpt, members, nonmembers, mask, batch_size=256, **kwargs):
    """Featurize members (y=1) and non-members (y=0) under one mask.

    ``mask`` may be a single SelectionMask or a sequence of masks over
    different layers, in which case the activation blocks concatenate in
    the given order.
    """
    masks = list(mask) if isinstance(mask, (list, tuple)) else [mask]
    if not masks:
        raise InvalidInputError("at least one selection mask required")
    images = np.concatenate([members.images, nonmembers.images])
    labels = np.concatenate([members.class_labels, nonmembers.class_labels])
    membership = np.concatenate(
        [np.ones(len(members), dtype=np.int64), np.zeros(len(nonmembers), dtype=np.int64)]
    )
    blocks = []
    base = None
    for m in masks:
        full = featurize(ckpt, images, labels, membership, m.layer, batch_size, **kwargs)
        blocks.append(full.activations_full[:, m.indices])
        base = full
    ds = AttackDataset(
        activations=np.concatenate(blocks, axis=1),
        posteriors=base.posteriors,
        labels_onehot=base.labels_onehot,
        losses=base.losses,
        gradients=base.gradients,
        membership=membership,
        provenance={
            "layer": "+".join(m.layer for m in masks),
            "method": masks[0].method,
            "threshold": masks[0].threshold,
        },
    )
    return ds


def save_attack_dataset(ds, path_prefix):
    """Float32 blocks to ``.bin`` in a fixed order, metadata to ``.json``."""
    os.makedirs(os.path.dirname(path_prefix) or ".", exist_ok=True)
    with open(path_prefix + ".bin", "wb") as fh:
        for block in (ds.activations, ds.posteriors, ds.labels_onehot, ds.losses, ds.gradients):
            fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
    manifest = {
        "shapes": {
            "activations": list(ds.activations.shape),
            "posteriors": list(ds.posteriors.shape),
            "labels_onehot": list(ds.labels_onehot.shape),
            "losses": list(ds.losses.shape),
            "gradients": list(ds.gradients.shape),
        },
        "membership": [int(v) for v in ds.membership],
        "label_counts": {
            "members": int((ds.membership == 1).sum()),
            "nonmembers": int((ds.membership == 0).sum()),
        },
        "provenance": ds.provenance,
    }
    with open(path_prefix + ".json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_attack_dataset(path_prefix):
    with open(path_prefix + ".json") as fh:
        manifest = json.load(fh)
    shapes = manifest["shapes"]
    blocks = {}
    with open(path_prefix + ".bin", "rb") as fh:
        for name in ("activations", "posteriors", "labels_onehot", "losses", "gradients"):
            shape = shapes[name]
            count = int(np.prod(shape)) if shape else 0
            blocks[name] = np.frombuffer(
                fh.read(count * 4), dtype="<f4"
            ).reshape(shape).copy()
    return AttackDataset(
        membership=np.asarray(manifest["membership"], dtype=np.int64),
        provenance=manifest["provenance"],
        **blocks,
    )


_FULL_BLOCKS = (
    "activations_full", "posteriors", "labels_onehot", "losses", "gradients"
)


def save_full_features(full, path_prefix):
    """Full-width features to ``.bin`` blocks plus a ``.json`` manifest."""
    os.makedirs(os.path.dirname(path_prefix) or ".", exist_ok=True)
    with open(path_prefix + ".bin", "wb") as fh:
        for name in _FULL_BLOCKS:
            fh.write(
                np.ascontiguousarray(getattr(full, name), dtype="<f4").tobytes()
            )
    manifest = {
        "layer": full.layer,
        "shapes": {
            name: list(getattr(full, name).shape) for name in _FULL_BLOCKS
        },
        "membership": [int(v) for v in full.membership],
        "class_labels": [int(v) for v in full.class_labels],
        "label_counts": {
            "members": int((full.membership == 1).sum()),
            "nonmembers": int((full.membership == 0).sum()),
        },
    }
    with open(path_prefix + ".json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_full_features(path_prefix):
    with open(path_prefix + ".json") as fh:
        manifest = json.load(fh)
    blocks = {}
    with open(path_prefix + ".bin", "rb") as fh:
        for name in _FULL_BLOCKS:
            shape = manifest["shapes"][name]
            count = int(np.prod(shape)) if shape else 0
            blocks[name] = np.frombuffer(
                fh.read(count * 4), dtype="<f4"
            ).reshape(shape).copy()
    return FullFeatures(
        layer=manifest["layer"],
        membership=np.asarray(manifest["membership"], dtype=np.int64),
        class_labels=np.asarray(manifest["class_labels"], dtype=np.int64),
        **blocks,
    )
