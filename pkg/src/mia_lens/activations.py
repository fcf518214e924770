"""Observable-layer registration and activation extraction via forward hooks.

A "neuron" is one scalar column of the flattened activation map.  Spatial
maps flatten channel-major by default; per-channel spatial mean pooling is
available for workflows that treat a channel as the unit of selection.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError, InvalidLayerError, NumericFaultError
from .models import images_to_tensor

FLATTEN_MODES = ("flatten", "channel_mean")


@dataclass
class LayerRegistry:
    """Ordered subset of a model's observable layers, shallow to deep."""

    layers: list
    flatten_mode: str = "flatten"

    def __post_init__(self):
        if not self.layers:
            raise InvalidLayerError("registry must cover at least one layer")
        if self.flatten_mode not in FLATTEN_MODES:
            raise InvalidInputError(f"unknown flatten mode {self.flatten_mode!r}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise InvalidLayerError("duplicate layer ids in registry")

    @property
    def names(self):
        return [l.name for l in self.layers]

    def width(self, name):
        for layer in self.layers:
            if layer.name == name:
                if self.flatten_mode == "channel_mean" and len(layer.shape) == 3:
                    return int(layer.shape[0])
                return layer.width
        raise InvalidLayerError(f"layer {name!r} not registered")

    @property
    def deepest(self):
        return self.layers[-1].name

    @property
    def shallowest(self):
        return self.layers[0].name


def parse_layer_selector(selector):
    """Accepts 'all', 'last' (deepest only), or 'lastN'."""
    if selector == "all":
        return ("all", None)
    if selector == "last":
        return ("last_n", 1)
    if isinstance(selector, str) and selector.startswith("last"):
        suffix = selector[4:]
        if suffix.isdigit() and int(suffix) >= 1:
            return ("last_n", int(suffix))
    raise InvalidLayerError(f"cannot parse layer selector {selector!r}")


def register_layers(ckpt, selector="all", flatten_mode="flatten"):
    """Build a LayerRegistry over the checkpoint's observable layers."""
    kind, n = parse_layer_selector(selector) if isinstance(selector, str) else selector
    layers = list(ckpt.layers)
    if kind == "last_n":
        if n > len(layers):
            raise InvalidLayerError(
                f"model exposes {len(layers)} observable layers, requested last {n}"
            )
        layers = layers[-n:]
    elif kind != "all":
        raise InvalidLayerError(f"unknown selector kind {kind!r}")
    return LayerRegistry(layers=layers, flatten_mode=flatten_mode)


@dataclass
class ActivationMatrix:
    """Per-layer activations: rows are samples, columns are neurons."""

    layer: str
    values: np.ndarray
    membership: np.ndarray
    role: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise InvalidInputError("activation values must be 2-D")
        if self.membership is not None:
            self.membership = np.asarray(self.membership, dtype=np.int64)
            if len(self.membership) != len(self.values):
                raise InvalidInputError("membership tags must align with rows")
        if not np.isfinite(self.values).all():
            bad = int(np.argwhere(~np.isfinite(self.values))[0, 0])
            raise NumericFaultError(f"non-finite activation at row {bad}", index=bad)

    @property
    def num_neurons(self):
        return self.values.shape[1]

    def __len__(self):
        return len(self.values)

    def by_membership(self):
        """(member rows, non-member rows) views."""
        if self.membership is None:
            raise InvalidInputError("matrix carries no membership tags")
        mem = self.values[self.membership == 1]
        non = self.values[self.membership == 0]
        return mem, non


class TapRecorder:
    """Forward hooks over named taps; collects the latest batch outputs."""

    def __init__(self, model, names):
        self.outputs = {}
        self._handles = []
        for name in names:
            if name not in model.taps:
                raise InvalidLayerError(f"model has no observable layer {name!r}")
            self._handles.append(
                model.taps[name].register_forward_hook(self._capture(name))
            )

    def _capture(self, name):
        def hook(module, inputs, output):
            self.outputs[name] = output

        return hook

    def close(self):
        for handle in self._handles:
            handle.remove()
        self._handles = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def flatten_activation(tensor, mode="flatten"):
    """(B, ...) activation tensor to (B, width), channel-major."""
    if mode == "channel_mean" and tensor.dim() == 4:
        return tensor.mean(dim=(2, 3))
    return tensor.flatten(1)


def extract_activations(
    ckpt, layer, images, membership=None, role="", batch_size=256, flatten_mode="flatten"
):
    """Forward the images and capture one layer's activations.

    Row order matches input order.  The model is read-only: evaluation
    mode, no gradients, parameters untouched.
    """
    if flatten_mode not in FLATTEN_MODES:
        raise InvalidInputError(f"unknown flatten mode {flatten_mode!r}")
    known = [l.name for l in ckpt.layers]
    if layer not in known:
        raise InvalidLayerError(f"layer {layer!r} not in {known}")
    model = ckpt.build_model()
    tensor = images_to_tensor(images)
    rows = []
    with TapRecorder(model, [layer]) as recorder, torch.no_grad():
        for start in range(0, len(tensor), batch_size):
            model(tensor[start : start + batch_size])
            rows.append(
                flatten_activation(recorder.outputs[layer], flatten_mode).numpy()
            )
    values = (
        np.concatenate(rows)
        if rows
        else np.empty((0, 0), dtype=np.float32)
    )
    return ActivationMatrix(layer=layer, values=values, membership=membership, role=role)


def save_activations(matrix, path_prefix):
    """Raw float32 rows to ``.bin``, shape and tags to ``.json``."""
    os.makedirs(os.path.dirname(path_prefix) or ".", exist_ok=True)
    matrix.values.astype("<f4").tofile(path_prefix + ".bin")
    manifest = {
        "layer": matrix.layer,
        "role": matrix.role,
        "shape": list(matrix.values.shape),
        "dtype": "<f4",
        "membership": [int(v) for v in matrix.membership]
        if matrix.membership is not None
        else None,
    }
    with open(path_prefix + ".json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_activations(path_prefix):
    with open(path_prefix + ".json") as fh:
        manifest = json.load(fh)
    values = np.fromfile(path_prefix + ".bin", dtype="<f4").reshape(manifest["shape"])
    membership = manifest["membership"]
    return ActivationMatrix(
        layer=manifest["layer"],
        values=values,
        membership=np.asarray(membership, dtype=np.int64)
        if membership is not None
        else None,
        role=manifest.get("role", ""),
    )
