"""Architecture registry, classifier training, and checkpointing.

Every architecture exposes two structural handles the rest of the toolkit
relies on: ``taps``, a ModuleDict of identity modules marking the
observable activation points in forward order, and ``head``, the final
classification Linear whose weight matrix is the default subject of
gradient features.  Activation capture registers forward hooks on taps,
so "layer h" always means "output of tap h after rectification".
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .errors import (
    InvalidConfigurationError,
    InvalidDatasetError,
    InvalidInputError,
    TrainingDivergedError,
)

OPTIMIZERS = ("adam", "sgd")
LOSSES = ("cross_entropy", "binary_cross_entropy")


@dataclass
class TrainConfig:
    """Optimization settings; defaults mirror the target/shadow recipe
    (adaptive-moment optimizer, lr 1e-5, 300 epochs, batch 64)."""

    learning_rate: float = 1e-5
    optimizer: str = "adam"
    epochs: int = 300
    batch_size: int = 64
    loss: str = "cross_entropy"
    seed: int = 0
    stop_at_train_accuracy: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidConfigurationError("learning_rate must be positive")
        if self.epochs < 1:
            raise InvalidConfigurationError("epochs must be at least 1")
        if self.batch_size < 1:
            raise InvalidConfigurationError("batch_size must be at least 1")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise InvalidConfigurationError(f"unknown loss {self.loss!r}")


@dataclass
class LayerInfo:
    """One observable layer: id, flattened width, raw activation shape."""

    name: str
    width: int
    shape: tuple


class _TappedModel(nn.Module):
    """Base class wiring observable taps and the classification head."""

    observable = ()

    def _init_taps(self):
        self.taps = nn.ModuleDict({name: nn.Identity() for name in self.observable})


class LinearModel(_TappedModel):
    observable = ("out",)

    def __init__(self, input_shape, num_classes):
        super().__init__()
        h, w, c = input_shape
        self.head = nn.Linear(h * w * c, num_classes)
        self._init_taps()

    def forward(self, x):
        x = torch.flatten(x, 1)
        return self.taps["out"](self.head(x))


class MLP(_TappedModel):
    observable = ("fc1",)

    def __init__(self, input_shape, num_classes, hidden=64):
        super().__init__()
        h, w, c = input_shape
        self.fc1 = nn.Linear(h * w * c, hidden)
        self.relu = nn.ReLU()
        self.head = nn.Linear(hidden, num_classes)
        self._init_taps()

    def forward(self, x):
        x = torch.flatten(x, 1)
        x = self.taps["fc1"](self.relu(self.fc1(x)))
        return self.head(x)


class DeskCNN(_TappedModel):
    """Small 3-conv CNN sized for quick CPU experiments."""

    observable = ("conv1", "conv2", "conv3", "fc1")

    def __init__(self, input_shape, num_classes):
        super().__init__()
        h, w, c = input_shape
        self.conv1 = nn.Conv2d(c, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1)
        self.conv3 = nn.Conv2d(16, 32, 3, padding=1)
        self.pool = nn.MaxPool2d(2)
        self.relu = nn.ReLU()
        with torch.no_grad():
            flat = self._convs(torch.zeros(1, c, h, w)).flatten(1).shape[1]
        self.fc1 = nn.Linear(flat, 128)
        self.head = nn.Linear(128, num_classes)
        self._init_taps()

    def _convs(self, x):
        x = self.pool(self.relu(self.conv1(x)))
        x = self.pool(self.relu(self.conv2(x)))
        return self.pool(self.relu(self.conv3(x)))

    def forward(self, x):
        x = self.pool(self.relu(self.conv1(x)))
        x = self.taps["conv1"](x)
        x = self.pool(self.relu(self.conv2(x)))
        x = self.taps["conv2"](x)
        x = self.pool(self.relu(self.conv3(x)))
        x = self.taps["conv3"](x)
        x = torch.flatten(x, 1)
        x = self.taps["fc1"](self.relu(self.fc1(x)))
        return self.head(x)


class AlexNetSmall(_TappedModel):
    """AlexNet-family layout scaled to small inputs."""

    observable = ("conv1", "conv2", "fc1", "fc2")

    def __init__(self, input_shape, num_classes):
        super().__init__()
        h, w, c = input_shape
        self.conv1 = nn.Conv2d(c, 32, 5, padding=2)
        self.conv2 = nn.Conv2d(32, 64, 5, padding=2)
        self.pool = nn.MaxPool2d(2)
        self.relu = nn.ReLU()
        with torch.no_grad():
            flat = self._convs(torch.zeros(1, c, h, w)).flatten(1).shape[1]
        self.fc1 = nn.Linear(flat, 384)
        self.fc2 = nn.Linear(384, 192)
        self.head = nn.Linear(192, num_classes)
        self._init_taps()

    def _convs(self, x):
        x = self.pool(self.relu(self.conv1(x)))
        return self.pool(self.relu(self.conv2(x)))

    def forward(self, x):
        x = self.pool(self.relu(self.conv1(x)))
        x = self.taps["conv1"](x)
        x = self.pool(self.relu(self.conv2(x)))
        x = self.taps["conv2"](x)
        x = torch.flatten(x, 1)
        x = self.taps["fc1"](self.relu(self.fc1(x)))
        x = self.taps["fc2"](self.relu(self.fc2(x)))
        return self.head(x)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU()
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )
        else:
            self.short = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.short(x))


class ResNet18Small(_TappedModel):
    """ResNet18-family with a 3x3 stem, input-size agnostic via adaptive
    pooling.  Full-scale architecture; not used by the quick-test path."""

    observable = ("layer1", "layer2", "layer3", "layer4", "pool")

    def __init__(self, input_shape, num_classes):
        super().__init__()
        h, w, c = input_shape
        self.stem = nn.Sequential(
            nn.Conv2d(c, 64, 3, padding=1, bias=False), nn.BatchNorm2d(64), nn.ReLU()
        )
        self.layer1 = nn.Sequential(BasicBlock(64, 64), BasicBlock(64, 64))
        self.layer2 = nn.Sequential(BasicBlock(64, 128, 2), BasicBlock(128, 128))
        self.layer3 = nn.Sequential(BasicBlock(128, 256, 2), BasicBlock(256, 256))
        self.layer4 = nn.Sequential(BasicBlock(256, 512, 2), BasicBlock(512, 512))
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(512, num_classes)
        self._init_taps()

    def forward(self, x):
        x = self.stem(x)
        x = self.taps["layer1"](self.layer1(x))
        x = self.taps["layer2"](self.layer2(x))
        x = self.taps["layer3"](self.layer3(x))
        x = self.taps["layer4"](self.layer4(x))
        x = torch.flatten(self.avgpool(x), 1)
        x = self.taps["pool"](x)
        return self.head(x)


ARCHITECTURES = {
    "linear": LinearModel,
    "mlp": MLP,
    "desk": DeskCNN,
    "alexnet": AlexNetSmall,
    "resnet18": ResNet18Small,
}


def build_model(arch, input_shape, num_classes):
    if arch not in ARCHITECTURES:
        raise InvalidInputError(
            f"unknown architecture {arch!r}; registered: {sorted(ARCHITECTURES)}"
        )
    return ARCHITECTURES[arch](tuple(input_shape), int(num_classes))


def images_to_tensor(images):
    """(N, H, W, C) numpy in [0,1] to a float32 NCHW tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4:
        raise InvalidInputError(f"expected (N, H, W, C) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


@dataclass
class ModelCheckpoint:
    """Trained weights plus the metadata needed to rebuild and audit."""

    arch: str
    input_shape: tuple
    num_classes: int
    state_dict: dict
    train_accuracy: float
    test_accuracy: float
    config: TrainConfig
    layers: list = field(default_factory=list)

    def build_model(self):
        model = build_model(self.arch, self.input_shape, self.num_classes)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def probe_layers(model, input_shape):
    """Dry forward on a zero batch to measure each tap's output shape."""
    records = []
    handles = []

    def _capture(name):
        def hook(module, inputs, output):
            shape = tuple(output.shape[1:])
            records.append(LayerInfo(name=name, width=int(np.prod(shape)), shape=shape))

        return hook

    for name in model.observable:
        handles.append(model.taps[name].register_forward_hook(_capture(name)))
    try:
        h, w, c = input_shape
        with torch.no_grad():
            model(torch.zeros(1, c, h, w))
    finally:
        for handle in handles:
            handle.remove()
    return records


def _forward_in_batches(model, tensor, batch_size=512):
    outputs = []
    with torch.no_grad():
        for start in range(0, len(tensor), batch_size):
            outputs.append(model(tensor[start : start + batch_size]))
    return torch.cat(outputs) if outputs else torch.empty(0)


def _accuracy(model, images, labels, batch_size=512):
    logits = _forward_in_batches(model, images_to_tensor(images), batch_size)
    preds = logits.argmax(dim=1).numpy()
    return float((preds == np.asarray(labels)).mean())


def train_classifier(arch, train, test, config):
    """Train a K-class classifier; deterministic given config.seed.

    ``train``/``test`` are LabeledDataset slices.  Stops early once
    ``config.stop_at_train_accuracy`` is reached (checked per epoch).
    Raises TrainingDivergedError with the epoch index if the loss goes
    non-finite.
    """
    if config.loss != "cross_entropy":
        raise InvalidConfigurationError("classifier training uses cross_entropy loss")
    if len(train) == 0:
        raise InvalidDatasetError("empty training set")
    input_shape = train.image_shape
    torch.manual_seed(config.seed)
    model = build_model(arch, input_shape, train.num_classes)
    layers = probe_layers(model, input_shape)

    images = images_to_tensor(train.images)
    labels = torch.from_numpy(np.asarray(train.class_labels, dtype=np.int64))
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    else:
        optimizer = torch.optim.SGD(model.parameters(), lr=config.learning_rate)
    criterion = nn.CrossEntropyLoss()
    shuffler = torch.Generator().manual_seed(config.seed)

    model.train()
    n = len(images)
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=shuffler)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            optimizer.zero_grad()
            loss = criterion(model(images[batch]), labels[batch])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}", epoch=epoch
                )
            loss.backward()
            optimizer.step()
        if config.stop_at_train_accuracy is not None:
            model.eval()
            reached = _accuracy(model, train.images, train.class_labels)
            model.train()
            if reached >= config.stop_at_train_accuracy:
                break

    model.eval()
    train_acc = _accuracy(model, train.images, train.class_labels)
    test_acc = _accuracy(model, test.images, test.class_labels) if len(test) else 0.0
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return ModelCheckpoint(
        arch=arch,
        input_shape=tuple(input_shape),
        num_classes=train.num_classes,
        state_dict=state,
        train_accuracy=train_acc,
        test_accuracy=test_acc,
        config=replace(config),
        layers=layers,
    )


def evaluate_classifier(ckpt, data, batch_size=512):
    """Fraction of argmax-correct predictions on ``data``."""
    if len(data) == 0:
        raise InvalidInputError("empty evaluation slice")
    if tuple(data.image_shape) != tuple(ckpt.input_shape):
        raise InvalidInputError(
            f"data shape {data.image_shape} does not match model {ckpt.input_shape}"
        )
    model = ckpt.build_model()
    return _accuracy(model, data.images, data.class_labels, batch_size)


def save_checkpoint(ckpt, path):
    """Weights to ``path``, human-readable metadata to ``path + '.json'``."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    payload = {
        "arch": ckpt.arch,
        "input_shape": list(ckpt.input_shape),
        "num_classes": ckpt.num_classes,
        "state_dict": ckpt.state_dict,
        "train_accuracy": ckpt.train_accuracy,
        "test_accuracy": ckpt.test_accuracy,
        "config": vars(ckpt.config).copy(),
        "layers": [(l.name, l.width, list(l.shape)) for l in ckpt.layers],
    }
    torch.save(payload, path)
    meta = {
        "arch": ckpt.arch,
        "input_shape": list(ckpt.input_shape),
        "num_classes": ckpt.num_classes,
        "train_accuracy": ckpt.train_accuracy,
        "test_accuracy": ckpt.test_accuracy,
        "config": vars(ckpt.config).copy(),
        "layers": {l.name: l.width for l in ckpt.layers},
    }
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(path):
    if not os.path.exists(path):
        raise InvalidInputError(f"checkpoint {path} does not exist")
    payload = torch.load(path, weights_only=False)
    return ModelCheckpoint(
        arch=payload["arch"],
        input_shape=tuple(payload["input_shape"]),
        num_classes=payload["num_classes"],
        state_dict=payload["state_dict"],
        train_accuracy=payload["train_accuracy"],
        test_accuracy=payload["test_accuracy"],
        config=TrainConfig(**payload["config"]),
        layers=[LayerInfo(n, w, tuple(s)) for n, w, s in payload["layers"]],
    )
