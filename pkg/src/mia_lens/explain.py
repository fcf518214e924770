"""Attribution of attack success back to input pixels.

The cascade fuses the target network, one activation tap, a neuron mask,
and the attack model into a single differentiable map from an image to a
member-probability.  Attributions come from gradient-weighted baseline
interpolation (64 midpoint steps) with a proportional residual
correction, so per-pixel values sum exactly to f(x) - f(baseline).
Target-model maps explain the predicted-class logit; attack maps explain
the member-probability.  Map overlap is scored with mean SSIM over 8x8
sliding windows after joint min-max normalization.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .activations import flatten_activation
from .errors import (
    InvalidConfigurationError,
    InvalidInputError,
    NumericFaultError,
)
from .models import images_to_tensor

IG_STEPS = 64
SSIM_WINDOW = 8
ATTRIBUTION_SUBJECTS = ("target_class", "attack_membership")


@dataclass
class AttributionMap:
    """Per-pixel credit for one scalar model output.

    ``values`` has the image's own (H, W, C) layout; their sum plus
    ``base_value`` reproduces ``explained_output`` up to float round-off.
    """

    values: np.ndarray
    base_value: float
    explained_output: float
    subject: str

    def __post_init__(self):
        if self.subject not in ATTRIBUTION_SUBJECTS:
            raise InvalidInputError(
                f"subject must be one of {ATTRIBUTION_SUBJECTS}, got {self.subject!r}"
            )
        self.values = np.asarray(self.values, dtype=np.float64)

    def total(self):
        return float(self.values.sum()) + self.base_value

    def channel_summed(self):
        """2-D map: channels collapsed by summation."""
        if self.values.ndim == 3:
            return self.values.sum(axis=2)
        return self.values


class CascadedModel(nn.Module):
    """Target network, activation tap, mask, and attack model in one
    differentiable image -> member-probability map.

    The class label rides along because the loss and gradient features
    depend on it; gradients flow only through the image input.
    """

    def __init__(self, target_ckpt, layer, mask, attack, flatten_mode="flatten"):
        super().__init__()
        attack_model = getattr(attack, "model", attack)
        known = [l.name for l in target_ckpt.layers]
        if layer not in known:
            raise InvalidConfigurationError(f"layer {layer!r} not in {known}")
        if mask.layer != layer:
            raise InvalidConfigurationError(
                f"mask is for layer {mask.layer!r}, cascade taps {layer!r}"
            )
        if len(mask) != attack_model.activation_width:
            raise InvalidConfigurationError(
                f"mask keeps {len(mask)} neurons but the attack model "
                f"expects {attack_model.activation_width}"
            )
        if target_ckpt.num_classes != attack_model.num_classes:
            raise InvalidConfigurationError(
                "target and attack models disagree on class count"
            )
        self.target = target_ckpt.build_model()
        self.attack = attack_model
        self.layer = layer
        self.flatten_mode = flatten_mode
        self.register_buffer(
            "mask_indices", torch.from_numpy(np.asarray(mask.indices, dtype=np.int64))
        )
        self.target.eval()
        self.attack.eval()

    def forward(self, images, class_labels):
        boxes = {}

        def keep_tap(module, inputs, output):
            boxes["tap"] = output

        def keep_penult(module, inputs, output):
            boxes["penult"] = inputs[0]

        handles = [
            self.target.taps[self.layer].register_forward_hook(keep_tap),
            self.target.head.register_forward_hook(keep_penult),
        ]
        try:
            logits = self.target(images)
        finally:
            for handle in handles:
                handle.remove()

        act = flatten_activation(boxes["tap"], self.flatten_mode)[:, self.mask_indices]
        posterior = torch.softmax(logits, dim=1)
        log_probs = torch.log_softmax(logits, dim=1)
        loss = -log_probs.gather(1, class_labels[:, None])[:, 0]
        loss = torch.clamp(loss, min=0.0)
        onehot_pred = torch.zeros_like(posterior)
        onehot_pred[torch.arange(len(posterior)), posterior.argmax(dim=1).detach()] = 1.0
        onehot_true = torch.zeros_like(posterior)
        onehot_true[torch.arange(len(posterior)), class_labels] = 1.0
        grad_block = (posterior - onehot_true)[:, :, None] * boxes["penult"][:, None, :]
        return self.attack.member_probability(
            act, posterior, onehot_pred, loss[:, None], grad_block[:, None]
        )


def cascade(target_ckpt, layer, mask, attack, flatten_mode="flatten"):
    return CascadedModel(target_ckpt, layer, mask, attack, flatten_mode)


def cascade_probabilities(cascaded, images, class_labels, batch_size=64):
    """Member-probabilities for numpy images, without gradients."""
    tensor = images_to_tensor(images)
    labels = torch.from_numpy(np.asarray(class_labels, dtype=np.int64))
    outputs = []
    with torch.no_grad():
        for start in range(0, len(tensor), batch_size):
            stop = start + batch_size
            outputs.append(cascaded(tensor[start:stop], labels[start:stop]).numpy())
    return np.concatenate(outputs).astype(np.float64)


def input_gradient(cascaded, image, class_label):
    """d(member-probability)/d(pixel) for one image, as an (H, W, C) map."""
    tensor = images_to_tensor(image[None]).requires_grad_(True)
    label = torch.tensor([int(class_label)], dtype=torch.int64)
    prob = cascaded(tensor, label)
    grad = torch.autograd.grad(prob.sum(), tensor)[0][0]
    return grad.permute(1, 2, 0).numpy().astype(np.float64)


def attribute(model_map, x, baseline, subject="attack_membership",
              steps=IG_STEPS, batch_size=16):
    """Per-pixel attribution of a differentiable scalar map.

    ``model_map`` takes a (B, C, H, W) tensor to a (B,) tensor.  Gradients
    along the straight path from ``baseline`` to ``x`` are averaged at
    ``steps`` midpoints and weighted by the input difference; the small
    integration residual is then redistributed proportionally to absolute
    attribution mass, making the efficiency identity exact.
    """
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape != baseline.shape:
        raise InvalidInputError(
            f"baseline shape {baseline.shape} does not match input {x.shape}"
        )
    if steps < 1:
        raise InvalidInputError("need at least one integration step")

    x_t = images_to_tensor(x[None])
    b_t = images_to_tensor(baseline[None])
    delta = x_t - b_t

    grad_sum = torch.zeros_like(x_t, dtype=torch.float64)
    alphas = (np.arange(steps, dtype=np.float64) + 0.5) / steps
    for start in range(0, steps, batch_size):
        chunk = alphas[start : start + batch_size]
        points = torch.cat([b_t + float(a) * delta for a in chunk])
        points = points.detach().requires_grad_(True)
        outputs = model_map(points)
        if not torch.isfinite(outputs).all():
            raise NumericFaultError("model output is not finite along the path")
        if outputs.requires_grad:
            grads = torch.autograd.grad(outputs.sum(), points,
                                        allow_unused=True)[0]
        else:
            # output does not depend on the input; zero gradient everywhere
            grads = None
        if grads is None:
            grads = torch.zeros_like(points)
        grad_sum += grads.double().sum(dim=0, keepdim=True)

    avg_grad = (grad_sum / steps)[0]
    raw = (delta.double()[0] * avg_grad).permute(1, 2, 0).numpy()

    with torch.no_grad():
        f_x = float(model_map(x_t)[0])
        f_b = float(model_map(b_t)[0])
    if not (np.isfinite(f_x) and np.isfinite(f_b)):
        raise NumericFaultError("model output is not finite at the endpoints")

    residual = (f_x - f_b) - raw.sum()
    magnitude = np.abs(raw)
    total = magnitude.sum()
    if total > 0:
        values = raw + residual * (magnitude / total)
    else:
        values = raw + residual / raw.size
    return AttributionMap(
        values=values, base_value=f_b, explained_output=f_x, subject=subject
    )


def explain_pair(target_ckpt, cascaded, x, baseline, class_label=None,
                 steps=IG_STEPS):
    """Attribution maps for the predicted-class logit and the cascade's
    member-probability on the same image.

    ``class_label`` feeds the cascade's loss and gradient features; when
    omitted, the target's predicted class stands in, so the explainer
    never needs membership information.
    """
    model = target_ckpt.build_model()
    with torch.no_grad():
        logits = model(images_to_tensor(np.asarray(x)[None]))
    predicted = int(logits.argmax(dim=1)[0])
    if class_label is None:
        class_label = predicted

    def target_map(batch):
        return model(batch)[:, predicted]

    label = torch.tensor([int(class_label)], dtype=torch.int64)

    def attack_map(batch):
        return cascaded(batch, label.expand(len(batch)))

    target_attr = attribute(target_map, x, baseline, subject="target_class",
                            steps=steps)
    attack_attr = attribute(attack_map, x, baseline,
                            subject="attack_membership", steps=steps)
    return target_attr, attack_attr


def ssim(a, b, dynamic_range=1.0, window=SSIM_WINDOW):
    """Mean structural similarity over sliding square windows.

    Uniform windows (side 8, unit stride), stabilizers C1=(0.01L)^2 and
    C2=(0.03L)^2, population moments.  Maps smaller than the window fall
    back to a single whole-map window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidInputError("ssim expects 2-D maps")
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not dynamic_range > 0:
        raise InvalidInputError("dynamic range must be positive")
    side = min(window, *a.shape)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2

    wins_a = np.lib.stride_tricks.sliding_window_view(a, (side, side))
    wins_b = np.lib.stride_tricks.sliding_window_view(b, (side, side))
    mu_a = wins_a.mean(axis=(-2, -1))
    mu_b = wins_b.mean(axis=(-2, -1))
    var_a = (wins_a**2).mean(axis=(-2, -1)) - mu_a**2
    var_b = (wins_b**2).mean(axis=(-2, -1)) - mu_b**2
    cov = (wins_a * wins_b).mean(axis=(-2, -1)) - mu_a * mu_b
    scores = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(scores.mean())


def compare_maps(map_a, map_b):
    """SSIM between two attribution maps.

    Channels are summed first; both 2-D maps are then min-max normalized
    jointly (shared extrema) to [0, 1] and compared at L=1.  Two maps
    with zero joint range are identical constants, hence similarity 1.
    """
    flat_a = map_a.channel_summed()
    flat_b = map_b.channel_summed()
    lo = min(flat_a.min(), flat_b.min())
    hi = max(flat_a.max(), flat_b.max())
    if hi - lo <= 0:
        return 1.0
    norm_a = (flat_a - lo) / (hi - lo)
    norm_b = (flat_b - lo) / (hi - lo)
    return ssim(norm_a, norm_b, dynamic_range=1.0)


@dataclass
class SSIMReport:
    """Per-sample target-vs-attack map similarity plus class means."""

    sample_ids: np.ndarray
    membership: np.ndarray
    scores: np.ndarray
    dataset: str = ""
    arch: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.membership = np.asarray(self.membership, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if not (len(self.sample_ids) == len(self.membership) == len(self.scores)):
            raise InvalidInputError("report columns must align")
        if len(self.scores) and (
            self.scores.min() < -1.0 - 1e-9 or self.scores.max() > 1.0 + 1e-9
        ):
            raise InvalidInputError("SSIM scores must lie in [-1, 1]")

    def mean_for(self, membership):
        rows = self.scores[self.membership == membership]
        if len(rows) == 0:
            raise InvalidInputError(f"no samples with membership {membership}")
        return float(rows.mean())


def write_ssim_csv(report, path):
    """``sample,membership,ssim`` rows in sample order."""
    import csv
    import os

    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "membership", "ssim"])
        for i in range(len(report.scores)):
            writer.writerow(
                [
                    int(report.sample_ids[i]),
                    int(report.membership[i]),
                    f"{report.scores[i]:.10g}",
                ]
            )


def mean_image_baseline(images):
    """Per-pixel mean of a training image stack; the default baseline."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise InvalidInputError("expected an (N, H, W, C) image stack")
    if len(images) == 0:
        raise InvalidInputError("cannot average an empty image stack")
    return images.mean(axis=0)


def pca_project(acts, mask=None):
    """Mean-centered projection onto the top-2 principal components.

    Component signs are fixed by forcing each component's
    largest-magnitude loading positive, so projections are reproducible.
    """
    values = acts.values.astype(np.float64)
    if mask is not None:
        values = values[:, np.asarray(mask.indices, dtype=np.int64)]
    if len(values) < 2:
        raise InvalidInputError("projection needs at least 2 samples")
    centered = values - values.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = np.zeros((len(values), 2), dtype=np.float64)
    for c in range(min(2, vt.shape[0])):
        component = vt[c]
        anchor = np.argmax(np.abs(component))
        if component[anchor] < 0:
            component = -component
        coords[:, c] = centered @ component
    return coords
