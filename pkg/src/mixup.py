"""
Mixup in input space, at a named hidden layer of a classifier, and in the latent
space of a VAE. Mixed targets are convex combinations of one-hot (or soft) labels.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .data import Dataset
from .errors import ConfigError, DegenerateTaskError, InputError
from .utils import make_rng

logger = logging.getLogger(__name__)

MIXUP_MODES = ("off", "input", "feature", "vae_latent")
DEFAULT_FEATURE_LAYER = "conv2"


@dataclass(frozen=True)
class MixupSpec:
    mode: str = "off"
    layer: Optional[str] = None
    beta_a: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MIXUP_MODES:
            raise ConfigError(f"mixup mode must be one of {MIXUP_MODES}", "mixup.mode")
        if self.mode == "feature" and not self.layer:
            raise ConfigError("feature mixup needs a layer", "mixup.layer")
        if self.mode != "feature" and self.layer and self.layer != "input":
            raise ConfigError("layer is only meaningful for feature mixup", "mixup.layer")
        if not self.beta_a > 0:
            raise ConfigError("beta_a must be positive", "mixup.beta_a")

    @property
    def tap(self) -> Optional[str]:
        """Layer at which a classifier mixes, or None when it does not."""
        if self.mode == "input":
            return "input"
        if self.mode == "feature":
            return self.layer
        return None

    def to_dict(self):
        return {"mode": self.mode, "layer": self.layer, "beta_a": self.beta_a, "seed": self.seed}


def sample_lambda(spec: MixupSpec, rng: np.random.Generator) -> float:
    """lambda ~ Beta(a, a)"""
    return float(rng.beta(spec.beta_a, spec.beta_a))


def one_hot(labels: Tensor, num_classes: int) -> Tensor:
    return F.one_hot(labels.long(), num_classes).to(torch.get_default_dtype())


def mixup_pair(x1, y1, x2, y2, lam: float):
    """(lam*x1 + (1-lam)*x2, lam*y1 + (1-lam)*y2)"""
    x1, x2, y1, y2 = (torch.as_tensor(v, dtype=torch.get_default_dtype()) for v in (x1, x2, y1, y2))
    if x1.shape != x2.shape:
        raise InputError(f"cannot mix shapes {tuple(x1.shape)} and {tuple(x2.shape)}", "x")
    if y1.shape != y2.shape:
        raise InputError(f"cannot mix label shapes {tuple(y1.shape)} and {tuple(y2.shape)}", "y")
    if not 0.0 <= lam <= 1.0:
        raise InputError("lam must be in [0, 1]", "lam")
    return lam * x1 + (1 - lam) * x2, lam * y1 + (1 - lam) * y2


def seeded_permutation(n: int, rng: np.random.Generator) -> Tensor:
    return torch.as_tensor(rng.permutation(n), dtype=torch.long)


def mix_batch(h: Tensor, y: Tensor, lam, perm: Tensor) -> Tuple[Tensor, Tensor]:
    """Mix every row with row `perm[i]`; `lam` is a scalar or one value per row."""
    lam = torch.as_tensor(lam, dtype=h.dtype, device=h.device)
    lam_h = lam.view(-1, *([1] * (h.dim() - 1))) if lam.dim() else lam
    lam_y = lam.view(-1, 1) if lam.dim() else lam
    return lam_h * h + (1 - lam_h) * h[perm], lam_y * y + (1 - lam_y) * y[perm]


def feature_mixup_batch(
    model,
    layer: str,
    x: Tensor,
    y: Tensor,
    spec: MixupSpec,
    rng: np.random.Generator,
    num_classes: int = None,
    lam: float = None,
):
    """
    Forward `x` to `layer`, then mix the activations (and labels) of each sample with
    one partner from a seeded shuffle of the batch. The caller continues the forward
    pass with `model.forward_from(h_mix, layer)`.

    Returns (h_mix, y_mix, lam, perm).
    """
    net = getattr(model, "net", model)
    if x.shape[0] < 2:
        raise DegenerateTaskError("mixup needs a batch of at least 2 samples", "batch")
    num_classes = num_classes or net.num_classes
    y_soft = y if y.dim() == 2 else one_hot(y, num_classes).to(x.dtype)
    h = net.forward_to(x, layer)
    if lam is None:
        lam = sample_lambda(spec, rng)
    perm = seeded_permutation(x.shape[0], rng)
    h_mix, y_mix = mix_batch(h, y_soft, lam, perm)
    return h_mix, y_mix, lam, perm


def soft_cross_entropy(logits: Tensor, soft_targets: Tensor) -> Tensor:
    return -(soft_targets * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def _latent_mean(model, x: Tensor) -> Tensor:
    net = getattr(model, "net", model)
    out = net.encode(x)
    return out[0] if isinstance(out, tuple) else out


@torch.no_grad()
def vae_latent_mixup(vae, x1: Tensor, x2: Tensor, lam: float, allow_autoencoder: bool = False) -> Tensor:
    """decode(lam*mean(x1) + (1-lam)*mean(x2)), shaped like the inputs."""
    net = getattr(vae, "net", vae)
    kind = getattr(net, "kind", None)
    if kind != "vae" and not (allow_autoencoder and kind == "autoencoder"):
        raise ConfigError(f"latent mixup needs a VAE, got {kind!r}", "vae")
    if not 0.0 <= lam <= 1.0:
        raise InputError("lam must be in [0, 1]", "lam")
    single = x1.dim() == len(net.input_shape)
    if single:
        x1, x2 = x1.unsqueeze(0), x2.unsqueeze(0)
    if x1.shape != x2.shape:
        raise InputError(f"cannot mix shapes {tuple(x1.shape)} and {tuple(x2.shape)}", "x")
    was_training = net.training
    net.eval()
    z = lam * _latent_mean(net, x1) + (1 - lam) * _latent_mean(net, x2)
    out = net.decode(z)
    net.train(was_training)
    return out[0] if single else out


def vae_mixup_augment(vae, dataset: Dataset, n: int, spec: MixupSpec) -> Dataset:
    """
    `n` synthetic samples decoded from latent mixes of random same-class pairs of
    `dataset`; each keeps the shared label and records its first source as parent.
    """
    if dataset.labels is None:
        raise ConfigError("latent mixup augmentation needs labels", "dataset")
    if n < 1:
        raise ConfigError("n must be positive", "n")
    rng = make_rng(spec.seed)
    labels = dataset.labels.numpy()
    classes = [c for c in range(dataset.num_classes) if (labels == c).sum() >= 1]
    first, second, lams, out_labels = [], [], [], []
    for _ in range(n):
        c = classes[rng.integers(len(classes))]
        members = np.flatnonzero(labels == c)
        i, j = rng.choice(members, 2, replace=len(members) < 2)
        first.append(i)
        second.append(j)
        lams.append(sample_lambda(spec, rng))
        out_labels.append(c)
    first, second = np.array(first), np.array(second)
    x1 = dataset.samples[torch.as_tensor(first)]
    x2 = dataset.samples[torch.as_tensor(second)]
    lam = torch.tensor(lams, dtype=x1.dtype)
    net = getattr(vae, "net", vae)
    with torch.no_grad():
        was_training = net.training
        net.eval()
        z = lam.view(-1, 1) * _latent_mean(net, x1) + (1 - lam.view(-1, 1)) * _latent_mean(net, x2)
        samples = net.decode(z)
        net.train(was_training)
    return Dataset(
        samples=samples.clamp(0, 1),
        labels=torch.as_tensor(out_labels),
        ids=np.array([f"vmix{spec.seed}-{i:06d}" for i in range(n)]),
        num_classes=dataset.num_classes,
        parents=dataset.root_ids()[first],
        name=f"{dataset.name}-vmix",
    )
