import json
import logging
import os
import pickle
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pytorch_lightning as pl
import torch
import torch.nn.functional as F
from pytorch_lightning import LightningModule
from pytorch_lightning.loggers import CSVLogger
from torch import Tensor

from .data import Dataset, make_ids
from .dataset import DataModule
from .errors import (
    ConfigError,
    ConsistencyError,
    DegenerateTaskError,
    EmptyDatasetError,
    FormatError,
    InputError,
)
from .mixup import (
    MixupSpec,
    feature_mixup_batch,
    mix_batch,
    one_hot,
    sample_lambda,
    seeded_permutation,
    soft_cross_entropy,
)
from .networks import (
    Autoencoder,
    FusedHead,
    TappedClassifier,
    VariationalAutoencoder,
    ZeroRepresentation,
    build_classifier,
    kl_to_standard_normal,
)
from .optim import configure_optimizer, penalty_in_loss
from .utils import make_rng, to_jsonable

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
CONFIDENCE_METRICS = ("max_prob", "neg_entropy")

PRESETS = {
    "default": {"learning_rate": 1e-3},
    # the learning rate stated alongside Adam for the published wafer runs
    "high_lr": {"learning_rate": 0.1},
}


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    dropout: float = 0.2
    batch_size: int = 64
    epochs: int = 10
    opt: str = "adam"
    momentum: float = 0.9
    seed: int = 0
    architecture: str = "auto"
    mixup: MixupSpec = field(default_factory=MixupSpec)
    zero_init_head: bool = False
    deterministic: bool = True
    logdir: Optional[str] = None
    preset: str = "default"

    def __post_init__(self):
        if isinstance(self.mixup, dict):
            object.__setattr__(self, "mixup", MixupSpec(**self.mixup))
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", "training.learning_rate")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative", "training.weight_decay")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)", "training.dropout")
        if self.batch_size != -1 and self.batch_size < 1:
            raise ConfigError("batch_size must be positive (or -1 for full batch)", "training.batch_size")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive", "training.epochs")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {list(PRESETS)}", "training.preset")

    @classmethod
    def from_preset(cls, name: str = "default", **overrides) -> "TrainingConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; expected one of {list(PRESETS)}", "training.preset")
        return cls(**{**PRESETS[name], **overrides, "preset": name})

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["mixup"] = self.mixup.to_dict()
        return d


@dataclass
class Embedding:
    """Rows of features, the ids of the samples they came from, and where they were tapped."""

    matrix: Tensor
    ids: np.ndarray
    source: str
    layer: str

    def __post_init__(self):
        self.matrix = torch.as_tensor(self.matrix, dtype=torch.float32)
        self.ids = np.asarray(self.ids).astype(str)
        if self.matrix.dim() != 2:
            raise InputError(f"embedding must be (n, d), got {tuple(self.matrix.shape)}", "matrix")
        if self.matrix.shape[0] != len(self.ids):
            raise ConsistencyError(f"{len(self.ids)} ids for {self.matrix.shape[0]} rows", "ids")
        if not torch.isfinite(self.matrix).all():
            raise InputError("embedding has non-finite values", "matrix")

    def __len__(self):
        return self.matrix.shape[0]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]


################################
# lightning modules

class _Trainable(LightningModule):
    """Shared optimizer / penalty / epoch bookkeeping."""

    def __init__(self, net, config: TrainingConfig, data_size: int = 0):
        super().__init__()
        self.net = net
        self.config = config
        self.data_size = data_size
        self.history: Dict[str, List[float]] = {}
        self.notes: List[str] = []
        self.save_hyperparameters(config.to_dict())

    def trainable_parameters(self):
        return [p for p in self.net.parameters() if p.requires_grad]

    def l2_penalty(self, net=None) -> Tensor:
        """1/2 * lambda * sum(theta^2) over trainable parameters of `net` (default: this model's)."""
        net = self.net if net is None else net
        if self.config.weight_decay == 0 or not penalty_in_loss(self.config.opt):
            return torch.zeros((), device=self.device)
        return 0.5 * self.config.weight_decay * sum(p.pow(2).sum() for p in net.parameters() if p.requires_grad)

    def configure_optimizers(self):
        """
        Used by pytorch_lighting

        :returns: the optimizer over the parameters that are not frozen
        """
        return configure_optimizer(
            self.trainable_parameters(),
            self.config.opt,
            lr=self.config.learning_rate,
            weight_decay=self.config.weight_decay,
            momentum=self.config.momentum,
        )

    def training_step(self, batch, batch_idx):
        """
        Used by pytorch_lightning
        Runs one forward training pass on one batch
        """
        logs = self._step(batch, train=True)
        coeff = float(batch["x"].shape[0]) / max(self.data_size, 1)
        output = {"loss": logs["loss"]}
        for k, v in logs.items():
            output[f"partial_train_{k}"] = coeff * v.detach()
        return output

    def training_epoch_end(self, outputs):
        """
        Used by pytorch_lightning
        Accumulates results of all forward training passes in this epoch
        """
        keys = [k for k in outputs[0] if k.startswith("partial_train_")]
        logs = {"train_epoch": self.current_epoch}
        for k in keys:
            logs["train_" + k[len("partial_train_"):]] = float(torch.stack([x[k] for x in outputs]).sum())
        for k, v in logs.items():
            if k != "train_epoch":
                self.history.setdefault(k, []).append(v)
            self.log(k, float(v))


class TrainableClassifier(_Trainable):
    """
    Adds training methods to a TappedClassifier: cross-entropy with the L2 penalty,
    optionally on Mixup batches (input, hidden layer, or VAE latent space).
    """

    def __init__(self, net: TappedClassifier, config: TrainingConfig, architecture: str, data_size: int = 0,
                 latent_mixer=None, net_kwargs: Dict = None):
        super().__init__(net, config, data_size)
        self.architecture = architecture
        self.net_kwargs = net_kwargs or {}
        self.mix_rng = make_rng([config.seed, config.mixup.seed])
        # a tuple keeps the VAE out of this module's parameters
        self._latent_mixer = (latent_mixer,) if latent_mixer is not None else ()

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    @property
    def layer_names(self) -> List[str]:
        return list(self.net.layer_names)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)

    def objective(self, x: Tensor, y: Tensor, noise: Tensor = None, net=None) -> Tensor:
        """Unmixed training loss; `net` substitutes a copy of the network (gradient checks)."""
        net = self.net if net is None else net
        logits = net(x)
        loss = F.cross_entropy(logits, y) if y.dim() == 1 else soft_cross_entropy(logits, y)
        return loss + self.l2_penalty(net)

    def _mixed(self, x: Tensor, y: Tensor):
        spec = self.config.mixup
        if spec.mode == "off" or x.shape[0] < 2:
            return None
        if spec.mode == "vae_latent":
            lam = sample_lambda(spec, self.mix_rng)
            perm = seeded_permutation(x.shape[0], self.mix_rng)
            vae = self._latent_mixer[0]
            with torch.no_grad():
                vae.eval()
                mu = vae.encode(x)
                mu = mu[0] if isinstance(mu, tuple) else mu
                z, y_mix = mix_batch(mu, one_hot(y, self.num_classes).to(x.dtype), lam, perm)
                x_mix = vae.decode(z)
            return self.net(x_mix), y_mix
        h_mix, y_mix, _, _ = feature_mixup_batch(self.net, spec.tap, x, y, spec, self.mix_rng, self.num_classes)
        return self.net.forward_from(h_mix, spec.tap), y_mix

    def _step(self, batch: Dict, train: bool = False) -> Dict[str, Tensor]:
        x, y = batch["x"], batch["y"]
        mixed = self._mixed(x, y) if train else None
        if mixed is None:
            logits = self.net(x)
            loss = F.cross_entropy(logits, y)
            target = y
        else:
            logits, y_mix = mixed
            loss = soft_cross_entropy(logits, y_mix)
            target = y_mix.argmax(dim=1)
        loss = loss + self.l2_penalty()
        with torch.no_grad():
            acc = (logits.argmax(dim=1) == target).float().mean()
        return {"loss": loss, "accuracy": acc}


class TrainableRepresentation(_Trainable):
    """Autoencoder (MSE) or VAE (summed squared error + KL to N(0, I))."""

    def __init__(self, net, config: TrainingConfig, data_size: int = 0, net_kwargs: Dict = None):
        super().__init__(net, config, data_size)
        self.net_kwargs = net_kwargs or {}

    @property
    def kind(self) -> str:
        return self.net.kind

    @property
    def latent_dim(self) -> int:
        return self.net.latent_dim

    @property
    def architecture(self) -> str:
        return self.net.kind

    def encode(self, x: Tensor):
        return self.net.encode(x)

    def decode(self, z: Tensor) -> Tensor:
        return self.net.decode(z)

    def forward(self, x: Tensor) -> Tensor:
        out = self.net(x)
        return out[0] if isinstance(out, tuple) else out

    def objective(self, x: Tensor, y: Tensor = None, noise: Tensor = None, net=None) -> Tensor:
        net = self.net if net is None else net
        return self._losses(x, noise, net)["loss"] + self.l2_penalty(net)

    def _losses(self, x: Tensor, noise: Tensor = None, net=None) -> Dict[str, Tensor]:
        net = self.net if net is None else net
        if self.kind == "vae":
            recon, mu, logvar = net(x, noise)
            rec = (recon - x).pow(2).flatten(1).sum(dim=1).mean()
            kl = kl_to_standard_normal(mu, logvar)
            return {"loss": rec + kl, "recon_loss": rec, "kl": kl}
        recon = net(x)
        rec = F.mse_loss(recon, x)
        return {"loss": rec, "recon_loss": rec}

    def _step(self, batch: Dict, train: bool = False) -> Dict[str, Tensor]:
        logs = self._losses(batch["x"])
        logs["loss"] = logs["loss"] + self.l2_penalty()
        return logs


################################
# training

def make_trainer(config: TrainingConfig, name: str) -> pl.Trainer:
    trainer_args = {
        "max_epochs": config.epochs,
        "accelerator": "cpu",
        "devices": 1,
        "deterministic": config.deterministic,
        "enable_checkpointing": False,
        "enable_progress_bar": False,
        "enable_model_summary": False,
        "limit_val_batches": 0,
        "num_sanity_val_steps": 0,
        "log_every_n_steps": 1,
        "logger": CSVLogger(config.logdir, name=name) if config.logdir else False,
    }
    return pl.Trainer(**trainer_args)


def _fit(module: _Trainable, samples: Tensor, targets: Optional[Tensor], config: TrainingConfig, name: str):
    data_module = DataModule(samples, targets, config.batch_size, config.seed)
    module.data_size = len(samples)
    trainer = make_trainer(config, name)
    trainer.fit(module, datamodule=data_module)
    module.eval()
    logger.debug("%s: %d epochs, final loss %.4f", name, config.epochs, module.history.get("train_loss", [float("nan")])[-1])
    return module


def _check_task(labels: Tensor) -> None:
    if labels is None:
        raise DegenerateTaskError("training a classifier needs labels", "labels")
    if len(labels) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset", "data")
    if len(torch.unique(labels)) < 2:
        raise DegenerateTaskError("fewer than 2 distinct labels present", "labels")


def train_classifier(data: Dataset, config: TrainingConfig, vae=None, name: str = "classifier") -> TrainableClassifier:
    """
    Train a classifier from scratch on `data`. Rows are put in id order before batching,
    so the result depends on the sample set and the seed, not on the input order.
    """
    _check_task(data.labels)
    if config.mixup.mode == "vae_latent" and vae is None:
        raise ConfigError("vae_latent mixup needs a trained VAE", "mixup.mode")
    pl.seed_everything(config.seed, workers=True)
    order = torch.as_tensor(np.argsort(data.ids, kind="stable"))
    net = build_classifier(
        config.architecture, data.sample_shape, data.num_classes, config.dropout, zero_init_head=config.zero_init_head
    )
    architecture = config.architecture
    if architecture == "auto":
        architecture = "small_cnn" if data.is_image else "mlp"
    if config.mixup.tap is not None:
        net._layer_index(config.mixup.tap)
    latent_mixer = getattr(vae, "net", vae)
    module = TrainableClassifier(net, config, architecture, latent_mixer=latent_mixer)
    return _fit(module, data.samples[order], data.labels[order], config, name)


def _warn_latent(data: Dataset, latent_dim: int, notes: List[str]) -> None:
    input_dim = int(np.prod(data.sample_shape))
    if latent_dim >= input_dim:
        msg = f"latent_dim={latent_dim} >= input dimension {input_dim}; the bottleneck does not compress"
        warnings.warn(msg)
        logger.warning(msg)
        notes.append(msg)


@torch.no_grad()
def reconstruction_error(model: TrainableRepresentation, samples: Tensor) -> float:
    """Mean squared reconstruction error with the encoder mean (no sampling)."""
    net = model.net
    net.eval()
    z = model.encode(samples)
    z = z[0] if isinstance(z, tuple) else z
    return float(F.mse_loss(net.decode(z), samples))


def _train_representation(net, data: Dataset, latent_dim: int, config: TrainingConfig, name: str, net_kwargs: Dict):
    if len(data) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset", "data")
    order = torch.as_tensor(np.argsort(data.ids, kind="stable"))
    module = TrainableRepresentation(net, config, net_kwargs=net_kwargs)
    _warn_latent(data, latent_dim, module.notes)
    samples = data.samples[order]
    module.history["initial_mse"] = [reconstruction_error(module, samples)]
    net.train()
    _fit(module, samples, None, config, name)
    module.history["final_mse"] = [reconstruction_error(module, samples)]
    return module


def train_autoencoder(data: Dataset, latent_dim: int, config: TrainingConfig, hidden=(256, 128)) -> TrainableRepresentation:
    """Labels are ignored."""
    if latent_dim < 1:
        raise ConfigError("latent_dim must be positive", "latent_dim")
    pl.seed_everything(config.seed, workers=True)
    net = Autoencoder(data.sample_shape, latent_dim, hidden=hidden)
    return _train_representation(net, data, latent_dim, config, "autoencoder", {"hidden": list(hidden)})


def train_vae(data: Dataset, latent_dim: int, config: TrainingConfig, hidden=(256, 128)) -> TrainableRepresentation:
    if latent_dim < 1:
        raise ConfigError("latent_dim must be positive", "latent_dim")
    pl.seed_everything(config.seed, workers=True)
    net = VariationalAutoencoder(data.sample_shape, latent_dim, hidden=hidden)
    return _train_representation(net, data, latent_dim, config, "vae", {"hidden": list(hidden)})


def zero_representation(input_shape=()) -> TrainableRepresentation:
    """Zero-width M_u for runs without self-supervision."""
    return TrainableRepresentation(ZeroRepresentation(input_shape), TrainingConfig())


def train_representation(kind: str, data: Dataset, latent_dim: int, config: TrainingConfig) -> TrainableRepresentation:
    if kind == "autoencoder":
        return train_autoencoder(data, latent_dim, config)
    if kind == "vae":
        return train_vae(data, latent_dim, config)
    if kind == "none":
        return zero_representation(data.sample_shape)
    raise ConfigError(f"unknown representation {kind!r}", "use_representation")


################################
# inference

def _as_samples(samples) -> Tensor:
    if isinstance(samples, Dataset):
        return samples.samples
    if isinstance(samples, Embedding):
        return samples.matrix
    return torch.as_tensor(samples, dtype=torch.float32)


@torch.no_grad()
def predict_proba(model: TrainableClassifier, samples, batch_size: int = 1024) -> Tensor:
    """(n, num_classes) float64 probabilities, dropout disabled."""
    x = _as_samples(samples)
    net = model.net
    net.check_input(x)
    net.eval()
    out = [F.log_softmax(net(x[i : i + batch_size]).double(), dim=1).exp() for i in range(0, len(x), batch_size)]
    if not out:
        return torch.zeros((0, net.num_classes), dtype=torch.float64)
    return torch.cat(out)


@torch.no_grad()
def embed(model, samples, layer: str = None, ids: Sequence[str] = None, batch_size: int = 1024) -> Embedding:
    """
    Classifier: activations at `layer` (default `flatten`), flattened per sample.
    Autoencoder / VAE: the encoder output (VAE: the mean vector).
    """
    x = _as_samples(samples)
    if ids is None:
        ids = samples.ids if isinstance(samples, (Dataset, Embedding)) else make_ids("row", len(x))
    net = model.net
    net.eval()
    if isinstance(model, TrainableClassifier):
        layer = layer or "flatten"
        net._layer_index(layer)
        net.check_input(x)
        chunks = [net.forward_to(x[i : i + batch_size], layer).flatten(1) for i in range(0, len(x), batch_size)]
        matrix = torch.cat(chunks) if chunks else x.new_zeros((0, 0))
        return Embedding(matrix, ids, model.architecture, layer)
    if layer not in (None, "encoder", "latent"):
        raise ConfigError(f"unknown layer {layer!r} for a {model.kind}; expected 'encoder'", "layer")
    if model.kind != "none" and tuple(x.shape[1:]) != net.input_shape:
        raise InputError(f"expected samples of shape {net.input_shape}, got {tuple(x.shape[1:])}", "samples")
    return Embedding(net.embed(x), ids, model.kind, "encoder")


def concat_embeddings(e_l: Embedding, e_u: Embedding) -> Embedding:
    """W = [E_l | E_u]; both must list the same samples in the same order."""
    if len(e_l) != len(e_u):
        raise ConsistencyError(f"row counts differ: {len(e_l)} vs {len(e_u)}", "embedding")
    if not np.array_equal(e_l.ids, e_u.ids):
        raise ConsistencyError("embeddings list samples in a different order", "embedding.ids")
    return Embedding(torch.cat([e_l.matrix, e_u.matrix], dim=1), e_l.ids, f"{e_l.source}+{e_u.source}", "concat")


def train_head(w: Embedding, labels, config: TrainingConfig, num_classes: int = None, hidden: int = 64,
               name: str = "head") -> TrainableClassifier:
    """
    MLP head on fixed embeddings. The models that produced `w` are not touched; only
    the head's own parameters are optimized. Rows are put in id order before batching.
    """
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if len(labels) != len(w):
        raise ConsistencyError(f"{len(labels)} labels for {len(w)} embedding rows", "labels")
    if w.width == 0:
        raise InputError("the head needs a non-empty embedding", "w")
    _check_task(labels)
    num_classes = num_classes or int(labels.max()) + 1
    config = replace(config, mixup=MixupSpec())
    pl.seed_everything(config.seed, workers=True)
    order = torch.as_tensor(np.argsort(w.ids, kind="stable"))
    net = FusedHead(w.width, num_classes, dropout=config.dropout, hidden=hidden, zero_init_head=config.zero_init_head)
    module = TrainableClassifier(net, config, "head", net_kwargs={"hidden": hidden})
    return _fit(module, w.matrix.detach()[order], labels[order], config, name)


def score_confidence(proba, metric: str = "max_prob") -> Tensor:
    """max_prob: row maximum. neg_entropy: sum_c p_c log p_c (0 log 0 = 0). Higher is more confident."""
    p = torch.as_tensor(proba, dtype=torch.float64)
    if p.dim() != 2:
        raise InputError(f"probabilities must be (n, C), got {tuple(p.shape)}", "proba")
    if metric not in CONFIDENCE_METRICS:
        raise ConfigError(f"unknown confidence metric {metric!r}; expected one of {CONFIDENCE_METRICS}", "confidence_metric")
    if len(p) and ((p < 0).any() or ((p.sum(dim=1) - 1).abs() > 1e-4).any()):
        raise InputError("probability rows must be non-negative and sum to 1 within 1e-4", "proba")
    if metric == "max_prob":
        return p.max(dim=1).values
    return torch.xlogy(p, p).sum(dim=1)


def accuracy(model: TrainableClassifier, dataset: Dataset) -> float:
    if dataset.labels is None or len(dataset) == 0:
        raise ConfigError("accuracy needs a non-empty labelled dataset", "dataset")
    pred = predict_proba(model, dataset).argmax(dim=1)
    return float((pred == dataset.labels).double().mean())


################################
# checkpoints

def save_checkpoint(model: _Trainable, path: str, extra: Dict = None) -> None:
    """Named parameter tensors plus a JSON header (architecture, config, seed, history)."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": model.architecture,
        "input_shape": list(model.net.input_shape),
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "history": model.history,
        "net_kwargs": model.net_kwargs,
        "extra": extra or {},
    }
    if isinstance(model, TrainableClassifier):
        header.update(kind="classifier", num_classes=model.num_classes)
    else:
        header.update(kind=model.kind, latent_dim=model.latent_dim)
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    torch.save({"header": json.dumps(to_jsonable(header), sort_keys=True), "state_dict": model.net.state_dict()}, path)


def read_checkpoint_header(path: str) -> Dict[str, Any]:
    try:
        payload = torch.load(path, map_location="cpu")
        header = json.loads(payload["header"])
    except (OSError, EOFError, KeyError, TypeError, ValueError, RuntimeError, pickle.UnpicklingError) as e:
        raise FormatError(f"{path}: not a checkpoint ({e})", "path") from e
    version = header.get("format_version")
    if not isinstance(version, int) or version > CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format version {version!r}", "path")
    return header


def load_checkpoint(path: str) -> _Trainable:
    header = read_checkpoint_header(path)
    state_dict = torch.load(path, map_location="cpu")["state_dict"]
    config = TrainingConfig(**header["config"])
    input_shape = tuple(header["input_shape"])
    kwargs = header.get("net_kwargs", {})
    kind = header["kind"]
    if kind == "classifier":
        if header["architecture"] == "head":
            net = FusedHead(input_shape[0], header["num_classes"], dropout=config.dropout, **kwargs)
        else:
            net = build_classifier(header["architecture"], input_shape, header["num_classes"], config.dropout)
        model = TrainableClassifier(net, config, header["architecture"], net_kwargs=kwargs)
    elif kind == "autoencoder":
        model = TrainableRepresentation(Autoencoder(input_shape, header["latent_dim"], **kwargs), config, net_kwargs=kwargs)
    elif kind == "vae":
        net = VariationalAutoencoder(input_shape, header["latent_dim"], **kwargs)
        model = TrainableRepresentation(net, config, net_kwargs=kwargs)
    elif kind == "none":
        model = zero_representation(input_shape)
    else:
        raise FormatError(f"{path}: unknown model kind {kind!r}", "path")
    model.net.load_state_dict(state_dict)
    model.history = header.get("history", {})
    model.eval()
    return model
