import math
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, InputError

non_linearities = {"relu": nn.ReLU, "gelu": nn.GELU, "lrelu": nn.LeakyReLU}

CNN_LAYERS = ["input", "conv1", "conv2", "conv3", "flatten"]
MLP_LAYERS = ["input", "fc1", "fc2", "flatten"]


class Linear2(nn.Module):
    """linear layer followed by an optional activation"""
    def __init__(self, in_features, out_features, bias = True, activation_function = None):
        super(Linear2, self).__init__()
        self.linear = nn.Linear(in_features, out_features, bias = bias)
        self.activation_function = activation_function if activation_function else nn.Identity()
    def forward(self, x):
        return self.activation_function(self.linear(x))


class MLP(nn.Module):
    """Multi-layer perceptron"""
    def __init__(self, in_features, hidden_features, hidden_layers, out_features, activation_function = nn.ReLU, tail = None):
        super(MLP, self).__init__()
        if hidden_layers == 0 :
            net = [Linear2(in_features, out_features, True, None)]
        else :
            net = [Linear2(in_features, hidden_features, True, activation_function())]
            net += [Linear2(hidden_features, hidden_features, True, activation_function()) for _ in range(hidden_layers-1)]
            net.append(Linear2(hidden_features, out_features, True, None))
        if tail is not None :
            net.append(tail)
        self.net = nn.Sequential(*net)
        self.hidden_layers = hidden_layers

    def forward(self, x):
        return self.net(x)


################################
# classifiers with named taps

class TappedClassifier(nn.Module):
    """
    A classifier written as named stages. The activation at layer `name` is the
    output of every stage up to and including it; `input` is the raw batch.
    """

    layer_names: List[str] = []

    def __init__(self, input_shape: Sequence[int], num_classes: int, dropout: float):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.dropout = nn.Dropout(dropout)

    def _finish(self, zero_init_head: bool):
        # eval mode so the shape probe leaves batch-norm statistics untouched
        self.eval()
        with torch.no_grad():
            flat = self.forward_to(torch.zeros(1, *self.input_shape), "flatten")
        self.train()
        self.flatten_dim = flat.shape[1]
        self.head = nn.Linear(self.flatten_dim, self.num_classes)
        if zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def _layer_index(self, layer: str) -> int:
        if layer not in self.layer_names:
            raise ConfigError(f"unknown layer {layer!r}; expected one of {self.layer_names}", "layer")
        return self.layer_names.index(layer)

    def check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise InputError(f"expected samples of shape {self.input_shape}, got {tuple(x.shape[1:])}", "samples")

    def forward_to(self, x: Tensor, layer: str) -> Tensor:
        stop = self._layer_index(layer)
        for stage in self.stages[:stop]:
            x = stage(x)
        return x

    def forward_from(self, h: Tensor, layer: str) -> Tensor:
        start = self._layer_index(layer)
        for stage in self.stages[start:]:
            h = stage(h)
        return self.head(self.dropout(h))

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_from(x, "input")


def conv_block(c_in: int, c_out: int, non_linearity: str = "relu") -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, padding=1), non_linearities[non_linearity](), nn.MaxPool2d(2))


class SmallCNN(TappedClassifier):
    """
    Three conv blocks (16/32/64 channels, 3x3 conv, ReLU, 2x2 max-pool), flatten,
    dropout, linear. On (1, 32, 32) input the flatten layer has 64*4*4 = 1024 units.
    """

    layer_names = CNN_LAYERS

    def __init__(self, input_shape, num_classes, dropout=0.2, channels=(16, 32, 64), zero_init_head=False):
        super().__init__(input_shape, num_classes, dropout)
        c = [input_shape[0]] + list(channels)
        self.stages = nn.ModuleList(
            [conv_block(c[0], c[1]), conv_block(c[1], c[2]), conv_block(c[2], c[3]), nn.Flatten()]
        )
        self._finish(zero_init_head)


class SignalMLP(TappedClassifier):
    """Three-layer MLP for 1-D signals; `flatten` aliases the last hidden layer."""

    layer_names = MLP_LAYERS

    def __init__(self, input_shape, num_classes, dropout=0.2, hidden=(128, 64), zero_init_head=False):
        super().__init__(input_shape, num_classes, dropout)
        d = int(math.prod(input_shape))
        self.stages = nn.ModuleList(
            [
                nn.Sequential(nn.Flatten(), Linear2(d, hidden[0], True, nn.ReLU())),
                Linear2(hidden[0], hidden[1], True, nn.ReLU()),
                nn.Identity(),
            ]
        )
        self._finish(zero_init_head)


class WideBasic(nn.Module):
    def __init__(self, c_in, c_out, stride, dropout):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.drop = nn.Dropout(dropout)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(out)
        out = self.conv1(out)
        out = self.conv2(self.drop(F.relu(self.bn2(out))))
        return out + skip


class WideResNet(TappedClassifier):
    """Wide residual network (depth 6n+4); the conv1..conv3 taps are the three group outputs."""

    layer_names = CNN_LAYERS

    def __init__(self, input_shape, num_classes, dropout=0.2, depth=28, widen=2, zero_init_head=False):
        super().__init__(input_shape, num_classes, dropout)
        if (depth - 4) % 6:
            raise ConfigError("wide resnet depth must be 6n+4", "depth")
        n = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]

        def group(c_in, c_out, stride):
            blocks = [WideBasic(c_in, c_out, stride, dropout)]
            blocks += [WideBasic(c_out, c_out, 1, dropout) for _ in range(n - 1)]
            return nn.Sequential(*blocks)

        self.stages = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(input_shape[0], widths[0], 3, padding=1, bias=False), group(widths[0], widths[1], 1)),
                group(widths[1], widths[2], 2),
                group(widths[2], widths[3], 2),
                nn.Sequential(nn.BatchNorm2d(widths[3]), nn.ReLU(), nn.AdaptiveAvgPool2d(1), nn.Flatten()),
            ]
        )
        self._finish(zero_init_head)


class FusedHead(TappedClassifier):
    """MLP head over a concatenated embedding W."""

    layer_names = ["input", "hidden", "flatten"]

    def __init__(self, in_features, num_classes, dropout=0.2, hidden=64, zero_init_head=False):
        if in_features < 1:
            raise InputError("the head needs a non-empty embedding", "w")
        super().__init__((in_features,), num_classes, dropout)
        self.stages = nn.ModuleList([Linear2(in_features, hidden, True, nn.ReLU()), nn.Identity()])
        self._finish(zero_init_head)


ARCHITECTURES = {
    "small_cnn": SmallCNN,
    "mlp": SignalMLP,
    "wide_resnet": WideResNet,
}


def build_classifier(architecture: str, input_shape, num_classes: int, dropout: float, **kwargs) -> TappedClassifier:
    if architecture == "auto":
        architecture = "small_cnn" if len(input_shape) == 3 else "mlp"
    if architecture not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {architecture!r}", "architecture")
    if architecture in ("small_cnn", "wide_resnet") and len(input_shape) != 3:
        raise ConfigError(f"{architecture} needs (C, H, W) inputs", "architecture")
    return ARCHITECTURES[architecture](input_shape, num_classes, dropout=dropout, **kwargs)


################################
# representation learners

class Autoencoder(nn.Module):
    """Fully connected encoder/decoder over flattened inputs; sigmoid output."""

    kind = "autoencoder"

    def __init__(self, input_shape, latent_dim, hidden=(256, 128)):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.latent_dim = latent_dim
        d = int(math.prod(input_shape))
        self.input_dim = d
        self.encoder = nn.Sequential(nn.Flatten(), MLP(d, hidden[0], 0, hidden[0]), nn.ReLU(),
                                     MLP(hidden[0], hidden[1], 1, latent_dim))
        self.decoder = nn.Sequential(MLP(latent_dim, hidden[1], 1, hidden[0]), nn.ReLU(),
                                     MLP(hidden[0], hidden[0], 0, d), nn.Sigmoid())

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z).view(-1, *self.input_shape)

    def embed(self, x: Tensor) -> Tensor:
        return self.encode(x)

    def forward(self, x):
        return self.decode(self.encode(x))


class VariationalAutoencoder(nn.Module):
    """
    Learns a normal distributed latent variable embedding from which it is easy to
    sample and decode. `encode` returns (mean, log-variance).
    """

    kind = "vae"

    def __init__(self, input_shape, latent_dim, hidden=(256, 128)):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.latent_dim = latent_dim
        d = int(math.prod(input_shape))
        self.input_dim = d
        self.enc = nn.Sequential(nn.Flatten(), MLP(d, hidden[0], 1, hidden[1]), nn.ReLU())
        self.enc_mu = nn.Linear(hidden[1], latent_dim)
        self.enc_logvar = nn.Linear(hidden[1], latent_dim)
        self.decoder = nn.Sequential(MLP(latent_dim, hidden[1], 1, hidden[0]), nn.ReLU(),
                                     MLP(hidden[0], hidden[0], 0, d), nn.Sigmoid())

    def reparameterize(self, mu: Tensor, logvar: Tensor, eps: Tensor = None) -> Tensor:
        """
        The sample from the standard normal is treated as a constant and shifted/scaled
        into the posterior; pass `eps` to pin it.
        """
        std = torch.exp(0.5 * logvar)
        if eps is None:
            eps = torch.randn_like(std)
        return mu + std * eps

    def encode(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        h = self.enc(x)
        return self.enc_mu(h), self.enc_logvar(h)

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z).view(-1, *self.input_shape)

    def embed(self, x: Tensor) -> Tensor:
        return self.encode(x)[0]

    def forward(self, x, eps: Tensor = None):
        mu, logvar = self.encode(x)
        z = self.reparameterize(mu, logvar, eps)
        return self.decode(z), mu, logvar


class ZeroRepresentation(nn.Module):
    """Zero-width stand-in for M_u (self-supervised ablation)."""

    kind = "none"

    def __init__(self, input_shape=()):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.latent_dim = 0

    def embed(self, x: Tensor) -> Tensor:
        return x.new_zeros((x.shape[0], 0))

    def encode(self, x: Tensor) -> Tensor:
        return self.embed(x)


def kl_to_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, averaged over the batch."""
    return (-0.5 * (1 + logvar - mu.pow(2) - logvar.exp()).sum(dim=1)).mean()
