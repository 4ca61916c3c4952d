"""The six networks: two residual generators, two patch discriminators and two
CNN + BiLSTM text recognizers.

Default widths reproduce the published budgets (about 11.4M, 2.8M and 8.2M
parameters); every network takes a width knob so tests and desk-scale runs can
use tiny variants of the same topology.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from typing import Optional

import torch
import torch.nn as nn

from .ctc import Alphabet

# recognizer channel plan at width 64; 2x2 pools after conv 2 and 4, height-only after 6, 8, 10
RECOGNIZER_PLAN = (64, 64, 128, 128, 256, 256, 256, 384, 384, 384)
_POOL_AFTER = {1: (2, 2), 3: (2, 2), 5: (2, 1), 7: (2, 1), 9: (2, 1)}


@dataclass
class NetConfig:
    gen_width: int = 64
    gen_blocks: int = 9
    disc_width: int = 64
    rec_width: int = 64
    rec_hidden: int = 256
    channels: int = 3

    @classmethod
    def tiny(cls) -> "NetConfig":
        return cls(gen_width=8, gen_blocks=2, disc_width=8, rec_width=16, rec_hidden=64)


def _check(x: torch.Tensor, channels: int, hw: Optional[tuple] = None, multiple: int = 1, name: str = "net"):
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValueError(f"{name} expects (N, {channels}, H, W) input, got {tuple(x.shape)}")
    if hw is not None and tuple(x.shape[2:]) != hw:
        raise ValueError(f"{name} expects spatial size {hw}, got {tuple(x.shape[2:])}")
    if x.shape[2] % multiple or x.shape[3] % multiple:
        raise ValueError(f"{name} needs H and W divisible by {multiple}, got {tuple(x.shape[2:])}")


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Residual image translation network: 7x7 stem, two stride-2 downsamplings,
    residual blocks, two transposed-conv upsamplings and a 7x7 head mapped to [0, 1]."""

    def __init__(self, channels: int = 3, width: int = 64, blocks: int = 9):
        super().__init__()
        self.channels = channels
        w = width
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(channels, w, 7), nn.InstanceNorm2d(w), nn.ReLU(True)]
        for m in (1, 2):
            layers += [nn.Conv2d(w * m, w * m * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(w * m * 2), nn.ReLU(True)]
        layers += [ResidualBlock(w * 4) for _ in range(blocks)]
        for m in (4, 2):
            layers += [nn.ConvTranspose2d(w * m, w * m // 2, 3, stride=2, padding=1, output_padding=1),
                       nn.InstanceNorm2d(w * m // 2), nn.ReLU(True)]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        _check(x, self.channels, multiple=4, name="generator")
        return (self.model(x) + 1.0) * 0.5


class PatchDiscriminator(nn.Module):
    """70x70 patch discriminator: three stride-2 and two stride-1 4x4 convolutions.
    A 256x256 input yields a 30x30 map of unbounded real/fake scores."""

    def __init__(self, channels: int = 3, width: int = 64):
        super().__init__()
        self.channels = channels
        w = width
        self.model = nn.Sequential(
            nn.Conv2d(channels, w, 4, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(w, w * 2, 4, 2, 1), nn.InstanceNorm2d(w * 2), nn.LeakyReLU(0.2, True),
            nn.Conv2d(w * 2, w * 4, 4, 2, 1), nn.InstanceNorm2d(w * 4), nn.LeakyReLU(0.2, True),
            nn.Conv2d(w * 4, w * 8, 4, 1, 1), nn.InstanceNorm2d(w * 8), nn.LeakyReLU(0.2, True),
            nn.Conv2d(w * 8, 1, 4, 1, 1),
        )

    def forward(self, x):
        _check(x, self.channels, name="discriminator")
        return self.model(x)


def patch_output_size(size: int) -> int:
    """Score-map side length for a square input, by stride arithmetic."""
    for stride in (2, 2, 2, 1, 1):
        size = (size + 2 - 4) // stride + 1
    return size


def receptive_field() -> int:
    rf, jump = 1, 1
    for stride in (2, 2, 2, 1, 1):
        rf += 3 * jump
        jump *= stride
    return rf


class TextRecognizer(nn.Module):
    """Ten conv+BN layers collapsing a 1x32x128 crop to 32 frames, followed by
    a two-layer bidirectional LSTM and a per-frame linear classifier."""

    def __init__(self, num_classes: int, width: int = 64, hidden: int = 256):
        super().__init__()
        chans = [max(1, c * width // 64) for c in RECOGNIZER_PLAN]
        layers = []
        prev = 1
        for i, c in enumerate(chans):
            layers += [nn.Conv2d(prev, c, 3, padding=1, bias=False), nn.BatchNorm2d(c), nn.ReLU(True)]
            if i in _POOL_AFTER:
                layers.append(nn.MaxPool2d(_POOL_AFTER[i]))
            prev = c
        self.features = nn.Sequential(*layers)
        self.rnn = nn.LSTM(prev, hidden, num_layers=2, bidirectional=True, batch_first=True)
        self.classifier = nn.Linear(2 * hidden, num_classes)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    def forward(self, x):
        _check(x, 1, hw=(32, 128), name="recognizer")
        f = self.features(x)  # (N, C, 1, 32)
        f = f.squeeze(2).transpose(1, 2)
        out, _ = self.rnn(f)
        return self.classifier(out)  # (N, 32, classes)

    def extend_classes(self, num_classes: int, generator: Optional[torch.Generator] = None):
        """Grow the classifier to ``num_classes`` rows, keeping existing rows."""
        old = self.classifier
        if num_classes < old.out_features:
            raise ValueError("cannot shrink the output layer")
        if num_classes == old.out_features:
            return
        new = nn.Linear(old.in_features, num_classes)
        bound = 1.0 / old.in_features ** 0.5
        with torch.no_grad():
            new.weight.uniform_(-bound, bound, generator=generator)
            new.bias.uniform_(-bound, bound, generator=generator)
            new.weight[: old.out_features] = old.weight
            new.bias[: old.out_features] = old.bias
        self.classifier = new


def init_gan_weights(net: nn.Module, gain: float = 0.02):
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


NETWORK_NAMES = ("G", "F", "D_x", "D_y", "T", "T_prime")


@dataclass
class ModelBundle:
    G: Generator
    F: Generator
    D_x: PatchDiscriminator
    D_y: PatchDiscriminator
    T: TextRecognizer
    T_prime: TextRecognizer
    alphabet: Alphabet
    config: NetConfig = field(default_factory=NetConfig)

    def networks(self) -> dict:
        return {name: getattr(self, name) for name in NETWORK_NAMES}

    def state(self) -> dict:
        return {name: net.state_dict() for name, net in self.networks().items()}

    def load_state(self, state: dict):
        for name, net in self.networks().items():
            net.load_state_dict(state[name])

    def train(self, mode: bool = True):
        for net in self.networks().values():
            net.train(mode)
        return self


def build_bundle(alphabet: Alphabet, config: Optional[NetConfig] = None, seed: int = 0) -> ModelBundle:
    config = config or NetConfig()
    torch.manual_seed(seed)
    c = config
    G = Generator(c.channels, c.gen_width, c.gen_blocks)
    F = Generator(c.channels, c.gen_width, c.gen_blocks)
    D_x = PatchDiscriminator(c.channels, c.disc_width)
    D_y = PatchDiscriminator(c.channels, c.disc_width)
    for net in (G, F, D_x, D_y):
        init_gan_weights(net)
    T = TextRecognizer(len(alphabet), c.rec_width, c.rec_hidden)
    T_prime = TextRecognizer(len(alphabet), c.rec_width, c.rec_hidden)
    return ModelBundle(G, F, D_x, D_y, T, T_prime, alphabet, config)


def _unbatched(net, image, channels):
    squeeze = image.dim() == 3
    x = image[None] if squeeze else image
    y = net(x)
    return y[0] if squeeze else y


def generator_forward(net: Generator, image: torch.Tensor) -> torch.Tensor:
    return _unbatched(net, image, 3)


def discriminator_forward(net: PatchDiscriminator, image: torch.Tensor) -> torch.Tensor:
    return _unbatched(net, image, 3)


def recognizer_forward(net: TextRecognizer, crop: torch.Tensor) -> torch.Tensor:
    return _unbatched(net, crop, 1)


def config_dict(config: NetConfig) -> dict:
    return asdict(config)
