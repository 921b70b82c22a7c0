"""Generator (conditional U-Net with a bottleneck class head), critic and classifier."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import Tensor, nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ArchSpec:
    """Everything needed to rebuild a network triplet from its parameters."""

    num_classes: int
    in_channels: int = 1
    resolution: int = 128
    g_depth: int = 4
    g_width: int = 32
    d_depth: int = 4
    d_width: int = 32
    c_width: int = 32
    c_blocks: int = 3

    def __post_init__(self):
        if self.resolution % (2 ** max(self.g_depth, self.d_depth)):
            raise ValueError(
                f"resolution {self.resolution} not divisible by 2**depth "
                f"({self.g_depth=}, {self.d_depth=})")


def _check_onehot(z: Tensor, num_classes: int) -> None:
    if z.ndim != 2 or z.shape[1] != num_classes:
        raise ValueError(f"condition must be B x {num_classes}, got {tuple(z.shape)}")
    if not (((z == 0) | (z == 1)).all() and (z.sum(1) == 1).all()):
        raise ValueError("condition is not one-hot")


class Generator(nn.Module):
    """U-Net translating (image, one-hot class) to an image of the same shape.

    The class is broadcast to K constant channels concatenated to the input.
    A linear head on the pooled bottleneck gives the deep-supervision logits.
    """

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        k, c, w = spec.num_classes, spec.in_channels, spec.g_width
        widths = [w * 2 ** i for i in range(spec.g_depth)]

        self.down = nn.ModuleList()
        prev = c + k
        for ch in widths:
            self.down.append(nn.Sequential(
                nn.Conv2d(prev, ch, 4, 2, 1),
                nn.InstanceNorm2d(ch, affine=True),
                nn.LeakyReLU(0.2),
            ))
            prev = ch

        self.up = nn.ModuleList()
        for i in reversed(range(spec.g_depth)):
            out = widths[i - 1] if i > 0 else w
            self.up.append(nn.Sequential(
                nn.ConvTranspose2d(prev, out, 4, 2, 1),
                nn.InstanceNorm2d(out, affine=True),
                nn.ReLU(),
            ))
            # skip from the matching encoder level is concatenated before the next block
            prev = out + (widths[i - 1] if i > 0 else c)
        self.to_image = nn.Conv2d(prev, c, 3, 1, 1)
        self.head = nn.Linear(widths[-1], k)

    def encode(self, x: Tensor, z: Tensor | None = None) -> tuple[Tensor, list[Tensor]]:
        b, _, h, w = x.shape
        if z is None:
            cond = x.new_zeros(b, self.spec.num_classes, h, w)
        else:
            cond = z.to(x.dtype)[:, :, None, None].expand(-1, -1, h, w)
        out = torch.cat([x, cond], 1)
        skips = []
        for block in self.down:
            out = block(out)
            skips.append(out)
        return out, skips

    def classify_bottleneck(self, bottleneck: Tensor) -> Tensor:
        return self.head(bottleneck.mean((2, 3)))

    def encoder_classify(self, x: Tensor) -> Tensor:
        """Bottleneck-head logits; the class condition channels are zero."""
        bottleneck, _ = self.encode(x)
        return self.classify_bottleneck(bottleneck)

    def forward(self, x: Tensor, z: Tensor) -> Tensor:
        out, skips = self.encode(x, z)
        for i, block in enumerate(self.up):
            out = block(out)
            level = self.spec.g_depth - 2 - i
            out = torch.cat([out, skips[level] if level >= 0 else x], 1)
        return torch.tanh(self.to_image(out))

    def translate(self, x: Tensor, z: Tensor) -> Tensor:
        _check_onehot(z, self.spec.num_classes)
        return self(x, z)


class Discriminator(nn.Module):
    """Strided conv critic, no normalisation, with realism and class heads."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        layers, prev = [], spec.in_channels
        for i in range(spec.d_depth):
            ch = spec.d_width * 2 ** i
            layers += [nn.Conv2d(prev, ch, 4, 2, 1), nn.LeakyReLU(0.2)]
            prev = ch
        self.trunk = nn.Sequential(*layers)
        self.realism = nn.Linear(prev, 1)
        self.head = nn.Linear(prev, spec.num_classes)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        feat = self.trunk(x).mean((2, 3))
        return self.realism(feat).squeeze(1), self.head(feat)


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.shortcut = (nn.Identity() if stride == 1 and cin == cout
                         else nn.Conv2d(cin, cout, 1, stride, bias=False))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Classifier(nn.Module):
    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        w = spec.c_width
        self.stem = nn.Sequential(nn.Conv2d(spec.in_channels, w, 3, 1, 1), nn.ReLU())
        blocks, prev = [], w
        for i in range(spec.c_blocks):
            ch = w * 2 ** i
            blocks.append(_ResBlock(prev, ch, stride=2 if i > 0 else 1))
            prev = ch
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(prev, spec.num_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.blocks(self.stem(x)).mean((2, 3)))


class NetworkTriplet(nn.Module):
    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        self.generator = Generator(spec)
        self.discriminator = Discriminator(spec)
        self.classifier = Classifier(spec)

    @classmethod
    def build(cls, spec: ArchSpec, seed: int | None = None, dtype=torch.float32) -> NetworkTriplet:
        if seed is None:
            return cls(spec).to(dtype)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(spec).to(dtype)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("generator", "discriminator", "classifier"):
            torch.save({"arch": asdict(self.spec), "state_dict": getattr(self, name).state_dict()},
                       directory / f"{name}.pt")

    @classmethod
    def load(cls, directory, map_location="cpu") -> NetworkTriplet:
        directory = Path(directory)
        parts = {n: torch.load(directory / f"{n}.pt", map_location=map_location)
                 for n in ("generator", "discriminator", "classifier")}
        spec = ArchSpec(**parts["generator"]["arch"])
        net = cls(spec)
        for name, blob in parts.items():
            if ArchSpec(**blob["arch"]) != spec:
                raise ValueError(f"{name}.pt was saved with a different architecture")
            getattr(net, name).load_state_dict(blob["state_dict"])
        return net


def translate(G: Generator, image: Tensor, target: Tensor) -> Tensor:
    return G.translate(image, target)


def encoder_classify(G: Generator, image: Tensor) -> Tensor:
    return G.encoder_classify(image)


def discriminate(D: Discriminator, image: Tensor) -> tuple[Tensor, Tensor]:
    return D(image)


def classify(C: Classifier, image: Tensor) -> Tensor:
    return C(image)


def parameter_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, p in module.state_dict().items():
        digest.update(name.encode())
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
