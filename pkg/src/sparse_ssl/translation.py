"""Class-conditioned translation under WGAN-GP with cycle reconstruction,
plus the classifier step on translated images with known target classes."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .sup_losses import cross_entropy


class SkipPhase(Exception):
    """Raised when a translation batch has no selected samples."""


@dataclass(frozen=True)
class GanWeights:
    rec: float = 10.0
    cls: float = 1.0
    gp: float = 10.0

    def __post_init__(self):
        if min(self.rec, self.cls, self.gp) < 0:
            raise ValueError("GAN loss weights must be non-negative")


@dataclass
class TranslationBatch:
    real: Tensor
    z_source: Tensor  # one-hot pseudo-labels
    z_target: Tensor  # one-hot, uniform over classes

    def __post_init__(self):
        if len(self.real) == 0:
            raise SkipPhase("empty translation batch")
        if not (len(self.real) == len(self.z_source) == len(self.z_target)):
            raise ValueError("images and conditions disagree in batch size")


def sample_target_classes(count: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    classes = rng.integers(0, num_classes, size=count)
    return np.eye(num_classes, dtype=np.float32)[classes]


def _realism(D, x: Tensor) -> Tensor:
    out = D(x)
    return out[0] if isinstance(out, tuple) else out


def gradient_penalty(D, real: Tensor, fake: Tensor, eps: Tensor | None = None,
                     generator: torch.Generator | None = None) -> Tensor:
    """Mean of (||grad_x D(x)||_2 - 1)^2 over random real/fake interpolates.

    The graph is kept so the penalty can itself be differentiated.
    """
    b = real.shape[0]
    if eps is None:
        eps = torch.rand(b, generator=generator, dtype=real.dtype, device=real.device)
    eps = eps.view(b, *([1] * (real.ndim - 1)))
    interp = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    score = _realism(D, interp)
    (grad,) = torch.autograd.grad(score.sum(), interp, create_graph=True, allow_unused=True)
    if grad is None:  # critic ignores its input: zero gradient
        grad = torch.zeros_like(interp)
    norms = torch.linalg.vector_norm(grad.flatten(1), dim=1)
    return ((norms - 1) ** 2).mean()


def generator_loss(G, D, batch: TranslationBatch, weights: GanWeights = GanWeights()):
    fake = G(batch.real, batch.z_target)
    realism, d_logits = D(fake)
    adv = -realism.mean()
    cls_d = cross_entropy(torch.softmax(d_logits, 1), batch.z_target)
    cls_g = cross_entropy(torch.softmax(G.encoder_classify(fake), 1), batch.z_target)
    cycled = G(fake, batch.z_source)
    rec = (cycled - batch.real).abs().mean()
    total = adv + cls_d + cls_g + weights.rec * rec
    parts = {"adv": adv, "cls_d": cls_d, "cls_g": cls_g, "rec": rec, "total": total}
    return total, {k: v.item() for k, v in parts.items()}


def discriminator_loss(G, D, batch: TranslationBatch, weights: GanWeights = GanWeights(),
                       eps: Tensor | None = None, generator: torch.Generator | None = None,
                       fake: Tensor | None = None):
    """Critic + classification on real images vs pseudo-labels + gradient penalty."""
    if fake is None:
        with torch.no_grad():
            fake = G(batch.real, batch.z_target)
    fake = fake.detach()
    real_score, real_logits = D(batch.real)
    fake_score, _ = D(fake)
    critic = -real_score.mean() + fake_score.mean()
    cls = cross_entropy(torch.softmax(real_logits, 1), batch.z_source)
    gp = gradient_penalty(D, batch.real, fake, eps=eps, generator=generator)
    total = critic + weights.cls * cls + weights.gp * gp
    parts = {"critic": critic, "cls": cls, "gp": gp, "total": total}
    return total, {k: v.item() for k, v in parts.items()}


def _requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def discriminator_step(G, D, batch, optimizer, weights=GanWeights(), generator=None):
    optimizer.zero_grad(set_to_none=True)
    total, parts = discriminator_loss(G, D, batch, weights, generator=generator)
    total.backward()
    optimizer.step()
    return parts


def generator_step(G, D, batch, optimizer, weights=GanWeights()):
    _requires_grad(D, False)
    try:
        optimizer.zero_grad(set_to_none=True)
        total, parts = generator_loss(G, D, batch, weights)
        total.backward()
        optimizer.step()
    finally:
        _requires_grad(D, True)
    return parts


def synthetic_classifier_step(G, C, images: Tensor, targets: Tensor, optimizer) -> float:
    """One step of C on G(images, targets) labelled by targets; G is untouched."""
    with torch.no_grad():
        synthetic = G(images, targets)
    optimizer.zero_grad(set_to_none=True)
    loss = cross_entropy(torch.softmax(C(synthetic), 1), targets)
    loss.backward()
    optimizer.step()
    return loss.item()


def save_translation_grid(real: Tensor, translated: Tensor, cycled: Tensor, path, max_rows: int = 8):
    """Rows of (original | translated | cycled) triplets as a PNG."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import image as mpimg

    rows = []
    for triplet in zip(real[:max_rows], translated[:max_rows], cycled[:max_rows]):
        row = torch.cat([t.detach().cpu().float() for t in triplet], dim=-1)
        rows.append(row)
    grid = ((torch.cat(rows, dim=-2) + 1) / 2).clamp(0, 1)
    arr = grid.permute(1, 2, 0).numpy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if arr.shape[2] == 1:
        mpimg.imsave(path, arr[:, :, 0], cmap="gray", vmin=0, vmax=1)
    else:
        mpimg.imsave(path, arr)
