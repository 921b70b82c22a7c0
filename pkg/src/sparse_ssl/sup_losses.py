"""Supervised objective: prototype + mutual-learning + entropy + mixup terms.

Each term is evaluated for every model in (generator encoder head,
discriminator class head, classifier) and summed over models. Logarithms take
probabilities clamped at ``EPS``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    mutual: float = 0.1
    entropy: float = 0.01
    mixup: float = 0.5
    kl: float = 0.5
    temperature: float = 2.0
    mix_alpha: float = 0.2
    # exp(+sum sq. diff) as literally written; rewards distance, kept for comparison only
    literal_distance_sign: bool = False

    def __post_init__(self):
        if self.temperature <= 0 or self.mix_alpha <= 0:
            raise ValueError("temperature and mix_alpha must be positive")


def _log(p: Tensor) -> Tensor:
    return torch.log(p.clamp_min(EPS))


def class_prototypes(probs: Tensor, labels: Tensor) -> Tensor:
    """Per-class mean probability rows; rows of classes absent from the batch are NaN."""
    if probs.shape[0] == 0:
        raise ValueError("empty batch")
    labels = labels.to(probs.dtype)
    counts = labels.sum(0)
    means = labels.T @ probs / counts.clamp_min(1.0)[:, None]
    present = (counts > 0)[:, None]
    return torch.where(present, means, torch.full_like(means, float("nan")))


def prototype_loss(probs: Tensor, labels: Tensor, prototypes: Tensor | None = None,
                   literal_sign: bool = False) -> Tensor:
    """Mean over samples of -log softmax_k(-||p - c_k||^2) at the true class.

    Classes whose prototype is undefined (NaN row) drop out of the normaliser.
    """
    if prototypes is None:
        prototypes = class_prototypes(probs, labels)
    present = ~torch.isnan(prototypes).any(1)
    protos = torch.where(present[:, None], prototypes, torch.zeros_like(prototypes))
    sq = ((probs[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
    scores = sq if literal_sign else -sq
    scores = scores.masked_fill(~present[None, :], float("-inf"))
    log_post = torch.log_softmax(scores, dim=1)
    target = labels.argmax(1)
    return -log_post.gather(1, target[:, None]).mean()


def cross_entropy(probs: Tensor, targets: Tensor) -> Tensor:
    """Batch mean of -sum_k t_k log p_k (targets may be soft)."""
    return -(targets * _log(probs)).sum(1).mean()


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Batch mean of KL(p || q)."""
    return (p * (_log(p) - _log(q))).sum(1).mean()


def mutual_learning_loss(logits: Sequence[Tensor], labels: Tensor, kl_weight: float = 0.5) -> Tensor:
    probs = [torch.softmax(l, 1) for l in logits]
    ce = sum(cross_entropy(p, labels) for p in probs)
    n = len(probs)
    kl = 0.0
    for m, p in enumerate(probs):
        others = sum(probs[j] for j in range(n) if j != m) / (n - 1)
        kl = kl + kl_divergence(p, others)
    return ce + kl_weight * kl


def entropy_loss(probs: Tensor | Sequence[Tensor]) -> Tensor:
    if isinstance(probs, Tensor):
        probs = [probs]
    return sum(-(p * _log(p)).sum(1).mean() for p in probs)


def mixup_pair(x_i, y_i, x_j, y_j, mix_alpha: float, rng: np.random.Generator,
               lam: float | None = None):
    if lam is None:
        lam = float(rng.beta(mix_alpha, mix_alpha))
    return lam * x_i + (1 - lam) * x_j, lam * y_i + (1 - lam) * y_j, lam


def mixup_batch(images: Tensor, targets: Tensor, mix_alpha: float, rng: np.random.Generator):
    """Pair the batch with a random permutation of itself, one Beta draw per pair."""
    b = images.shape[0]
    perm = torch.from_numpy(rng.permutation(b))
    lam = torch.from_numpy(rng.beta(mix_alpha, mix_alpha, size=b)).to(images.dtype)
    lx = lam.view(-1, *([1] * (images.ndim - 1)))
    mixed = lx * images + (1 - lx) * images[perm]
    mixed_targets = lam[:, None] * targets + (1 - lam[:, None]) * targets[perm]
    return mixed, mixed_targets, lam, perm


def mixup_loss(logits: Tensor | Sequence[Tensor], soft_targets: Tensor) -> Tensor:
    if isinstance(logits, Tensor):
        logits = [logits]
    return sum(cross_entropy(torch.softmax(l, 1), soft_targets) for l in logits)


def supervised_total(logits: Sequence[Tensor], labels: Tensor,
                     mixed_logits: Sequence[Tensor], mixed_targets: Tensor,
                     weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Weighted four-term objective and its per-term breakdown.

    ``logits`` and ``mixed_logits`` hold one B x K tensor per model, computed
    on the clean and the mixup batch respectively.
    """
    tempered = [torch.softmax(l / weights.temperature, 1) for l in logits]
    l_proto = sum(prototype_loss(p, labels, literal_sign=weights.literal_distance_sign)
                  for p in tempered)
    l_mutual = mutual_learning_loss(logits, labels, weights.kl)
    l_entropy = entropy_loss([torch.softmax(l, 1) for l in logits])
    l_mixup = mixup_loss(mixed_logits, mixed_targets)
    total = l_proto + weights.mutual * l_mutual + weights.entropy * l_entropy + weights.mixup * l_mixup
    breakdown = {name: term.item() for name, term in (
        ("prototype", l_proto), ("mutual", l_mutual), ("entropy", l_entropy),
        ("mixup", l_mixup), ("total", total))}
    return total, breakdown
