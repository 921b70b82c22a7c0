"""Macro per-class accuracy and the two inference configurations."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

MODES = ("sparse", "sparse-ens")  # classifier only / late fusion of D and C


@dataclass(frozen=True)
class EvalResult:
    per_class: tuple[float, ...]  # NaN for classes absent from the truths
    macro: float
    mode: str = "sparse-ens"
    dataset: str = ""
    shots: int = 0
    seed: int = 0
    split: str = "test"

    def to_row(self) -> dict:
        row = asdict(self)
        row["per_class"] = " ".join(f"{a:.6f}" for a in self.per_class)
        return row


def per_class_accuracy(predictions, truths, num_classes: int) -> tuple[np.ndarray, float]:
    """Within-class recall for each class and its mean over present classes."""
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if predictions.size == 0:
        raise ValueError("no predictions to score")
    if predictions.shape != truths.shape:
        raise ValueError("predictions and truths differ in length")
    counts = np.bincount(truths, minlength=num_classes)[:num_classes]
    hits = np.bincount(truths[predictions == truths], minlength=num_classes)[:num_classes]
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return acc, float(np.nanmean(acc))


def late_fusion_predict(d_logits, c_logits) -> tuple[np.ndarray, np.ndarray]:
    """Average the softmax posteriors of D and C; argmax, lowest index on ties."""
    d = torch.as_tensor(d_logits, dtype=torch.float64)
    c = torch.as_tensor(c_logits, dtype=torch.float64)
    fused = (torch.softmax(d, -1) + torch.softmax(c, -1)) / 2
    fused = fused.numpy()
    return fused.argmax(-1), fused


@torch.no_grad()
def predict(networks, images: torch.Tensor, mode: str = "sparse-ens", batch_size: int = 256):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    preds = []
    was_training = networks.training
    networks.eval()
    try:
        for start in range(0, len(images), batch_size):
            x = images[start:start + batch_size]
            c_logits = networks.classifier(x)
            if mode == "sparse":
                preds.append(c_logits.argmax(1).cpu().numpy())
            else:
                _, d_logits = networks.discriminator(x)
                preds.append(late_fusion_predict(d_logits.cpu(), c_logits.cpu())[0])
    finally:
        networks.train(was_training)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(networks, images: torch.Tensor, labels, mode: str = "sparse-ens",
             batch_size: int = 256, **meta) -> EvalResult:
    """Macro per-class accuracy of `networks` on prepared images in [-1, 1]."""
    preds = predict(networks, images, mode, batch_size)
    acc, macro = per_class_accuracy(preds, np.asarray(labels), networks.spec.num_classes)
    return EvalResult(per_class=tuple(float(a) for a in acc), macro=macro, mode=mode, **meta)
