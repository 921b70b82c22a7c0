"""Confidence-weighted, temporally smoothed pseudo-labels with a percentile cut.

All probability arithmetic is float64 numpy; inputs are per-batch arrays with
one row per unlabeled sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-8


@dataclass
class EnsembleState:
    """Per-sample EMA store plus the ensemble hyperparameters."""

    alpha: float = 0.6  # weight of the current prediction against history
    beta: float = 0.99  # EMA momentum
    rho: float = 0.75  # percentile of max-probabilities used as threshold
    temperature: float = 2.0
    epoch: int = 0
    ema: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("alpha", "beta", "rho"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def __len__(self):
        return len(self.ema)

    def state_dict(self) -> dict:
        ids = np.array(sorted(self.ema), dtype=np.int64)
        probs = np.stack([self.ema[i] for i in ids]) if len(ids) else np.zeros((0, 0))
        return {"alpha": self.alpha, "beta": self.beta, "rho": self.rho,
                "temperature": self.temperature, "epoch": self.epoch,
                "ids": ids, "probs": probs}

    @classmethod
    def from_state_dict(cls, d: dict) -> EnsembleState:
        state = cls(alpha=d["alpha"], beta=d["beta"], rho=d["rho"],
                    temperature=d["temperature"], epoch=d["epoch"])
        state.ema = {int(i): np.array(p, dtype=np.float64) for i, p in zip(d["ids"], d["probs"])}
        return state


@dataclass(frozen=True)
class PseudoBatch:
    selected_ids: np.ndarray
    selected_index: np.ndarray  # row positions of the selected samples in the scored batch
    pseudo_labels: np.ndarray  # one-hot, len(selected) x K
    source_probs: np.ndarray  # p_ens of every scored sample
    threshold: float

    def __len__(self):
        return len(self.selected_ids)


def temperature_softmax(logits, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_confidence(p) -> np.ndarray:
    """1 - H(p) / log K, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    if k == 1:
        return np.ones(p.shape[:-1])
    h = -(p * np.log(np.clip(p, EPS, None))).sum(-1)
    return np.clip(1.0 - h / np.log(k), 0.0, 1.0)


def confidence_weighted_vote(p_d, c_d, p_c, c_c) -> np.ndarray:
    """(c_d p_d + c_c p_c) / (c_d + c_c); plain mean where both confidences are zero."""
    p_d, p_c = np.asarray(p_d, np.float64), np.asarray(p_c, np.float64)
    c_d, c_c = np.asarray(c_d, np.float64)[..., None], np.asarray(c_c, np.float64)[..., None]
    denom = c_d + c_c
    safe = np.where(denom > 0, denom, 1.0)
    weighted = (c_d * p_d + c_c * p_c) / safe
    return np.where(denom > 0, weighted, 0.5 * (p_d + p_c))


def temporal_blend(p_weighted, state: EnsembleState, sample_id: int) -> np.ndarray:
    p_weighted = np.asarray(p_weighted, np.float64)
    history = state.ema.get(int(sample_id))
    if history is None:
        return p_weighted.copy()
    return state.alpha * p_weighted + (1.0 - state.alpha) * history


def ema_update(state: EnsembleState, sample_id: int, p_ens) -> EnsembleState:
    p_ens = np.asarray(p_ens, np.float64)
    key = int(sample_id)
    history = state.ema.get(key)
    state.ema[key] = p_ens.copy() if history is None else state.beta * history + (1.0 - state.beta) * p_ens
    return state


def adaptive_threshold(max_probs, rho: float) -> float:
    max_probs = np.asarray(max_probs, np.float64)
    if max_probs.size == 0:
        raise ValueError("cannot take a percentile of an empty batch")
    return float(np.quantile(max_probs, rho, method="linear"))


def select_and_label(p_ens, threshold: float, ids=None) -> PseudoBatch:
    p_ens = np.asarray(p_ens, np.float64)
    if ids is None:
        ids = np.arange(len(p_ens))
    ids = np.asarray(ids)
    index = np.flatnonzero(p_ens.max(1) > threshold)
    # argmax returns the first maximal index, i.e. ties go to the lowest class
    labels = np.eye(p_ens.shape[1])[p_ens[index].argmax(1)]
    return PseudoBatch(selected_ids=ids[index], selected_index=index,
                       pseudo_labels=labels, source_probs=p_ens, threshold=threshold)


def score_batch(state: EnsembleState, ids, d_logits, c_logits) -> PseudoBatch:
    """Run the full pipeline on one unlabeled batch and update the EMA store."""
    ids = np.asarray(ids)
    p_d = temperature_softmax(d_logits, state.temperature)
    p_c = temperature_softmax(c_logits, state.temperature)
    p_w = confidence_weighted_vote(p_d, entropy_confidence(p_d), p_c, entropy_confidence(p_c))
    p_ens = np.stack([temporal_blend(p, state, i) for p, i in zip(p_w, ids)])
    for i, p in zip(ids, p_ens):
        ema_update(state, i, p)
    tau = adaptive_threshold(p_ens.max(1), state.rho)
    return select_and_label(p_ens, tau, ids)
