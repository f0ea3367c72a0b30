"""MLM loss and the dropout-based InfoNCE objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IGNORE_INDEX
from .encoder import ForwardOutput
from .numerics import Tensor, ops


@dataclass(frozen=True)
class InfoNCEConfig:
    temperature: float = 0.05

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def mlm_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked positions."""
    return ops.cross_entropy(logits, labels, IGNORE_INDEX)


def masked_accuracy(logits: Tensor, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    valid = labels != IGNORE_INDEX
    if not valid.any():
        return float("nan")
    pred = logits.data.argmax(axis=-1)
    return float((pred[valid] == labels[valid]).mean())


def infonce_sentence_rep(out: ForwardOutput) -> Tensor:
    """Average of the prompt hidden states and the CLS state at the last layer."""
    if out.prompt_len == 0:
        raise ValueError("forward ran without prompts; there are no prompt states to average")
    return ops.mean(out.hidden[:, : out.prompt_len + 1], axis=1)


def infonce_loss(view1: Tensor, view2: Tensor, cfg: InfoNCEConfig = InfoNCEConfig()) -> Tensor:
    """One-directional InfoNCE with in-batch negatives.

    Row ``i`` of ``view1`` is scored against every row of ``view2`` by cosine
    similarity over ``temperature``; the positive is row ``i``.
    """
    if view1.shape != view2.shape or view1.ndim != 2:
        raise ValueError(f"views must be matching (N, D) arrays, got {view1.shape} and {view2.shape}")
    n = view1.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs N >= 2 to have any negatives")
    a = ops.l2_normalize(view1, axis=-1)
    b = ops.l2_normalize(view2, axis=-1)
    sims = ops.mul(ops.matmul(a, ops.transpose(b, (1, 0))), 1.0 / cfg.temperature)
    return ops.cross_entropy(sims, np.arange(n), IGNORE_INDEX)
