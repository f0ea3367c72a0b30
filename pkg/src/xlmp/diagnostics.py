"""End-to-end gradient check of a freshly initialized model in 64-bit mode."""

from __future__ import annotations

import numpy as np

from .data import CLS, NUM_SPECIAL, mask_batch
from .encoder import EncoderModel, preset
from .numerics import grad_check
from .objectives import mlm_loss


def model_grad_check(preset_name: str = "tiny", fraction: float = 0.01, seed: int = 0,
                     epsilon: float = 1e-4, batch: int = 4, vocab_size: int | None = None) -> tuple[float, int]:
    """Max relative error of the MLM loss gradient over a random ``fraction`` of every tensor.

    Dropout is disabled so finite differences see a deterministic function.
    Returns (max relative error, number of checked entries).
    """
    overrides = {"dropout": 0.0, "attn_dropout": 0.0}
    if vocab_size is not None:
        overrides["vocab_size"] = vocab_size
    cfg = preset(preset_name, **overrides)
    rng = np.random.default_rng(seed)
    model = EncoderModel(cfg, rng).to_dtype(np.float64)
    lengths = rng.integers(4, 12, size=batch)
    rows = [[CLS] + rng.integers(NUM_SPECIAL, cfg.vocab_size, size=n).tolist() for n in lengths]
    masked = mask_batch(rows, rng, cfg.vocab_size, mask_rate=0.3)
    sel = masked.labels != -100
    if not sel.any():
        sel[0, 1] = True
        masked.labels[0, 1] = rows[0][1]

    def loss():
        out = model.forward(masked.input_ids, masked.pad_mask, use_prompts=model.has_pool)
        return mlm_loss(model.mlm_logits(out, positions=sel), masked.labels[sel])

    params = list(model.parameters().values())
    checked = sum(min(p.size, max(1, int(round(fraction * p.size)))) for p in params)
    err = grad_check(loss, params, epsilon=epsilon, fraction=fraction, rng=np.random.default_rng(seed + 1))
    return err, checked
