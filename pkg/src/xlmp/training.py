"""Adam with warmup/linear decay, the MLM pre-training loop and InfoNCE post-training.

All randomness is derived from ``(seed, stream, step)``, so a run resumed
from a checkpoint at step ``k`` replays steps ``k+1..`` exactly.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import MaskedBatch, mask_batch, plain_batch
from .encoder import EncoderModel
from .numerics import Tape, Tensor
from .objectives import InfoNCEConfig, infonce_loss, infonce_sentence_rep, masked_accuracy, mlm_loss

log = logging.getLogger(__name__)

# named random sub-streams
INIT_STREAM, DATA_STREAM, DROPOUT_STREAM = 0, 1, 2


def stream(seed: int, name: int, step: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, name, step])


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 50
    total_steps: int = 500
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    seed: int = 0
    preset: str = "tiny"
    language_sampling: str = "uniform"
    log_every: int = 1
    ckpt_every: int = 0

    def validate(self) -> list[str]:
        errs = []
        if not self.lr > 0:
            errs.append("train.lr must be positive")
        if self.total_steps < 0:
            errs.append("train.total_steps must be >= 0")
        if not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            errs.append("train.warmup_steps must lie in [0, total_steps]")
        if self.batch_size < 1:
            errs.append("train.batch_size must be >= 1")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                errs.append(f"train.{name} must lie in [0, 1)")
        if not self.eps > 0:
            errs.append("train.eps must be positive")
        if self.weight_decay < 0:
            errs.append("train.weight_decay must be >= 0")
        if self.language_sampling not in ("uniform", "proportional"):
            errs.append("train.language_sampling must be 'uniform' or 'proportional'")
        if self.log_every < 1:
            errs.append("train.log_every must be >= 1")
        if self.ckpt_every < 0:
            errs.append("train.ckpt_every must be >= 0")
        return errs

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


TRAIN_PRESETS = {
    "tiny": TrainConfig(lr=7e-3, warmup_steps=30, total_steps=500, batch_size=32),
    "small": TrainConfig(lr=3e-4, warmup_steps=10_000, total_steps=125_000, batch_size=2048, preset="small"),
    "base": TrainConfig(lr=5e-4, warmup_steps=10_000, total_steps=240_000, batch_size=8192, preset="base"),
    "large": TrainConfig(lr=1e-4, warmup_steps=10_000, total_steps=240_000, batch_size=8192, preset="large"),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    return replace(TRAIN_PRESETS[name], **overrides)


# ------------------------------------------------------------------ optimizer

def lr_multiplier(step: int, warmup: int, total: int) -> float:
    """Linear warmup to 1 at ``warmup`` then linear decay to 0 at ``total``."""
    up = step / warmup if warmup > 0 else math.inf
    down = (total - step) / (total - warmup) if total > warmup else math.inf
    m = min(up, down)
    return 1.0 if math.isinf(m) else max(0.0, m)


def decays(name: str) -> bool:
    return not (name.endswith(".bias") or name.endswith(".gain"))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
              cfg: TrainConfig, step: int) -> float:
    """One AdamW update in place; returns the learning rate used.

    Weight decay is decoupled and skipped for biases and layer-norm gains.
    """
    if step < 1:
        raise ValueError("step counts from 1")
    bad = [n for n, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient at step {step} in: {', '.join(sorted(bad))}")
    lr = cfg.lr * lr_multiplier(step, cfg.warmup_steps, cfg.total_steps)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and decays(name):
            update = update + cfg.weight_decay * p
        p -= (lr * update).astype(p.dtype)
    return lr


# ----------------------------------------------------------------- batching

def sample_rows(corpus: dict[str, list[list[int]]], cfg: TrainConfig, step: int) -> tuple[str, list[list[int]], np.random.Generator]:
    """Pick one language then ``batch_size`` of its sentences; returns the data rng for masking."""
    rng = stream(cfg.seed, DATA_STREAM, step)
    langs = sorted(corpus)
    if cfg.language_sampling == "proportional":
        sizes = np.array([len(corpus[l]) for l in langs], dtype=float)
        lang = langs[int(rng.choice(len(langs), p=sizes / sizes.sum()))]
    else:
        lang = langs[int(rng.integers(len(langs)))]
    sents = corpus[lang]
    k = min(cfg.batch_size, len(sents))
    idx = rng.choice(len(sents), size=k, replace=False)
    return lang, [sents[i] for i in idx], rng


def make_batch(corpus, cfg: TrainConfig, step: int, vocab_size: int, mask_rate: float) -> tuple[MaskedBatch, MaskedBatch]:
    _, rows, rng = sample_rows(corpus, cfg, step)
    return mask_batch(rows, rng, vocab_size, mask_rate), plain_batch(rows)


def prefetch(fn: Callable[[int], object], steps: Sequence[int], workers: int) -> Iterator[object]:
    """Yield ``fn(step)`` in step order, preparing up to ``workers`` batches ahead."""
    if workers <= 1:
        for s in steps:
            yield fn(s)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        it = iter(steps)
        for s in it:
            pending.append(pool.submit(fn, s))
            if len(pending) >= workers:
                break
        for s in it:
            yield pending.pop(0).result()
            pending.append(pool.submit(fn, s))
        for f in pending:
            yield f.result()


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("XLMP_THREADS", "1")))
    except ValueError:
        return 1


# ------------------------------------------------------------------- loops

@dataclass
class TrainResult:
    model: EncoderModel
    state: AdamState
    step: int
    metrics: list[dict]


class MetricsWriter:
    def __init__(self, path: str | os.PathLike | None, append: bool = False):
        self.fh = open(path, "a" if append else "w", encoding="utf-8") if path else None

    def write(self, rec: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(rec) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _checkpoint(path, model: EncoderModel, state: AdamState, step: int, phase: str, meta: dict) -> None:
    extra = {}
    for name, m in state.m.items():
        extra[f"adam.m.{name}"] = m
        extra[f"adam.v.{name}"] = state.v[name]
    save_checkpoint(path, model, {**meta, "phase": phase, "step": step}, extra)


def restore_state(ckpt: Checkpoint) -> AdamState:
    return AdamState(m={k: v.copy() for k, v in ckpt.subset("adam.m.").items()},
                     v={k: v.copy() for k, v in ckpt.subset("adam.v.").items()})


def _run(
    phase: str,
    model: EncoderModel,
    corpus: dict[str, list[list[int]]],
    cfg: TrainConfig,
    loss_fn,
    state: AdamState | None,
    start_step: int,
    out_dir: str | os.PathLike | None,
    meta: dict | None,
    stop_at: int | None,
) -> TrainResult:
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    if not corpus or not any(corpus.values()):
        raise ValueError("corpus is empty")
    state = state or AdamState()
    meta = dict(meta or {})
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.jsonl" if out else None, append=start_step > 0)
    params = {n: t for n, t in model.parameters().items()}
    vocab_size, mask_rate = model.config.vocab_size, model.config.mask_rate
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    steps = range(start_step + 1, end + 1)
    metrics = []
    step = start_step
    try:
        batches = prefetch(lambda s: make_batch(corpus, cfg, s, vocab_size, mask_rate), steps, worker_count())
        for step, (masked, clean) in zip(steps, batches):
            t0 = time.perf_counter()
            dropout_rng = stream(cfg.seed, DROPOUT_STREAM, step)
            model.zero_grad()
            with Tape() as tape:
                terms = loss_fn(model, masked, clean, dropout_rng)
            if terms is None:
                log.warning("step %d: no masked positions, skipped", step)
                continue
            total: Tensor = terms.pop("loss")
            loss_val = float(total.data)
            if not math.isfinite(loss_val):
                if out:
                    _checkpoint(out / "last_good.ckpt", model, state, step - 1, phase, meta)
                raise TrainingDiverged(f"{phase}: loss became {loss_val} at step {step}")
            tape.backward(total)
            lr = adam_step({n: t.data for n, t in params.items()}, {n: t.grad for n, t in params.items()},
                           state, cfg, step)
            if step % cfg.log_every == 0 or step == end:
                rec = {"step": step, "loss": loss_val}
                rec.update({k: v for k, v in terms.items()})
                rec["lr"] = lr
                rec["wall_ms"] = (time.perf_counter() - t0) * 1000.0
                metrics.append(rec)
                writer.write(rec)
            if out and cfg.ckpt_every and step % cfg.ckpt_every == 0:
                _checkpoint(out / f"step{step}.ckpt", model, state, step, phase, meta)
        if out:
            _checkpoint(out / "final.ckpt", model, state, step, phase, meta)
    finally:
        writer.close()
    return TrainResult(model, state, step, metrics)


def _mlm_terms(model: EncoderModel, masked: MaskedBatch, rng) -> tuple[Tensor, float] | None:
    sel = masked.labels != -100
    if not sel.any():
        return None
    out = model.forward(masked.input_ids, masked.pad_mask, rng=rng)
    logits = model.mlm_logits(out, positions=sel)
    labels = masked.labels[sel]
    return mlm_loss(logits, labels), masked_accuracy(logits, labels)


def pretrain(model: EncoderModel, corpus: dict[str, list[list[int]]], cfg: TrainConfig, *,
             state: AdamState | None = None, start_step: int = 0, out_dir=None, meta: dict | None = None,
             stop_at: int | None = None) -> TrainResult:
    """MLM pre-training; prompts are retrieved whenever the model has a pool."""

    def loss_fn(model, masked, clean, rng):
        res = _mlm_terms(model, masked, rng)
        if res is None:
            return None
        loss, acc = res
        return {"loss": loss, "mlm_loss": float(loss.data), "masked_acc": acc}

    return _run("pretrain", model, corpus, cfg, loss_fn, state, start_step, out_dir, meta, stop_at)


def posttrain_infonce(model: EncoderModel, corpus: dict[str, list[list[int]]], cfg: TrainConfig,
                      infonce_cfg: InfoNCEConfig = InfoNCEConfig(), *, state: AdamState | None = None,
                      start_step: int = 0, out_dir=None, meta: dict | None = None,
                      stop_at: int | None = None) -> TrainResult:
    """MLM plus dropout InfoNCE, weighted 1:1.

    The two InfoNCE views are two dropout-independent passes over the
    unmasked batch.
    """
    if not model.has_pool:
        raise ValueError("post-training needs a prompt pool for the sentence representation")
    if cfg.batch_size < 2 or min(len(v) for v in corpus.values()) < 2:
        raise ValueError("InfoNCE needs at least 2 sentences per batch (N >= 2)")

    def loss_fn(model, masked, clean, rng):
        res = _mlm_terms(model, masked, rng)
        if res is None:
            return None
        mlm, acc = res
        v1 = infonce_sentence_rep(model.forward(clean.input_ids, clean.pad_mask, rng=rng))
        v2 = infonce_sentence_rep(model.forward(clean.input_ids, clean.pad_mask, rng=rng))
        nce = infonce_loss(v1, v2, infonce_cfg)
        total = mlm + nce
        return {"loss": total, "mlm_loss": float(mlm.data), "infonce_loss": float(nce.data), "masked_acc": acc}

    return _run("posttrain", model, corpus, cfg, loss_fn, state, start_step, out_dir, meta, stop_at)


def resume(path: str | os.PathLike) -> tuple[EncoderModel, AdamState, int, dict]:
    ckpt = load_checkpoint(path)
    return ckpt.model(), restore_state(ckpt), int(ckpt.meta.get("step", 0)), ckpt.meta


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def evaluate_mlm(model: EncoderModel, corpus: dict[str, list[list[int]]], seed: int = 0, repeats: int = 4,
                 batch_size: int = 64) -> dict:
    """Masked-token accuracy and loss over the whole corpus, dropout off."""
    rng = stream(seed, DATA_STREAM, 10**9)
    rows = [r for lang in sorted(corpus) for r in corpus[lang]]
    hits = count = 0
    nll = 0.0
    for _ in range(repeats):
        for i in range(0, len(rows), batch_size):
            masked = mask_batch(rows[i: i + batch_size], rng, model.config.vocab_size, model.config.mask_rate)
            sel = masked.labels != -100
            if not sel.any():
                continue
            out = model.forward(masked.input_ids, masked.pad_mask)
            logits = model.mlm_logits(out, positions=sel)
            labels = masked.labels[sel]
            hits += int((logits.data.argmax(-1) == labels).sum())
            nll += float(mlm_loss(logits, labels).data) * len(labels)
            count += len(labels)
    return {"masked_acc": hits / max(count, 1), "mlm_loss": nll / max(count, 1), "count": count}
