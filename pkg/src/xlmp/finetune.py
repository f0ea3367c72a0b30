"""Standard (pool unplugged) and prompt-based fine-tuning with affine task heads."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import IGNORE_INDEX, ParseError, pad_batch
from .encoder import EncoderModel, ForwardOutput
from .numerics import Tape, Tensor, ops
from .prompt_pool import POOL_PARAM_NAMES
from .training import DATA_STREAM, DROPOUT_STREAM, AdamState, TrainConfig, adam_step, stream


class FinetuneMode(str, enum.Enum):
    STANDARD = "standard"
    PROMPT = "prompt_based"

    @classmethod
    def parse(cls, value: "str | FinetuneMode") -> "FinetuneMode":
        if isinstance(value, cls):
            return value
        aliases = {"standard": cls.STANDARD, "prompt": cls.PROMPT, "prompt_based": cls.PROMPT}
        try:
            return aliases[value]
        except KeyError:
            raise ValueError(f"unknown fine-tuning mode {value!r}") from None


@dataclass
class TaskHead:
    kind: str  # "token" or "sentence"
    labels: list[str]
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, kind: str, labels: Sequence[str], dim: int, rng: np.random.Generator, dtype=np.float32) -> "TaskHead":
        if kind not in ("token", "sentence"):
            raise ValueError(f"unknown head kind {kind!r}")
        c = len(labels)
        return cls(kind, list(labels),
                   Tensor(rng.normal(0.0, 0.02, (dim, c)).astype(dtype), requires_grad=True, name="head.weight"),
                   Tensor(np.zeros(c, dtype), requires_grad=True, name="head.bias"))

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def parameters(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"head expects width {self.weight.shape[0]}, got {x.shape[-1]}")
        return ops.linear(x, self.weight, self.bias)


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-3
    steps: int = 200
    batch_size: int = 32
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    freeze_prompts: bool = False

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, warmup_steps=int(round(self.warmup_fraction * self.steps)),
                           total_steps=self.steps, batch_size=self.batch_size,
                           weight_decay=self.weight_decay, seed=self.seed)


@dataclass
class FinetuneResult:
    head: TaskHead
    model: EncoderModel
    mode: FinetuneMode
    metrics: list[dict] = field(default_factory=list)


def encode_for_mode(model: EncoderModel, input_ids, pad_mask, mode: FinetuneMode, rng=None) -> ForwardOutput:
    if mode is FinetuneMode.STANDARD:
        return model.forward(input_ids, pad_mask, use_prompts=False, rng=rng)
    return model.forward(input_ids, pad_mask, use_prompts=True, rng=rng)


def pool_sentence(out: ForwardOutput, mode: FinetuneMode) -> Tensor:
    """Sentence representation: CLS alone (standard) or mean of prompt states and CLS."""
    if mode is FinetuneMode.STANDARD:
        return out.cls_state()
    return ops.mean(out.hidden[:, : out.prompt_len + 1], axis=1)


def _trainable(model: EncoderModel, head: TaskHead, mode: FinetuneMode, freeze_prompts: bool) -> dict[str, Tensor]:
    params = model.parameters()
    if mode is FinetuneMode.STANDARD or freeze_prompts:
        params = {k: v for k, v in params.items() if k not in POOL_PARAM_NAMES}
    params.update(head.parameters())
    return params


def _fit(model, head, mode, cfg: FinetuneConfig, n_items: int, loss_for) -> list[dict]:
    if mode is FinetuneMode.PROMPT and not model.has_pool:
        raise ValueError("prompt-based fine-tuning needs a model with a prompt pool")
    tcfg = cfg.train_config()
    params = _trainable(model, head, mode, cfg.freeze_prompts)
    everything = {**model.parameters(), **head.parameters()}
    state = AdamState()
    metrics = []
    for step in range(1, cfg.steps + 1):
        rng = stream(cfg.seed, DATA_STREAM, step)
        idx = rng.choice(n_items, size=min(cfg.batch_size, n_items), replace=False)
        for t in everything.values():
            t.zero_grad()
        with Tape() as tape:
            loss, acc = loss_for(idx, stream(cfg.seed, DROPOUT_STREAM, step))
        tape.backward(loss)
        lr = adam_step({k: t.data for k, t in params.items()}, {k: t.grad for k, t in params.items()},
                       state, tcfg, step)
        metrics.append({"step": step, "loss": float(loss.data), "acc": acc, "lr": lr})
    return metrics


def _check_tags(sentences, tags) -> None:
    if len(sentences) != len(tags):
        raise ValueError(f"{len(sentences)} sentences but {len(tags)} tag sequences")
    for i, (ids, tg) in enumerate(zip(sentences, tags)):
        if len(ids) - 1 != len(tg):
            raise ValueError(f"sentence {i}: {len(ids) - 1} tokens but {len(tg)} labels")


def token_batch(sentences, tags, idx):
    rows = [sentences[i] for i in idx]
    labels = [[IGNORE_INDEX] + list(tags[i]) for i in idx]
    return pad_batch(rows, labels)


def token_logits(model, head, batch, mode, rng=None) -> Tensor:
    out = encode_for_mode(model, batch.input_ids, batch.pad_mask, mode, rng)
    # prompt states are dropped after encoding; CLS stays with an ignored label
    return head(out.token_states())


def finetune_token_task(model: EncoderModel, sentences: Sequence[Sequence[int]], tags: Sequence[Sequence[int]],
                        label_names: Sequence[str], mode, cfg: FinetuneConfig = FinetuneConfig(),
                        copy_model: bool = True) -> FinetuneResult:
    """Token classification. ``sentences`` start with CLS; ``tags`` align with the tokens after it."""
    mode = FinetuneMode.parse(mode)
    _check_tags(sentences, tags)
    model = model.copy() if copy_model else model
    head = TaskHead.init("token", label_names, model.config.hidden, stream(cfg.seed, 0, 1))

    def loss_for(idx, rng):
        batch = token_batch(sentences, tags, idx)
        logits = token_logits(model, head, batch, mode, rng)
        loss = ops.cross_entropy(logits, batch.labels, IGNORE_INDEX)
        valid = batch.labels != IGNORE_INDEX
        acc = float((logits.data.argmax(-1)[valid] == batch.labels[valid]).mean())
        return loss, acc

    metrics = _fit(model, head, mode, cfg, len(sentences), loss_for)
    return FinetuneResult(head, model, mode, metrics)


def finetune_sentence_task(model: EncoderModel, sentences: Sequence[Sequence[int]], labels: Sequence[int],
                           label_names: Sequence[str], mode, cfg: FinetuneConfig = FinetuneConfig(),
                           copy_model: bool = True) -> FinetuneResult:
    mode = FinetuneMode.parse(mode)
    if len(sentences) != len(labels):
        raise ValueError(f"{len(sentences)} sentences but {len(labels)} labels")
    labels = np.asarray(labels, dtype=np.int64)
    model = model.copy() if copy_model else model
    head = TaskHead.init("sentence", label_names, model.config.hidden, stream(cfg.seed, 0, 1))

    def loss_for(idx, rng):
        batch = pad_batch([sentences[i] for i in idx])
        logits = head(pool_sentence(encode_for_mode(model, batch.input_ids, batch.pad_mask, mode, rng), mode))
        y = labels[idx]
        loss = ops.cross_entropy(logits, y, IGNORE_INDEX)
        return loss, float((logits.data.argmax(-1) == y).mean())

    metrics = _fit(model, head, mode, cfg, len(sentences), loss_for)
    return FinetuneResult(head, model, mode, metrics)


def predict_sentences(result: FinetuneResult, sentences, batch_size: int = 128) -> np.ndarray:
    preds = []
    for i in range(0, len(sentences), batch_size):
        batch = pad_batch(sentences[i: i + batch_size])
        out = encode_for_mode(result.model, batch.input_ids, batch.pad_mask, result.mode)
        preds.append(result.head(pool_sentence(out, result.mode)).data.argmax(-1))
    return np.concatenate(preds)


def predict_tokens(result: FinetuneResult, sentences, batch_size: int = 128) -> list[np.ndarray]:
    preds = []
    for i in range(0, len(sentences), batch_size):
        rows = sentences[i: i + batch_size]
        batch = pad_batch(rows)
        logits = token_logits(result.model, result.head, batch, result.mode)
        am = logits.data.argmax(-1)
        preds.extend(am[j, 1: len(r)] for j, r in enumerate(rows))
    return preds


def accuracy(pred, gold) -> float:
    pred = np.concatenate([np.ravel(p) for p in pred]) if isinstance(pred, list) else np.asarray(pred)
    gold = np.concatenate([np.ravel(g) for g in gold]) if isinstance(gold, list) else np.asarray(gold)
    return float((pred == gold).mean())


# ------------------------------------------------------------------- files

def load_sentence_tsv(path: str | os.PathLike) -> tuple[list[str], list[str]]:
    """``sentence<TAB>label`` per line."""
    texts, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, n, "expected 'sentence<TAB>label'")
            texts.append(parts[0])
            labels.append(parts[1])
    return texts, labels


def load_token_file(path: str | os.PathLike) -> tuple[list[list[str]], list[list[str]]]:
    """``token<TAB>tag`` per line, blank line between sentences."""
    sents, tags, cur_s, cur_t = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                if cur_s:
                    sents.append(cur_s)
                    tags.append(cur_t)
                    cur_s, cur_t = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, n, "expected 'token<TAB>tag'")
            cur_s.append(parts[0])
            cur_t.append(parts[1])
    if cur_s:
        sents.append(cur_s)
        tags.append(cur_t)
    return sents, tags


def write_sentence_tsv(path, texts, labels) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t, l in zip(texts, labels):
            fh.write(f"{t}\t{l}\n")


def write_token_file(path, sents, tags) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, t in zip(sents, tags):
            for tok, tag in zip(s, t):
                fh.write(f"{tok}\t{tag}\n")
            fh.write("\n")


def save_finetuned(path, result: FinetuneResult, meta: dict | None = None) -> None:
    info = {"mode": result.mode.value, "task": result.head.kind, "labels": result.head.labels}
    save_checkpoint(path, result.model, {**(meta or {}), "finetune": info},
                    {k: v.data for k, v in result.head.parameters().items()})


def load_finetuned(path) -> FinetuneResult:
    ckpt: Checkpoint = load_checkpoint(path)
    info = ckpt.meta.get("finetune")
    if info is None:
        raise ValueError(f"{path} holds no fine-tuned head")
    head = TaskHead(info["task"], info["labels"],
                    Tensor(ckpt.tensors["head.weight"].copy(), requires_grad=True, name="head.weight"),
                    Tensor(ckpt.tensors["head.bias"].copy(), requires_grad=True, name="head.bias"))
    return FinetuneResult(head, ckpt.model(), FinetuneMode(info["mode"]))
