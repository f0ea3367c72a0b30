"""Post-LN transformer encoder with an optional prompt pool and an MLM head.

Sequence layout with prompts active is ``[prompt (L_p) | CLS | tokens]``.
Only CLS and tokens receive positional embeddings (positions 0..n, the same
with or without prompts), so unplugging the pool reproduces the pool-free
encoder exactly.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from .numerics import Tensor, ops
from .prompt_pool import PromptPool, RetrievalResult


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden: int = 64
    ffn: int = 256
    heads: int = 2
    head_size: int = 32
    max_seq_len: int = 64
    vocab_size: int = 256
    dropout: float = 0.1
    attn_dropout: float = 0.1
    pool_size: int = 8
    prompt_length: int = 2
    mask_rate: float = 0.15
    init_std: float = 0.02
    preset: str = "tiny"

    def validate(self) -> list[str]:
        errs = []
        for name in ("num_layers", "hidden", "ffn", "heads", "head_size", "max_seq_len", "vocab_size"):
            if getattr(self, name) < 1:
                errs.append(f"model.{name} must be >= 1")
        if self.heads >= 1 and self.hidden % self.heads:
            errs.append("model.hidden must be divisible by model.heads")
        elif self.heads >= 1 and self.head_size != self.hidden // self.heads:
            errs.append("model.head_size must equal hidden / heads")
        if self.pool_size < 0 or self.prompt_length < 0:
            errs.append("model.pool_size and model.prompt_length must be >= 0")
        if (self.pool_size == 0) != (self.prompt_length == 0):
            errs.append("model.pool_size and model.prompt_length must both be zero or both positive")
        for name in ("dropout", "attn_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                errs.append(f"model.{name} must lie in [0, 1)")
        if not 0.0 <= self.mask_rate < 1.0:
            errs.append("model.mask_rate must lie in [0, 1)")
        if self.vocab_size < 6:
            errs.append("model.vocab_size must exceed the 5 reserved ids")
        return errs

    @property
    def has_pool(self) -> bool:
        return self.pool_size > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS: dict[str, EncoderConfig] = {
    "tiny": EncoderConfig(),
    "small": EncoderConfig(num_layers=4, hidden=768, ffn=3072, heads=12, head_size=64, max_seq_len=512,
                           vocab_size=250002, pool_size=256, prompt_length=4, preset="small"),
    "base": EncoderConfig(num_layers=12, hidden=768, ffn=3072, heads=12, head_size=64, max_seq_len=512,
                          vocab_size=250002, pool_size=256, prompt_length=4, preset="base"),
    "large": EncoderConfig(num_layers=24, hidden=1024, ffn=4096, heads=16, head_size=64, max_seq_len=512,
                           vocab_size=250002, pool_size=256, prompt_length=4, preset="large"),
}


def preset(name: str, **overrides) -> EncoderConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class ForwardOutput:
    hidden: Tensor  # (B, L_p + T, D)
    prompt_len: int
    pad_mask: np.ndarray  # (B, T), token region including CLS
    layers: list[Tensor] = field(default_factory=list)  # layers[0] = embeddings
    retrieval: RetrievalResult | None = None
    attention: list[np.ndarray] = field(default_factory=list)

    @property
    def full_mask(self) -> np.ndarray:
        b = self.pad_mask.shape[0]
        return np.concatenate([np.ones((b, self.prompt_len), dtype=bool), self.pad_mask], axis=1)

    @property
    def token_region(self) -> slice:
        return slice(self.prompt_len, None)

    def prompt_states(self, layer: int | None = None) -> Tensor:
        h = self.hidden if layer is None else self.layers[layer]
        return h[:, : self.prompt_len]

    def cls_state(self, layer: int | None = None) -> Tensor:
        h = self.hidden if layer is None else self.layers[layer]
        return h[:, self.prompt_len]

    def token_states(self, layer: int | None = None) -> Tensor:
        """CLS plus token positions, prompt region removed."""
        h = self.hidden if layer is None else self.layers[layer]
        return h[:, self.prompt_len:]


def _normal(rng, shape, std, dtype):
    return rng.normal(0.0, std, shape).astype(dtype)


class EncoderModel:
    """Parameter container plus the forward computations."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator | None = None,
                 with_pool: bool | None = None, dtype=np.float32):
        errs = config.validate()
        if errs:
            raise ValueError("; ".join(errs))
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        std, d = config.init_std, config.hidden
        p: dict[str, Tensor] = {}

        def add(name, arr):
            p[name] = Tensor(arr, requires_grad=True, name=name)

        add("embed.token", _normal(rng, (config.vocab_size, d), std, dtype))
        add("embed.pos", _normal(rng, (config.max_seq_len, d), std, dtype))
        add("embed.ln.gain", np.ones(d, dtype))
        add("embed.ln.bias", np.zeros(d, dtype))
        for i in range(config.num_layers):
            for proj in ("q", "k", "v", "o"):
                add(f"block{i}.attn.{proj}.weight", _normal(rng, (d, d), std, dtype))
                add(f"block{i}.attn.{proj}.bias", np.zeros(d, dtype))
            add(f"block{i}.ffn.in.weight", _normal(rng, (d, config.ffn), std, dtype))
            add(f"block{i}.ffn.in.bias", np.zeros(config.ffn, dtype))
            add(f"block{i}.ffn.out.weight", _normal(rng, (config.ffn, d), std, dtype))
            add(f"block{i}.ffn.out.bias", np.zeros(d, dtype))
            for ln in ("ln1", "ln2"):
                add(f"block{i}.{ln}.gain", np.ones(d, dtype))
                add(f"block{i}.{ln}.bias", np.zeros(d, dtype))
        add("mlm.transform.weight", _normal(rng, (d, d), std, dtype))
        add("mlm.transform.bias", np.zeros(d, dtype))
        add("mlm.ln.gain", np.ones(d, dtype))
        add("mlm.ln.bias", np.zeros(d, dtype))
        add("mlm.bias", np.zeros(config.vocab_size, dtype))
        self.params = p

        use_pool = config.has_pool if with_pool is None else with_pool
        if use_pool and not config.has_pool:
            raise ValueError("config has no pool (pool_size = 0)")
        # the pool draws from the init stream last so pool-free models share every other weight
        self.pool = PromptPool.init(config.pool_size, config.prompt_length, d, rng, std, dtype) if use_pool else None

    # -------------------------------------------------------------- params

    @property
    def has_pool(self) -> bool:
        return self.pool is not None

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        if self.pool is not None:
            out.update(self.pool.parameters())
        return out

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, t in self.parameters().items():
            yield name, t.data

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = set(params) - set(arrays)
            if missing:
                raise KeyError(f"missing tensors: {sorted(missing)}")
        for name, arr in arrays.items():
            if name not in params:
                if strict:
                    raise KeyError(f"unexpected tensor {name!r}")
                continue
            t = params[name]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"{name}: shape {tuple(arr.shape)} != {t.shape}")
            t.data = np.array(arr, dtype=t.dtype, copy=True)

    def to_dtype(self, dtype) -> "EncoderModel":
        for t in self.parameters().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def copy(self) -> "EncoderModel":
        return copy.deepcopy(self)

    def without_pool(self) -> "EncoderModel":
        """Pool-free copy with the same encoder weights."""
        ref = copy.deepcopy(self)
        ref.pool = None
        return ref

    # ------------------------------------------------------------- forward

    def embed(self, input_ids: np.ndarray) -> Tensor:
        ids = np.asarray(input_ids)
        t = ids.shape[1]
        if t > self.config.max_seq_len:
            raise CapacityError(f"sequence length {t} exceeds max_seq_len {self.config.max_seq_len}")
        p = self.params
        x = ops.add(ops.embedding_lookup(p["embed.token"], ids), p["embed.pos"][:t])
        return ops.layer_norm(x, p["embed.ln.gain"], p["embed.ln.bias"])

    def _attention(self, x: Tensor, i: int, key_bias: np.ndarray, rng, keep_attn: list | None) -> Tensor:
        cfg, p = self.config, self.params
        b, s, d = x.shape
        h, dh = cfg.heads, cfg.head_size

        def heads(name):
            y = ops.linear(x, p[f"block{i}.attn.{name}.weight"], p[f"block{i}.attn.{name}.bias"])
            return ops.transpose(ops.reshape(y, (b, s, h, dh)), (0, 2, 1, 3))

        q = ops.mul(heads("q"), 1.0 / math.sqrt(dh))
        k, v = heads("k"), heads("v")
        scores = ops.add(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), key_bias)
        probs = ops.softmax(scores, axis=-1)
        if keep_attn is not None:
            keep_attn.append(probs.data)
        probs = ops.dropout(probs, cfg.attn_dropout, rng)
        ctx = ops.reshape(ops.transpose(ops.matmul(probs, v), (0, 2, 1, 3)), (b, s, d))
        return ops.linear(ctx, p[f"block{i}.attn.o.weight"], p[f"block{i}.attn.o.bias"])

    def block(self, x: Tensor, i: int, key_bias: np.ndarray, rng=None, keep_attn: list | None = None) -> Tensor:
        cfg, p = self.config, self.params
        a = ops.dropout(self._attention(x, i, key_bias, rng, keep_attn), cfg.dropout, rng)
        x = ops.layer_norm(ops.add(x, a), p[f"block{i}.ln1.gain"], p[f"block{i}.ln1.bias"])
        f = ops.gelu(ops.linear(x, p[f"block{i}.ffn.in.weight"], p[f"block{i}.ffn.in.bias"]))
        f = ops.dropout(ops.linear(f, p[f"block{i}.ffn.out.weight"], p[f"block{i}.ffn.out.bias"]), cfg.dropout, rng)
        return ops.layer_norm(ops.add(x, f), p[f"block{i}.ln2.gain"], p[f"block{i}.ln2.bias"])

    def forward(
        self,
        input_ids: np.ndarray,
        pad_mask: np.ndarray | None = None,
        use_prompts: bool | None = None,
        rng: np.random.Generator | None = None,
        collect_layers: bool = False,
        upto_layer: int | None = None,
        collect_attention: bool = False,
    ) -> ForwardOutput:
        """Encode a padded id batch.

        ``rng=None`` disables dropout. ``use_prompts`` defaults to whether
        the model carries a pool. ``upto_layer`` stops after that many blocks.
        """
        ids = np.asarray(input_ids)
        if ids.ndim != 2:
            raise ValueError(f"input_ids must be (B, T), got {ids.shape}")
        mask = (ids != 0) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
        if use_prompts is None:
            use_prompts = self.has_pool
        if use_prompts and self.pool is None:
            raise ValueError("model has no prompt pool")
        n_layers = self.config.num_layers if upto_layer is None else upto_layer
        if not 0 <= n_layers <= self.config.num_layers:
            raise IndexError(f"layer {n_layers} outside 0..{self.config.num_layers}")

        e = self.embed(ids)
        retrieval = None
        lp = 0
        if use_prompts:
            lp = self.pool.prompt_length
            if ids.shape[1] + lp > self.config.max_seq_len:
                raise CapacityError(
                    f"{ids.shape[1]} tokens + {lp} prompt vectors exceed capacity {self.config.max_seq_len}")
            retrieval = self.pool.retrieve(e, mask)
            e = ops.concat([retrieval.prompt, e], axis=1)
            full = np.concatenate([np.ones((ids.shape[0], lp), dtype=bool), mask], axis=1)
        else:
            full = mask
        key_bias = np.where(full, 0.0, -1e9).astype(e.dtype)[:, None, None, :]

        layers = [e] if collect_layers else []
        attn = [] if collect_attention else None
        x = ops.dropout(e, self.config.dropout, rng)
        for i in range(n_layers):
            x = self.block(x, i, key_bias, rng, attn)
            if collect_layers:
                layers.append(x)
        if n_layers == 0:
            x = e
        return ForwardOutput(hidden=x, prompt_len=lp, pad_mask=mask, layers=layers,
                             retrieval=retrieval, attention=attn or [])

    def forward_with_prompts(self, batch, rng=None, **kw) -> ForwardOutput:
        if self.pool is None:
            raise ValueError("model has no prompt pool")
        return self.forward(batch.input_ids, batch.pad_mask, use_prompts=True, rng=rng, **kw)

    def forward_plain(self, batch, rng=None, **kw) -> ForwardOutput:
        return self.forward(batch.input_ids, batch.pad_mask, use_prompts=False, rng=rng, **kw)

    def hidden_states_at_layer(self, batch, layer_index: int, with_prompts: bool = False) -> Tensor:
        if not 0 <= layer_index <= self.config.num_layers:
            raise IndexError(f"layer {layer_index} outside 0..{self.config.num_layers}")
        out = self.forward(batch.input_ids, batch.pad_mask, use_prompts=with_prompts, upto_layer=layer_index)
        return out.hidden

    # ------------------------------------------------------------ MLM head

    def mlm_logits(self, out: ForwardOutput, positions: np.ndarray | None = None) -> Tensor:
        """Vocabulary logits over the token region (CLS + tokens).

        With a boolean ``positions`` mask (B, T) only those rows are projected
        and the result is (N, V); otherwise (B, T, V).
        """
        p = self.params
        h = out.token_states()
        if positions is not None:
            h = h[np.nonzero(positions)]
        h = ops.gelu(ops.linear(h, p["mlm.transform.weight"], p["mlm.transform.bias"]))
        h = ops.layer_norm(h, p["mlm.ln.gain"], p["mlm.ln.bias"])
        return ops.linear(h, ops.transpose(p["embed.token"], (1, 0)), p["mlm.bias"])
