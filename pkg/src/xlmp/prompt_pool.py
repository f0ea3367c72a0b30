"""Key-value prompt pool with instance-wise retrieval attention.

Each of the ``M`` prompts is an ``L_p x D`` block of vectors paired with a
key. An input is summarized by feature-wise max pooling over its embedding
sequence (CLS included); the query ``r W`` is scored against every key, the
scores are softmax-normalized into ``alpha``, and the retrieved prompt is the
alpha-weighted sum of the prompt blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, ops

POOL_PARAM_NAMES = ("prompt.keys", "prompt.values", "prompt.query_proj")


@dataclass
class RetrievalResult:
    prompt: Tensor  # (B, L_p, D)
    alpha: Tensor  # (B, M)
    query: Tensor  # (B, D), the pooled input before projection


class PromptPool:
    def __init__(self, keys: Tensor, values: Tensor, query_proj: Tensor):
        m, lp, d = values.shape
        if m < 1 or lp < 1:
            raise ValueError("pool size and prompt length must be >= 1")
        if keys.shape[0] != m:
            raise ValueError(f"{keys.shape[0]} keys for {m} prompts")
        if query_proj.shape != (d, keys.shape[1]):
            raise ValueError(f"query projection must be ({d}, {keys.shape[1]}), got {query_proj.shape}")
        self.keys = keys
        self.values = values
        self.query_proj = query_proj

    @classmethod
    def init(cls, pool_size: int, prompt_length: int, dim: int, rng: np.random.Generator,
             std: float = 0.02, dtype=np.float32) -> "PromptPool":
        # key width equals the model width
        keys = rng.normal(0.0, std, (pool_size, dim)).astype(dtype)
        values = rng.normal(0.0, std, (pool_size, prompt_length, dim)).astype(dtype)
        proj = rng.normal(0.0, std, (dim, dim)).astype(dtype)
        return cls(
            Tensor(keys, requires_grad=True, name="prompt.keys"),
            Tensor(values, requires_grad=True, name="prompt.values"),
            Tensor(proj, requires_grad=True, name="prompt.query_proj"),
        )

    @property
    def pool_size(self) -> int:
        return self.values.shape[0]

    @property
    def prompt_length(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def parameters(self) -> dict[str, Tensor]:
        return {"prompt.keys": self.keys, "prompt.values": self.values, "prompt.query_proj": self.query_proj}

    def scores(self, query: Tensor) -> Tensor:
        projected = ops.linear(query, self.query_proj)
        return ops.linear(projected, ops.transpose(self.keys, (1, 0)))

    def retrieve(self, embeddings: Tensor, pad_mask: np.ndarray) -> RetrievalResult:
        """Retrieve one prompt per row of ``embeddings`` (B, T, D).

        ``pad_mask`` is True at real positions; PAD never enters the pooled query.
        """
        query = ops.max_over_sequence(embeddings, pad_mask)
        alpha = ops.softmax(self.scores(query), axis=-1)
        m, lp, d = self.values.shape
        flat = ops.reshape(self.values, (m, lp * d))
        prompt = ops.reshape(ops.linear(alpha, flat), (alpha.shape[0], lp, d))
        return RetrievalResult(prompt=prompt, alpha=alpha, query=query)


def prompt_param_count(pool_size: int, prompt_length: int, dim: int) -> int:
    """Prompt values plus keys; the query projection is not counted."""
    if min(pool_size, prompt_length, dim) < 1:
        raise ValueError("arguments must be positive")
    return pool_size * prompt_length * dim + pool_size * dim


def top_prompt(alpha) -> int:
    """Index of the largest attention weight, lowest index on ties."""
    return int(np.argmax(np.asarray(alpha)))
