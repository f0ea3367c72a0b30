"""Cross-lingual sentence retrieval, layer sweeps and prompt-selection analysis."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import pad_batch
from .encoder import EncoderModel
from .numerics import SimilarityError

JSD_SMOOTHING = 1e-12


# ---------------------------------------------------------- representations

def layer_representations(model: EncoderModel, rows: Sequence[Sequence[int]], include_prompt_positions: bool = False,
                          with_prompts: bool | None = None, batch_size: int = 128) -> np.ndarray:
    """Mean-pooled hidden states for every layer, shape (num_layers + 1, N, D).

    Averages over CLS and token positions (PAD excluded), plus the prompt
    positions when ``include_prompt_positions`` is set.
    """
    if with_prompts is None:
        with_prompts = model.has_pool
    if include_prompt_positions and not with_prompts:
        raise ValueError("prompt positions requested from a forward without prompts")
    chunks = []
    for i in range(0, len(rows), batch_size):
        batch = pad_batch(rows[i: i + batch_size])
        if np.any(batch.pad_mask.sum(axis=1) == 0):
            raise ValueError("a sentence has no non-PAD positions")
        out = model.forward(batch.input_ids, batch.pad_mask, use_prompts=with_prompts, collect_layers=True)
        mask = out.full_mask if include_prompt_positions else batch.pad_mask
        start = 0 if include_prompt_positions else out.prompt_len
        w = mask / mask.sum(axis=1, keepdims=True)
        chunks.append(np.stack([np.einsum("bt,btd->bd", w, h.data[:, start:]) for h in out.layers]))
    return np.concatenate(chunks, axis=1)


def sentence_representation(ids: Sequence[int], model: EncoderModel, layer: int, include_prompt_positions: bool = False,
                            with_prompts: bool | None = None) -> np.ndarray:
    if not 0 <= layer <= model.config.num_layers:
        raise IndexError(f"layer {layer} outside 0..{model.config.num_layers}")
    return layer_representations(model, [ids], include_prompt_positions, with_prompts)[layer, 0]


def _unit(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise SimilarityError("zero-norm sentence representation")
    return x / norm


def cosine_nearest(queries: np.ndarray, candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index and similarity of the most cosine-similar candidate per query (lowest index on ties)."""
    sims = _unit(np.asarray(queries, dtype=np.float64)) @ _unit(np.asarray(candidates, dtype=np.float64)).T
    idx = sims.argmax(axis=1)
    return idx, sims[np.arange(len(idx)), idx]


@dataclass
class RetrievalReport:
    direction: str
    accuracy: float
    layer: int
    include_prompt_positions: bool
    # (query index, retrieved index, gold index, cosine)
    table: list[tuple[int, int, int, float]] = field(default_factory=list)


def retrieval_from_vectors(src: np.ndarray, tgt: np.ndarray, layer: int = -1, include_prompt_positions: bool = False,
                           names: tuple[str, str] = ("src", "tgt")) -> tuple[RetrievalReport, RetrievalReport]:
    if len(src) != len(tgt):
        raise ValueError(f"{len(src)} source vs {len(tgt)} target sentences")
    reports = []
    for (a, b), (qa, qb) in (((src, tgt), names), ((tgt, src), names[::-1])):
        idx, sim = cosine_nearest(a, b)
        gold = np.arange(len(a))
        reports.append(RetrievalReport(
            direction=f"{qa}->{qb}",
            accuracy=float((idx == gold).mean()),
            layer=layer,
            include_prompt_positions=include_prompt_positions,
            table=[(int(i), int(j), int(i), float(s)) for i, (j, s) in enumerate(zip(idx, sim))],
        ))
    return reports[0], reports[1]


def retrieval_accuracy(src_rows, tgt_rows, model: EncoderModel, layer: int, include_prompt_positions: bool = False,
                       with_prompts: bool | None = None) -> tuple[RetrievalReport, RetrievalReport]:
    """accuracy@1 of cosine nearest-neighbour retrieval in both directions; gold pairs share an index."""
    if not 0 <= layer <= model.config.num_layers:
        raise IndexError(f"layer {layer} outside 0..{model.config.num_layers}")
    reps_s = layer_representations(model, src_rows, include_prompt_positions, with_prompts)
    reps_t = layer_representations(model, tgt_rows, include_prompt_positions, with_prompts)
    return retrieval_from_vectors(reps_s[layer], reps_t[layer], layer, include_prompt_positions)


def layer_sweep(src_rows, tgt_rows, model: EncoderModel, include_prompt_positions: bool = False,
                with_prompts: bool | None = None) -> list[dict]:
    """accuracy@1 for every layer 0..num_layers and both directions."""
    reps_s = layer_representations(model, src_rows, include_prompt_positions, with_prompts)
    reps_t = layer_representations(model, tgt_rows, include_prompt_positions, with_prompts)
    rows = []
    for layer in range(reps_s.shape[0]):
        for rep in retrieval_from_vectors(reps_s[layer], reps_t[layer], layer, include_prompt_positions):
            rows.append({"layer": layer, "direction": rep.direction, "accuracy": rep.accuracy})
    return rows


def best_layer(sweep: list[dict], direction: str | None = None) -> tuple[int, float]:
    """(layer, accuracy) maximizing accuracy averaged over directions, or for one direction."""
    by_layer: dict[int, list[float]] = {}
    for r in sweep:
        if direction is None or r["direction"] == direction:
            by_layer.setdefault(r["layer"], []).append(r["accuracy"])
    layer = max(by_layer, key=lambda k: (np.mean(by_layer[k]), -k))
    return layer, float(np.mean(by_layer[layer]))


def write_sweep_csv(rows: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "direction", "accuracy"])
        for r in rows:
            w.writerow([r["layer"], r["direction"], repr(float(r["accuracy"]))])


# --------------------------------------------------------- prompt analysis

def retrieval_weights(model: EncoderModel, rows, batch_size: int = 256) -> np.ndarray:
    """Per-instance attention weights over the pool, shape (N, M)."""
    if not model.has_pool:
        raise ValueError("model has no prompt pool")
    out = []
    for i in range(0, len(rows), batch_size):
        batch = pad_batch(rows[i: i + batch_size])
        e = model.embed(batch.input_ids)
        out.append(model.pool.retrieve(e, batch.pad_mask).alpha.data)
    return np.concatenate(out).astype(np.float64)


@dataclass
class PromptSelectionHistogram:
    counts: np.ndarray  # argmax selections per prompt index
    mean_alpha: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_alpha(cls, alpha: np.ndarray) -> "PromptSelectionHistogram":
        alpha = np.asarray(alpha, dtype=np.float64)
        counts = np.bincount(alpha.argmax(axis=1), minlength=alpha.shape[1])
        return cls(counts, alpha.mean(axis=0))

    def merge(self, other: "PromptSelectionHistogram") -> "PromptSelectionHistogram":
        n1, n2 = self.total, other.total
        mean = (self.mean_alpha * n1 + other.mean_alpha * n2) / max(n1 + n2, 1)
        return PromptSelectionHistogram(self.counts + other.counts, mean)


def prompt_selection_histogram(rows, model: EncoderModel) -> PromptSelectionHistogram:
    return PromptSelectionHistogram.from_alpha(retrieval_weights(model, rows))


def write_histogram_csv(hists: dict[str, PromptSelectionHistogram], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lang", "prompt_index", "count"])
        for lang in sorted(hists):
            for j, c in enumerate(hists[lang].counts):
                w.writerow([lang, j, int(c)])


def export_prompt_representations(dataset: dict[str, Sequence[Sequence[int]]], model: EncoderModel,
                                  path: str | os.PathLike) -> int:
    """Write one CSV row per sentence: language, sentence id, flattened retrieved prompt."""
    if not model.has_pool:
        raise ValueError("model has no prompt pool")
    lp, d = model.pool.prompt_length, model.pool.dim
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lang", "sid"] + [f"p{i}" for i in range(lp * d)])
        for lang in sorted(dataset):
            rows = dataset[lang]
            for i in range(0, len(rows), 256):
                batch = pad_batch(rows[i: i + 256])
                res = model.pool.retrieve(model.embed(batch.input_ids), batch.pad_mask)
                flat = res.prompt.data.reshape(len(batch.input_ids), lp * d)
                for k, vec in enumerate(flat):
                    w.writerow([lang, i + k] + [format(float(x), ".9g") for x in vec])
                    n += 1
    return n


# ---------------------------------------------------- language separation

def jsd(p, q) -> float:
    """Jensen-Shannon divergence, base 2, with additive smoothing."""
    p = np.asarray(p, dtype=np.float64) + JSD_SMOOTHING
    q = np.asarray(q, dtype=np.float64) + JSD_SMOOTHING
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)
    return float(0.5 * np.sum(p * np.log2(p / m)) + 0.5 * np.sum(q * np.log2(q / m)))


@dataclass
class SeparationResult:
    ratio: float
    between: float
    within: float
    degenerate: bool = False


def _halves(alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = len(alpha) // 2
    return alpha[:h].mean(axis=0), alpha[h: 2 * h].mean(axis=0)


def _between_within(groups: dict[str, np.ndarray]) -> tuple[float, float]:
    halves = {k: _halves(v) for k, v in groups.items()}
    langs = sorted(halves)
    within = float(np.mean([jsd(*halves[l]) for l in langs]))
    # cross-language comparisons use half-size samples too, so both terms carry equal sampling noise
    between = float(np.mean([jsd(halves[a][0], halves[b][1]) for a in langs for b in langs if a != b]))
    return between, within


def language_separation_score(alpha_by_lang: dict[str, np.ndarray], degenerate_tol: float = 1e-15) -> SeparationResult:
    """Between-language over within-language JSD of mean attention distributions.

    Each language's instances are split into first and second halves; the
    within term compares a language's halves, the between term compares
    half 1 of one language with half 2 of another. 0/0 is reported as 1
    with ``degenerate`` set.
    """
    if len(alpha_by_lang) < 2:
        raise ValueError("need at least two languages")
    for lang, a in alpha_by_lang.items():
        if len(a) < 2:
            raise ValueError(f"language {lang!r} has fewer than two instances")
    between, within = _between_within({k: np.asarray(v, dtype=np.float64) for k, v in alpha_by_lang.items()})
    if within <= degenerate_tol:
        if between <= degenerate_tol:
            return SeparationResult(1.0, between, within, degenerate=True)
        return SeparationResult(float("inf"), between, within, degenerate=True)
    return SeparationResult(between / within, between, within)


def permutation_null(alpha_by_lang: dict[str, np.ndarray], rng: np.random.Generator, permutations: int = 100) -> SeparationResult:
    """Separation with language labels shuffled across instances.

    Returns the ratio of the between and within terms each averaged over
    ``permutations`` shuffles.
    """
    langs = sorted(alpha_by_lang)
    sizes = [len(alpha_by_lang[l]) for l in langs]
    pooled = np.concatenate([np.asarray(alpha_by_lang[l], dtype=np.float64) for l in langs])
    cuts = np.cumsum(sizes)[:-1]
    b_sum = w_sum = 0.0
    for _ in range(permutations):
        parts = np.split(pooled[rng.permutation(len(pooled))], cuts)
        b, w = _between_within(dict(zip(langs, parts)))
        b_sum += b
        w_sum += w
    if w_sum == 0:
        return SeparationResult(1.0, b_sum / permutations, 0.0, degenerate=True)
    return SeparationResult(b_sum / w_sum, b_sum / permutations, w_sum / permutations)
