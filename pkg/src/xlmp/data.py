"""Vocabulary, tokenization, MLM masking and synthetic multilingual corpora."""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIAL = len(SPECIAL_TOKENS)
# outside every vocabulary's id range
IGNORE_INDEX = -100


class CorpusError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = path
        self.line_no = line_no


class Vocabulary:
    """Bijective token <-> id map with the specials at fixed ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        if len(set(tokens)) != len(tokens):
            raise CorpusError("vocabulary tokens must be unique")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]


def build_vocab(corpus_paths: Iterable[str | os.PathLike], min_freq: int = 1) -> Vocabulary:
    """Whitespace tokens seen at least ``min_freq`` times, by frequency then lexicographically."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    for path in corpus_paths:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                counts.update(line.split())
    for tok in SPECIAL_TOKENS:
        counts.pop(tok, None)
    if not counts:
        raise CorpusError("corpus is empty")
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


def encode(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    ids = [CLS] + [vocab.id(t) for t in text.split()]
    return ids[:max_len]


@dataclass
class MaskedBatch:
    """Padded MLM batch; ``pad_mask`` is True at real (non-PAD) positions."""

    input_ids: np.ndarray
    labels: np.ndarray
    pad_mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.input_ids.shape


def apply_mlm_mask(
    ids: Sequence[int],
    rng: np.random.Generator,
    vocab_size: int,
    mask_rate: float = 0.15,
) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style masking of one row.

    Each non-special position is selected with probability ``mask_rate``;
    selected tokens become [MASK] 80% of the time, a random non-special token
    10%, and stay unchanged 10%. Returns (input_ids, labels).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0 or ids[0] != CLS:
        raise ValueError("sequence must start with [CLS]")
    out = ids.copy()
    labels = np.full_like(ids, IGNORE_INDEX)
    maskable = ids >= NUM_SPECIAL
    # draws happen for every position so the stream layout is shape-determined
    select = (rng.random(ids.shape) < mask_rate) & maskable
    action = rng.random(ids.shape)
    random_tok = rng.integers(NUM_SPECIAL, max(vocab_size, NUM_SPECIAL + 1), size=ids.shape)
    labels[select] = ids[select]
    out[select & (action < 0.8)] = MASK
    swap = select & (action >= 0.8) & (action < 0.9)
    out[swap] = random_tok[swap]
    return out, labels


def pad_batch(rows: Sequence[Sequence[int]], labels: Sequence[Sequence[int]] | None = None) -> MaskedBatch:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    lab = np.full((len(rows), width), IGNORE_INDEX, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        if labels is not None:
            lab[i, : len(r)] = labels[i]
    return MaskedBatch(ids, lab, ids != PAD)


def mask_batch(rows: Sequence[Sequence[int]], rng: np.random.Generator, vocab_size: int, mask_rate: float = 0.15) -> MaskedBatch:
    masked, labels = zip(*(apply_mlm_mask(r, rng, vocab_size, mask_rate) for r in rows))
    return pad_batch(masked, labels)


def plain_batch(rows: Sequence[Sequence[int]]) -> MaskedBatch:
    return pad_batch(rows)


# ------------------------------------------------------------ synthetic data

@dataclass
class SyntheticLanguageSpec:
    """A synthetic language over a shared concept grammar.

    Concept ``c`` surfaces either as the shared token ``shared_tokens[c]``
    (with probability ``mixing_ratio``) or as the language's own
    ``specific_tokens[c]``.
    """

    lang: str
    shared_tokens: list[str]
    specific_tokens: list[str]
    min_len: int = 6
    max_len: int = 14
    mixing_ratio: float = 0.5
    # concept-level bigram grammar, rows sum to 1; shared across languages
    transitions: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.mixing_ratio <= 1.0:
            raise ValueError(f"mixing ratio must lie in [0, 1], got {self.mixing_ratio}")
        if len(self.shared_tokens) != len(self.specific_tokens):
            raise ValueError("shared and specific pools must cover the same concepts")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")


def concept_grammar(num_concepts: int, rng: np.random.Generator, branching: int = 4) -> np.ndarray:
    """Sparse random bigram transitions: each concept has ``branching`` likely successors."""
    trans = np.full((num_concepts, num_concepts), 0.02 / num_concepts)
    for c in range(num_concepts):
        succ = rng.choice(num_concepts, size=min(branching, num_concepts), replace=False)
        trans[c, succ] += rng.dirichlet(np.ones(len(succ))) * 0.98
    return trans / trans.sum(axis=1, keepdims=True)


def make_language_specs(
    langs: Sequence[str],
    num_concepts: int = 32,
    mixing_ratio: float = 0.5,
    min_len: int = 6,
    max_len: int = 14,
    branching: int = 4,
    seed: int = 0,
) -> list[SyntheticLanguageSpec]:
    """Specs sharing one concept grammar and one shared token pool."""
    if len(langs) < 2:
        raise ValueError("need at least two languages")
    if len(set(langs)) != len(langs):
        raise ValueError("language ids must be unique")
    rng = np.random.default_rng(seed)
    trans = concept_grammar(num_concepts, rng, branching)
    shared = [f"s{c}" for c in range(num_concepts)]
    return [
        SyntheticLanguageSpec(
            lang=lang,
            shared_tokens=shared,
            specific_tokens=[f"{lang}_{c}" for c in range(num_concepts)],
            min_len=min_len,
            max_len=max_len,
            mixing_ratio=mixing_ratio,
            transitions=trans,
        )
        for lang in langs
    ]


def _check_specs(specs: Sequence[SyntheticLanguageSpec]) -> None:
    if len(specs) < 2:
        raise ValueError("need at least two language specs")
    seen: set[str] = set()
    for s in specs:
        pool = set(s.specific_tokens)
        if pool & seen:
            raise ValueError(f"specific pool of {s.lang!r} overlaps another language")
        seen |= pool


def sample_concepts(spec: SyntheticLanguageSpec, rng: np.random.Generator) -> list[int]:
    n_concepts = len(spec.shared_tokens)
    trans = spec.transitions
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    c = int(rng.integers(n_concepts))
    seq = [c]
    for _ in range(length - 1):
        if trans is None:
            c = int(rng.integers(n_concepts))
        else:
            c = int(rng.choice(n_concepts, p=trans[c]))
        seq.append(c)
    return seq


def realize(spec: SyntheticLanguageSpec, concepts: Sequence[int], rng: np.random.Generator) -> str:
    shared = rng.random(len(concepts)) < spec.mixing_ratio
    return " ".join(spec.shared_tokens[c] if s else spec.specific_tokens[c] for c, s in zip(concepts, shared))


def generate_synthetic_corpus(
    specs: Sequence[SyntheticLanguageSpec],
    sentences_per_language: int,
    rng: np.random.Generator,
) -> dict[str, list[str]]:
    """Independent monolingual sentences for every language, keyed by language id."""
    _check_specs(specs)
    corpus = {}
    for spec in specs:
        corpus[spec.lang] = [realize(spec, sample_concepts(spec, rng), rng) for _ in range(sentences_per_language)]
    return corpus


def generate_parallel(
    src: SyntheticLanguageSpec,
    tgt: SyntheticLanguageSpec,
    num_pairs: int,
    rng: np.random.Generator,
) -> list[tuple[str, str]]:
    """Translation pairs: one concept sequence realized independently in both languages."""
    _check_specs([src, tgt])
    pairs = []
    for _ in range(num_pairs):
        concepts = sample_concepts(src, rng)
        pairs.append((realize(src, concepts, rng), realize(tgt, concepts, rng)))
    return pairs


def write_corpus(corpus: dict[str, list[str]], out_dir: str | os.PathLike) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for lang, sents in corpus.items():
        p = out / f"{lang}.txt"
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(s + "\n" for s in sents)
        paths.append(p)
    return paths


def read_corpus(paths: Iterable[str | os.PathLike]) -> dict[str, list[str]]:
    """Load ``<lang>.txt`` files, keyed by file stem."""
    corpus = {}
    for p in sorted(Path(x) for x in paths):
        with open(p, encoding="utf-8") as fh:
            corpus[p.stem] = [line.rstrip("\n") for line in fh if line.strip()]
    if not corpus or not any(corpus.values()):
        raise CorpusError("corpus is empty")
    return corpus


def corpus_files(corpus_dir: str | os.PathLike) -> list[Path]:
    files = sorted(Path(corpus_dir).glob("*.txt"))
    if not files:
        raise CorpusError(f"no <lang>.txt files in {corpus_dir}")
    return files


def write_parallel_tsv(pairs: Sequence[tuple[str, str]], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for src, tgt in pairs:
            if "\t" in src or "\t" in tgt or "\n" in src or "\n" in tgt:
                raise ValueError("sentences may not contain tabs or newlines")
            fh.write(f"{src}\t{tgt}\n")


@dataclass(frozen=True)
class ParallelPair:
    pair_id: int  # 1-based source line number
    src: str
    tgt: str


def load_parallel_tsv(path: str | os.PathLike) -> list[ParallelPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, line_no, f"expected exactly one tab separator, found {len(parts) - 1}")
            pairs.append(ParallelPair(line_no, parts[0], parts[1]))
    return pairs
