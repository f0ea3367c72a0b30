"""Command-line entry point: ``xlmp <command> ...``.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
command fails at run time.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, parse_run_config, write_json
from .data import (CorpusError, ParseError, Vocabulary, build_vocab, corpus_files, encode, generate_parallel,
                   generate_synthetic_corpus, load_parallel_tsv, make_language_specs, read_corpus,
                   write_corpus, write_parallel_tsv)
from .diagnostics import model_grad_check
from .encoder import EncoderModel
from .evaluation import (PromptSelectionHistogram, export_prompt_representations, language_separation_score,
                         layer_sweep, permutation_null, retrieval_accuracy, retrieval_weights, write_histogram_csv,
                         write_sweep_csv)
from .finetune import (FinetuneConfig, FinetuneMode, accuracy, finetune_sentence_task, finetune_token_task,
                       load_sentence_tsv, load_token_file, predict_sentences, predict_tokens, save_finetuned)
from .objectives import InfoNCEConfig
from .training import DATA_STREAM, TrainingDiverged, posttrain_infonce, pretrain, restore_state, stream

log = logging.getLogger("xlmp")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad flags or inputs that the user can fix before anything runs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers

def _args_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


def _manifest(out: Path, command: str, seed: int, config_hash: str, artifacts: list) -> None:
    names = sorted(set(map(str, artifacts)) | {"config.json"})
    write_json(out / "manifest.json", {"command": command, "seed": seed, "config_hash": config_hash,
                                       "artifacts": names})


def _plain_args(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def _vocab_of(ckpt) -> Vocabulary:
    itos = ckpt.meta.get("vocab")
    if not itos:
        raise CheckpointError("checkpoint carries no vocabulary")
    return Vocabulary(itos)


def _max_tokens(model: EncoderModel) -> int:
    """Longest CLS+token row that still fits next to the prompt region."""
    lp = model.config.prompt_length if model.has_pool else 0
    return model.config.max_seq_len - lp


def _encode_all(texts, vocab, model) -> list[list[int]]:
    n = _max_tokens(model)
    return [encode(t, vocab, n) for t in texts]


def _load_run(path, vocab_size: int | None) -> RunConfig:
    """Parse the config; an unset model.vocab_size is filled from the corpus vocabulary.

    With ``vocab_size=None`` this is a pre-flight validation pass only.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON ({e})"]) from None
    if isinstance(raw, dict) and vocab_size is not None:
        model = raw.setdefault("model", {})
        if isinstance(model, dict) and "vocab_size" not in model:
            model["vocab_size"] = vocab_size
    run = parse_run_config(raw)
    if vocab_size is not None and run.model.vocab_size < vocab_size:
        raise ConfigError([f"model.vocab_size={run.model.vocab_size} is smaller than the corpus vocabulary ({vocab_size})"])
    return run


def _corpus_for(path) -> tuple[dict[str, list[str]], Vocabulary]:
    # data.corpus_dir is needed before the config can be fully parsed (vocab size)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON ({e})"]) from None
    data = raw.get("data", {}) if isinstance(raw, dict) else {}
    data = data if isinstance(data, dict) else {}
    cdir = Path(data.get("corpus_dir", "corpus"))
    if not cdir.is_absolute():
        cdir = Path(path).resolve().parent / cdir
    files = corpus_files(cdir)
    return read_corpus(files), build_vocab(files, int(data.get("min_freq", 1)))


# ----------------------------------------------------------------- commands

def cmd_gen_corpus(args) -> int:
    try:
        with open(args.spec, encoding="utf-8") as fh:
            spec = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"corpus spec not found: {args.spec}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{args.spec}: invalid JSON ({e})") from None
    known = {"languages", "num_concepts", "mixing_ratio", "min_len", "max_len", "branching",
             "sentences_per_language", "parallel_pairs", "pivot"}
    unknown = sorted(set(spec) - known)
    if unknown:
        raise UsageError(f"{args.spec}: unknown keys {unknown}")
    langs = spec.get("languages")
    if not isinstance(langs, list) or len(langs) < 2:
        raise UsageError(f"{args.spec}: 'languages' must list at least two language ids")
    specs = make_language_specs(langs, num_concepts=spec.get("num_concepts", 32),
                                mixing_ratio=spec.get("mixing_ratio", 0.5), min_len=spec.get("min_len", 6),
                                max_len=spec.get("max_len", 14), branching=spec.get("branching", 4),
                                seed=args.seed)
    rng = stream(args.seed, DATA_STREAM)
    corpus = generate_synthetic_corpus(specs, spec.get("sentences_per_language", 1000), rng)
    out = Path(args.out)
    artifacts = [str(p.relative_to(out)) for p in write_corpus(corpus, out)]
    n_pairs = spec.get("parallel_pairs", 0)
    pivot = spec.get("pivot", langs[0])
    if pivot not in langs:
        raise UsageError(f"pivot {pivot!r} is not one of the languages")
    if n_pairs:
        (out / "parallel").mkdir(exist_ok=True)
        by_lang = {s.lang: s for s in specs}
        for lang in langs:
            if lang == pivot:
                continue
            name = f"parallel/{pivot}-{lang}.tsv"
            write_parallel_tsv(generate_parallel(by_lang[pivot], by_lang[lang], n_pairs, rng), out / name)
            artifacts.append(name)
    echo = {"spec": spec, "seed": args.seed}
    write_json(out / "config.json", echo)
    _manifest(out, "gen-corpus", args.seed, _args_hash(echo), artifacts)
    print(f"wrote {len(langs)} languages to {out}")
    return EXIT_OK


def _train_command(args, phase: str) -> int:
    _load_run(args.config, None)
    corpus_text, vocab = _corpus_for(args.config)
    run = _load_run(args.config, len(vocab))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", run.to_dict())
    state, start = None, 0
    if args.resume_from or (phase == "posttrain"):
        src = args.resume_from
        ckpt = load_checkpoint(src)
        model = ckpt.model(expected=run.model)
        vocab = _vocab_of(ckpt)
        if ckpt.meta.get("phase") == phase:
            state, start = restore_state(ckpt), int(ckpt.meta.get("step", 0))
            if ckpt.meta.get("config_hash") not in (None, run.digest()):
                raise ConfigError([f"{src} was written under a different run configuration"])
            log.info("resuming %s from step %d", phase, start)
        elif phase == "pretrain":
            raise CheckpointError(f"{src} holds a {ckpt.meta.get('phase')!r} checkpoint, not pretrain")
    else:
        model = EncoderModel(run.model, stream(run.seed, 0))
    corpus = {lang: _encode_all(t, vocab, model) for lang, t in corpus_text.items()}
    meta = {"vocab": vocab.itos, "config_hash": run.digest(), "run": run.to_dict()}
    if phase == "pretrain":
        res = pretrain(model, corpus, run.train, state=state, start_step=start, out_dir=out, meta=meta)
    else:
        res = posttrain_infonce(model, corpus, run.train, InfoNCEConfig(run.temperature), state=state,
                                start_step=start, out_dir=out, meta=meta)
    artifacts = sorted(p.name for p in out.iterdir() if p.suffix in (".ckpt", ".jsonl"))
    _manifest(out, phase, run.seed, run.digest(), artifacts)
    last = res.metrics[-1] if res.metrics else {}
    print(f"{phase} finished at step {res.step}: " + ", ".join(f"{k}={v:.4g}" for k, v in last.items()
                                                             if k not in ("step", "wall_ms")))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _train_command(args, "pretrain")


def cmd_posttrain(args) -> int:
    return _train_command(args, "posttrain")


def _load_task(path, task: str):
    if task == "sentence":
        texts, labels = load_sentence_tsv(path)
        return texts, labels
    sents, tags = load_token_file(path)
    return [" ".join(s) for s in sents], tags


def cmd_finetune(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model()
    vocab = _vocab_of(ckpt)
    mode = FinetuneMode.parse(args.mode)
    texts, labels = _load_task(args.train, args.task)
    if args.task == "sentence":
        names = sorted(set(labels))
    else:
        names = sorted({t for tags in labels for t in tags})
    index = {n: i for i, n in enumerate(names)}
    rows = _encode_all(texts, vocab, model)
    cfg = FinetuneConfig(lr=args.lr, steps=args.steps, batch_size=args.batch_size, seed=args.seed,
                         freeze_prompts=args.freeze_prompts)
    if args.task == "sentence":
        result = finetune_sentence_task(model, rows, [index[l] for l in labels], names, mode, cfg)
    else:
        tags = [[index[t] for t in tg][: len(r) - 1] for tg, r in zip(labels, rows)]
        result = finetune_token_task(model, rows, tags, names, mode, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = _plain_args(args)
    write_json(out / "config.json", echo)
    save_finetuned(out / "finetuned.ckpt", result, {"vocab": vocab.itos})
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.metrics:
            fh.write(json.dumps(rec) + "\n")
    artifacts = ["finetuned.ckpt", "metrics.jsonl"]
    if args.eval:
        etexts, elabels = _load_task(args.eval, args.task)
        erows = _encode_all(etexts, vocab, model)
        if args.task == "sentence":
            gold = [index.get(l, -1) for l in elabels]
            acc = accuracy(predict_sentences(result, erows), gold)
        else:
            gold = [np.array([index.get(t, -1) for t in tg][: len(r) - 1]) for tg, r in zip(elabels, erows)]
            acc = accuracy(predict_tokens(result, erows), gold)
        write_json(out / "eval.json", {"accuracy": acc, "count": len(erows)})
        artifacts.append("eval.json")
        print(f"held-out accuracy {acc:.4f}")
    _manifest(out, "finetune", args.seed, _args_hash(echo), artifacts)
    return EXIT_OK


def cmd_eval_retrieval(args) -> int:
    if args.pairs:
        pairs = load_parallel_tsv(args.pairs)
        src_text, tgt_text = [p.src for p in pairs], [p.tgt for p in pairs]
    elif args.src and args.tgt:
        src_text, tgt_text = _read_lines(args.src), _read_lines(args.tgt)
    else:
        raise UsageError("give either --pairs or both --src and --tgt")
    if len(src_text) != len(tgt_text):
        raise UsageError(f"source has {len(src_text)} lines but target has {len(tgt_text)}")
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model()
    vocab = _vocab_of(ckpt)
    src, tgt = _encode_all(src_text, vocab, model), _encode_all(tgt_text, vocab, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = _plain_args(args)
    write_json(out / "config.json", echo)
    if args.sweep:
        rows = layer_sweep(src, tgt, model, include_prompt_positions=args.include_prompts)
        write_sweep_csv(rows, out / "sweep.csv")
        artifacts = ["sweep.csv"]
        for r in rows:
            print(f"layer {r['layer']} {r['direction']}: {r['accuracy']:.4f}")
    else:
        layer = model.config.num_layers if args.layer in (None, -1) else args.layer
        if not 0 <= layer <= model.config.num_layers:
            raise UsageError(f"--layer must lie in 0..{model.config.num_layers}")
        reports = retrieval_accuracy(src, tgt, model, layer, include_prompt_positions=args.include_prompts)
        summary = {}
        for rep in reports:
            summary[rep.direction] = rep.accuracy
            name = f"nearest_{rep.direction.replace('->', '_to_')}.csv"
            with open(out / name, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("query,retrieved,gold,cosine\n")
                for q, got, gold, cos in rep.table:
                    fh.write(f"{q},{got},{gold},{cos:.9g}\n")
            print(f"layer {layer} {rep.direction}: {rep.accuracy:.4f}")
        write_json(out / "retrieval.json", {"layer": layer, "include_prompt_positions": args.include_prompts,
                                            "accuracy": summary, "pairs": len(src)})
        artifacts = ["retrieval.json"] + [f"nearest_{d.replace('->', '_to_')}.csv" for d in summary]
    _manifest(out, "eval-retrieval", 0, _args_hash(echo), artifacts)
    return EXIT_OK


def cmd_analyze_prompts(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model()
    if not model.has_pool:
        raise CheckpointError(f"{args.ckpt} has no prompt pool to analyze")
    vocab = _vocab_of(ckpt)
    texts = read_corpus(corpus_files(args.data))
    rows = {lang: _encode_all(t, vocab, model) for lang, t in texts.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = _plain_args(args)
    write_json(out / "config.json", echo)
    alpha = {lang: retrieval_weights(model, r) for lang, r in rows.items()}
    write_histogram_csv({lang: PromptSelectionHistogram.from_alpha(a) for lang, a in alpha.items()},
                        out / "histograms.csv")
    export_prompt_representations(rows, model, out / "prompts.csv")
    artifacts = ["histograms.csv", "prompts.csv"]
    if len(alpha) >= 2:
        sep = language_separation_score(alpha)
        null = permutation_null(alpha, np.random.default_rng(args.seed), args.permutations)
        report = {"ratio": sep.ratio, "between": sep.between, "within": sep.within, "degenerate": sep.degenerate,
                  "null_ratio": null.ratio, "permutations": args.permutations}
        write_json(out / "separation.json", report)
        artifacts.append("separation.json")
        print(f"separation ratio {sep.ratio:.3f} (null {null.ratio:.3f})")
    _manifest(out, "analyze-prompts", args.seed, _args_hash(echo), artifacts)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    err, checked = model_grad_check(args.preset, fraction=args.fraction, seed=args.seed, epsilon=args.epsilon)
    print(f"max relative error {err:.3e} over {checked} entries (threshold {args.threshold:g})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        echo = _plain_args(args)
        write_json(out / "config.json", echo)
        write_json(out / "gradcheck.json", {"max_relative_error": err, "checked": checked})
        _manifest(out, "grad-check", args.seed, _args_hash(echo), ["gradcheck.json"])
    return EXIT_OK if err < args.threshold else EXIT_RUNTIME


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xlmp", description="Prompt-pool multilingual encoder toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="generate synthetic languages and parallel pairs")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_corpus)

    for name, fn in (("pretrain", cmd_pretrain), ("posttrain", cmd_posttrain)):
        t = sub.add_parser(name, help=f"{name} from a JSON run config")
        t.add_argument("--config", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--from", dest="resume_from", required=(name == "posttrain"),
                       help="checkpoint to resume from (posttrain: starting weights)")
        t.set_defaults(func=fn)

    f = sub.add_parser("finetune", help="fine-tune a task head")
    f.add_argument("--task", choices=["token", "sentence"], required=True)
    f.add_argument("--mode", choices=["standard", "prompt"], required=True)
    f.add_argument("--ckpt", required=True)
    f.add_argument("--train", required=True)
    f.add_argument("--eval")
    f.add_argument("--out", required=True)
    f.add_argument("--steps", type=int, default=200)
    f.add_argument("--lr", type=float, default=1e-3)
    f.add_argument("--batch-size", type=int, default=32)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--freeze-prompts", action="store_true")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval-retrieval", help="nearest-neighbour sentence retrieval")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--src")
    e.add_argument("--tgt")
    e.add_argument("--pairs", help="TSV of src<TAB>tgt lines (alternative to --src/--tgt)")
    which = e.add_mutually_exclusive_group()
    which.add_argument("--layer", type=int)
    which.add_argument("--sweep", action="store_true")
    e.add_argument("--include-prompts", action="store_true", help="average over prompt positions too")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval_retrieval)

    a = sub.add_parser("analyze-prompts", help="selection histograms, prompt export, separation")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True, help="directory of <lang>.txt files")
    a.add_argument("--out", required=True)
    a.add_argument("--permutations", type=int, default=200)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_analyze_prompts)

    c = sub.add_parser("grad-check", help="finite-difference check of all gradients")
    c.add_argument("--preset", default="tiny")
    c.add_argument("--fraction", type=float, default=0.01)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--epsilon", type=float, default=1e-4)
    c.add_argument("--threshold", type=float, default=1e-4)
    c.add_argument("--out")
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"xlmp {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"xlmp {args.command}: file not found: {e.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, CorpusError, ParseError, TrainingDiverged, ValueError, OSError) as e:
        print(f"xlmp {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
