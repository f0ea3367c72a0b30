"""Acceptance criteria 1-11, one test each.

Every test records a PASS/FAIL line (see conftest.py) before asserting, so
the terminal summary lists all eleven even when some fail. The training
runs are marked ``slow``; ``pytest -m "not slow"`` skips them.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE
from xlmp.data import (CLS, MASK, NUM_SPECIAL, apply_mlm_mask, build_vocab, encode, generate_parallel,
                       generate_synthetic_corpus, make_language_specs, pad_batch, write_corpus)
from xlmp.diagnostics import model_grad_check
from xlmp.encoder import EncoderModel, preset
from xlmp.evaluation import (best_layer, language_separation_score, layer_sweep, permutation_null,
                             retrieval_from_vectors, retrieval_weights, write_sweep_csv)
from xlmp.finetune import FinetuneConfig, accuracy, finetune_sentence_task, predict_sentences
from xlmp.numerics import Tensor
from xlmp.objectives import InfoNCEConfig, infonce_loss
from xlmp.prompt_pool import POOL_PARAM_NAMES, PromptPool, prompt_param_count
from xlmp.training import TRAIN_PRESETS, TrainConfig, evaluate_mlm, posttrain_infonce, pretrain, resume
from xlmp.checkpoint import load_checkpoint, save_checkpoint

LANGS = ["l0", "l1", "l2", "l3"]
PRETRAIN = TrainConfig(lr=3e-3, warmup_steps=300, total_steps=3000, batch_size=32, seed=0, log_every=100)
POSTTRAIN = TrainConfig(lr=3e-3, warmup_steps=100, total_steps=1000, batch_size=32, seed=7, log_every=100)


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


# ------------------------------------------------------------ shared runs

@pytest.fixture(scope="session")
def languages(tmp_path_factory):
    """Four synthetic languages, 2,000 sentences each, plus 200 held-out l0-l1 pairs."""
    specs = make_language_specs(LANGS, num_concepts=32, mixing_ratio=0.5, seed=0)
    rng = np.random.default_rng(1)
    corpus = generate_synthetic_corpus(specs, 2000, rng)
    pairs = generate_parallel(specs[0], specs[1], 200, rng)
    vocab = build_vocab(write_corpus(corpus, tmp_path_factory.mktemp("corpus")))
    enc = {lang: [encode(s, vocab, 62) for s in sents] for lang, sents in corpus.items()}
    src = [encode(a, vocab, 62) for a, _ in pairs]
    tgt = [encode(b, vocab, 62) for _, b in pairs]
    heldout = generate_synthetic_corpus(specs, 250, np.random.default_rng(2))
    heldout = {lang: [encode(s, vocab, 62) for s in sents] for lang, sents in heldout.items()}
    return {"vocab": vocab, "corpus": enc, "src": src, "tgt": tgt, "heldout": heldout}


@pytest.fixture(scope="session")
def mlm_model(languages, tmp_path_factory):
    model = EncoderModel(preset("tiny", vocab_size=len(languages["vocab"])), np.random.default_rng(0))
    t0 = time.perf_counter()
    pretrain(model, languages["corpus"], PRETRAIN)
    path = tmp_path_factory.mktemp("mlm") / "pretrained.ckpt"
    save_checkpoint(path, model, {"phase": "pretrain"})
    return model, path, time.perf_counter() - t0


@pytest.fixture(scope="session")
def post_model(languages, mlm_model):
    model = load_checkpoint(mlm_model[1]).model()
    posttrain_infonce(model, languages["corpus"], POSTTRAIN, InfoNCEConfig(0.05))
    return model


# --------------------------------------------------------------- criteria

def test_c01_parameter_accounting():
    t0 = time.perf_counter()
    base, large = prompt_param_count(256, 4, 768), prompt_param_count(256, 4, 1024)
    pool = PromptPool.init(256, 4, 768, np.random.default_rng(0))
    counted = pool.keys.size + pool.values.size
    elapsed = time.perf_counter() - t0
    ok = base == 983_040 and large == 1_310_720 and counted == base and elapsed < 1.0
    record(1, ok, f"{base:,} / {large:,} in {elapsed:.3f}s")
    assert ok


def test_c02_gradient_integrity():
    t0 = time.perf_counter()
    err, checked = model_grad_check("tiny", fraction=0.01, seed=0, epsilon=1e-4)
    elapsed = time.perf_counter() - t0
    ok = err < 1e-4 and elapsed < 60
    record(2, ok, f"max relative error {err:.2e} over {checked} entries, {elapsed:.1f}s")
    assert ok


def test_c03_plug_out_equivalence():
    cfg = preset("tiny", vocab_size=60, dropout=0.0, attn_dropout=0.0)
    model = EncoderModel(cfg, np.random.default_rng(0))
    ref = EncoderModel(cfg, with_pool=False)
    ref.load_arrays({k: v for k, v in model.named_arrays() if k not in POOL_PARAM_NAMES})
    rng = np.random.default_rng(1)
    identical = 0
    for _ in range(100):
        rows = [[CLS] + rng.integers(NUM_SPECIAL, 60, size=rng.integers(1, 20)).tolist()
                for _ in range(rng.integers(1, 6))]
        b = pad_batch(rows)
        identical += np.array_equal(model.forward_plain(b).hidden.data, ref.forward(b.input_ids, b.pad_mask).hidden.data)
    record(3, identical == 100, f"{identical}/100 batches bitwise identical")
    assert identical == 100


def _oracle(emb, mask, keys, values, proj):
    d = emb.shape[1]
    r = [max(emb[t][f] for t in range(len(emb)) if mask[t]) for f in range(d)]
    q = [sum(r[i] * proj[i][j] for i in range(d)) for j in range(d)]
    s = [sum(q[j] * k[j] for j in range(d)) for k in keys]
    e = [np.exp(x - max(s)) for x in s]
    alpha = [x / sum(e) for x in e]
    prompt = [[sum(alpha[m] * values[m][l][f] for m in range(len(keys))) for f in range(d)]
              for l in range(values.shape[1])]
    return np.array(alpha), np.array(prompt)


def test_c04_retrieval_simplex():
    rng = np.random.default_rng(0)
    worst_sum, negative = 0.0, 0
    for _ in range(1000):
        m, lp, d, t = rng.integers(1, 17), rng.integers(1, 5), rng.integers(1, 17), rng.integers(1, 12)
        pool = PromptPool.init(m, lp, d, rng, std=rng.uniform(0.01, 5.0))
        mask = rng.random((2, t)) < 0.7
        mask[:, 0] = True
        a = pool.retrieve(Tensor(rng.normal(0, 3, size=(2, t, d))), mask).alpha.data.astype(np.float64)
        negative += int((a < 0).sum())
        worst_sum = max(worst_sum, float(np.abs(a.sum(-1) - 1).max()))
    single = PromptPool.init(1, 2, 4, rng)
    exact_one = (single.retrieve(Tensor(rng.normal(size=(5, 3, 4))), np.ones((5, 3), bool)).alpha.data == 1.0).all()
    oracle_err = 0.0
    for _ in range(100):
        m, lp, d, t = rng.integers(1, 6), rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 7)
        keys, values, proj = rng.normal(size=(m, d)), rng.normal(size=(m, lp, d)), rng.normal(size=(d, d))
        emb = rng.normal(size=(t, d))
        mask = rng.random(t) < 0.6
        mask[0] = True
        pool = PromptPool(Tensor(keys, dtype=np.float64), Tensor(values, dtype=np.float64), Tensor(proj, dtype=np.float64))
        res = pool.retrieve(Tensor(emb[None], dtype=np.float64), mask[None])
        alpha, prompt = _oracle(emb, mask, keys, values, proj)
        oracle_err = max(oracle_err, np.abs(res.alpha.data[0] - alpha).max(), np.abs(res.prompt.data[0] - prompt).max())
    ok = negative == 0 and worst_sum < 1e-6 and exact_one and oracle_err < 1e-6
    record(4, ok, f"max |sum-1| {worst_sum:.1e}, M=1 exact {bool(exact_one)}, oracle error {oracle_err:.1e}")
    assert ok


def test_c05_masking_statistics():
    rng = np.random.default_rng(0)
    vocab = 500
    selected = masked = swapped = kept = total = 0
    while total < 100_000:
        ids = np.concatenate([[CLS], rng.integers(NUM_SPECIAL, vocab, size=63)])
        out, labels = apply_mlm_mask(ids, rng, vocab)
        sel = labels != -100
        total += 63
        selected += int(sel.sum())
        masked += int((out[sel] == MASK).sum())
        kept += int((out[sel] == ids[sel]).sum())
        swapped += int(((out[sel] != MASK) & (out[sel] != ids[sel])).sum())
    # a random replacement equal to the original token (1 in 495) lands in the kept column
    frac = selected / total
    split = np.array([masked, swapped, kept]) / selected
    ok = abs(frac - 0.15) <= 0.01 and np.all(np.abs(split - [0.8, 0.1, 0.1]) <= 0.02)
    record(5, ok, f"selected {frac:.4f} of {total} tokens, split {np.round(split, 4).tolist()}")
    assert ok


@pytest.mark.slow
def test_c06_learnability(tmp_path):
    specs = make_language_specs(["solo", "unused"], num_concepts=32, seed=3)
    sents = generate_synthetic_corpus(specs, 32, np.random.default_rng(3))["solo"]
    vocab = build_vocab(write_corpus({"solo": sents}, tmp_path))
    corpus = {"solo": [encode(s, vocab, 62) for s in sents]}
    cfg = replace(TRAIN_PRESETS["tiny"], seed=0)
    runs = []
    t0 = time.perf_counter()
    for _ in range(2):
        model = EncoderModel(preset("tiny", vocab_size=len(vocab)), np.random.default_rng(0))
        res = pretrain(model, corpus, cfg)
        runs.append((model, [r["loss"] for r in res.metrics]))
    elapsed = (time.perf_counter() - t0) / 2
    acc = evaluate_mlm(runs[0][0], corpus, repeats=8)["masked_acc"]
    same = runs[0][1] == runs[1][1]
    ok = acc > 0.9 and same and elapsed < 300 and cfg.total_steps <= 500
    record(6, ok, f"masked accuracy {acc:.3f} after {cfg.total_steps} steps, {elapsed:.0f}s/run, "
                  f"trajectories identical {same}")
    assert ok


@pytest.mark.slow
def test_c07_soft_language_clustering(languages, mlm_model):
    model, _, elapsed = mlm_model
    alpha = {lang: retrieval_weights(model, rows) for lang, rows in languages["corpus"].items()}
    sep = language_separation_score(alpha)
    null = permutation_null(alpha, np.random.default_rng(0), permutations=200)
    ok = sep.ratio > 2.0 and 0.8 <= null.ratio <= 1.2 and elapsed < 1800
    record(7, ok, f"between/within {sep.ratio:.2f}, permutation null {null.ratio:.3f}, "
                  f"pretraining {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_c08_contrastive_retrieval_gain(languages, mlm_model, post_model, tmp_path):
    src, tgt = languages["src"], languages["tgt"]
    mlm_sweep = layer_sweep(src, tgt, mlm_model[0])
    post_sweep = layer_sweep(src, tgt, post_model)
    write_sweep_csv(mlm_sweep, tmp_path / "sweep_mlm.csv")
    write_sweep_csv(post_sweep, tmp_path / "sweep_post.csv")
    mlm_layer, mlm_acc = best_layer(mlm_sweep)
    post_layer, post_acc = best_layer(post_sweep)
    rand = np.mean([retrieval_from_vectors(*np.random.default_rng(s).normal(size=(2, 200, 64)))[0].accuracy
                    for s in range(20)])
    # reported alongside, not used for the verdict: averaging over prompt positions as well
    _, post_incl = best_layer(layer_sweep(src, tgt, post_model, include_prompt_positions=True))
    _, mlm_incl = best_layer(layer_sweep(src, tgt, mlm_model[0], include_prompt_positions=True))
    ok = post_acc - mlm_acc >= 0.20 and post_acc - rand >= 0.50 and (tmp_path / "sweep_post.csv").exists()
    record(8, ok, f"post-trained {post_acc:.3f} (layer {post_layer}) vs MLM-only {mlm_acc:.3f} "
                  f"(layer {mlm_layer}), gain {100 * (post_acc - mlm_acc):+.1f} pts; random {rand:.3f}; "
                  f"with prompt positions {post_incl:.3f} vs {mlm_incl:.3f}")
    assert ok


def _brute(v1, v2, tau):
    total = 0.0
    for i in range(len(v1)):
        sims = [float(v1[i] @ v2[k] / np.linalg.norm(v1[i]) / np.linalg.norm(v2[k])) / tau for k in range(len(v2))]
        total -= sims[i] - np.log(sum(np.exp(s) for s in sims))
    return total / len(v1)


def test_c09_infonce_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        n, d, tau = rng.integers(2, 9), rng.integers(1, 9), rng.uniform(0.05, 2.0)
        v1, v2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        got = float(infonce_loss(Tensor(v1, dtype=np.float64), Tensor(v2, dtype=np.float64), InfoNCEConfig(tau)).data)
        worst = max(worst, abs(got - _brute(v1, v2, tau)))
    eye = Tensor(np.eye(2), dtype=np.float64)
    closed = float(infonce_loss(eye, eye, InfoNCEConfig(1.0)).data)
    closed_err = abs(closed + np.log(np.e / (np.e + 1)))
    ok = worst < 1e-6 and closed_err < 1e-9
    record(9, ok, f"max oracle gap {worst:.1e}, closed-form gap {closed_err:.1e}")
    assert ok


@pytest.mark.slow
def test_c10_checkpoint_integrity(tmp_path):
    rng = np.random.default_rng(0)
    corpus = {lang: [[CLS] + rng.integers(NUM_SPECIAL + 10 * k, NUM_SPECIAL + 10 * k + 20,
                                          size=rng.integers(4, 12)).tolist() for _ in range(64)]
              for k, lang in enumerate(("a", "b"))}
    cfg = TrainConfig(lr=3e-3, warmup_steps=10, total_steps=100, batch_size=16, seed=3, ckpt_every=50)
    model = EncoderModel(preset("tiny", vocab_size=60), np.random.default_rng(2))
    save_checkpoint(tmp_path / "init.ckpt", model)
    loaded = load_checkpoint(tmp_path / "init.ckpt").model()
    bitwise = all(loaded.parameters()[k].data.tobytes() == v.tobytes() for k, v in model.named_arrays())
    full = pretrain(model, corpus, cfg, out_dir=tmp_path / "full")
    pretrain(load_checkpoint(tmp_path / "init.ckpt").model(), corpus, cfg, out_dir=tmp_path / "part", stop_at=50)
    resumed, state, step, _ = resume(tmp_path / "part" / "step50.ckpt")
    rest = pretrain(resumed, corpus, cfg, state=state, start_step=step, out_dir=tmp_path / "part")
    same_steps = [r["loss"] for r in full.metrics[50:]] == [r["loss"] for r in rest.metrics]
    same_final = (tmp_path / "full" / "final.ckpt").read_bytes() == (tmp_path / "part" / "final.ckpt").read_bytes()
    ok = bitwise and same_steps and same_final
    record(10, ok, f"round trip bitwise {bitwise}, resumed losses identical {same_steps}, "
                   f"final checkpoint identical {same_final}")
    assert ok


@pytest.mark.slow
def test_c11_finetuning_modes(languages, mlm_model):
    ckpt = mlm_model[1]
    train_rows, train_labels, test_rows, test_labels = [], [], [], []
    for k, lang in enumerate(LANGS):
        train_rows += languages["corpus"][lang][:200]
        train_labels += [k] * 200
        test_rows += languages["heldout"][lang]
        test_labels += [k] * len(languages["heldout"][lang])
    cfg = FinetuneConfig(lr=1e-3, steps=150, batch_size=32, seed=0)

    # standard mode: one backward pass, then inspect the pool gradients directly
    std_model = load_checkpoint(ckpt).model()
    std = finetune_sentence_task(std_model, train_rows, train_labels, LANGS, "standard", replace(cfg, steps=3))
    pool_grads_zero = all(p.grad is None or not p.grad.any() for p in
                          (std.model.parameters()[k] for k in POOL_PARAM_NAMES))
    pool_unchanged = all(np.array_equal(std.model.parameters()[k].data, load_checkpoint(ckpt).tensors[k])
                         for k in POOL_PARAM_NAMES)

    prompt = finetune_sentence_task(load_checkpoint(ckpt).model(), train_rows, train_labels, LANGS, "prompt", cfg)
    acc = accuracy(predict_sentences(prompt, test_rows), test_labels)
    ok = pool_grads_zero and pool_unchanged and acc > 0.95
    record(11, ok, f"standard-mode pool gradients zero {pool_grads_zero}, pool unchanged {pool_unchanged}; "
                   f"prompt-mode language ID held-out accuracy {acc:.3f}")
    assert ok
