"""Acceptance suite: one test per numbered criterion.

Each test prints a PASS line with its measured values once its assertions
hold (run with ``pytest -s`` to watch them stream). The training-heavy
criteria share module-scoped fixtures; every value asserted here is either
computed by an independent oracle inside this file or bounded by an
analytic constant of the generating grammar.
"""

import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

import songlm.autograd as ag
from songlm.analysis import cle_mst, embedding_trace, max_arborescence, span_stats, \
    cosine_similarity_distribution, two_cluster_separation
from songlm.classify import LabeledCorpus, finetune, merge_labeled, upper_bound_accuracy
from songlm.corpus import BOS, EOS, Corpus, Song, Vocab, load_corpus
from songlm.markov import MarkovModel
from songlm.metrics import classification_metrics, next_token_cross_entropy
from songlm.models import GptConfig, GptModel
from songlm.synthlab import (LongRangeGrammar, TwoContextGrammar, ablation_like_pair,
                             echo_metrics, gen_long_range, gen_two_context)
from songlm.training import ParamRange, TpeSpec, TrainSpec, tpe_search, train

from helpers import (assert_valid_arborescence, brute_force_arborescence,
                     check_gradients, rand_tensor, random_arborescence_weight,
                     scalarize)

pytestmark = pytest.mark.heavy

# the d=8 long-range grammar with its default shape (7 fillers, 3 pairs)
GRAMMAR = LongRangeGrammar(cue_prob=0.2)
CHANCE = 1.0 / GRAMMAR.n_pairs  # best context-blind echo accuracy

SEEDS = (0, 1, 2)


def gpt_recipe(seed, max_epochs=6, patience=2, lr=1e-3):
    """Training settings for the synthetic trainings: the published lr and
    batch size; beta2 lowered to 0.95, which converges in a handful of
    epochs at this scale."""
    return TrainSpec(batch_size=32, lr=lr, max_epochs=max_epochs,
                     patience=patience, seed=seed, optimizer="adamw",
                     betas=(0.9, 0.95))


def medium_config(vocab_size, span=None):
    return GptConfig(n_layers=6, n_heads=6, hidden=384, vocab_size=vocab_size,
                     context_len=64, dropout=0.0, attention_span=span)


@pytest.fixture(scope="module")
def lr_data():
    corpus, truth = gen_long_range(GRAMMAR, 1600, seed=101)
    train_c = Corpus(corpus.songs[:1300], corpus.vocab, "lr/train")
    eval_c = Corpus(corpus.songs[1300:1400], corpus.vocab, "lr/eval")
    test_c = Corpus(corpus.songs[1400:], corpus.vocab, "lr/test")
    test_truth = truth.subset(range(1400, 1600))
    return corpus, train_c, eval_c, test_c, test_truth


@pytest.fixture(scope="module")
def trained_gpts(lr_data):
    _, train_c, eval_c, _, _ = lr_data
    models = {}
    for seed in SEEDS:
        model = GptModel(medium_config(len(train_c.vocab)), seed=seed,
                         vocab=train_c.vocab)
        train(model, train_c, eval_c, gpt_recipe(seed))
        models[seed] = model
    return models


@pytest.fixture(scope="module")
def span_gpts(lr_data, trained_gpts):
    """One model per attention span, trained and evaluated under that span.

    Songs never exceed 62 tokens, so the span-256 mask is identical to the
    unrestricted mask; the unrestricted seed-0 model *is* the span-256
    model, parameter for parameter.
    """
    _, train_c, eval_c, _, _ = lr_data
    models = {}
    for span in (1, 3, 6, 10):
        config = medium_config(len(train_c.vocab), span=span)
        model = GptModel(config, seed=0, vocab=train_c.vocab)
        train(model, train_c, eval_c, gpt_recipe(0))
        models[span] = model
    base = trained_gpts[0]
    assert np.array_equal(base._mask(62),
                          GptModel(medium_config(len(train_c.vocab), span=256),
                                   seed=0)._mask(62))
    models[256] = GptModel(replace(base.config, attention_span=256),
                           vocab=base.vocab, params=base.params)
    return models


# -----------------------------------------------------------------------------
# 1. gradient correctness


def test_c01_gradient_correctness():
    rng = np.random.default_rng(2024)

    def shp(*dims):
        return tuple(int(rng.integers(1, 5)) for _ in dims)

    checked = 0
    for draw in range(20):
        n, m, k = (int(rng.integers(1, 5)) for _ in range(3))
        cases = {
            "add": (lambda a, b: ag.add(a, b), [(n, m), (n, m)]),
            "add_bcast": (lambda a, b: ag.add(a, b), [(n, m), (m,)]),
            "sub": (lambda a, b: ag.sub(a, b), [(n, m), (n, m)]),
            "neg": (ag.neg, [(n, m)]),
            "mul": (lambda a, b: ag.mul(a, b), [(n, m), (n, m)]),
            "matmul": (lambda a, b: ag.matmul(a, b), [(n, k), (k, m)]),
            "matmul_batched": (lambda a, b: ag.matmul(a, b), [(2, n, k), (2, k, m)]),
            "tanh": (ag.tanh, [(n, m)]),
            "sigmoid": (ag.sigmoid, [(n, m)]),
            "gelu": (ag.gelu, [(n, m)]),
            "softmax": (lambda a: ag.softmax(a, axis=-1), [(n, m)]),
            "layer_norm": (lambda x, g, b: ag.layer_norm(x, g, b),
                           [(n, m), (m,), (m,)]),
            "concat": (lambda a, b: ag.concat([a, b], axis=0), [(n, m), (k, m)]),
            "slice": (lambda a: a[: max(1, n - 1), ::2], [(n, m + 1)]),
            "reshape": (lambda a: ag.reshape(a, (m, n)), [(n, m)]),
            "transpose": (lambda a: ag.transpose(a, (1, 0)), [(n, m)]),
            "sum": (lambda a: ag.sum_(a, axis=0), [(n, m)]),
            "mean": (lambda a: ag.mean(a, axis=-1), [(n, m)]),
        }
        for name, (fn, shapes) in cases.items():
            tensors = [rand_tensor(rng, s) for s in shapes]
            w_seed = int(rng.integers(2**31))
            # the projection rng must restart per evaluation so the loss is
            # a deterministic function under finite differences
            check_gradients(lambda: scalarize(fn(*tensors),
                                              np.random.default_rng(w_seed)), tensors)
            checked += 1
        # ops with integer side inputs
        table = rand_tensor(rng, (5, m))
        ids = rng.integers(0, 5, size=(2, n))
        check_gradients(lambda: scalarize(ag.embedding_lookup(table, ids),
                                          np.random.default_rng(1)), [table])
        x = rand_tensor(rng, (n, m, k))
        pos = rng.integers(0, m, size=n)
        check_gradients(lambda: scalarize(ag.select_positions(x, pos),
                                          np.random.default_rng(2)), [x])
        logits = rand_tensor(rng, (n, max(2, m)))
        targets = rng.integers(0, max(2, m), size=n)
        check_gradients(lambda: ag.cross_entropy_loss(logits, targets), [logits])
        drop_in = rand_tensor(rng, (n, m))
        drop_seed = int(rng.integers(2**31))
        check_gradients(lambda: scalarize(
            ag.dropout(drop_in, 0.35, train=True, rng=np.random.default_rng(drop_seed)),
            np.random.default_rng(3)), [drop_in])
        checked += 4
    print(f"\nACCEPTANCE 1 PASS: {checked} gradient checks "
          f"(22 ops x 20 random shape/seed draws), rel err < 1e-4")


# -----------------------------------------------------------------------------
# 2. Markov fidelity on a 6th-order corpus


@pytest.fixture(scope="module")
def markov6_world():
    base, _ = gen_long_range(GRAMMAR, 3000, seed=55)
    generator = MarkovModel.fit(base, 6)
    synth = generator.synth_corpus(6000, seed=56, max_len=256)
    fit_part = Corpus(synth.songs[:5400], synth.vocab, "m6/train")
    held_out = Corpus(synth.songs[5400:], synth.vocab, "m6/heldout")
    return generator, synth, fit_part, held_out


def _model_heldout_xent(model, corpus):
    total, n = 0.0, 0
    for song in corpus.songs:
        q = np.asarray(model.next_token_distributions(song.ids), dtype=np.float64)
        probs = q[np.arange(len(song.ids) - 1), song.ids[1:]]
        total += float(-np.log(probs).sum())
        n += len(song.ids) - 1
    return total / n, n


def test_c02_markov_fidelity(markov6_world):
    generator, synth, fit_part, held_out = markov6_world
    n_tokens = sum(len(s) for s in synth.songs)
    assert n_tokens >= 200_000

    refit = MarkovModel.fit(fit_part, 6)
    refit_xent, _ = _model_heldout_xent(refit, held_out)
    # entropy rate of the generator, estimated from its own tables on the
    # same held-out sample
    gen_xent, n_eval = _model_heldout_xent(generator, held_out)
    assert abs(refit_xent - gen_xent) < 0.05

    # the synthetic corpus is genuinely 6th-order: given a frequent 6-gram,
    # the next token is independent of the 7th-back token
    from scipy.stats import chi2_contingency
    counts = {}
    for song in synth.songs:
        ids = song.ids
        for i in range(7, len(ids)):
            key = tuple(ids[i - 6:i])
            counts.setdefault(key, []).append((ids[i - 7], ids[i]))
    top = max(counts.items(), key=lambda kv: len(kv[1]))[1]
    backs = sorted({b for b, _ in top})
    nexts = sorted({x for _, x in top})
    table = np.zeros((len(backs), len(nexts)))
    for b, x in top:
        table[backs.index(b), nexts.index(x)] += 1
    table = table[table.sum(axis=1) >= 5][:, table.sum(axis=0) >= 5]
    p_value = chi2_contingency(table).pvalue
    assert p_value > 0.01

    # a GPT-medium trained on the same corpus cannot undercut the true
    # model family by more than the tolerance
    model = GptModel(medium_config(len(synth.vocab)), seed=0, vocab=synth.vocab)
    train(model, fit_part, held_out, gpt_recipe(0, max_epochs=2, patience=2))
    gpt_xent, _ = _model_heldout_xent(model, held_out)
    assert gpt_xent >= refit_xent - 0.05
    print(f"\nACCEPTANCE 2 PASS: refit {refit_xent:.4f} vs generator "
          f"{gen_xent:.4f} nats (|diff| < 0.05, n={n_eval}); chi2 p={p_value:.3f}; "
          f"gpt {gpt_xent:.4f} >= refit - 0.05")


# -----------------------------------------------------------------------------
# 3. long-range separation


def test_c03_long_range_separation(lr_data, trained_gpts):
    _, train_c, _, test_c, test_truth = lr_data
    gpt_accs = []
    for seed, model in trained_gpts.items():
        _, acc, n = echo_metrics(model, test_c, test_truth)
        gpt_accs.append(acc)
        assert acc >= 0.95, f"seed {seed}: echo accuracy {acc:.3f}"
    markov = MarkovModel.fit(train_c, 6)
    _, markov_acc, _ = echo_metrics(markov, test_c, test_truth)
    assert markov_acc <= CHANCE + 0.05
    print(f"\nACCEPTANCE 3 PASS: gpt echo accuracy {min(gpt_accs):.3f}..",
          f"{max(gpt_accs):.3f} >= 0.95 over {len(SEEDS)} seeds; "
          f"markov-6 {markov_acc:.3f} <= chance+0.05 = {CHANCE + 0.05:.3f}")


# -----------------------------------------------------------------------------
# 4. span-restriction degradation


@pytest.mark.parametrize("span", [1, 3, 6, 10, 256])
def test_c04_span_restriction(lr_data, span_gpts, span):
    _, _, _, test_c, test_truth = lr_data
    xent, acc, n = echo_metrics(span_gpts[span], test_c, test_truth)
    blind_floor = GRAMMAR.filler_entropy - 0.05
    if span in (1, 3, 6):
        assert xent >= blind_floor, f"span {span}: echo xent {xent:.3f}"
        verdict = f">= filler entropy - 0.05 = {blind_floor:.3f}"
    else:
        assert xent <= 0.1, f"span {span}: echo xent {xent:.3f}"
        verdict = "<= 0.1"
    print(f"\nACCEPTANCE 4 PASS: span {span}: echo xent {xent:.4f} {verdict} "
          f"(acc {acc:.3f}, n={n})")


# -----------------------------------------------------------------------------
# 5. span statistics deepen with layers


def test_c05_span_statistics_trend(lr_data, trained_gpts):
    _, _, _, test_c, _ = lr_data
    margins = []
    for seed, model in trained_gpts.items():
        stats = span_stats(model, test_c, threshold=0.5, max_songs=200)
        first, last = stats[0], stats[-1]
        assert first.n_pairs > 0 and last.n_pairs > 0
        margin = last.mean_span - first.mean_span
        margins.append(margin)
        assert margin > 0, f"seed {seed}: margin {margin:.3f}"
    print(f"\nACCEPTANCE 5 PASS: layer-{len(stats)} mean span exceeds layer-1 "
          f"by {min(margins):.2f}..{max(margins):.2f} tokens over {len(SEEDS)} seeds")


# -----------------------------------------------------------------------------
# 6. Chu-Liu-Edmonds oracle


def test_c06_cle_oracle():
    rng = np.random.default_rng(606)
    for trial in range(1000):
        n = int(rng.integers(2, 6))
        w = rng.random((n, n))
        if trial % 4 == 0:
            w = np.round(w, 1)
        parent = max_arborescence(w, root=0)
        assert_valid_arborescence(parent, 0, n)
        mine = sum(w[v, parent[v]] for v in range(n) if v != 0)
        best, _ = brute_force_arborescence(w, root=0)
        assert mine == pytest.approx(best, abs=1e-12)

    beaten = 0
    for _ in range(5):
        t = 12
        attn = np.zeros((t, t))
        for q in range(t):
            row = rng.random(q + 1)
            attn[q, :q + 1] = row / row.sum()
        arb = cle_mst(attn)
        w = np.full((t, t), -np.inf)
        for dep in range(1, t):
            w[dep, :dep] = attn[dep, :dep]
        for _ in range(2000):
            weight, _ = random_arborescence_weight(w, 0, rng)
            assert arb.total_weight >= weight - 1e-12
            beaten += 1
    print(f"\nACCEPTANCE 6 PASS: brute-force equality on 1000 instances <= 5 nodes; "
          f"optimum >= {beaten} random 12-node arborescences")


# -----------------------------------------------------------------------------
# 7. metrics oracles


def test_c07_metrics_oracles():
    rng = np.random.default_rng(707)

    def brute_auc(scores, labels):
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        wins = sum(1.0 if p > q else 0.5 if p == q else 0.0
                   for p in pos for q in neg)
        return wins / (len(pos) * len(neg))

    worst = 0.0
    done = 0
    while done < 500:
        n = int(rng.integers(4, 30))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            continue
        scores = np.round(rng.random(n), 2)  # ties included
        report = classification_metrics(scores, labels)
        diff = abs(report.auc - brute_auc(scores, labels))
        worst = max(worst, diff)
        assert diff <= 1e-12
        done += 1

    class UniformModel:
        def __init__(self, n):
            self.n = n

        def next_token_distributions(self, ids):
            return np.full((len(ids) - 1, self.n), 1.0 / self.n)

    vocab = Vocab(["a", "b", "c"])
    songs = [Song((BOS, 4, 5, 6, 4, EOS))] * 3
    xent, _ = next_token_cross_entropy(UniformModel(7), Corpus(songs, vocab))
    assert abs(xent - math.log(7)) <= 1e-9

    scores = np.array([0.9, 0.8, 0.1, 0.2, 0.3, 0.4, 0.7, 0.1, 0.2, 0.3])
    labels = np.array([1, 1, 1, 1, 1, 1, 0, 0, 0, 0])
    report = classification_metrics(scores, labels)
    c = report.confusion
    assert (c.tp, c.tn, c.fp, c.fn) == (2, 3, 1, 4)
    assert c.accuracy == pytest.approx(0.5)
    assert c.tpr == pytest.approx(1 / 3)
    assert c.fpr == pytest.approx(0.25)
    print(f"\nACCEPTANCE 7 PASS: AUC == Mann-Whitney on 500 sets (worst diff "
          f"{worst:.2e}); uniform CE == ln 7 to 1e-9; confusion example exact")


# -----------------------------------------------------------------------------
# 8. classification sweep


@pytest.fixture(scope="module")
def classify_world():
    pair = ablation_like_pair(GRAMMAR, 800, seed=88, degree=1.0)
    labeled = merge_labeled(pair.intact, pair.scrambled, provenance="ablation")
    rng = np.random.default_rng(89)
    order = rng.permutation(len(labeled.corpus))
    test_d = labeled.subset(order[:200])
    eval_d = labeled.subset(order[200:360])
    train_d = labeled.subset(order[360:])
    pre_train = Corpus(pair.intact.songs[:700], pair.intact.vocab, "pre/train")
    pre_eval = Corpus(pair.intact.songs[700:800], pair.intact.vocab, "pre/eval")
    return pair, pre_train, pre_eval, train_d, eval_d, test_d


def _span_classifier_auc(world, span):
    pair, pre_train, pre_eval, train_d, eval_d, test_d = world
    config = GptConfig(n_layers=2, n_heads=2, hidden=64, vocab_size=len(pre_train.vocab),
                       context_len=64, dropout=0.0, attention_span=span)
    model = GptModel(config, seed=0, vocab=pre_train.vocab)
    train(model, pre_train, pre_eval, gpt_recipe(0, max_epochs=4, patience=2))
    result = finetune(model, train_d, eval_d,
                      gpt_recipe(0, max_epochs=10, patience=3))
    scores = result.classifier.positive_probs(test_d)
    return classification_metrics(scores, test_d.labels)


def test_c08_classification_sweep(classify_world):
    wide = _span_classifier_auc(classify_world, 256)
    assert wide.auc >= 0.9, f"span 256 AUC {wide.auc:.3f}"
    narrow = _span_classifier_auc(classify_world, 1)
    assert narrow.auc <= 0.6, f"span 1 AUC {narrow.auc:.3f}"

    # upper bound on a 10%-duplicate-injected labeled corpus
    pair, pre_train, pre_eval, _, eval_d, _ = classify_world
    n = 400
    intact_songs = list(pair.intact.songs[:n])
    perturbed_songs = list(pair.scrambled.songs[:n])
    n_dup = n // 10
    for i in range(n_dup):
        perturbed_songs[i] = intact_songs[i]  # same song, conflicting label
    dup_train = merge_labeled(Corpus(intact_songs, pair.intact.vocab),
                              Corpus(perturbed_songs, pair.intact.vocab))
    config = GptConfig(n_layers=2, n_heads=2, hidden=64,
                       vocab_size=len(pre_train.vocab), context_len=64,
                       dropout=0.0, attention_span=256)
    model = GptModel(config, seed=1, vocab=pre_train.vocab)
    train(model, pre_train, pre_eval, gpt_recipe(1, max_epochs=3, patience=2))
    result = finetune(model, dup_train, eval_d, gpt_recipe(1, max_epochs=8, patience=3))
    bound = upper_bound_accuracy(result.classifier, dup_train)
    assert bound <= 0.95 + 1e-9
    print(f"\nACCEPTANCE 8 PASS: AUC span256 {wide.auc:.3f} >= 0.9, "
          f"span1 {narrow.auc:.3f} <= 0.6; duplicate-injected upper bound "
          f"{bound:.3f} <= 0.95")


# -----------------------------------------------------------------------------
# 9. embedding bimodality


def test_c09_embedding_bimodality():
    grammar = TwoContextGrammar()
    margins = []
    for seed in SEEDS:
        corpus, truth = gen_two_context(grammar, 1100, seed=900 + seed)
        train_c = Corpus(corpus.songs[:1000], corpus.vocab, "tc/train")
        eval_c = Corpus(corpus.songs[1000:1050], corpus.vocab, "tc/eval")
        probe_c = Corpus(corpus.songs[1050:], corpus.vocab, "tc/probe")
        config = GptConfig(n_layers=2, n_heads=2, hidden=64,
                           vocab_size=len(corpus.vocab), context_len=48, dropout=0.0)
        model = GptModel(config, seed=seed, vocab=corpus.vocab)
        train(model, train_c, eval_c, gpt_recipe(seed, max_epochs=5, patience=2))
        traces = [embedding_trace(model, song, i)
                  for i, song in enumerate(probe_c.songs)]
        x_id = corpus.vocab.id_of("x")
        first = cosine_similarity_distribution(traces, x_id, layer=0)
        last = cosine_similarity_distribution(traces, x_id, layer=config.n_layers)
        margin = two_cluster_separation(last.values) - two_cluster_separation(first.values)
        margins.append(margin)
        assert margin > 0, f"seed {seed}: separation margin {margin:.3f}"
    print(f"\nACCEPTANCE 9 PASS: final-layer two-cluster separation beats layer 0 "
          f"by {min(margins):.3f}..{max(margins):.3f} over {len(SEEDS)} seeds")


# -----------------------------------------------------------------------------
# 10. TPE sanity


def test_c10_tpe_sanity():
    hits = 0
    gaps = []
    for seed in range(10):
        spec = TpeSpec(n_trials=100, space={"x": ParamRange(0.0, 1.0)}, seed=seed)
        result = tpe_search(lambda p: (p["x"] - 0.3) ** 2, spec)
        gap = abs(result.best_params["x"] - 0.3)
        gaps.append(gap)
        hits += gap < 0.05
    assert hits >= 9
    print(f"\nACCEPTANCE 10 PASS: {hits}/10 seeds within 0.05 of the optimum "
          f"(median gap {np.median(gaps):.4f})")


# -----------------------------------------------------------------------------
# 11. reproducibility


def test_c11_manifest_reproducibility(tmp_path):
    import hashlib
    from songlm.cli import dispatch

    def sha_all(directory):
        return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(directory.iterdir())}

    runs = [
        ["synth", "longrange", "--songs", "40", "--seed", "9", "--scramble", "0.5"],
        ["synth", "twocontext", "--songs", "12", "--seed", "3"],
    ]
    corpus_path = None
    for base_args in runs:
        out = tmp_path / ("run_" + base_args[1])
        assert dispatch(base_args + ["--out", str(out)]) == 0
        first = sha_all(out)
        assert dispatch(base_args + ["--out", str(out)]) == 0
        assert sha_all(out) == first
        if base_args[1] == "longrange":
            corpus_path = out / "corpus.txt"

    fit = tmp_path / "fit"
    args = ["markov", "fit", "--corpus", str(corpus_path), "--order", "4",
            "--out", str(fit)]
    assert dispatch(args) == 0
    first = sha_all(fit)
    assert dispatch(args) == 0
    assert sha_all(fit) == first

    ev = tmp_path / "eval"
    args = ["eval", "--model", str(fit / "markov.json"), "--corpus",
            str(corpus_path), "--out", str(ev)]
    assert dispatch(args) == 0
    first = sha_all(ev)
    assert dispatch(args) == 0
    assert sha_all(ev) == first

    tr = tmp_path / "train"
    args = ["train", "--arch", "gpt", "--corpus", str(corpus_path),
            "--layers", "1", "--heads", "1", "--hidden", "16",
            "--context-len", "64", "--dropout", "0.1", "--batch", "8",
            "--epochs", "2", "--seed", "4", "--out", str(tr)]
    assert dispatch(args) == 0
    first = sha_all(tr)
    assert dispatch(args) == 0
    assert sha_all(tr) == first
    print("\nACCEPTANCE 11 PASS: byte-identical artifacts on rerun for synth, "
          "fit, eval, and train runs (manifest included)")
