"""Command-line entry point.

Every artifact-producing run writes its outputs plus a manifest (resolved
arguments, seed, package version, input hashes) into the chosen experiment
directory, and is byte-reproducible from that manifest. Outputs are CSV and
JSON only; plotting is left to consumers.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, classify, metrics, synthlab, training
from .corpus import (Corpus, CorpusError, SplitSpec, Vocab, corpus_stats,
                     load_corpus, save_corpus, split)
from .markov import MarkovModel
from .models import (GptConfig, GptModel, RnnConfig, RnnModel, load_checkpoint,
                     model_summary, sample, save_checkpoint)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# small artifact helpers


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(x) for x in row) + "\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, out: Path, inputs) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items())
                if k not in ("func",) and not callable(v)}
    _write_json(out / "manifest.json", {
        "command": resolved.pop("command", None),
        "version": __version__,
        "args": {k: str(v) if isinstance(v, Path) else v for k, v in resolved.items()},
        "inputs": {str(p): _sha256(p) for p in inputs},
    })


def _fractions(text: str) -> tuple:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("fractions must be three comma-separated reals")
    return tuple(parts)


def _int_list(text: str) -> list:
    return [int(x) for x in text.split(",")]


def _load_any_model(path):
    path = Path(path)
    if path.suffix == ".json":
        return MarkovModel.load(path)
    return load_checkpoint(path)


def _load_corpus_arg(args, attr="corpus"):
    path = Path(getattr(args, attr))
    vocab = Vocab.load(args.vocab) if getattr(args, "vocab", None) else None
    return load_corpus(path, vocab=vocab, split_chars=getattr(args, "chars", False))


def _split_corpus(corpus, args):
    fr = getattr(args, "fractions", (0.8, 0.1, 0.1))
    return split(corpus, SplitSpec(fr[0], fr[1], fr[2], seed=args.seed))


def _metrics_json(model, corpus) -> dict:
    xent, n = metrics.next_token_cross_entropy(model, corpus)
    acc = metrics.next_token_accuracy(model, corpus)
    return {"cross_entropy_nats": xent, "perplexity": float(np.exp(xent)),
            "accuracy": acc, "n_predictions": n}


def _per_song_rows(model, corpus):
    rows = []
    for i, song in enumerate(corpus.songs):
        one = Corpus([song], corpus.vocab, provenance="song")
        xent, n = metrics.next_token_cross_entropy(model, one)
        acc = metrics.next_token_accuracy(model, one)
        rows.append((i, len(song), n, xent, acc))
    return rows


# ---------------------------------------------------------------------------
# command handlers


def _cmd_corpus(args) -> int:
    corpus = _load_corpus_arg(args)
    out = _outdir(args)
    if args.action == "stats":
        st = corpus_stats(corpus)
        _write_json(out / "stats.json", asdict(st))
    else:  # split
        parts = _split_corpus(corpus, args)
        for name, part in zip(("train", "eval", "test"), parts):
            save_corpus(part, out / f"{name}.txt")
        corpus.vocab.save(out / "vocab.json")
    _manifest(args, out, [args.corpus])
    return 0


def _cmd_markov(args) -> int:
    out = _outdir(args)
    inputs = []
    if args.action == "fit":
        corpus = _load_corpus_arg(args)
        model = MarkovModel.fit(corpus, args.order)
        model.save(out / "markov.json")
        inputs = [args.corpus]
    elif args.action == "eval":
        model = MarkovModel.load(args.model)
        corpus = load_corpus(args.corpus, vocab=model.vocab, split_chars=args.chars)
        _write_json(out / "metrics.json", _metrics_json(model, corpus))
        _write_csv(out / "per_song.csv",
                   ("song", "length", "n_predictions", "cross_entropy", "accuracy"),
                   _per_song_rows(model, corpus))
        inputs = [args.model, args.corpus]
    elif args.action == "generate":
        model = MarkovModel.load(args.model)
        corpus = model.synth_corpus(args.songs, seed=args.seed, max_len=args.max_len)
        save_corpus(corpus, out / "generated.txt")
        inputs = [args.model]
    else:  # synth: fit on a base corpus, then generate a synthetic one
        base = _load_corpus_arg(args)
        generator = MarkovModel.fit(base, args.order)
        generator.save(out / "generator.json")
        synth = generator.synth_corpus(args.songs, seed=args.seed, max_len=args.max_len)
        save_corpus(synth, out / "corpus.txt")
        synth.vocab.save(out / "vocab.json")
        inputs = [args.corpus]
    _manifest(args, out, inputs)
    return 0


def _cmd_synth(args) -> int:
    out = _outdir(args)
    inputs = []
    if args.kind == "markov":
        base = _load_corpus_arg(args)
        generator = MarkovModel.fit(base, args.order)
        generator.save(out / "generator.json")
        corpus = generator.synth_corpus(args.songs, seed=args.seed,
                                        max_len=args.max_len or 256)
        save_corpus(corpus, out / "corpus.txt")
        corpus.vocab.save(out / "vocab.json")
        inputs = [args.corpus]
    elif args.kind == "longrange":
        grammar = synthlab.LongRangeGrammar(
            n_fillers=args.fillers if args.fillers is not None else 7,
            n_pairs=args.pairs, distance=args.distance,
            cue_prob=args.cue_prob, min_len=args.min_len, max_len=args.max_len or 60)
        if args.scramble > 0:
            pair = synthlab.ablation_like_pair(grammar, args.songs, args.seed, args.scramble)
            save_corpus(pair.intact, out / "corpus.txt")
            save_corpus(pair.scrambled, out / "scrambled.txt")
            corpus, truth = pair.intact, pair.truth
        else:
            corpus, truth = synthlab.gen_long_range(grammar, args.songs, args.seed)
            save_corpus(corpus, out / "corpus.txt")
        corpus.vocab.save(out / "vocab.json")
        _write_json(out / "truth.json", {
            "grammar": asdict(grammar),
            "filler_entropy": grammar.filler_entropy,
            "free_entropy": grammar.free_entropy,
            "mean_entropy": truth.mean_entropy(),
            "pairs": [s.pairs for s in truth.songs],
            "kinds": [s.kinds for s in truth.songs],
        })
    else:  # twocontext
        grammar = synthlab.TwoContextGrammar(
            n_fillers=args.fillers if args.fillers is not None else 6,
            min_len=args.min_len, max_len=args.max_len or 40)
        corpus, truth = synthlab.gen_two_context(grammar, args.songs, args.seed)
        save_corpus(corpus, out / "corpus.txt")
        corpus.vocab.save(out / "vocab.json")
        _write_json(out / "truth.json", {
            "grammar": asdict(grammar),
            "occurrences": truth.occurrences,
        })
    _manifest(args, out, inputs)
    return 0


def _build_model(arch: str, vocab, args):
    if arch == "gpt":
        config = GptConfig(n_layers=args.layers, n_heads=args.heads, hidden=args.hidden,
                           vocab_size=len(vocab), context_len=args.context_len,
                           dropout=args.dropout, attention_span=args.span)
        return GptModel(config, seed=args.seed, vocab=vocab)
    config = RnnConfig(cell=arch, n_layers=args.layers, hidden=args.hidden,
                       embed=args.embed, vocab_size=len(vocab), dropout=args.dropout)
    return RnnModel(config, seed=args.seed, vocab=vocab)


def _train_spec(args) -> training.TrainSpec:
    return training.TrainSpec(batch_size=args.batch, lr=args.lr, max_epochs=args.epochs,
                              patience=args.patience, seed=args.seed,
                              optimizer=args.optimizer or "adamw")


def _cmd_train(args) -> int:
    corpus = _load_corpus_arg(args)
    train_c, eval_c, test_c = _split_corpus(corpus, args)
    if args.optimizer is None:
        args.optimizer = "adamw" if args.arch == "gpt" else "adam"
    model = _build_model(args.arch, corpus.vocab, args)
    result = training.train(model, train_c, eval_c, _train_spec(args))
    out = _outdir(args)
    save_checkpoint(out / "checkpoint.npz", result.model,
                    extra={"best_epoch": result.best_epoch})
    _write_csv(out / "history.csv", ("epoch", "train_loss", "eval_loss"),
               [(h.epoch, h.train_loss, h.eval_loss) for h in result.history])
    _write_json(out / "metrics.json", _metrics_json(result.model, test_c))
    _manifest(args, out, [args.corpus])
    return 0


def _cmd_hpo(args) -> int:
    corpus = _load_corpus_arg(args)
    train_c, eval_c, _ = _split_corpus(corpus, args)

    def objective(params):
        config = RnnConfig(cell=args.arch, n_layers=params["layers"],
                           hidden=params["hidden"], embed=params["embed"],
                           vocab_size=len(corpus.vocab), dropout=params["dropout"])
        model = RnnModel(config, seed=args.seed, vocab=corpus.vocab)
        spec = training.TrainSpec(batch_size=args.batch, lr=args.lr,
                                  max_epochs=args.epochs, patience=args.patience,
                                  seed=args.seed, optimizer="adam")
        return training.train(model, train_c, eval_c, spec).best_eval

    result = training.tpe_search(objective, training.TpeSpec(n_trials=args.trials,
                                                             seed=args.seed))
    out = _outdir(args)
    names = sorted(result.best_params)
    _write_csv(out / "trials.csv", ("trial", *names, "loss"),
               [(t.number, *[t.params[n] for n in names], t.loss) for t in result.trials])
    _write_json(out / "best.json", {"params": result.best_params, "loss": result.best_loss})
    _manifest(args, out, [args.corpus])
    return 0


def _cmd_eval(args) -> int:
    model = _load_any_model(args.model)
    vocab = getattr(model, "vocab", None)
    corpus = load_corpus(args.corpus, vocab=vocab, split_chars=args.chars)
    out = _outdir(args)
    report = _metrics_json(model, corpus)
    if args.metric == "xent":
        report = {k: report[k] for k in ("cross_entropy_nats", "perplexity",
                                         "n_predictions")}
    elif args.metric == "acc":
        report = {k: report[k] for k in ("accuracy", "n_predictions")}
    _write_json(out / "metrics.json", report)
    _write_csv(out / "per_song.csv",
               ("song", "length", "n_predictions", "cross_entropy", "accuracy"),
               _per_song_rows(model, corpus))
    _manifest(args, out, [args.model, args.corpus])
    return 0


def _cmd_generate(args) -> int:
    model = _load_any_model(args.model)
    rng = np.random.default_rng(args.seed)
    songs = []
    for _ in range(args.songs):
        if isinstance(model, MarkovModel):
            songs.append(model.generate(rng, max_len=args.max_len))
        else:
            songs.append(sample(model, rng, max_len=args.max_len,
                                temperature=args.temperature))
    corpus = Corpus(songs, model.vocab, provenance="generated")
    out = _outdir(args)
    save_corpus(corpus, out / "generated.txt")
    _manifest(args, out, [args.model])
    return 0


def _cmd_attn(args) -> int:
    model = load_checkpoint(args.model)
    corpus = load_corpus(args.corpus, vocab=model.vocab, split_chars=args.chars)
    out = _outdir(args)
    if args.action == "span":
        stats = analysis.span_stats(model, corpus, threshold=args.threshold,
                                    max_songs=args.songs)
        _write_csv(out / "span_stats.csv", ("layer", "mean_span", "n"),
                   [(s.layer, s.mean_span, s.n_pairs) for s in stats])
        _write_csv(out / "pairs.csv", ("layer", "head", "query", "key", "weight"),
                   [(s.layer, head, q, k, w)
                    for s in stats for (_, head, q, k, w) in s.pairs])
    elif args.action == "tree":
        song = corpus.songs[args.song_index]
        _, record, _ = model.hidden_states(np.asarray([song.ids]), capture=True)
        trees = {}
        for layer in args.layers:
            for head in range(model.config.n_heads):
                arb = analysis.cle_mst(record.weights[layer, head])
                trees[f"layer{layer}.head{head}"] = {
                    "parent": arb.parent.tolist(),
                    "total_weight": arb.total_weight,
                    "zero_weight_nodes": arb.zero_weight_nodes,
                }
        _write_json(out / "trees.json", {"song_index": args.song_index,
                                         "tokens": corpus.vocab.decode(song.ids),
                                         "trees": trees})
    else:  # export
        song = corpus.songs[args.song_index]
        _, record, _ = model.hidden_states(np.asarray([song.ids]), capture=True)
        rows = []
        weights = record.weights
        for (l, h, q, k), w in np.ndenumerate(weights):
            if w != 0.0:
                rows.append((args.song_index, l, h, q, k, float(w)))
        _write_csv(out / "attention.csv",
                   ("song", "layer", "head", "query", "key", "weight"), rows)
    _manifest(args, out, [args.model, args.corpus])
    return 0


def _cmd_embed(args) -> int:
    model = load_checkpoint(args.model)
    corpus = load_corpus(args.corpus, vocab=model.vocab, split_chars=args.chars)
    out = _outdir(args)
    if args.action == "trace":
        take = corpus.songs[: args.songs]
        traces = [analysis.embedding_trace(model, s, i) for i, s in enumerate(take)]
        proj = analysis.pca_project(traces, dims=args.dims)
        rows = []
        for trace, mat in zip(traces, proj.projected):
            for layer in range(mat.shape[0]):
                for pos in range(mat.shape[1]):
                    rows.append((trace.song_index, layer, pos,
                                 corpus.vocab.token_of(int(trace.token_ids[pos])),
                                 *[float(v) for v in mat[layer, pos]]))
        _write_csv(out / "trajectories.csv",
                   ("song", "layer", "position", "token",
                    *[f"pc{i + 1}" for i in range(args.dims)]), rows)
        _write_json(out / "variance.json",
                    {"explained_variance": proj.explained_variance.tolist()})
    else:  # cosine
        token_id = corpus.vocab.id_of(args.token)
        take = corpus.songs[: args.songs]
        traces = [analysis.embedding_trace(model, s, i) for i, s in enumerate(take)]
        dist = analysis.cosine_similarity_distribution(traces, token_id, args.layer)
        _write_csv(out / "cosines.csv", ("cosine",), [(float(v),) for v in dist.values])
        _write_json(out / "cosine_summary.json", {
            "token": args.token, "layer": args.layer,
            "n": int(dist.values.size), "n_excluded": dist.n_excluded,
            "degenerate_mean": dist.degenerate_mean,
            "two_cluster_separation": analysis.two_cluster_separation(dist.values),
        })
    _manifest(args, out, [args.model, args.corpus])
    return 0


def _cmd_classify(args) -> int:
    out = _outdir(args)
    if args.action == "finetune":
        model = load_checkpoint(args.model)
        corpus = load_corpus(args.corpus, vocab=model.vocab, split_chars=args.chars)
        labels = classify.load_labels(args.labels, len(corpus))
        data = classify.LabeledCorpus(corpus, labels)
        rng = np.random.default_rng(args.seed)
        order = rng.permutation(len(corpus))
        n_eval = max(1, int(len(corpus) * 0.1))
        result = classify.finetune(model, data.subset(order[n_eval:]),
                                   data.subset(order[:n_eval]),
                                   _train_spec(args), scope=args.scope)
        save_checkpoint(out / "classifier_backbone.npz", result.classifier.backbone)
        np.savez(out / "classifier_head.npz",
                 **{k: p.data for k, p in result.classifier.head.items()})
        _write_csv(out / "history.csv", ("epoch", "train_loss", "eval_accuracy"),
                   result.history)
        _manifest(args, out, [args.model, args.corpus, args.labels])
    elif args.action == "eval":
        backbone = load_checkpoint(args.model)
        head_blob = np.load(args.head)
        from .autograd import Tensor
        head = {k: Tensor(head_blob[k], requires_grad=True) for k in head_blob.files}
        clf = classify.SongClassifier(backbone, head_params=head)
        corpus = load_corpus(args.corpus, vocab=backbone.vocab, split_chars=args.chars)
        labels = classify.load_labels(args.labels, len(corpus))
        data = classify.LabeledCorpus(corpus, labels)
        scores = clf.positive_probs(data)
        report = metrics.classification_metrics(scores, data.labels)
        _write_json(out / "metrics.json", {
            "accuracy": report.accuracy, "auc": report.auc,
            "confusion": asdict(report.confusion)})
        _write_csv(out / "roc.csv", ("fpr", "tpr"),
                   [(float(a), float(b)) for a, b in report.roc])
        _write_csv(out / "scores.csv", ("song", "label", "score"),
                   [(i, int(l), float(s)) for i, (l, s) in
                    enumerate(zip(data.labels, scores))])
        _manifest(args, out, [args.model, args.head, args.corpus, args.labels])
    else:  # sweep
        intact = _load_corpus_arg(args, "intact")
        perturbed = load_corpus(args.perturbed, vocab=intact.vocab, split_chars=args.chars)
        pre_train, pre_eval, _ = _split_corpus(intact, args)
        labeled = classify.merge_labeled(intact, perturbed)
        rng = np.random.default_rng(args.seed)
        order = rng.permutation(len(labeled.corpus))
        n = len(order)
        n_eval = max(1, int(n * 0.1))
        n_test = max(1, int(n * 0.1))
        test_d = labeled.subset(order[:n_test])
        eval_d = labeled.subset(order[n_test : n_test + n_eval])
        train_d = labeled.subset(order[n_test + n_eval :])
        base = GptConfig(n_layers=args.layers, n_heads=args.heads, hidden=args.hidden,
                         vocab_size=len(intact.vocab), context_len=args.context_len,
                         dropout=args.dropout)
        rows = classify.span_restricted_classification(
            pre_train, pre_eval, train_d, eval_d, test_d, args.spans, base,
            _train_spec(args), _train_spec(args))
        _write_csv(out / "sweep.csv", ("span", "accuracy", "auc", "upper_bound"),
                   [(r.span, r.accuracy, r.auc, r.upper_bound) for r in rows])
        for r in rows:
            _write_csv(out / f"roc_span{r.span}.csv", ("fpr", "tpr"),
                       [(float(a), float(b)) for a, b in r.roc])
        _manifest(args, out, [args.intact, args.perturbed])
    return 0


def _cmd_compare(args) -> int:
    corpus = _load_corpus_arg(args)
    train_c, eval_c, test_c = _split_corpus(corpus, args)
    rows = []
    for order in range(1, args.max_order + 1):
        model = MarkovModel.fit(train_c, order)
        xent, _ = metrics.next_token_cross_entropy(model, test_c)
        acc = metrics.next_token_accuracy(model, test_c)
        rows.append((f"markov-{order}", xent, acc))
    spec = training.TrainSpec(batch_size=args.batch, lr=args.lr, max_epochs=args.epochs,
                              patience=args.patience, seed=args.seed, optimizer="adam")
    for cell in ("rnn", "lstm"):
        config = RnnConfig(cell=cell, n_layers=args.rnn_layers, hidden=args.rnn_hidden,
                           embed=args.rnn_embed, vocab_size=len(corpus.vocab))
        model = RnnModel(config, seed=args.seed, vocab=corpus.vocab)
        training.train(model, train_c, eval_c, spec)
        xent, _ = metrics.next_token_cross_entropy(model, test_c)
        rows.append((cell, xent, metrics.next_token_accuracy(model, test_c)))
    gpt_config = GptConfig(n_layers=args.layers, n_heads=args.heads, hidden=args.hidden,
                           vocab_size=len(corpus.vocab), context_len=args.context_len,
                           dropout=args.dropout)
    gpt = GptModel(gpt_config, seed=args.seed, vocab=corpus.vocab)
    gpt_spec = replace(spec, optimizer="adamw")
    training.train(gpt, train_c, eval_c, gpt_spec)
    xent, _ = metrics.next_token_cross_entropy(gpt, test_c)
    rows.append(("gpt", xent, metrics.next_token_accuracy(gpt, test_c)))
    out = _outdir(args)
    _write_csv(out / "compare.csv", ("model", "cross_entropy", "accuracy"), rows)
    _manifest(args, out, [args.corpus])
    return 0


def _cmd_model(args) -> int:
    model = _load_any_model(args.model)
    if isinstance(model, MarkovModel):
        print(f"arch: markov\norder: {model.order}\nvocab: {len(model.vocab)}")
    else:
        print(model_summary(model))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p, out_default: str):
    p.add_argument("--out", default=out_default, help="experiment directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None,
                   help="key=value file; command-line flags take precedence")


def _add_train_flags(p, gpt: bool = True):
    p.add_argument("--layers", type=int, default=6 if gpt else 2)
    p.add_argument("--heads", type=int, default=6)
    p.add_argument("--hidden", type=int, default=384 if gpt else 50)
    p.add_argument("--embed", type=int, default=50)
    p.add_argument("--span", type=int, default=None)
    p.add_argument("--context-len", type=int, default=256, dest="context_len")
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--optimizer", default=None, choices=("adam", "adamw"))
    p.add_argument("--fractions", type=_fractions, default=(0.8, 0.1, 0.1))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="songlm",
                                     description="sequence models for tokenized song corpora")
    subparsers = parser.add_subparsers(dest="command", required=True)
    registry = {}

    class _Sub:
        def add_parser(self, name, **kw):
            registry[name] = subparsers.add_parser(name, **kw)
            return registry[name]

    sub = _Sub()
    parser._command_parsers = registry

    p = sub.add_parser("corpus", help="corpus statistics and splitting")
    p.add_argument("action", choices=("stats", "split"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--chars", action="store_true", help="treat each character as a token")
    p.add_argument("--vocab", default=None, help="fixed vocab sidecar (json)")
    p.add_argument("--fractions", type=_fractions, default=(0.8, 0.1, 0.1))
    _add_common(p, "runs/corpus")
    p.set_defaults(func=_cmd_corpus)

    p = sub.add_parser("markov", help="fit/evaluate/generate markov models")
    p.add_argument("action", choices=("fit", "eval", "generate", "synth"))
    p.add_argument("--corpus", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--songs", type=int, default=100)
    p.add_argument("--max-len", type=int, default=256, dest="max_len")
    p.add_argument("--chars", action="store_true")
    p.add_argument("--vocab", default=None)
    _add_common(p, "runs/markov")
    p.set_defaults(func=_cmd_markov)

    p = sub.add_parser("synth", help="synthetic corpora with known structure")
    p.add_argument("kind", choices=("markov", "longrange", "twocontext"))
    p.add_argument("--corpus", default=None, help="base corpus (synth markov)")
    p.add_argument("--order", type=int, default=6)
    p.add_argument("--songs", type=int, default=1000)
    p.add_argument("--max-len", type=int, default=None, dest="max_len",
                   help="generation cap (markov) or longest song (grammars)")
    p.add_argument("--distance", type=int, default=8)
    p.add_argument("--scramble", type=float, default=0.0)
    p.add_argument("--fillers", type=int, default=None)
    p.add_argument("--pairs", type=int, default=3)
    p.add_argument("--cue-prob", type=float, default=0.15, dest="cue_prob")
    p.add_argument("--min-len", type=int, default=20, dest="min_len")
    p.add_argument("--chars", action="store_true")
    p.add_argument("--vocab", default=None)
    _add_common(p, "runs/synth")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a sequence model")
    p.add_argument("--arch", choices=("gpt", "rnn", "lstm"), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--chars", action="store_true")
    p.add_argument("--vocab", default=None)
    _add_train_flags(p)
    _add_common(p, "runs/train")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("hpo", help="TPE hyperparameter search for rnn/lstm")
    p.add_argument("--arch", choices=("rnn", "lstm"), default="lstm")
    p.add_argument("--corpus", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--fractions", type=_fractions, default=(0.8, 0.1, 0.1))
    p.add_argument("--chars", action="store_true")
    p.add_argument("--vocab", default=None)
    _add_common(p, "runs/hpo")
    p.set_defaults(func=_cmd_hpo)

    p = sub.add_parser("eval", help="next-token metrics for a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--metric", choices=("xent", "acc", "all"), default="all",
                   help="auc lives under `classify eval`")
    p.add_argument("--chars", action="store_true")
    _add_common(p, "runs/eval")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("generate", help="sample songs from a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--songs", type=int, default=10)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-len", type=int, default=256, dest="max_len")
    _add_common(p, "runs/generate")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("attn", help="attention statistics, trees, exports")
    p.add_argument("action", choices=("span", "tree", "export"))
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--songs", type=int, default=200)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--song-index", type=int, default=0, dest="song_index")
    p.add_argument("--layers", type=_int_list, default=[0, 5])
    p.add_argument("--chars", action="store_true")
    _add_common(p, "runs/attn")
    p.set_defaults(func=_cmd_attn)

    p = sub.add_parser("embed", help="embedding trajectories and cosine spreads")
    p.add_argument("action", choices=("trace", "cosine"))
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--songs", type=int, default=3)
    p.add_argument("--dims", type=int, default=3)
    p.add_argument("--token", default=None)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--chars", action="store_true")
    _add_common(p, "runs/embed")
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("classify", help="fine-tune and evaluate song classifiers")
    p.add_argument("action", choices=("finetune", "eval", "sweep"))
    p.add_argument("--model", default=None, help="pretrained checkpoint")
    p.add_argument("--head", default=None, help="classifier head (eval)")
    p.add_argument("--corpus", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--intact", default=None)
    p.add_argument("--perturbed", default=None)
    p.add_argument("--spans", type=_int_list, default=[1, 3, 10, 25, 256])
    p.add_argument("--scope", choices=("full", "head"), default="full")
    p.add_argument("--chars", action="store_true")
    p.add_argument("--vocab", default=None)
    _add_train_flags(p)
    _add_common(p, "runs/classify")
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("compare", help="markov-1..k / rnn / lstm / gpt table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-order", type=int, default=6, dest="max_order")
    p.add_argument("--rnn-layers", type=int, default=2, dest="rnn_layers")
    p.add_argument("--rnn-hidden", type=int, default=50, dest="rnn_hidden")
    p.add_argument("--rnn-embed", type=int, default=50, dest="rnn_embed")
    p.add_argument("--chars", action="store_true")
    p.add_argument("--vocab", default=None)
    _add_train_flags(p)
    _add_common(p, "runs/compare")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("model", help="inspect a saved model")
    p.add_argument("action", choices=("info",))
    p.add_argument("--model", required=True)
    p.set_defaults(func=_cmd_model)

    return parser


def _apply_config_file(parser, argv):
    """key=value config files fill in defaults; explicit flags win."""
    if "--config" not in argv:
        return
    path = argv[argv.index("--config") + 1]
    overrides = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            overrides[key.strip().replace("-", "_")] = value.strip()
    command = next((a for a in argv if not a.startswith("-")), None)
    target = parser._command_parsers.get(command)
    # defaults must land on the subcommand parser; string values pass
    # through each flag's type conversion when used
    (target or parser).set_defaults(**overrides)


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        _apply_config_file(parser, list(argv))
        args = parser.parse_args(argv)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc.filename}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc.filename}", file=sys.stderr)
        return 1
    except (CorpusError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
