"""Binary song classification on top of a pretrained decoder.

A linear 2-class head reads the final-layer state at the song's last token
(eos). Fine-tuning minimizes 2-class cross-entropy over songs with early
stopping on eval accuracy; the positive class is the perturbed corpus by
convention. Scope "full" updates the backbone too, "head" freezes it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Optimizer, Tensor, no_grad
from .corpus import Corpus, PAD
from .models import GptConfig, GptModel
from .metrics import classification_metrics
from .training import TrainSpec, TrainingError

logger = logging.getLogger(__name__)


class ClassifyError(ValueError):
    pass


@dataclass
class LabeledCorpus:
    corpus: Corpus
    labels: np.ndarray  # 0 = intact, 1 = perturbed (positive class)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.labels) != len(self.corpus):
            raise ClassifyError("label count does not match song count")
        if self.labels.size and not set(np.unique(self.labels)) <= {0, 1}:
            raise ClassifyError("labels must be binary 0/1")

    def subset(self, indices) -> "LabeledCorpus":
        return LabeledCorpus(
            Corpus([self.corpus.songs[i] for i in indices], self.corpus.vocab,
                   provenance=self.corpus.provenance),
            self.labels[list(indices)],
        )


def load_labels(path, n_songs: int) -> np.ndarray:
    """Sidecar label file: one 'song-line-index,label' pair per line."""
    labels = np.full(n_songs, -1, dtype=int)
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            idx_s, lab_s = line.split(",")
            idx, lab = int(idx_s), int(lab_s)
            if not 0 <= idx < n_songs:
                raise ClassifyError(f"label line {lineno}: song index {idx} out of range")
            labels[idx] = lab
    if np.any(labels < 0):
        raise ClassifyError("label file does not cover every song")
    return labels


def save_labels(path, labels) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, lab in enumerate(labels):
            f.write(f"{i},{int(lab)}\n")


def merge_labeled(intact: Corpus, perturbed: Corpus, provenance: str = "labeled") -> LabeledCorpus:
    """Concatenate two corpora into one labeled set (perturbed = positive)."""
    if intact.vocab != perturbed.vocab:
        raise ClassifyError("corpora must share a vocabulary")
    songs = list(intact.songs) + list(perturbed.songs)
    labels = np.concatenate([np.zeros(len(intact), dtype=int),
                             np.ones(len(perturbed), dtype=int)])
    return LabeledCorpus(Corpus(songs, intact.vocab, provenance=provenance), labels)


class SongClassifier:
    """Pretrained decoder + linear head pooled at the last (eos) token."""

    def __init__(self, backbone: GptModel, seed: int = 0, head_params: dict | None = None):
        self.backbone = backbone
        h = backbone.config.hidden
        if head_params is None:
            rng = np.random.default_rng(seed)
            dt = np.dtype(backbone.config.dtype)
            self.head = {
                "head.w": Tensor(rng.normal(0.0, 0.02, (h, 2)).astype(dt), requires_grad=True),
                "head.b": Tensor(np.zeros(2, dtype=dt), requires_grad=True),
            }
        else:
            self.head = head_params

    def logits(self, inputs: np.ndarray, lengths: np.ndarray, train: bool = False,
               rng=None) -> Tensor:
        """(B,2) class logits; ``lengths`` gives each song's true token count."""
        h, _, _ = self.backbone.hidden_states(inputs, train=train, rng=rng)
        pooled = ag.select_positions(h, lengths - 1)
        return ag.add(ag.matmul(pooled, self.head["head.w"]), self.head["head.b"])

    def positive_probs(self, data: LabeledCorpus, batch_size: int = 32) -> np.ndarray:
        """Positive-class probability per song."""
        probs = []
        with no_grad():
            for start in range(0, len(data.corpus), batch_size):
                songs = data.corpus.songs[start : start + batch_size]
                ids = [list(s.ids) for s in songs]
                lengths = np.asarray([len(i) for i in ids])
                longest = max(len(i) for i in ids)
                arr = np.full((len(ids), longest), PAD, dtype=np.int64)
                for r, row in enumerate(ids):
                    arr[r, : len(row)] = row
                z = self.logits(arr, lengths).data.astype(np.float64)
                z -= z.max(axis=1, keepdims=True)
                e = np.exp(z)
                probs.extend((e[:, 1] / e.sum(axis=1)).tolist())
        return np.asarray(probs)

    def accuracy(self, data: LabeledCorpus, batch_size: int = 32) -> float:
        scores = self.positive_probs(data, batch_size)
        return float(((scores >= 0.5).astype(int) == data.labels).mean())


@dataclass
class FinetuneResult:
    classifier: SongClassifier
    history: list  # (epoch, train_loss, eval_accuracy)
    best_epoch: int
    best_eval_accuracy: float


def finetune(pretrained: GptModel, train_data: LabeledCorpus, eval_data: LabeledCorpus,
             spec: TrainSpec, scope: str = "full") -> FinetuneResult:
    """Fine-tune for before/after discrimination; best-eval-accuracy snapshot wins."""
    if scope not in ("full", "head"):
        raise ClassifyError(f"scope must be 'full' or 'head', got {scope!r}")
    for name, data in (("train", train_data), ("eval", eval_data)):
        if len(np.unique(data.labels)) < 2:
            raise ClassifyError(f"{name} labels contain a single class")
    clf = SongClassifier(pretrained, seed=spec.seed)
    trainable = dict(clf.head)
    if scope == "full":
        trainable.update(pretrained.params)
    else:
        for p in pretrained.params.values():
            p.requires_grad = False
    opt = Optimizer(trainable, kind=spec.optimizer, lr=spec.lr,
                    weight_decay=spec.weight_decay)
    rng = np.random.default_rng(spec.seed)

    ids = [list(s.ids) for s in train_data.corpus.songs]
    labels = train_data.labels
    history = []
    best_acc = -1.0
    best_epoch = 0
    best_params = None
    stale = 0
    for epoch in range(1, spec.max_epochs + 1):
        order = rng.permutation(len(ids))
        total = 0.0
        count = 0
        for start in range(0, len(order), spec.batch_size):
            take = order[start : start + spec.batch_size]
            chunk = [ids[i] for i in take]
            lengths = np.asarray([len(c) for c in chunk])
            longest = max(lengths)
            arr = np.full((len(chunk), longest), PAD, dtype=np.int64)
            for r, row in enumerate(chunk):
                arr[r, : len(row)] = row
            opt.zero_grad()
            z = clf.logits(arr, lengths, train=True, rng=rng)
            loss = ag.cross_entropy_loss(z, labels[take])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite fine-tune loss at epoch {epoch}")
            ag.backward(loss)
            if spec.grad_clip:
                ag.clip_grad_norm(trainable, spec.grad_clip)
            opt.step()
            total += value * len(take)
            count += len(take)
        acc = clf.accuracy(eval_data, spec.batch_size)
        history.append((epoch, total / count, acc))
        if acc > best_acc:
            best_acc = acc
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in trainable.items()}
            stale = 0
        else:
            stale += 1
            if stale >= spec.patience:
                break
    if best_params is not None:
        for k, p in trainable.items():
            p.data = best_params[k]
    if scope == "head":
        for p in pretrained.params.values():
            p.requires_grad = True
    return FinetuneResult(clf, history, best_epoch, best_acc)


def upper_bound_accuracy(classifier: SongClassifier, train_data: LabeledCorpus,
                         batch_size: int = 32) -> float:
    """Accuracy on the training split itself; caps what any split can reach
    when the labeled corpus contains ambiguous (cross-labeled) songs."""
    return classifier.accuracy(train_data, batch_size)


@dataclass
class SpanSweepRow:
    span: int
    accuracy: float
    auc: float
    upper_bound: float
    roc: np.ndarray


def span_restricted_classification(pretrain_train: Corpus, pretrain_eval: Corpus,
                                   train_data: LabeledCorpus, eval_data: LabeledCorpus,
                                   test_data: LabeledCorpus, spans, base_config: GptConfig,
                                   pretrain_spec: TrainSpec, finetune_spec: TrainSpec) -> list:
    """Pretrain + fine-tune one model per attention span; report test
    accuracy/AUC per span alongside the train-split upper bound."""
    from dataclasses import replace

    from .training import train

    rows = []
    for span in spans:
        config = replace(base_config, attention_span=int(span))
        model = GptModel(config, seed=pretrain_spec.seed, vocab=pretrain_train.vocab)
        train(model, pretrain_train, pretrain_eval, pretrain_spec)
        result = finetune(model, train_data, eval_data, finetune_spec)
        scores = result.classifier.positive_probs(test_data)
        report = classification_metrics(scores, test_data.labels)
        bound = upper_bound_accuracy(result.classifier, train_data)
        rows.append(SpanSweepRow(span=int(span), accuracy=report.accuracy,
                                 auc=report.auc, upper_bound=bound, roc=report.roc))
    return rows
