"""Training loops with early stopping, TPE hyperparameter search, and the
model/data scaling sweep.

Batches are whole songs right-padded with the pad id; pad targets are
excluded from the loss mask. Training stops when the eval loss has not
improved for ``patience`` consecutive epochs (or at ``max_epochs``), and
the best-eval parameter snapshot is restored. All randomness in one run
flows from the spec seed through a single generator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Optimizer, Tensor, no_grad
from .corpus import PAD, Corpus
from .models import GptConfig, GptModel, RnnConfig, RnnModel

logger = logging.getLogger(__name__)

# (layers, heads, hidden) trios used for the published-size comparison runs
MODEL_SIZES = {"small": (1, 1, 192), "medium": (6, 6, 384), "large": (12, 12, 768)}


class TrainingDiverged(RuntimeError):
    pass


class TrainingError(ValueError):
    pass


@dataclass
class TrainSpec:
    batch_size: int = 32
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    weight_decay: float | None = None
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")
        if self.max_epochs < 1:
            raise TrainingError("max_epochs must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    eval_loss: float


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int
    best_eval: float
    n_truncated: int = 0


def _song_id_lists(corpus: Corpus, context_len: int | None):
    """Song id lists, with over-long songs cut to their final tokens."""
    out = []
    n_truncated = 0
    for song in corpus.songs:
        ids = list(song.ids)
        # inputs are ids[:-1], so a cut to context_len+1 ids fits the window
        if context_len is not None and len(ids) > context_len + 1:
            ids = ids[-(context_len + 1):]
            n_truncated += 1
        out.append(ids)
    if n_truncated:
        logger.warning("truncated %d songs longer than the model context", n_truncated)
    return out, n_truncated


def pad_batch(id_lists) -> tuple:
    """(inputs, targets, mask) arrays for a list of id lists."""
    longest = max(len(ids) for ids in id_lists)
    arr = np.full((len(id_lists), longest), PAD, dtype=np.int64)
    for row, ids in enumerate(id_lists):
        arr[row, : len(ids)] = ids
    inputs = arr[:, :-1]
    targets = arr[:, 1:]
    return inputs, targets, targets != PAD


def _batches(id_lists, batch_size, order):
    for start in range(0, len(order), batch_size):
        chunk = [id_lists[i] for i in order[start : start + batch_size]]
        yield pad_batch(chunk)


def evaluate_loss(model, corpus: Corpus, batch_size: int = 32) -> float:
    """Token-mean next-token cross-entropy over all non-pad targets."""
    context = model.config.context_len if isinstance(model, GptModel) else None
    id_lists, _ = _song_id_lists(corpus, context)
    total = 0.0
    count = 0
    with no_grad():
        for inputs, targets, mask in _batches(id_lists, batch_size, range(len(id_lists))):
            logits = model.forward(inputs)
            loss = ag.cross_entropy_loss(logits, targets, mask)
            n = int(mask.sum())
            total += loss.item() * n
            count += n
    return total / count


def train(model, train_corpus: Corpus, eval_corpus: Corpus, spec: TrainSpec,
          on_epoch=None) -> TrainResult:
    """Minimize next-token cross-entropy; return the best-eval snapshot.

    ``on_epoch(stats, model)`` is invoked after each epoch when given.
    """
    if len(train_corpus) == 0 or len(eval_corpus) == 0:
        raise TrainingError("train and eval splits must be nonempty")
    context = model.config.context_len if isinstance(model, GptModel) else None
    id_lists, n_truncated = _song_id_lists(train_corpus, context)
    rng = np.random.default_rng(spec.seed)
    opt = Optimizer(model.params, kind=spec.optimizer, lr=spec.lr, betas=spec.betas,
                    weight_decay=spec.weight_decay)

    history = []
    best_eval = math.inf
    best_epoch = 0
    best_params = None
    stale = 0
    for epoch in range(1, spec.max_epochs + 1):
        order = rng.permutation(len(id_lists))
        total = 0.0
        count = 0
        for inputs, targets, mask in _batches(id_lists, spec.batch_size, order):
            opt.zero_grad()
            logits = model.forward(inputs, train=True, rng=rng)
            loss = ag.cross_entropy_loss(logits, targets, mask)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch} "
                    f"(lr={spec.lr}, optimizer={spec.optimizer})")
            ag.backward(loss)
            if spec.grad_clip:
                ag.clip_grad_norm(model.params, spec.grad_clip)
            opt.step()
            n = int(mask.sum())
            total += value * n
            count += n
        eval_loss = evaluate_loss(model, eval_corpus, spec.batch_size)
        history.append(EpochStats(epoch, total / count, eval_loss))
        if on_epoch is not None:
            on_epoch(history[-1], model)
        if eval_loss < best_eval:
            best_eval = eval_loss
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in model.params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= spec.patience:
                break
    if best_params is not None:
        for k, p in model.params.items():
            p.data = best_params[k]
    return TrainResult(model, history, best_epoch, best_eval, n_truncated)


# ---------------------------------------------------------------------------
# Tree-structured Parzen Estimator search


@dataclass(frozen=True)
class ParamRange:
    low: float
    high: float
    integer: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise TrainingError(f"empty parameter range [{self.low}, {self.high}]")


def default_rnn_space() -> dict:
    return {
        "layers": ParamRange(1, 6, integer=True),
        "hidden": ParamRange(10, 100, integer=True),
        "embed": ParamRange(10, 100, integer=True),
        "dropout": ParamRange(0.0, 1.0),
    }


@dataclass
class TpeSpec:
    n_trials: int = 100
    space: dict = field(default_factory=default_rnn_space)
    gamma: float = 0.25
    seed: int = 0
    n_startup: int = 10
    n_candidates: int = 24

    def __post_init__(self):
        if self.n_trials < 1:
            raise TrainingError("n_trials must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise TrainingError("gamma must lie in (0,1)")


@dataclass
class Trial:
    number: int
    params: dict
    loss: float


@dataclass
class TpeResult:
    best_params: dict
    best_loss: float
    trials: list


def _kde_logpdf(x: float, points: np.ndarray, bandwidth: np.ndarray,
                prior_mu: float, prior_sigma: float) -> float:
    """Log density of a Gaussian mixture over the points plus a wide prior."""
    mus = np.append(points, prior_mu)
    sigmas = np.append(bandwidth, prior_sigma)
    z = (x - mus) / sigmas
    comps = -0.5 * z**2 - np.log(sigmas) - 0.5 * math.log(2 * math.pi)
    peak = comps.max()
    return float(peak + math.log(np.exp(comps - peak).sum() / len(mus)))


def _group_kde(values: np.ndarray, rng_range: tuple):
    """Adaptive-Parzen bandwidths: each point's kernel spans the larger gap
    to its sorted neighbors (range edges count as neighbors), clipped below
    at width/min(100, m+1) so dense clusters keep exploring."""
    low, high = rng_range
    width = high - low
    m = len(values)
    order = np.argsort(values)
    sorted_v = values[order]
    extended = np.concatenate([[low], sorted_v, [high]])
    gaps = np.maximum(sorted_v - extended[:-2], extended[2:] - sorted_v)
    clip_lo = width / min(100.0, m + 1.0)
    bw = np.empty(m)
    bw[order] = np.clip(gaps, clip_lo, width)
    prior_mu = (low + high) / 2.0
    prior_sigma = width
    return values, bw, prior_mu, prior_sigma


def _sample_dim(rng, values, bandwidth, prior_mu, prior_sigma, low, high) -> float:
    idx = int(rng.integers(len(values) + 1))
    if idx == len(values):
        mu, sigma = prior_mu, prior_sigma
    else:
        mu, sigma = values[idx], bandwidth[idx]
    return float(np.clip(rng.normal(mu, sigma), low, high))


def tpe_search(objective, spec: TpeSpec) -> TpeResult:
    """Sequential model-based minimization of ``objective(params) -> loss``.

    The first ``n_startup`` trials sample uniformly; afterwards the
    observations are split at the gamma quantile by loss, each side is
    modeled with a Gaussian KDE per dimension, and the best of
    ``n_candidates`` draws from the good-side density under the density
    ratio l(x)/g(x) is evaluated next. Failures count as infinite loss.
    """
    rng = np.random.default_rng(spec.seed)
    names = list(spec.space)
    trials: list = []

    def uniform_params() -> dict:
        out = {}
        for name in names:
            r = spec.space[name]
            if r.integer:
                out[name] = int(rng.integers(int(r.low), int(r.high) + 1))
            else:
                out[name] = float(rng.uniform(r.low, r.high))
        return out

    def suggest() -> dict:
        if len(trials) < max(2, spec.n_startup):
            return uniform_params()
        ordered = sorted(trials, key=lambda t: (t.loss, t.number))
        n_below = max(1, int(spec.gamma * len(ordered)))
        below = ordered[:n_below]
        above = ordered[n_below:]
        params = {}
        for name in names:
            r = spec.space[name]
            lo, hi = float(r.low), float(r.high)
            lvals = np.asarray([t.params[name] for t in below], dtype=float)
            gvals = np.asarray([t.params[name] for t in above], dtype=float)
            l_kde = _group_kde(lvals, (lo, hi))
            g_kde = _group_kde(gvals, (lo, hi))
            best_x, best_score = None, -math.inf
            for _ in range(spec.n_candidates):
                x = _sample_dim(rng, *l_kde, lo, hi)
                score = _kde_logpdf(x, *l_kde) - _kde_logpdf(x, *g_kde)
                if score > best_score:
                    best_x, best_score = x, score
            params[name] = int(round(best_x)) if r.integer else best_x
        return params

    for number in range(spec.n_trials):
        params = suggest()
        try:
            loss = float(objective(dict(params)))
        except Exception as exc:  # noqa: BLE001 - search must survive bad configs
            logger.warning("trial %d failed (%s); recording infinite loss", number, exc)
            loss = math.inf
        if math.isnan(loss):
            loss = math.inf
        trials.append(Trial(number, params, loss))
    best = min(trials, key=lambda t: (t.loss, t.number))
    return TpeResult(dict(best.params), best.loss, trials)


# ---------------------------------------------------------------------------
# model-size / data-size sweep


@dataclass
class ScalingRow:
    model: str
    fraction: float
    n_songs: int
    n_bytes: int
    eval_xent: float


def data_scaling_run(train_corpus: Corpus, eval_corpus: Corpus, spec: TrainSpec,
                     sizes: dict | None = None, fractions=(0.125, 0.25, 0.5, 1.0),
                     context_len: int = 256, dropout: float = 0.1,
                     shuffle_seed: int = 0) -> list:
    """Train each model size on nested data fractions; report eval
    cross-entropy per (size, fraction) with the training-text byte count."""
    from .metrics import next_token_cross_entropy

    sizes = dict(MODEL_SIZES) if sizes is None else sizes
    order = np.random.default_rng(shuffle_seed).permutation(len(train_corpus))
    rows = []
    for name, (layers, heads, hidden) in sizes.items():
        for fraction in fractions:
            take = order[: max(1, int(len(train_corpus) * fraction))]
            subset = Corpus([train_corpus.songs[i] for i in take], train_corpus.vocab,
                            provenance=f"{train_corpus.provenance}[{fraction}]")
            n_bytes = sum(len(subset.song_text(i).encode()) + 1 for i in range(len(subset)))
            config = GptConfig(n_layers=layers, n_heads=heads, hidden=hidden,
                               vocab_size=len(train_corpus.vocab),
                               context_len=context_len, dropout=dropout)
            model = GptModel(config, seed=spec.seed, vocab=train_corpus.vocab)
            train(model, subset, eval_corpus, spec)
            xent, _ = next_token_cross_entropy(model, eval_corpus)
            rows.append(ScalingRow(name, fraction, len(subset), n_bytes, xent))
    return rows
