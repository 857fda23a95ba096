"""Synthetic corpora with controlled dependency structure.

The long-range grammar plants cue->echo pairs at a fixed distance d inside
an otherwise memoryless filler stream: any cue token emitted at position t
forces a matching echo token at t+d, while every unforced position draws a
cue (with small probability) or a uniform filler. Song length is uniform
over a range, which shows up to an observer as a per-step end-of-song
hazard. Every conditional distribution of the process is therefore known
exactly, and generators record per-step entropies and log-probabilities
alongside the emitted tokens.

Echo positions before ``min_len`` carry no end-of-song hazard, so an ideal
predictor scores exactly 0 nats there; echo-level evaluation defaults to
those positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import BOS, EOS, Corpus, Song, Vocab

_FILLER_LETTERS = "abcdefghijklm"
_CUE_LETTERS = "uvwxyz"


class SynthError(ValueError):
    pass


def _bernoulli_entropy(h: float) -> float:
    if h <= 0.0 or h >= 1.0:
        return 0.0
    return -h * math.log(h) - (1.0 - h) * math.log(1.0 - h)


@dataclass(frozen=True)
class LongRangeGrammar:
    """Filler stream with deterministic cue->echo pairs at distance d."""

    n_fillers: int = 7
    n_pairs: int = 3
    distance: int = 8
    cue_prob: float = 0.15
    min_len: int = 20
    max_len: int = 60
    require_early_pair: bool = True

    def __post_init__(self):
        if self.distance < 2:
            raise SynthError("distance must be >= 2")
        if self.vocab_size > 17:
            raise SynthError(f"vocab ({self.vocab_size} ids with specials) exceeds the "
                             "15-17 range this corpus family models")
        if not 0.0 < self.cue_prob < 1.0:
            raise SynthError("cue_prob must lie in (0,1)")
        if self.n_fillers < 1 or self.n_pairs < 1:
            raise SynthError("need at least one filler and one pair")
        if self.n_pairs > len(_CUE_LETTERS) or self.n_fillers > len(_FILLER_LETTERS):
            raise SynthError("grammar too large for the letter inventory")
        if not 2 <= self.distance < self.min_len <= self.max_len:
            raise SynthError("need distance < min_len <= max_len")

    @property
    def filler_tokens(self) -> tuple:
        return tuple(_FILLER_LETTERS[: self.n_fillers])

    @property
    def cue_tokens(self) -> tuple:
        return tuple(_CUE_LETTERS[: self.n_pairs])

    @property
    def echo_tokens(self) -> tuple:
        return tuple(c.upper() for c in self.cue_tokens)

    @property
    def echo_map(self) -> dict:
        return dict(zip(self.cue_tokens, self.echo_tokens))

    @property
    def vocab_size(self) -> int:
        return self.n_fillers + 2 * self.n_pairs + 4

    def build_vocab(self) -> Vocab:
        return Vocab(sorted(self.filler_tokens + self.cue_tokens + self.echo_tokens))

    @property
    def filler_entropy(self) -> float:
        """Entropy of the filler identity: ln(number of fillers)."""
        return math.log(self.n_fillers)

    @property
    def free_entropy(self) -> float:
        """Entropy of one unforced draw (cue-vs-filler mixture)."""
        q = self.cue_prob
        return (-q * math.log(q / self.n_pairs)
                - (1.0 - q) * math.log((1.0 - q) / self.n_fillers))

    def eos_hazard(self, t: int) -> float:
        if t < self.min_len:
            return 0.0
        if t >= self.max_len:
            return 1.0
        return 1.0 / (self.max_len - t + 1)


@dataclass
class SongTruth:
    """Generator bookkeeping for one song (syllable-position coordinates)."""

    kinds: str            # per position: C=cue draw, F=filler draw, E=forced echo
    pairs: list           # (cue_pos, echo_pos) for every completed pair
    entropy: np.ndarray   # true conditional entropy per step, incl. the eos step
    neglogp: np.ndarray   # -ln p_true of the emitted symbol per step, incl. eos


@dataclass
class LongRangeTruth:
    grammar: LongRangeGrammar
    songs: list

    def subset(self, indices) -> "LongRangeTruth":
        return LongRangeTruth(self.grammar, [self.songs[i] for i in indices])

    def echo_targets(self, song_index: int, hazard_free_only: bool = True) -> list:
        """Echo positions of one song as metric target indices (bos offset +1)."""
        limit = self.grammar.min_len if hazard_free_only else 10**9
        return [echo + 1 for _, echo in self.songs[song_index].pairs if echo < limit]

    def mean_entropy(self) -> float:
        total = sum(float(s.entropy.sum()) for s in self.songs)
        n = sum(len(s.entropy) for s in self.songs)
        return total / n

    def mean_neglogp(self) -> float:
        total = sum(float(s.neglogp.sum()) for s in self.songs)
        n = sum(len(s.neglogp) for s in self.songs)
        return total / n

    def n_steps(self) -> int:
        return sum(len(s.neglogp) for s in self.songs)


def _gen_song(grammar: LongRangeGrammar, vocab: Vocab, rng) -> tuple:
    g = grammar
    cue_ids = [vocab.id_of(t) for t in g.cue_tokens]
    filler_ids = [vocab.id_of(t) for t in g.filler_tokens]
    echo_of = {vocab.id_of(c): vocab.id_of(e) for c, e in g.echo_map.items()}

    length = int(rng.integers(g.min_len, g.max_len + 1))
    ids: list = []
    kinds: list = []
    pairs: list = []
    entropy: list = []
    neglogp: list = []
    p_cue = g.cue_prob / g.n_pairs
    p_fill = (1.0 - g.cue_prob) / g.n_fillers
    for t in range(length + 1):
        h = g.eos_hazard(t)
        forced = t >= g.distance and kinds[t - g.distance] == "C"
        struct_entropy = 0.0 if forced else g.free_entropy
        entropy.append(_bernoulli_entropy(h) + (1.0 - h) * struct_entropy)
        if t == length:
            neglogp.append(-math.log(h))
            break
        keep = 1.0 - h
        if forced:
            tok = echo_of[ids[t - g.distance]]
            kinds.append("E")
            pairs.append((t - g.distance, t))
            neglogp.append(-math.log(keep))
        elif rng.random() < g.cue_prob:
            tok = cue_ids[int(rng.integers(g.n_pairs))]
            kinds.append("C")
            neglogp.append(-math.log(keep * p_cue))
        else:
            tok = filler_ids[int(rng.integers(g.n_fillers))]
            kinds.append("F")
            neglogp.append(-math.log(keep * p_fill))
        ids.append(tok)
    song = Song((BOS, *ids, EOS))
    truth = SongTruth("".join(kinds), pairs,
                      np.asarray(entropy), np.asarray(neglogp))
    return song, truth


def gen_long_range(grammar: LongRangeGrammar, n_songs: int, seed: int) -> tuple:
    """Generate (Corpus, LongRangeTruth).

    With ``require_early_pair`` every song is resampled until it holds at
    least one complete pair whose echo lands before min_len (hazard-free);
    entropy bookkeeping always describes the unconditioned process.
    """
    vocab = grammar.build_vocab()
    rng = np.random.default_rng(seed)
    songs = []
    truths = []
    for _ in range(n_songs):
        for _attempt in range(1000):
            song, truth = _gen_song(grammar, vocab, rng)
            if not grammar.require_early_pair:
                break
            if any(echo < grammar.min_len for _, echo in truth.pairs):
                break
        else:
            raise SynthError("could not satisfy the early-pair requirement in 1000 draws")
        songs.append(song)
        truths.append(truth)
    corpus = Corpus(songs, vocab,
                    provenance=f"long-range d={grammar.distance} (seed={seed})")
    return corpus, LongRangeTruth(grammar, truths)


@dataclass
class AblationPair:
    intact: Corpus
    scrambled: Corpus
    truth: LongRangeTruth
    redrawn: list  # per song, echo positions whose token was redrawn


def ablation_like_pair(grammar: LongRangeGrammar, n_songs: int, seed: int,
                       degree: float) -> AblationPair:
    """An intact corpus and a copy whose cue->echo links are broken.

    With probability ``degree`` each echo token is redrawn uniformly from
    the echo inventory, independent of its cue. Token inventory and
    unigram frequencies are preserved (the echo marginal is uniform either
    way); only the long-range dependency is disrupted. Degree 0 leaves the
    pair identical.
    """
    if not 0.0 <= degree <= 1.0:
        raise SynthError("degree must lie in [0,1]")
    intact, truth = gen_long_range(grammar, n_songs, seed)
    rng = np.random.default_rng(seed + 1)
    vocab = intact.vocab
    echo_ids = [vocab.id_of(t) for t in grammar.echo_tokens]
    scrambled_songs = []
    redrawn = []
    for song, st in zip(intact.songs, truth.songs):
        ids = list(song.ids)
        hit = []
        for _, echo in st.pairs:
            if rng.random() < degree:
                ids[echo + 1] = echo_ids[int(rng.integers(len(echo_ids)))]
                hit.append(echo)
        scrambled_songs.append(Song(tuple(ids)))
        redrawn.append(hit)
    scrambled = Corpus(scrambled_songs, vocab,
                       provenance=f"{intact.provenance}/scrambled degree={degree}")
    return AblationPair(intact, scrambled, truth, redrawn)


def echo_metrics(model, corpus: Corpus, truth: LongRangeTruth,
                 hazard_free_only: bool = True) -> tuple:
    """(cross-entropy nats, accuracy, n) of a model at echo positions.

    ``corpus`` and ``truth`` must be parallel (same song order).
    """
    if len(corpus.songs) != len(truth.songs):
        raise SynthError("corpus and truth are not parallel")
    total = 0.0
    correct = 0
    n = 0
    for i, song in enumerate(corpus.songs):
        targets = truth.echo_targets(i, hazard_free_only)
        if not targets:
            continue
        q = np.asarray(model.next_token_distributions(song.ids), dtype=np.float64)
        for j in targets:
            tok = song.ids[j]
            row = q[j - 1]
            with np.errstate(divide="ignore"):
                total += float(-np.log(row[tok]))
            correct += int(np.argmax(row) == tok)
            n += 1
    if n == 0:
        raise SynthError("no echo positions to evaluate")
    return total / n, correct / n, n


# ---------------------------------------------------------------------------
# two-context grammar: one ambiguous token with context-dependent continuation


@dataclass(frozen=True)
class TwoContextGrammar:
    """Trigrams A-x-u / B-x-v planted in a filler stream.

    The ambiguous token x always looks the same; only the context token two
    steps back decides which continuation follows it.
    """

    n_fillers: int = 6
    ctx_prob: float = 0.18
    min_len: int = 20
    max_len: int = 40

    def __post_init__(self):
        if self.n_fillers < 1 or self.n_fillers > len(_FILLER_LETTERS):
            raise SynthError("bad filler count")
        if not 0.0 < self.ctx_prob < 1.0:
            raise SynthError("ctx_prob must lie in (0,1)")
        if self.vocab_size > 17:
            raise SynthError("vocab exceeds paper-scale cap")

    @property
    def filler_tokens(self) -> tuple:
        return tuple(_FILLER_LETTERS[: self.n_fillers])

    @property
    def vocab_size(self) -> int:
        return self.n_fillers + 5 + 4

    def build_vocab(self) -> Vocab:
        return Vocab(sorted(self.filler_tokens + ("A", "B", "x", "u", "v")))

    def eos_hazard(self, t: int) -> float:
        if t < self.min_len:
            return 0.0
        if t >= self.max_len:
            return 1.0
        return 1.0 / (self.max_len - t + 1)


@dataclass
class TwoContextTruth:
    grammar: TwoContextGrammar
    occurrences: list  # per song: list of (x_pos, context_label) in syllable coords


def gen_two_context(grammar: TwoContextGrammar, n_songs: int, seed: int) -> tuple:
    g = grammar
    vocab = g.build_vocab()
    rng = np.random.default_rng(seed)
    ctx_ids = {lab: vocab.id_of(lab) for lab in "AB"}
    cont_of = {"A": vocab.id_of("u"), "B": vocab.id_of("v")}
    x_id = vocab.id_of("x")
    filler_ids = [vocab.id_of(t) for t in g.filler_tokens]
    songs = []
    occurrences = []
    for _ in range(n_songs):
        length = int(rng.integers(g.min_len, g.max_len + 1))
        ids: list = []
        occ: list = []
        pending: str | None = None  # context whose trigram is being emitted
        stage = 0
        for t in range(length):
            if pending is not None and stage == 1:
                ids.append(x_id)
                occ.append((t, pending))
                stage = 2
            elif pending is not None and stage == 2:
                ids.append(cont_of[pending])
                pending = None
            elif rng.random() < g.ctx_prob:
                lab = "A" if rng.random() < 0.5 else "B"
                ids.append(ctx_ids[lab])
                pending, stage = lab, 1
            else:
                ids.append(filler_ids[int(rng.integers(g.n_fillers))])
        songs.append(Song((BOS, *ids, EOS)))
        occurrences.append(occ)
    corpus = Corpus(songs, vocab, provenance=f"two-context (seed={seed})")
    return corpus, TwoContextTruth(g, occurrences)
