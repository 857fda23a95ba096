"""Tokenized song corpora: vocabulary, loading, splitting, statistics.

A corpus file is UTF-8 text with one song per line and tokens separated by
whitespace (or, with ``split_chars=True``, one token per character). Every
song is stored with start/end markers added, so a loaded song of n syllables
has n + 2 ids.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BOS, EOS, PAD, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<bos>", "<eos>", "<pad>", "<unk>")
N_SPECIALS = len(SPECIAL_TOKENS)


class CorpusError(ValueError):
    """Malformed corpus data or an invalid corpus operation."""


class Vocab:
    """Bidirectional token<->id map with 4 reserved special tokens (ids 0-3).

    Syllable ids are dense and follow the specials, so the total size is
    the syllable count plus 4.
    """

    def __init__(self, syllables):
        syllables = list(syllables)
        for tok in syllables:
            if tok in SPECIAL_TOKENS:
                raise CorpusError(f"token {tok!r} collides with a reserved special token")
            if not tok or any(c.isspace() for c in tok):
                raise CorpusError(f"token {tok!r} is not representable in the corpus format")
        if len(set(syllables)) != len(syllables):
            raise CorpusError("duplicate syllable tokens")
        self.tokens: list[str] = list(SPECIAL_TOKENS) + syllables
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def from_observed(cls, observed) -> "Vocab":
        """Build a vocab from observed syllables, in sorted order."""
        return cls(sorted(set(observed)))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def syllables(self) -> list[str]:
        return self.tokens[N_SPECIALS:]

    def id_of(self, token: str) -> int:
        """Map a token to its id; unknown tokens map to the unk id."""
        return self._ids.get(token, UNK)

    def token_of(self, i: int) -> str:
        return self.tokens[i]

    def encode(self, tokens) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({tok: i for i, tok in enumerate(self.tokens)}, f, indent=0, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            mapping = json.load(f)
        by_id = sorted(mapping.items(), key=lambda kv: kv[1])
        tokens = [tok for tok, _ in by_id]
        if tokens[:N_SPECIALS] != list(SPECIAL_TOKENS):
            raise CorpusError(f"vocab file {path} does not start with the reserved specials")
        if [i for _, i in by_id] != list(range(len(tokens))):
            raise CorpusError(f"vocab file {path} has non-dense ids")
        return cls(tokens[N_SPECIALS:])


@dataclass(frozen=True)
class Song:
    """One song as a tuple of token ids: bos, syllables..., eos.

    ``truncated`` marks sampler output that hit the length cap before
    emitting eos; such songs carry no trailing eos.
    """

    ids: tuple
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def syllable_ids(self) -> tuple:
        return self.ids[1 : len(self.ids) - (0 if self.truncated else 1)]

    def validate(self, vocab_size: int | None = None) -> None:
        ids = self.ids
        if len(ids) < 3:
            raise CorpusError(f"song too short: {ids}")
        if ids[0] != BOS:
            raise CorpusError("song does not start with bos")
        if not self.truncated and ids[-1] != EOS:
            raise CorpusError("song does not end with eos")
        interior = self.syllable_ids
        if any(i in (BOS, EOS, PAD) for i in interior):
            raise CorpusError("bos/eos/pad inside song body")
        if vocab_size is not None and any(i >= vocab_size or i < 0 for i in ids):
            raise CorpusError("song id out of vocab range")


@dataclass
class Corpus:
    """A list of songs sharing one vocabulary."""

    songs: list
    vocab: Vocab
    provenance: str = ""

    def __post_init__(self):
        for song in self.songs:
            song.validate(len(self.vocab))

    def __len__(self) -> int:
        return len(self.songs)

    def __iter__(self):
        return iter(self.songs)

    def song_text(self, i: int) -> str:
        return " ".join(self.vocab.decode(self.songs[i].syllable_ids))


@dataclass(frozen=True)
class SplitSpec:
    """Song-level holdout fractions plus the shuffle seed."""

    train: float = 0.8
    eval: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train, self.eval, self.test)
        if any(not 0.0 < f < 1.0 for f in fracs):
            raise CorpusError(f"fractions must each lie in (0,1): {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise CorpusError(f"fractions must sum to 1: {fracs}")


@dataclass
class CorpusStats:
    n_songs: int
    n_tokens: int
    token_freq: dict
    length_hist: dict


def load_corpus(path, vocab: Vocab | None = None, split_chars: bool = False,
                provenance: str | None = None) -> Corpus:
    """Load a one-song-per-line text corpus, adding bos/eos per song.

    When ``vocab`` is None it is built from the observed tokens; otherwise
    tokens missing from ``vocab`` are mapped to unk.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text.strip() == "":
        raise CorpusError(f"empty corpus file: {path}")
    lines = text.splitlines()
    token_lines = []
    for k, line in enumerate(lines, start=1):
        toks = list(line.replace(" ", "")) if split_chars else line.split()
        if not toks:
            raise CorpusError(f"empty song at line {k} of {path}")
        token_lines.append(toks)
    if vocab is None:
        observed = sorted({t for toks in token_lines for t in toks})
        vocab = Vocab(observed)
    songs = [Song((BOS, *vocab.encode(toks), EOS)) for toks in token_lines]
    return Corpus(songs, vocab, provenance if provenance is not None else str(path))


def save_corpus(corpus: Corpus, path) -> None:
    """Write the corpus back to text form (specials stripped)."""
    with open(path, "w", encoding="utf-8") as f:
        for i in range(len(corpus)):
            f.write(corpus.song_text(i))
            f.write("\n")


def split(corpus: Corpus, spec: SplitSpec) -> tuple:
    """Deterministic song-level partition into (train, eval, test).

    Sizes are floors of the eval/test fractions with the remainder going
    to train.
    """
    n = len(corpus)
    if n < 3:
        raise CorpusError(f"need at least 3 songs to split, got {n}")
    n_eval = int(n * spec.eval)
    n_test = int(n * spec.test)
    n_train = n - n_eval - n_test
    order = np.random.default_rng(spec.seed).permutation(n)
    parts = (order[:n_train], order[n_train : n_train + n_eval], order[n_train + n_eval :])
    names = ("train", "eval", "test")
    return tuple(
        Corpus([corpus.songs[i] for i in idx], corpus.vocab,
               provenance=f"{corpus.provenance}/{name}")
        for idx, name in zip(parts, names)
    )


def corpus_stats(corpus: Corpus) -> CorpusStats:
    """Song count, total token count (specials included), per-token
    frequency, and a song-length histogram."""
    freq: Counter = Counter()
    hist: Counter = Counter()
    n_tokens = 0
    for song in corpus.songs:
        n_tokens += len(song)
        hist[len(song)] += 1
        freq.update(corpus.vocab.token_of(i) for i in song.ids)
    return CorpusStats(
        n_songs=len(corpus),
        n_tokens=n_tokens,
        token_freq=dict(sorted(freq.items())),
        length_hist=dict(sorted(hist.items())),
    )
