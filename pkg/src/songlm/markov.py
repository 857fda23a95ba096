"""k-th order Markov models over song-token sequences.

Counts are collected for every order 1..k from bos-padded songs; prediction
backs off to the longest context suffix present in the tables and falls
back to a uniform distribution over non-pad tokens when even the order-1
context is unseen. That keeps held-out cross-entropy finite without any
smoothing. The pad token is never predicted or generated.
"""

from __future__ import annotations

import json

import numpy as np

from .corpus import BOS, EOS, PAD, Corpus, Song, Vocab


class MarkovError(ValueError):
    pass


class MarkovModel:
    """Transition-count tables for contexts of length 1..k."""

    def __init__(self, order: int, vocab: Vocab):
        if order < 1:
            raise MarkovError(f"order must be >= 1, got {order}")
        self.order = order
        self.vocab = vocab
        # tables[j-1]: dict mapping a length-j id tuple to a count vector over the vocab
        self.tables: list[dict] = [dict() for _ in range(order)]
        self._uniform = np.full(len(vocab), 1.0 / (len(vocab) - 1))
        self._uniform[PAD] = 0.0

    # -- estimation ---------------------------------------------------------

    def _count(self, ids) -> None:
        n = len(ids)
        for i in range(1, n):
            nxt = ids[i]
            for j in range(1, self.order + 1):
                if i - j < 0:
                    break
                ctx = tuple(ids[i - j : i])
                table = self.tables[j - 1]
                row = table.get(ctx)
                if row is None:
                    row = np.zeros(len(self.vocab), dtype=np.int64)
                    table[ctx] = row
                row[nxt] += 1

    @classmethod
    def fit(cls, corpus: Corpus, order: int) -> "MarkovModel":
        if len(corpus) == 0:
            raise MarkovError("cannot fit on an empty corpus")
        model = cls(order, corpus.vocab)
        for song in corpus.songs:
            model._count(song.ids)
        return model

    # -- prediction ---------------------------------------------------------

    def predict(self, context) -> np.ndarray:
        """Next-token distribution given a nonempty id context."""
        context = tuple(int(i) for i in context)
        if not context:
            raise MarkovError("context must be nonempty (songs start at bos)")
        for j in range(min(self.order, len(context)), 0, -1):
            row = self.tables[j - 1].get(context[-j:])
            if row is not None:
                return row / row.sum()
        return self._uniform.copy()

    def next_token_distributions(self, ids) -> np.ndarray:
        """Row t is the model's distribution for token t+1 of ``ids``."""
        ids = list(ids)
        return np.stack([self.predict(ids[:t]) for t in range(1, len(ids))])

    # -- generation ---------------------------------------------------------

    def generate(self, rng, max_len: int = 256) -> Song:
        """Sample one song starting from bos; rng may be a seed or Generator."""
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        ids = [BOS]
        while len(ids) < max_len:
            p = self.predict(ids)
            nxt = int(rng.choice(len(p), p=p))
            ids.append(nxt)
            if nxt == EOS:
                return Song(tuple(ids))
        return Song(tuple(ids), truncated=True)

    def synth_corpus(self, n_songs: int, seed: int, max_len: int = 256) -> Corpus:
        rng = np.random.default_rng(seed)
        songs = [self.generate(rng, max_len=max_len) for _ in range(n_songs)]
        return Corpus(songs, self.vocab, provenance=f"markov-{self.order} synthetic (seed={seed})")

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format": "songlm-markov-v1",
            "order": self.order,
            "vocab": self.vocab.tokens,
            "tables": [
                {",".join(map(str, ctx)): row.tolist() for ctx, row in sorted(table.items())}
                for table in self.tables
            ],
        }

    @classmethod
    def from_json(cls, blob: dict) -> "MarkovModel":
        if blob.get("format") != "songlm-markov-v1":
            raise MarkovError(f"unrecognized model format: {blob.get('format')}")
        vocab = Vocab(blob["vocab"][4:])
        model = cls(blob["order"], vocab)
        for j, table in enumerate(blob["tables"]):
            model.tables[j] = {
                tuple(int(s) for s in key.split(",")): np.asarray(row, dtype=np.int64)
                for key, row in table.items()
            }
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "MarkovModel":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))
