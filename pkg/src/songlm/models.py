"""GPT-style causal decoder and recurrent (RNN/LSTM) sequence models.

The decoder follows the usual GPT-2 conventions: learned positional
embeddings, pre-norm blocks, GELU MLP with 4x inner width, and input/output
embeddings tied. Attention can be restricted to a finite span S, in which
case query t attends only to keys in [t-S, t]; the restriction is applied
through every layer. Forward passes can capture post-softmax attention and
the residual-stream state after the embedding and after each block.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .corpus import BOS, EOS, PAD, Song, Vocab


class ModelError(ValueError):
    pass


@dataclass
class GptConfig:
    n_layers: int
    n_heads: int
    hidden: int
    vocab_size: int
    context_len: int = 256
    dropout: float = 0.1
    attention_span: int | None = None  # None = unlimited
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ModelError("n_layers and n_heads must be >= 1")
        if self.hidden % self.n_heads != 0:
            raise ModelError(f"hidden ({self.hidden}) must be divisible by n_heads ({self.n_heads})")
        if self.attention_span is not None and self.attention_span < 1:
            raise ModelError("attention_span must be >= 1 when finite")
        if not 0.0 <= self.dropout <= 1.0:
            raise ModelError("dropout must lie in [0,1]")


@dataclass
class RnnConfig:
    cell: str  # "rnn" | "lstm"
    n_layers: int
    hidden: int
    embed: int
    vocab_size: int
    dropout: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.cell not in ("rnn", "lstm"):
            raise ModelError(f"cell must be 'rnn' or 'lstm', got {self.cell!r}")
        if not 1 <= self.n_layers <= 6:
            raise ModelError("n_layers must lie in 1..6")
        if not 10 <= self.hidden <= 100:
            raise ModelError("hidden must lie in 10..100")
        if not 10 <= self.embed <= 100:
            raise ModelError("embed must lie in 10..100")
        if not 0.0 <= self.dropout <= 1.0:
            raise ModelError("dropout must lie in [0,1]")


@dataclass
class AttentionRecord:
    """Post-softmax attention captured from one forward pass: (L, A, T, T)."""

    weights: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def n_heads(self) -> int:
        return self.weights.shape[1]

    def validate(self, atol: float = 1e-5) -> None:
        w = self.weights
        if np.any(w < 0):
            raise ModelError("negative attention weight")
        if not np.allclose(w.sum(axis=-1), 1.0, atol=atol):
            raise ModelError("attention rows do not sum to 1")
        t = w.shape[-1]
        upper = np.triu(np.ones((t, t), dtype=bool), k=1)
        if np.any(w[..., upper] != 0.0):
            raise ModelError("attention leaks across the causal mask")


class GptModel:
    """Causal decoder with optional finite attention span."""

    def __init__(self, config: GptConfig, seed: int = 0, vocab: Vocab | None = None,
                 params: dict | None = None):
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ModelError("vocab size does not match config")
        self.config = config
        self.vocab = vocab
        self._mask_cache: dict = {}
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> dict:
        c = self.config
        dt = np.dtype(c.dtype)
        h, v = c.hidden, c.vocab_size
        resid_std = 0.02 / np.sqrt(2 * c.n_layers)

        def p(arr):
            return Tensor(arr.astype(dt), requires_grad=True)

        params = {
            "tok_emb": p(rng.normal(0.0, 0.02, (v, h))),
            "pos_emb": p(rng.normal(0.0, 0.01, (c.context_len, h))),
            "ln_f.g": p(np.ones(h)),
            "ln_f.b": p(np.zeros(h)),
        }
        for l in range(c.n_layers):
            params.update({
                f"h{l}.ln1.g": p(np.ones(h)),
                f"h{l}.ln1.b": p(np.zeros(h)),
                f"h{l}.attn.w_qkv": p(rng.normal(0.0, 0.02, (h, 3 * h))),
                f"h{l}.attn.b_qkv": p(np.zeros(3 * h)),
                f"h{l}.attn.w_proj": p(rng.normal(0.0, resid_std, (h, h))),
                f"h{l}.attn.b_proj": p(np.zeros(h)),
                f"h{l}.ln2.g": p(np.ones(h)),
                f"h{l}.ln2.b": p(np.zeros(h)),
                f"h{l}.mlp.w_fc": p(rng.normal(0.0, 0.02, (h, 4 * h))),
                f"h{l}.mlp.b_fc": p(np.zeros(4 * h)),
                f"h{l}.mlp.w_proj": p(rng.normal(0.0, resid_std, (4 * h, h))),
                f"h{l}.mlp.b_proj": p(np.zeros(h)),
            })
        return params

    def _mask(self, t: int) -> np.ndarray:
        """Additive causal(+span) mask: 0 where attending is allowed, -inf outside."""
        cached = self._mask_cache.get(t)
        if cached is not None:
            return cached
        span = self.config.attention_span
        q = np.arange(t)[:, None]
        k = np.arange(t)[None, :]
        allowed = k <= q
        if span is not None:
            allowed &= q - k <= span
        m = np.where(allowed, 0.0, -np.inf).astype(self.config.dtype)
        self._mask_cache[t] = m
        return m

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ModelError(f"ids must be a (batch, time) array, got shape {ids.shape}")
        if ids.shape[1] > self.config.context_len:
            raise ModelError(f"sequence length {ids.shape[1]} exceeds context_len "
                             f"{self.config.context_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ModelError("token id out of vocab range")
        return ids

    def hidden_states(self, ids, train: bool = False, rng=None, capture: bool = False):
        """Final-norm hidden states (B,T,H); optionally capture per-layer records.

        Capture is meant for single-song analysis: with capture=True the
        batch must have one row, and the returned attention is (L,A,T,T)
        with residual states (L+1,T,H).
        """
        ids = self._check_ids(ids)
        c = self.config
        b, t = ids.shape
        if capture and b != 1:
            raise ModelError("capture requires a single-song batch")
        drop = c.dropout if train else 0.0
        if train and drop > 0 and rng is None:
            raise ModelError("training forward needs an rng for dropout")
        p = self.params

        def dropped(x):
            return ag.dropout(x, drop, train, rng) if drop > 0 else x

        h = ag.add(ag.embedding_lookup(p["tok_emb"], ids), p["pos_emb"][:t])
        h = dropped(h)
        attn_frames = []
        state_frames = [h.data[0].copy()] if capture else None
        mask = self._mask(t)
        n_heads, head_dim = c.n_heads, c.hidden // c.n_heads
        scale = 1.0 / np.sqrt(head_dim)
        for l in range(c.n_layers):
            a = ag.layer_norm(h, p[f"h{l}.ln1.g"], p[f"h{l}.ln1.b"])
            qkv = ag.add(ag.matmul(ag.reshape(a, (b * t, c.hidden)), p[f"h{l}.attn.w_qkv"]),
                         p[f"h{l}.attn.b_qkv"])
            qkv = ag.reshape(qkv, (b, t, 3, n_heads, head_dim))
            q = ag.transpose(qkv[:, :, 0], (0, 2, 1, 3))
            k = ag.transpose(qkv[:, :, 1], (0, 2, 1, 3))
            v = ag.transpose(qkv[:, :, 2], (0, 2, 1, 3))
            att = ag.add(ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), scale), mask)
            att = ag.softmax(att, axis=-1)
            if capture:
                attn_frames.append(att.data[0].copy())
            att = dropped(att)
            o = ag.reshape(ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)), (b * t, c.hidden))
            o = ag.add(ag.matmul(o, p[f"h{l}.attn.w_proj"]), p[f"h{l}.attn.b_proj"])
            o = dropped(ag.reshape(o, (b, t, c.hidden)))
            h = ag.add(h, o)

            m = ag.layer_norm(h, p[f"h{l}.ln2.g"], p[f"h{l}.ln2.b"])
            m = ag.add(ag.matmul(ag.reshape(m, (b * t, c.hidden)), p[f"h{l}.mlp.w_fc"]),
                       p[f"h{l}.mlp.b_fc"])
            m = ag.add(ag.matmul(ag.gelu(m), p[f"h{l}.mlp.w_proj"]), p[f"h{l}.mlp.b_proj"])
            m = dropped(ag.reshape(m, (b, t, c.hidden)))
            h = ag.add(h, m)
            if capture:
                state_frames.append(h.data[0].copy())

        h = ag.layer_norm(h, p["ln_f.g"], p["ln_f.b"])
        if capture:
            return h, AttentionRecord(np.stack(attn_frames)), np.stack(state_frames)
        return h, None, None

    def forward(self, ids, train: bool = False, rng=None, capture: bool = False):
        """Logits (B,T,V); with capture also (AttentionRecord, states)."""
        h, attn, states = self.hidden_states(ids, train=train, rng=rng, capture=capture)
        b, t = h.shape[0], h.shape[1]
        flat = ag.reshape(h, (b * t, self.config.hidden))
        logits = ag.matmul(flat, ag.transpose(self.params["tok_emb"], (1, 0)))
        logits = ag.reshape(logits, (b, t, self.config.vocab_size))
        if capture:
            return logits, attn, states
        return logits

    def next_token_distributions(self, ids) -> np.ndarray:
        """Row t is the softmax distribution for token t+1 of ``ids``."""
        ids = list(ids)
        with no_grad():
            logits = self.forward(np.asarray([ids])).data[0]
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return (e / e.sum(axis=-1, keepdims=True))[: len(ids) - 1]


class RnnModel:
    """Stacked RNN/LSTM next-token model with an untied softmax head."""

    def __init__(self, config: RnnConfig, seed: int = 0, vocab: Vocab | None = None,
                 params: dict | None = None):
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ModelError("vocab size does not match config")
        self.config = config
        self.vocab = vocab
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> dict:
        c = self.config
        dt = np.dtype(c.dtype)
        gates = 4 if c.cell == "lstm" else 1
        k = 1.0 / np.sqrt(c.hidden)

        def u(*shape):
            return Tensor(rng.uniform(-k, k, shape).astype(dt), requires_grad=True)

        params = {"embed": Tensor(rng.normal(0.0, 0.1, (c.vocab_size, c.embed)).astype(dt),
                                  requires_grad=True)}
        for l in range(c.n_layers):
            in_dim = c.embed if l == 0 else c.hidden
            params[f"l{l}.w_ih"] = u(in_dim, gates * c.hidden)
            params[f"l{l}.w_hh"] = u(c.hidden, gates * c.hidden)
            params[f"l{l}.b"] = u(gates * c.hidden)
        params["head.w"] = u(c.hidden, c.vocab_size)
        params["head.b"] = Tensor(np.zeros(c.vocab_size, dtype=dt), requires_grad=True)
        return params

    def forward(self, ids, train: bool = False, rng=None):
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ModelError(f"ids must be a (batch, time) array, got shape {ids.shape}")
        c = self.config
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise ModelError("token id out of vocab range")
        drop = c.dropout if train else 0.0
        if train and drop > 0 and rng is None:
            raise ModelError("training forward needs an rng for dropout")
        b, t = ids.shape
        p = self.params
        x = ag.embedding_lookup(p["embed"], ids)
        hdim = c.hidden
        for l in range(c.n_layers):
            w_ih, w_hh, bias = p[f"l{l}.w_ih"], p[f"l{l}.w_hh"], p[f"l{l}.b"]
            h = Tensor(np.zeros((b, hdim), dtype=c.dtype))
            cell = Tensor(np.zeros((b, hdim), dtype=c.dtype))
            steps = []
            for step in range(t):
                pre = ag.add(ag.add(ag.matmul(x[:, step], w_ih), ag.matmul(h, w_hh)), bias)
                if c.cell == "rnn":
                    h = ag.tanh(pre)
                else:
                    # gate layout: input, forget, candidate, output
                    i = ag.sigmoid(pre[:, :hdim])
                    f = ag.sigmoid(pre[:, hdim : 2 * hdim])
                    g = ag.tanh(pre[:, 2 * hdim : 3 * hdim])
                    o = ag.sigmoid(pre[:, 3 * hdim :])
                    cell = ag.add(ag.mul(f, cell), ag.mul(i, g))
                    h = ag.mul(o, ag.tanh(cell))
                steps.append(ag.reshape(h, (b, 1, hdim)))
            x = ag.concat(steps, axis=1)
            if l < c.n_layers - 1:
                x = ag.dropout(x, drop, train, rng)
        flat = ag.reshape(x, (b * t, hdim))
        logits = ag.add(ag.matmul(flat, p["head.w"]), p["head.b"])
        return ag.reshape(logits, (b, t, c.vocab_size))

    def next_token_distributions(self, ids) -> np.ndarray:
        ids = list(ids)
        with no_grad():
            logits = self.forward(np.asarray([ids])).data[0]
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return (e / e.sum(axis=-1, keepdims=True))[: len(ids) - 1]


def sample(model, rng, max_len: int = 256, temperature: float = 1.0) -> Song:
    """Autoregressive sampling from bos until eos or the length cap.

    temperature <= 0 means greedy argmax. bos and pad are never emitted.
    Songs that hit ``max_len`` come back flagged as truncated.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    limit = max_len
    if isinstance(model, GptModel):
        limit = min(limit, model.config.context_len)
    ids = [BOS]
    with no_grad():
        while len(ids) < limit:
            logits = model.forward(np.asarray([ids])).data[0, -1].astype(np.float64)
            logits[BOS] = -np.inf
            logits[PAD] = -np.inf
            if temperature <= 0.0:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                z -= z.max()
                p = np.exp(z)
                p /= p.sum()
                nxt = int(rng.choice(len(p), p=p))
            ids.append(nxt)
            if nxt == EOS:
                return Song(tuple(ids))
    return Song(tuple(ids), truncated=True)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "songlm-ckpt-v1"


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    """Single-file .npz checkpoint: little-endian arrays + a JSON meta entry."""
    if isinstance(model, GptModel):
        arch = "gpt"
    elif isinstance(model, RnnModel):
        arch = "rnn"
    else:
        raise ModelError(f"cannot checkpoint object of type {type(model)!r}")
    meta = {
        "format": CHECKPOINT_FORMAT,
        "arch": arch,
        "config": asdict(model.config),
        "vocab": model.vocab.tokens if model.vocab is not None else None,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": np.ascontiguousarray(v.data, dtype=v.data.dtype.newbyteorder("<"))
              for k, v in model.params.items()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Restore a GptModel or RnnModel (and its vocab) from ``save_checkpoint``."""
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ModelError(f"unrecognized checkpoint format in {path}")
        params = {k[len("param/"):]: Tensor(np.array(blob[k]), requires_grad=True)
                  for k in blob.files if k.startswith("param/")}
    vocab = Vocab(meta["vocab"][4:]) if meta["vocab"] else None
    if meta["arch"] == "gpt":
        config = GptConfig(**meta["config"])
        return GptModel(config, vocab=vocab, params=params)
    config = RnnConfig(**meta["config"])
    return RnnModel(config, vocab=vocab, params=params)


def model_summary(model) -> str:
    cfg = model.config
    n_params = sum(p.data.size for p in model.params.values())
    lines = [f"arch: {'gpt' if isinstance(model, GptModel) else cfg.cell}"]
    for key, val in asdict(cfg).items():
        lines.append(f"{key}: {val}")
    lines.append(f"parameters: {n_params}")
    return "\n".join(lines)
