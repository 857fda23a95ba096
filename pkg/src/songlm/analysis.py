"""Attention and embedding analyses.

Covers per-layer attention-span statistics over captured forward passes,
maximum spanning arborescences over single-head attention matrices
(Chu-Liu-Edmonds), residual-stream embedding traces across layers, a
shared-basis PCA projection of pooled traces, and cosine-similarity
distributions of one syllable's states against their per-layer mean.

Edge orientation for the trees: the attention row index is the query and
becomes the dependent; the key index becomes the head. Only causal edges
(head before dependent) exist, and the tree is rooted at bos.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Song
from .models import GptModel

logger = logging.getLogger(__name__)


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# attention span statistics


@dataclass
class SpanStat:
    layer: int
    pairs: list        # (song_index, head, query, key, weight) with weight > threshold
    mean_span: float   # mean of query-key over the pairs; nan when none
    n_pairs: int


def span_stats(model: GptModel, corpus: Corpus, threshold: float = 0.5,
               max_songs: int = 200) -> list:
    """Per-layer span statistics pooled across heads.

    Token pairs whose post-softmax weight exceeds ``threshold`` are
    collected over up to ``max_songs`` songs; span 0 (diagonal) pairs count
    like any other. Returns one SpanStat per layer.
    """
    songs = corpus.songs[:max_songs]
    if len(songs) < max_songs:
        logger.warning("span_stats asked for %d songs but corpus has %d",
                       max_songs, len(songs))
    n_layers = model.config.n_layers
    pairs_per_layer: list = [[] for _ in range(n_layers)]
    for s_idx, song in enumerate(songs):
        _, record, _ = model.hidden_states(np.asarray([song.ids]), capture=True)
        layer_idx, head_idx, q_idx, k_idx = np.nonzero(record.weights > threshold)
        weights = record.weights[layer_idx, head_idx, q_idx, k_idx]
        for l, h, q, k, w in zip(layer_idx, head_idx, q_idx, k_idx, weights):
            pairs_per_layer[l].append((s_idx, int(h), int(q), int(k), float(w)))
    stats = []
    for l, pairs in enumerate(pairs_per_layer):
        spans = [q - k for _, _, q, k, _ in pairs]
        stats.append(SpanStat(layer=l, pairs=pairs,
                              mean_span=float(np.mean(spans)) if spans else float("nan"),
                              n_pairs=len(pairs)))
    return stats


# ---------------------------------------------------------------------------
# maximum spanning arborescence (Chu-Liu-Edmonds)


@dataclass
class Arborescence:
    root: int
    parent: np.ndarray      # head index per node; -1 at the root
    total_weight: float
    zero_weight_nodes: list  # nodes attached with no incoming support

    def edges(self) -> list:
        return [(int(self.parent[i]), i) for i in range(len(self.parent)) if i != self.root]


def max_arborescence(weights: np.ndarray, root: int = 0) -> np.ndarray:
    """Parent array of the maximum-weight spanning arborescence.

    ``weights[dep, head]`` is the score of attaching ``dep`` under
    ``head``; -inf marks a missing edge. Ties break toward the smaller
    head index. Classic Chu-Liu-Edmonds: pick best incoming edges,
    contract any cycle, recurse, expand.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    if w.shape != (n, n):
        raise AnalysisError("weight matrix must be square")
    w = w.copy()
    np.fill_diagonal(w, -np.inf)
    w[root, :] = -np.inf  # nothing enters the root

    best = np.full(n, -1, dtype=int)
    for v in range(n):
        if v == root:
            continue
        if not np.any(np.isfinite(w[v])):
            raise AnalysisError(f"node {v} has no incoming edges")
        best[v] = int(np.argmax(w[v]))  # argmax takes the smallest index on ties

    cycle = _find_cycle(best, root)
    if cycle is None:
        return best

    in_cycle = np.zeros(n, dtype=bool)
    in_cycle[cycle] = True
    cycle_weight = {v: w[v, best[v]] for v in cycle}

    # contract the cycle into one supernode placed at index `n_new - 1`
    keep = [v for v in range(n) if not in_cycle[v]]
    index_of = {v: i for i, v in enumerate(keep)}
    n_new = len(keep) + 1
    c = n_new - 1
    w2 = np.full((n_new, n_new), -np.inf)
    enter_choice: dict = {}   # head outside -> (cycle node it enters at)
    leave_choice: dict = {}   # dependent outside -> cycle node it hangs from
    for v in keep:
        for u in keep:
            w2[index_of[v], index_of[u]] = w[v, u]
    for u in keep:  # edges from outside into the cycle, adjusted
        gains = [w[v, u] - cycle_weight[v] for v in cycle]
        k = int(np.argmax(gains))
        if math.isfinite(gains[k]):
            w2[c, index_of[u]] = gains[k]
            enter_choice[u] = cycle[k]
    for v in keep:  # edges from the cycle out to the rest
        outs = [w[v, u] for u in cycle]
        k = int(np.argmax(outs))
        if math.isfinite(outs[k]):
            w2[index_of[v], c] = outs[k]
            leave_choice[v] = cycle[k]

    sub = max_arborescence(w2, root=index_of[root])

    parent = np.full(n, -1, dtype=int)
    for v in keep:
        p = sub[index_of[v]]
        if p == -1:
            continue
        parent[v] = leave_choice[v] if p == c else keep[p]
    entry_head = keep[sub[c]]
    entry_node = enter_choice[entry_head]
    for v in cycle:  # keep cycle edges except into the entry point
        parent[v] = best[v]
    parent[entry_node] = entry_head
    return parent


def _find_cycle(parent, root):
    n = len(parent)
    color = np.zeros(n, dtype=int)  # 0 unseen, 1 in progress, 2 done
    color[root] = 2
    for start in range(n):
        if color[start]:
            continue
        path = []
        v = start
        while color[v] == 0:
            color[v] = 1
            path.append(v)
            v = parent[v]
        if color[v] == 1:  # found a fresh cycle; cut it out of the path
            cycle = path[path.index(v):]
            return cycle
        for u in path:
            color[u] = 2
    return None


def cle_mst(attn: np.ndarray, root: int = 0) -> Arborescence:
    """Maximum spanning arborescence over one head's attention matrix.

    Edges run from an earlier key (head) to a later query (dependent) with
    weight attn[query, key]; the tree is rooted at ``root`` (bos). Nodes
    whose incoming weights are all zero are attached to the root by a
    zero-weight edge and reported.
    """
    attn = np.asarray(attn, dtype=np.float64)
    n = attn.shape[0]
    if n < 2:
        raise AnalysisError("need at least two tokens")
    w = np.full((n, n), -np.inf)
    zero_nodes = []
    for dep in range(n):
        if dep == root:
            continue
        heads = np.arange(0, dep)  # causal support only
        if heads.size == 0:
            continue
        w[dep, heads] = attn[dep, heads]
        if np.all(attn[dep, heads] == 0.0):
            zero_nodes.append(dep)
            w[dep, root] = 0.0
    parent = max_arborescence(w, root=root)
    total = float(sum(attn[v, parent[v]] for v in range(n) if v != root))
    return Arborescence(root=root, parent=parent, total_weight=total,
                        zero_weight_nodes=zero_nodes)


# ---------------------------------------------------------------------------
# embedding traces and PCA


@dataclass
class EmbeddingTrace:
    """Residual-stream states per layer: (L+1, T, H); layer 0 is the
    embedding+position output, layer l the state after block l."""

    states: np.ndarray
    token_ids: np.ndarray
    song_index: int = -1


def embedding_trace(model: GptModel, song: Song, song_index: int = -1) -> EmbeddingTrace:
    _, _, states = model.hidden_states(np.asarray([song.ids]), capture=True)
    return EmbeddingTrace(states=states, token_ids=np.asarray(song.ids),
                          song_index=song_index)


@dataclass
class PcaProjection:
    components: np.ndarray          # (H, dims), orthonormal columns
    mean: np.ndarray                # (H,)
    explained_variance: np.ndarray  # ratio per kept component
    projected: list                 # per trace: (L+1, T, dims)


def _pool_states(traces) -> np.ndarray:
    mats = [t.states.reshape(-1, t.states.shape[-1]) for t in traces]
    return np.concatenate(mats, axis=0).astype(np.float64)


def pca_project(traces, dims: int = 3) -> PcaProjection:
    """One PCA fitted on the pooled states of all traces across all layers.

    A single shared basis keeps trajectories geometrically comparable.
    Components follow descending eigenvalue order with a deterministic sign
    (largest-magnitude loading positive).
    """
    pool = _pool_states(traces)
    if pool.shape[0] < dims + 1:
        raise AnalysisError(f"need at least {dims + 1} state vectors, got {pool.shape[0]}")
    mean = pool.mean(axis=0)
    centered = pool - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    tol = svals[0] * 1e-10 if svals.size and svals[0] > 0 else 0.0
    rank = int(np.sum(svals > tol))
    if rank < dims:
        raise AnalysisError(f"pooled states have rank {rank} < {dims}")
    comps = vt[:dims]
    for i in range(dims):  # sign convention
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    var = svals**2
    explained = var[:dims] / var.sum()
    components = comps.T
    projected = [(t.states.astype(np.float64) - mean) @ components for t in traces]
    return PcaProjection(components=components, mean=mean,
                         explained_variance=explained, projected=projected)


@dataclass
class CosineDistribution:
    values: np.ndarray
    n_excluded: int          # zero-norm states dropped
    degenerate_mean: bool    # near-zero mean vector; cosines unstable


def cosine_similarity_distribution(traces, token_id: int, layer: int,
                                   eps: float = 1e-12) -> CosineDistribution:
    """Cosines of every occurrence of a token at one layer against the mean
    of those occurrences, in the full hidden space."""
    states = []
    for t in traces:
        hits = np.nonzero(t.token_ids == token_id)[0]
        if hits.size:
            states.append(t.states[layer, hits])
    if not states:
        raise AnalysisError(f"token {token_id} does not occur in the traces")
    x = np.concatenate(states, axis=0).astype(np.float64)
    if x.shape[0] < 2:
        raise AnalysisError("need at least two occurrences")
    norms = np.linalg.norm(x, axis=1)
    keep = norms > eps
    n_excluded = int((~keep).sum())
    if n_excluded:
        logger.warning("excluded %d zero-norm states from the cosine distribution",
                       n_excluded)
    x = x[keep]
    norms = norms[keep]
    mean = x.mean(axis=0)
    mean_norm = np.linalg.norm(mean)
    typical = float(np.median(norms)) if norms.size else 0.0
    degenerate = bool(mean_norm < 1e-3 * max(typical, eps))
    values = x @ mean / (norms * max(mean_norm, eps))
    return CosineDistribution(values=np.clip(values, -1.0, 1.0),
                              n_excluded=n_excluded, degenerate_mean=degenerate)


def two_cluster_separation(values) -> float:
    """Between-cluster variance fraction under a deterministic 1-d 2-means.

    0 for a constant sample; approaches 1 for two tight, well-separated
    clusters. Used to compare bimodality across layers.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise AnalysisError("need at least two values")
    total_var = x.var()
    if total_var < 1e-18:
        return 0.0
    c0, c1 = float(x.min()), float(x.max())
    assign = None
    for _ in range(100):
        new_assign = np.abs(x - c0) <= np.abs(x - c1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        if assign.all() or (~assign).all():
            break
        c0 = float(x[assign].mean())
        c1 = float(x[~assign].mean())
    if assign.all() or (~assign).all():
        return 0.0
    n0, n1 = int(assign.sum()), int((~assign).sum())
    m0, m1 = x[assign].mean(), x[~assign].mean()
    gm = x.mean()
    between = (n0 * (m0 - gm) ** 2 + n1 * (m1 - gm) ** 2) / x.size
    return float(between / total_var)
