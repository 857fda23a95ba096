"""Shared test oracles: finite differences, naive matmul, brute-force trees."""

from __future__ import annotations

import itertools

import numpy as np

import songlm.autograd as ag


def numeric_grad(fn, tensor, h=1e-6):
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``tensor``."""
    grad = np.zeros_like(tensor.data)
    it = np.nditer(tensor.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = tensor.data[idx]
        tensor.data[idx] = orig + h
        fp = fn().item()
        tensor.data[idx] = orig - h
        fm = fn().item()
        tensor.data[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def check_gradients(fn, tensors, rtol=1e-4, h=1e-6, atol=1e-8):
    """Analytic-vs-numeric check; returns the worst relative error.

    An element passes when its relative error is below ``rtol`` or its
    absolute difference is below ``atol`` (central differences cannot
    resolve near-zero gradients any tighter).
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    ag.backward(loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "missing analytic gradient"
        num = numeric_grad(fn, t, h=h)
        diff = np.abs(t.grad - num)
        rel = diff / (np.abs(t.grad) + 1e-8)
        rel[diff < atol] = 0.0
        worst = max(worst, float(rel.max()))
    assert worst < rtol, f"gradient mismatch: rel err {worst:.3e}"
    return worst


def rand_tensor(rng, shape, requires_grad=True):
    return ag.Tensor(rng.normal(size=shape), requires_grad=requires_grad,
                     dtype=np.float64)


def scalarize(out, rng):
    """Project an op output to a scalar with fixed random weights so every
    output element influences the loss."""
    w = ag.Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return ag.sum_(ag.mul(out, w))


def naive_matmul(a, b):
    """Triple-loop 2-d matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def brute_force_arborescence(weights, root=0):
    """Enumerate all parent assignments; return the best spanning
    arborescence weight (and one argmax parent array)."""
    w = np.asarray(weights, dtype=float)
    n = w.shape[0]
    nodes = [v for v in range(n) if v != root]
    best_weight = -np.inf
    best_parent = None
    choices = []
    for v in nodes:
        opts = [u for u in range(n) if u != v and np.isfinite(w[v, u])]
        if not opts:
            return -np.inf, None
        choices.append(opts)
    for combo in itertools.product(*choices):
        parent = {v: u for v, u in zip(nodes, combo)}
        # every node must reach the root (no cycles)
        ok = True
        for v in nodes:
            seen = set()
            cur = v
            while cur != root:
                if cur in seen:
                    ok = False
                    break
                seen.add(cur)
                cur = parent[cur]
            if not ok:
                break
        if not ok:
            continue
        total = sum(w[v, parent[v]] for v in nodes)
        if total > best_weight:
            best_weight = total
            best_parent = parent
    return best_weight, best_parent


def random_arborescence_weight(weights, root, rng):
    """Weight of one uniformly sampled spanning arborescence (grow from root)."""
    w = np.asarray(weights, dtype=float)
    n = w.shape[0]
    in_tree = {root}
    parent = {}
    remaining = [v for v in range(n) if v != root]
    rng.shuffle(remaining)
    total = 0.0
    for v in remaining:
        opts = [u for u in in_tree if np.isfinite(w[v, u])]
        u = opts[int(rng.integers(len(opts)))]
        parent[v] = u
        in_tree.add(v)
        total += w[v, u]
    return total, parent


def assert_valid_arborescence(parent, root, n):
    assert parent[root] == -1
    for v in range(n):
        if v == root:
            continue
        seen = set()
        cur = v
        while cur != root:
            assert cur not in seen, "cycle in arborescence"
            seen.add(cur)
            cur = int(parent[cur])
