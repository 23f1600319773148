"""Slow, obviously-correct reference implementations used only by the tests."""

import itertools
import math
from collections import deque

import numpy as np


def naive_conv(x, w, stride=1, padding=0):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for a in range(k):
                        for b in range(k):
                            acc += xp[c, i * stride + a, j * stride + b] * w[o, c, a, b]
                out[o, i, j] = acc
    return out


def naive_pool(x, k):
    c, h, w = x.shape
    out = np.zeros((c, h // k, w // k))
    for ch in range(c):
        for i in range(h // k):
            for j in range(w // k):
                total = 0.0
                for a in range(k):
                    for b in range(k):
                        total += x[ch, i * k + a, j * k + b]
                out[ch, i, j] = total / (k * k)
    return out


def naive_linear(x, w, b):
    return np.array([sum(w[o, i] * x[i] for i in range(len(x))) + b[o] for o in range(len(b))])


def scalar_lif(currents, tau, v_thr):
    """Per-element Python loop; returns the spike train."""
    flat = np.asarray(currents, dtype=float).reshape(len(currents), -1)
    spikes = np.zeros_like(flat)
    for e in range(flat.shape[1]):
        v = 0.0
        for t in range(flat.shape[0]):
            h = v + (flat[t, e] - v) / tau
            s = 1.0 if h >= v_thr else 0.0
            v = h - v_thr * s
            spikes[t, e] = s
    return spikes.reshape(np.shape(currents))


def central_difference(f, x, h=1e-4):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def all_paths(n, edges, sources, sinks):
    succ = {v: sorted(j for i, j in edges if i == v) for v in range(n)}

    def walk(v):
        if v in sinks:
            return [(v,)]
        return [(v,) + rest for w in succ[v] for rest in walk(w)]

    return {p for s in sources for p in walk(s)}


def _simple_paths(succ, s, t):
    if s == t:
        return [(s,)]
    return [(s,) + rest for w in succ[s] for rest in _simple_paths(succ, w, t)]


def brute_betweenness(n, edges):
    """Enumerate every s->t path, keep the shortest ones, count what they cross."""
    succ = {v: [j for i, j in edges if i == v] for v in range(n)}
    node = {v: 0.0 for v in range(n)}
    edge = {e: 0.0 for e in edges}
    for s, t in itertools.permutations(range(n), 2):
        paths = _simple_paths(succ, s, t)
        if not paths:
            continue
        best = min(len(p) for p in paths)
        shortest = [p for p in paths if len(p) == best]
        for p in shortest:
            for v in p[1:-1]:
                node[v] += 1.0 / len(shortest)
            for e in zip(p, p[1:]):
                edge[e] += 1.0 / len(shortest)
    return node, edge


def bfs_lengths(n, edges, s):
    succ = {v: [j for i, j in edges if i == v] for v in range(n)}
    dist = {s: 0}
    queue = deque([s])
    while queue:
        v = queue.popleft()
        for w in succ[v]:
            if w not in dist:
                dist[w] = dist[v] + 1
                queue.append(w)
    return dist


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def arctan_derivative(x, a):
    return a / (2 * (1 + (math.pi / 2 * a * x) ** 2))
