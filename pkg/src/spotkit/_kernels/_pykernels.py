"""Pure-Python/numpy implementations of the compiled kernels."""
from __future__ import annotations

import numpy as np


def solve_assignment(cost) -> np.ndarray:
    """Min-cost perfect assignment on a square matrix; returns column per row.

    Shortest-augmenting-path Hungarian method with row/column potentials, O(k^3).
    """
    c = np.asarray(cost, dtype=np.float64)
    n = c.shape[0]
    if c.ndim != 2 or c.shape[1] != n:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    rows = c.tolist()
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    owner = [0] * (n + 1)  # owner[j]: row (1-based) matched to column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    out = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        out[owner[j] - 1] = j - 1
    return out


def contingency(a, b, na: int, nb: int) -> np.ndarray:
    """Count matrix C[x, y] = #{i : a[i] == x and b[i] == y}."""
    a = np.asarray(a, dtype=np.int64).ravel()
    b = np.asarray(b, dtype=np.int64).ravel()
    flat = np.bincount(a * nb + b, minlength=na * nb)
    return flat.reshape(na, nb).astype(np.int64)


def majority_vote(labels, patch: int) -> np.ndarray:
    """Most frequent label per ``patch``x``patch`` block (ties -> smallest), row-major."""
    lab = np.asarray(labels, dtype=np.int64)
    h, w = lab.shape
    gh, gw = h // patch, w // patch
    blocks = lab.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3).reshape(gh * gw, patch * patch)
    top = int(lab.max()) + 1 if lab.size else 1
    counts = np.zeros((gh * gw, top), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(gh * gw), patch * patch), blocks.ravel()), 1)
    return counts.argmax(axis=1).astype(np.int64)
