# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the assignment, contingency and majority-vote kernels."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def solve_assignment(cost):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    if c.shape[1] != n:
        raise ValueError(f"cost matrix must be square, got shape {(c.shape[0], c.shape[1])}")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(n + 1)
    cdef double[::1] minv = np.empty(n + 1)
    cdef Py_ssize_t[::1] owner = np.zeros(n + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(n + 1, dtype=np.intp)
    cdef unsigned char[::1] used = np.zeros(n + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = owner[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - ui0 - v[j]
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
    cdef cnp.int64_t[::1] ov = out
    for j in range(1, n + 1):
        ov[owner[j] - 1] = j - 1
    return out


def contingency(a, b, Py_ssize_t na, Py_ssize_t nb):
    cdef cnp.int64_t[::1] av = np.ascontiguousarray(a, dtype=np.int64).ravel()
    cdef cnp.int64_t[::1] bv = np.ascontiguousarray(b, dtype=np.int64).ravel()
    out = np.zeros((na, nb), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] cv = out
    cdef Py_ssize_t i, m = av.shape[0]
    for i in range(m):
        cv[av[i], bv[i]] += 1
    return out


def majority_vote(labels, int patch):
    cdef cnp.int64_t[:, ::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t h = lab.shape[0], w = lab.shape[1]
    cdef Py_ssize_t gh = h // patch, gw = w // patch
    cdef Py_ssize_t top = 1
    cdef Py_ssize_t r, c, pr, pc, x, best, cell
    for r in range(h):
        for c in range(w):
            if lab[r, c] + 1 > top:
                top = lab[r, c] + 1
    counts_arr = np.zeros(top, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_arr
    out = np.empty(gh * gw, dtype=np.int64)
    cdef cnp.int64_t[::1] ov = out
    for pr in range(gh):
        for pc in range(gw):
            for x in range(top):
                counts[x] = 0
            for r in range(pr * patch, (pr + 1) * patch):
                for c in range(pc * patch, (pc + 1) * patch):
                    counts[lab[r, c]] += 1
            best = 0
            for x in range(1, top):
                if counts[x] > counts[best]:
                    best = x
            cell = pr * gw + pc
            ov[cell] = best
    return out
