# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled scheduling kernels; same contract as ``_sched_py``."""

from libc.stdlib cimport malloc, free

BACKEND = "cython"


cdef double _span(int n, const int* order, const double* release,
                  const double* server, const double* tail) noexcept nogil:
    cdef double t = 0.0, span = 0.0, c
    cdef int k, i
    for k in range(n):
        i = order[k]
        if release[i] > t:
            t = release[i]
        t = t + server[i]
        c = t + tail[i]
        if c > span:
            span = c
    return span


cdef bint _next_permutation(int n, int* a) noexcept nogil:
    cdef int i = n - 2, j, tmp
    while i >= 0 and a[i] >= a[i + 1]:
        i -= 1
    if i < 0:
        return False
    j = n - 1
    while a[j] <= a[i]:
        j -= 1
    tmp = a[i]; a[i] = a[j]; a[j] = tmp
    i += 1
    j = n - 1
    while i < j:
        tmp = a[i]; a[i] = a[j]; a[j] = tmp
        i += 1
        j -= 1
    return True


cdef double* _copy(values, int n) except NULL:
    cdef double* out = <double*> malloc(max(n, 1) * sizeof(double))
    if out == NULL:
        raise MemoryError()
    cdef int i
    for i in range(n):
        out[i] = values[i]
    return out


def evaluate(order, release, server, tail):
    cdef int n = len(order), pos, i
    cdef double t = 0.0, span = 0.0, s, c, r
    starts = [0.0] * n
    ends = [0.0] * n
    for pos in range(n):
        i = order[pos]
        r = release[i]
        s = r if r > t else t
        t = s + <double> server[i]
        starts[pos] = s
        ends[pos] = t
        c = t + <double> tail[i]
        if c > span:
            span = c
    return starts, ends, span


def greedy(release, server, tail):
    cdef int n = len(release), i, best, placed = 0
    cdef double t = 0.0, nxt
    cdef double* r = _copy(release, n)
    cdef double* s = _copy(server, n)
    cdef double* q = _copy(tail, n)
    cdef char* done = <char*> malloc(max(n, 1))
    order = []
    try:
        for i in range(n):
            done[i] = 0
        while placed < n:
            best = -1
            nxt = float("inf")
            for i in range(n):
                if done[i]:
                    continue
                if r[i] <= t:
                    if best < 0 or q[i] > q[best] or (q[i] == q[best] and s[i] > s[best]):
                        best = i
                elif r[i] < nxt:
                    nxt = r[i]
            if best < 0:
                t = nxt
                continue
            done[best] = 1
            order.append(best)
            placed += 1
            t = t + s[best]
    finally:
        free(r); free(s); free(q); free(done)
    return order


def brute_force(release, server, tail):
    cdef int n = len(release), i
    cdef double best, span
    cdef double* r = _copy(release, n)
    cdef double* s = _copy(server, n)
    cdef double* q = _copy(tail, n)
    cdef int* perm = <int*> malloc(max(n, 1) * sizeof(int))
    cdef int* best_perm = <int*> malloc(max(n, 1) * sizeof(int))
    try:
        for i in range(n):
            perm[i] = i
            best_perm[i] = i
        with nogil:
            best = _span(n, perm, r, s, q)
            while _next_permutation(n, perm):
                span = _span(n, perm, r, s, q)
                if span < best:
                    best = span
                    for i in range(n):
                        best_perm[i] = perm[i]
        order = [best_perm[i] for i in range(n)]
    finally:
        free(r); free(s); free(q); free(perm); free(best_perm)
    return order, best
