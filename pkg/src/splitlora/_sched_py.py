"""Pure-Python scheduling kernels (fallback for the compiled ``_sched_ext``).

Both implementations perform the same floating-point operations in the same
order, so they return bit-identical results.  Tasks are addressed by
position; callers pass them sorted by client id so that "smaller index"
is the final tie-break.
"""

from itertools import permutations

BACKEND = "python"


def evaluate(order, release, server, tail):
    """Start/end of each server job in ``order`` and the resulting makespan."""
    starts = [0.0] * len(order)
    ends = [0.0] * len(order)
    t = 0.0
    span = 0.0
    for pos, i in enumerate(order):
        r = release[i]
        s = r if r > t else t
        t = s + server[i]
        starts[pos] = s
        ends[pos] = t
        c = t + tail[i]
        if c > span:
            span = c
    return starts, ends, span


def _span(order, release, server, tail):
    t = 0.0
    span = 0.0
    for i in order:
        r = release[i]
        if r > t:
            t = r
        t = t + server[i]
        c = t + tail[i]
        if c > span:
            span = c
    return span


def greedy(release, server, tail):
    """Event-driven longest-tail-first list schedule; returns the order."""
    n = len(release)
    done = [False] * n
    order = []
    t = 0.0
    while len(order) < n:
        best = -1
        nxt = float("inf")
        for i in range(n):
            if done[i]:
                continue
            if release[i] <= t:
                if (best < 0 or tail[i] > tail[best]
                        or (tail[i] == tail[best] and server[i] > server[best])):
                    best = i
            elif release[i] < nxt:
                nxt = release[i]
        if best < 0:
            t = nxt
            continue
        done[best] = True
        order.append(best)
        t = t + server[best]
    return order


def brute_force(release, server, tail):
    """Lexicographically first permutation with the minimum makespan."""
    n = len(release)
    best_order = list(range(n))
    best = _span(best_order, release, server, tail)
    for perm in permutations(range(n)):
        span = _span(perm, release, server, tail)
        if span < best:
            best = span
            best_order = list(perm)
    return best_order, best
