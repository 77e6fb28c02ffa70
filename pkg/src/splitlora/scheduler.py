"""Server processing order for one round: greedy, FIFO and exhaustive baselines.

Each client job is a :class:`TaskProfile`: it reaches the server at
``release``, occupies the (single, non-preemptive) server for
``server_time`` and then needs ``tail`` more seconds (gradient downlink plus
client backward) that overlap with other jobs.  The makespan is the latest
``end + tail``.

The inner loops live in a compiled extension when it is available and in
:mod:`splitlora._sched_py` otherwise; set ``SPLITLORA_PURE_PYTHON=1`` to
force the fallback.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import SizeError, ValidationError

if os.environ.get("SPLITLORA_PURE_PYTHON"):
    from . import _sched_py as _kernels
else:
    try:
        from . import _sched_ext as _kernels
    except ImportError:  # extension not built
        from . import _sched_py as _kernels

BACKEND = _kernels.BACKEND
BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class TaskProfile:
    client_id: int
    release: float
    server_time: float
    tail: float

    def __post_init__(self):
        for name in ("release", "server_time", "tail"):
            v = getattr(self, name)
            if not v >= 0:
                raise ValidationError(f"task {self.client_id}: {name} must be >= 0, got {v}")


@dataclass(frozen=True)
class Job:
    client_id: int
    start: float
    end: float
    tail_end: float


@dataclass
class Schedule:
    policy: str
    order: list[int]
    jobs: list[Job] = field(default_factory=list)
    makespan: float = 0.0

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "order": list(self.order),
            "jobs": [{"client": j.client_id, "start": j.start, "end": j.end,
                      "tail_end": j.tail_end} for j in self.jobs],
            "makespan": self.makespan,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _prepare(tasks: Sequence[TaskProfile]):
    if not tasks:
        raise ValidationError("at least one task is required")
    ts = sorted(tasks, key=lambda t: t.client_id)
    ids = [t.client_id for t in ts]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate client ids in {ids}")
    return (ts, [t.release for t in ts], [t.server_time for t in ts], [t.tail for t in ts])


def _build(policy: str, ts, order_idx, release, server, tail) -> Schedule:
    starts, ends, span = _kernels.evaluate(order_idx, release, server, tail)
    jobs = [Job(ts[i].client_id, s, e, e + ts[i].tail) for i, s, e in zip(order_idx, starts, ends)]
    return Schedule(policy, [ts[i].client_id for i in order_idx], jobs, span)


def greedy_order(tasks: Sequence[TaskProfile]) -> Schedule:
    """Whenever the server frees up, serve the released job with the longest tail.

    Ties go to the longer server time, then the smaller client id.  If
    nothing is released yet the server idles until the next release.
    """
    ts, r, s, q = _prepare(tasks)
    return _build("greedy", ts, _kernels.greedy(r, s, q), r, s, q)


def fifo_order(tasks: Sequence[TaskProfile]) -> Schedule:
    ts, r, s, q = _prepare(tasks)
    order = sorted(range(len(ts)), key=lambda i: (r[i], ts[i].client_id))
    return _build("fifo", ts, order, r, s, q)


def brute_force_order(tasks: Sequence[TaskProfile]) -> Schedule:
    """Minimum-makespan order over all permutations (at most 8 tasks)."""
    if len(tasks) > BRUTE_FORCE_LIMIT:
        raise SizeError(f"brute force is limited to {BRUTE_FORCE_LIMIT} tasks, got {len(tasks)}")
    ts, r, s, q = _prepare(tasks)
    order, _ = _kernels.brute_force(r, s, q)
    return _build("brute_force", ts, order, r, s, q)


POLICIES = {"greedy": greedy_order, "fifo": fifo_order, "brute_force": brute_force_order}


def makespan(schedule: Schedule, tasks: Sequence[TaskProfile]) -> float:
    """Recompute the makespan of ``schedule.order`` from the task data."""
    by_id = {t.client_id: t for t in tasks}
    if sorted(schedule.order) != sorted(by_id) or len(by_id) != len(tasks):
        raise ValidationError(
            f"schedule covers {sorted(schedule.order)}, tasks are {sorted(by_id)}")
    ts = [by_id[c] for c in schedule.order]
    idx = list(range(len(ts)))
    _, _, span = _kernels.evaluate(idx, [t.release for t in ts], [t.server_time for t in ts],
                                   [t.tail for t in ts])
    return span


def processor_sharing(tasks: Sequence[TaskProfile]) -> tuple[dict[int, float], float]:
    """Egalitarian processor sharing: every active job gets 1/n of the server.

    Models a server that runs all clients' server-side models concurrently
    on one device.  Returns per-client server completion times and the
    makespan including tails.
    """
    ts, release, work, _ = _prepare(tasks)
    n = len(ts)
    remaining = list(work)
    done: dict[int, float] = {}
    pending = sorted(range(n), key=lambda i: (release[i], i))
    active: list[int] = []
    t = 0.0
    k = 0
    while len(done) < n:
        while k < n and release[pending[k]] <= t:
            i = pending[k]
            k += 1
            if remaining[i] == 0.0:
                done[ts[i].client_id] = t
            else:
                active.append(i)
        if not active:
            t = release[pending[k]]
            continue
        m = len(active)
        finish_dt = min(remaining[i] for i in active) * m
        arrive_dt = release[pending[k]] - t if k < n else float("inf")
        dt = min(finish_dt, arrive_dt)
        for i in active:
            remaining[i] -= dt / m
        t += dt
        if dt == finish_dt:
            # jobs at the minimum finish together; guard round-off with a tolerance
            floor = min(remaining[i] for i in active)
            still = []
            for i in active:
                if remaining[i] <= max(floor, 0.0) + 1e-15:
                    done[ts[i].client_id] = t
                else:
                    still.append(i)
            active = still
    span = max(done[t_.client_id] + t_.tail for t_ in ts)
    return done, span


def random_tasks(rng: np.random.Generator, n: int, zero_release: bool = False) -> list[TaskProfile]:
    """Random instance: release U(0,1), server U(0.1,1), tail U(0,2)."""
    rel = np.zeros(n) if zero_release else rng.uniform(0.0, 1.0, n)
    srv = rng.uniform(0.1, 1.0, n)
    tail = rng.uniform(0.0, 2.0, n)
    return [TaskProfile(i, float(rel[i]), float(srv[i]), float(tail[i])) for i in range(n)]


@dataclass
class MonteCarloSummary:
    instances: int
    greedy_le_fifo: float
    greedy_eq_optimal: float
    ratio_mean: float
    ratio_p95: float
    ratio_max: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def monte_carlo(count: int, n: int, seed: int, zero_release: bool = False,
                with_optimal: bool = True) -> tuple[MonteCarloSummary, np.ndarray]:
    """Compare policies on ``count`` random instances seeded ``seed + index``.

    Returns summary statistics and the per-instance greedy/optimal ratios
    (empty when ``with_optimal`` is false).
    """
    le_fifo = 0
    eq_opt = 0
    ratios = []
    for k in range(count):
        rng = np.random.default_rng(seed + k)
        tasks = random_tasks(rng, n, zero_release)
        g = greedy_order(tasks).makespan
        if g <= fifo_order(tasks).makespan:
            le_fifo += 1
        if with_optimal:
            opt = brute_force_order(tasks).makespan
            ratios.append(g / opt)
            if g == opt:
                eq_opt += 1
    arr = np.array(ratios)
    summary = MonteCarloSummary(
        instances=count,
        greedy_le_fifo=le_fifo / count,
        greedy_eq_optimal=eq_opt / count if with_optimal else float("nan"),
        ratio_mean=float(arr.mean()) if arr.size else float("nan"),
        ratio_p95=float(np.percentile(arr, 95)) if arr.size else float("nan"),
        ratio_max=float(arr.max()) if arr.size else float("nan"),
    )
    return summary, arr
