"""Clients, server and round/training loops of the split federated LoRA scheme.

Clients run their sub-models "in parallel" (logically; events are replayed
on one thread in timestamp order) and the server handles their smashed
data one at a time against a single shared base model, looking up the
sending client's own server-side adapters.  Every ``agg_every`` rounds the
adapters are paired, averaged and redistributed.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import aggregation as agg
from .autodiff import Tensor
from .cost import ClientTiming
from .data import Dataset, Shard
from .errors import ProtocolError, RegistrationError, SplitMismatchError, ValidationError
from .model import (AdapterSet, BaseWeights, ClientPass, Partition, backward_boundary,
                    backward_client, evaluate, forward_client, forward_server, full_gradients,
                    sgd_step)

HEADER_BYTES = 16


class Phase(enum.Enum):
    IDLE = "Idle"
    FORWARD_DONE = "ForwardDone"
    AWAIT_GRAD = "AwaitGrad"
    BACKWARD_DONE = "BackwardDone"
    AWAIT_AGGREGATE = "AwaitAggregate"


_TRANSITIONS = {
    Phase.IDLE: {Phase.FORWARD_DONE},
    Phase.FORWARD_DONE: {Phase.AWAIT_GRAD},
    Phase.AWAIT_GRAD: {Phase.BACKWARD_DONE},
    Phase.BACKWARD_DONE: {Phase.IDLE, Phase.AWAIT_AGGREGATE},
    Phase.AWAIT_AGGREGATE: {Phase.IDLE},
}


@dataclass
class ActivationMsg:
    client_id: int
    split_index: int
    activation: Tensor
    labels: np.ndarray
    produced_at: float = 0.0

    @property
    def nbytes(self) -> int:
        b = self.activation.shape[0]
        return self.activation.size * 8 + b * 8 + HEADER_BYTES


@dataclass
class GradientMsg:
    client_id: int
    grad: Tensor

    @property
    def nbytes(self) -> int:
        return self.grad.size * 8 + HEADER_BYTES


def batch_sampler(data: Dataset, batch_size: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless stream of random batches (with replacement only if the shard is smaller)."""
    rng = np.random.default_rng(seed)
    n = len(data)
    while True:
        idx = rng.choice(n, size=batch_size, replace=n < batch_size)
        yield data.tokens[idx], data.labels[idx]


class Client:
    """Device holding the embeddings, the first ``cut`` blocks and their adapters."""

    def __init__(self, client_id: int, partition: Partition, base: BaseWeights,
                 adapters: AdapterSet, shard: Shard | Dataset, lr: float,
                 batch_size: int, seed: int = 0):
        self.client_id = client_id
        self.partition = partition
        self.base = base.client_view(partition.cut)
        self.adapters = adapters.client_side(partition)
        self.data = shard.data if isinstance(shard, Shard) else shard
        self.lr = lr
        self.phase = Phase.IDLE
        self.batches = batch_sampler(self.data, batch_size, seed)
        self._pass: ClientPass | None = None

    @property
    def sample_count(self) -> int:
        return len(self.data)

    def _move(self, to: Phase) -> None:
        if to not in _TRANSITIONS[self.phase]:
            raise ProtocolError(f"client {self.client_id}: illegal transition "
                                f"{self.phase.value} -> {to.value}")
        self.phase = to

    def local_step(self, batch=None, produced_at: float = 0.0) -> ActivationMsg:
        """Forward through the client sub-model and package the smashed data."""
        if self.phase is not Phase.IDLE:
            raise ProtocolError(f"client {self.client_id}: local_step needs Idle, "
                                f"phase is {self.phase.value}")
        tokens, labels = next(self.batches) if batch is None else batch
        self._pass = forward_client(self.base, self.adapters, self.partition, tokens)
        self._move(Phase.FORWARD_DONE)
        return ActivationMsg(self.client_id, self.partition.cut, self._pass.activation,
                             np.asarray(labels, dtype=np.int64), produced_at)

    def mark_sent(self) -> None:
        self._move(Phase.AWAIT_GRAD)

    def apply_grad(self, msg: GradientMsg) -> None:
        """Finish the backward pass from the returned cut gradient and take an SGD step."""
        if self.phase is not Phase.AWAIT_GRAD:
            raise ProtocolError(f"client {self.client_id}: apply_grad needs AwaitGrad, "
                                f"phase is {self.phase.value}")
        if self._pass is None:
            raise ProtocolError(f"client {self.client_id}: no retained tape")
        grads = backward_client(self._pass, self.adapters, msg.grad.data)
        self.adapters = sgd_step(self.adapters, grads, self.lr)
        self._pass = None
        self._move(Phase.BACKWARD_DONE)

    def finish_round(self, awaiting_aggregate: bool) -> None:
        self._move(Phase.AWAIT_AGGREGATE if awaiting_aggregate else Phase.IDLE)

    def receive(self, adapters: AdapterSet) -> None:
        """Install redistributed client-side adapters after aggregation."""
        if self.phase is not Phase.AWAIT_AGGREGATE:
            raise ProtocolError(f"client {self.client_id}: receive needs AwaitAggregate, "
                                f"phase is {self.phase.value}")
        self.adapters = adapters
        self._move(Phase.IDLE)


class Server:
    """One frozen full base model plus per-client server-side adapter sets."""

    def __init__(self, base: BaseWeights, lr: float):
        self.base = base
        self.lr = lr
        self.adapters: dict[int, AdapterSet] = {}
        self.partitions: dict[int, Partition] = {}
        self.last_loss: dict[int, float] = {}

    def register(self, client_id: int, partition: Partition, adapters: AdapterSet) -> None:
        self.partitions[client_id] = partition
        self.adapters[client_id] = adapters.server_side(partition)

    def base_param_count(self) -> int:
        return self.base.param_count()

    def process(self, msg: ActivationMsg) -> GradientMsg:
        """Forward/backward the remaining blocks with the sender's adapters; update them."""
        cid = msg.client_id
        if cid not in self.adapters:
            raise RegistrationError(f"client {cid} has no registered adapters")
        part = self.partitions[cid]
        if msg.split_index != part.cut:
            raise SplitMismatchError(f"client {cid} sent split index {msg.split_index}, "
                                     f"registered cut is {part.cut}")
        adapters = self.adapters[cid]
        sp = forward_server(self.base, adapters, part, msg.activation, msg.labels)
        g, grads = backward_boundary(sp)
        self.adapters[cid] = sgd_step(adapters, grads, self.lr)
        self.last_loss[cid] = sp.loss.item()
        return GradientMsg(cid, Tensor(g))


# --------------------------------------------------------------------------
# Rounds
# --------------------------------------------------------------------------


@dataclass
class TraceEvent:
    event: str
    actor: str
    t_start: float
    t_end: float
    bytes: int = 0
    round: int = 0

    def to_dict(self) -> dict:
        return {"event": self.event, "actor": self.actor, "t_start": self.t_start,
                "t_end": self.t_end, "bytes": self.bytes, "round": self.round}


@dataclass
class RoundTrace:
    round: int
    events: list[TraceEvent] = field(default_factory=list)
    order: list[int] = field(default_factory=list)
    losses: dict[int, float] = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return max(e.t_end for e in self.events)

    def server_intervals(self) -> list[tuple[float, float]]:
        return [(e.t_start, e.t_end) for e in self.events if e.event == "server_process"]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(e.to_dict()) + "\n" for e in self.events)


def unit_timings(client_ids: Sequence[int]) -> dict[int, ClientTiming]:
    """One simulated second per phase for every client."""
    return {c: ClientTiming(c, 1.0, 1.0, 1.0, 1.0, 1.0) for c in client_ids}


OrderPolicy = str | Callable[[ClientTiming, float], tuple]


def _policy_key(policy: OrderPolicy) -> Callable[[ClientTiming, float], tuple]:
    if callable(policy):
        return policy
    if policy == "greedy":
        return lambda t, arrival: (-t.tail, -t.server, t.client_id)
    if policy == "fifo":
        return lambda t, arrival: (arrival, t.client_id)
    raise ValidationError(f"unknown order policy {policy!r}")


def run_round(clients: Sequence[Client], server: Server, order_policy: OrderPolicy = "greedy",
              timings: Mapping[int, ClientTiming] | None = None, round_index: int = 0,
              aggregate_after: bool = False) -> RoundTrace:
    """Every client takes one batch step; the server serves them one at a time.

    Timestamps come from ``timings`` (simulated seconds per phase).  Whenever
    the server frees up it picks, among the messages that have arrived, the
    one ranked first by ``order_policy``; if none has arrived it idles until
    the next arrival.
    """
    for c in clients:
        if c.phase is not Phase.IDLE:
            raise ProtocolError(f"client {c.client_id} is in phase {c.phase.value}, expected Idle")
    by_id = {c.client_id: c for c in clients}
    timings = dict(timings) if timings is not None else unit_timings(sorted(by_id))
    key = _policy_key(order_policy)
    trace = RoundTrace(round_index)
    ev = trace.events.append

    pending: list[tuple[float, ActivationMsg]] = []
    for cid in sorted(by_id):
        tm = timings[cid]
        msg = by_id[cid].local_step(produced_at=tm.forward)
        ev(TraceEvent("client_forward", f"client{cid}", 0.0, tm.forward, 0, round_index))
        arrival = tm.forward + tm.uplink
        ev(TraceEvent("uplink", f"client{cid}", tm.forward, arrival, msg.nbytes, round_index))
        by_id[cid].mark_sent()
        pending.append((arrival, msg))

    t = 0.0
    while pending:
        ready = [p for p in pending if p[0] <= t]
        if not ready:
            t = min(p[0] for p in pending)
            continue
        chosen = min(ready, key=lambda p: key(timings[p[1].client_id], p[0]))
        pending = [p for p in pending if p is not chosen]
        msg = chosen[1]
        cid = msg.client_id
        tm = timings[cid]
        start = t
        t = start + tm.server
        gmsg = server.process(msg)
        trace.order.append(cid)
        trace.losses[cid] = server.last_loss[cid]
        ev(TraceEvent("server_process", "server", start, t, 0, round_index))
        down_end = t + tm.downlink
        ev(TraceEvent("downlink", f"client{cid}", t, down_end, gmsg.nbytes, round_index))
        ev(TraceEvent("client_backward", f"client{cid}", down_end, down_end + tm.backward, 0,
                      round_index))
        by_id[cid].apply_grad(gmsg)

    for c in clients:
        c.finish_round(aggregate_after)
    return trace


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class RoundMetrics:
    round: int
    train_loss: float
    eval_loss: float
    eval_accuracy: float
    aggregated: bool
    makespan: float


@dataclass
class TrainingResult:
    global_adapters: agg.GlobalAdapterSet
    history: list[RoundMetrics]
    traces: list[RoundTrace]
    aggregations: int


def paired_sets(clients: Sequence[Client], server: Server) -> list[agg.PairedAdapters]:
    return [agg.pair(c.adapters, server.adapters[c.client_id], c.partition, c.client_id,
                     c.sample_count) for c in clients]


def aggregate(clients: Sequence[Client], server: Server, version: int,
              uniform: bool = False) -> agg.GlobalAdapterSet:
    """Pair, FedAvg, split and redistribute; clients must be in AwaitAggregate."""
    g = agg.fedavg(paired_sets(clients, server), version, uniform)
    shards = agg.split_and_distribute(g, {c.client_id: c.partition for c in clients})
    for c in clients:
        client_side, server_side = shards[c.client_id]
        c.receive(client_side)
        server.adapters[c.client_id] = server_side
    return g


def run_training(clients: Sequence[Client], server: Server, rounds: int, agg_every: int,
                 eval_set: Dataset | None = None, order_policy: OrderPolicy = "greedy",
                 timings: Mapping[int, ClientTiming] | None = None,
                 uniform_weights: bool = False, eval_every: int = 1,
                 initial: AdapterSet | None = None,
                 on_round: Callable[[RoundMetrics], None] | None = None) -> TrainingResult:
    """Run ``rounds`` rounds, aggregating after every ``agg_every``-th round.

    Held-out metrics are computed on the sample-weighted average of the
    clients' current adapter sets (the model an aggregation would produce
    at that point); on aggregation rounds this is exactly the new global set.
    """
    if rounds < 1:
        raise ValidationError("rounds must be >= 1")
    if agg_every < 1:
        raise ValidationError("agg_every must be >= 1")
    if initial is None:
        initial = agg.fedavg(paired_sets(clients, server)).adapters
    current = agg.GlobalAdapterSet(initial, 0)
    history, traces = [], []
    for r in range(1, rounds + 1):
        do_agg = r % agg_every == 0
        trace = run_round(clients, server, order_policy, timings, r, aggregate_after=do_agg)
        traces.append(trace)
        if do_agg:
            current = aggregate(clients, server, current.version + 1, uniform_weights)
            n_bytes = sum(agg.distribution_bytes(c.partition.cut, server.base.config) for c in clients)
            trace.events.append(TraceEvent("aggregate", "server", trace.duration, trace.duration,
                                           n_bytes, r))
            snapshot = current.adapters
        elif eval_set is not None and (r % eval_every == 0 or r == rounds):
            snapshot = agg.fedavg(paired_sets(clients, server), uniform=uniform_weights).adapters
        else:
            snapshot = None
        if eval_set is not None and snapshot is not None:
            el, ea = evaluate(server.base, snapshot, eval_set.tokens, eval_set.labels)
        else:
            el = ea = float("nan")
        m = RoundMetrics(r, float(np.mean(list(trace.losses.values()))), el, ea, do_agg,
                         max(e.t_end for e in trace.events if e.event != "aggregate"))
        history.append(m)
        if on_round is not None:
            on_round(m)
    return TrainingResult(current, history, traces, current.version)


def client_seed(seed: int, client_id: int) -> int:
    """Seed of a client's batch stream."""
    return seed + 7919 * (client_id + 1)


def setup_federation(base: BaseWeights, adapters: AdapterSet, shards: Sequence[Shard | Dataset],
                     cuts: Sequence[int], lr: float, batch_size: int,
                     seed: int = 0) -> tuple[list[Client], Server]:
    """Clients (ids 0..K-1) and a server that all start from ``adapters``."""
    if len(shards) != len(cuts):
        raise ValidationError(f"{len(shards)} shards for {len(cuts)} cuts")
    L = base.config.num_blocks
    server = Server(base, lr)
    clients = []
    for cid, (shard, cut) in enumerate(zip(shards, cuts)):
        part = Partition(cut, L)
        clients.append(Client(cid, part, base, adapters, shard, lr, batch_size, client_seed(seed, cid)))
        server.register(cid, part, adapters)
    return clients, server


def train_monolithic(base: BaseWeights, adapters: AdapterSet, batches, lr: float) -> tuple[AdapterSet, list[float]]:
    """Reference: unsplit LoRA fine-tuning, one SGD step per batch."""
    losses = []
    for tokens, labels in batches:
        loss, grads = full_gradients(base, adapters, tokens, labels)
        adapters = sgd_step(adapters, grads, lr)
        losses.append(loss)
    return adapters, losses
