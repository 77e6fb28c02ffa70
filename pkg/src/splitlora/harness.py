"""Experiment orchestration shared by the CLI and the acceptance tests."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from . import cost
from .config import ExperimentConfig
from .cost import ClientTiming, Preset, TrainHyper
from .data import Dataset, TaskSpec, dirichlet_partition, generate
from .errors import ValidationError
from .model import AdapterSet, BaseWeights, build_model
from .aggregation import pair
from .protocol import (Client, Server, TrainingResult, batch_sampler, client_seed,
                       run_training, setup_federation, train_monolithic)
from .scheduler import (TaskProfile, brute_force_order, fifo_order, greedy_order,
                        BRUTE_FORCE_LIMIT)

METRICS_COLUMNS = ("round", "train_loss", "eval_loss", "eval_accuracy", "aggregated", "makespan")


def preset_for_cuts(preset: Preset, cuts) -> Preset:
    """Assign preset devices round-robin to clients and override their cut."""
    devices = [replace(preset.clients[i % len(preset.clients)], client_layers=c)
               for i, c in enumerate(cuts)]
    return Preset(preset.name, preset.server, tuple(devices), preset.link)


def desk_timings(cfg: ExperimentConfig) -> dict[int, ClientTiming]:
    """Simulated phase durations for the desk model on the configured devices."""
    hyper = replace(cfg.hyper, batch=cfg.batch_size, seq=cfg.model.seq_len,
                    lora_rank=cfg.model.lora_rank)
    p = preset_for_cuts(cfg.load_preset(), cfg.cuts)
    return {t.client_id: t for t in cost.client_timings(p, cfg.model, hyper)}


@dataclass
class Experiment:
    base: BaseWeights
    initial: AdapterSet
    train_set: Dataset
    eval_set: Dataset
    clients: list[Client]
    server: Server
    timings: dict[int, ClientTiming]


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    m = cfg.model
    spec = TaskSpec(vocab=m.vocab, num_classes=m.num_classes, seq_len=m.seq_len)
    train_set = generate(spec, cfg.n_train, cfg.seed)
    eval_set = generate(spec, cfg.n_eval, cfg.seed + 1)
    shards = dirichlet_partition(train_set, len(cfg.cuts), cfg.alpha, cfg.seed)
    base, adapters = build_model(m, cfg.seed)
    clients, server = setup_federation(base, adapters, shards, cfg.cuts, cfg.lr,
                                       cfg.batch_size, cfg.seed)
    return Experiment(base, adapters, train_set, eval_set, clients, server, desk_timings(cfg))


def train(cfg: ExperimentConfig, on_round=None) -> tuple[Experiment, TrainingResult]:
    exp = build_experiment(cfg)
    result = run_training(exp.clients, exp.server, cfg.rounds, cfg.agg_every, exp.eval_set,
                          cfg.policy, exp.timings, cfg.uniform_weights, cfg.eval_every,
                          initial=exp.initial, on_round=on_round)
    return exp, result


def max_relative_deviation(a: AdapterSet, b: AdapterSet) -> float:
    """max |x - y| / max(1, |x|, |y|) over every trainable coordinate."""
    xa, xb = a.arrays(), b.arrays()
    if xa.keys() != xb.keys():
        raise ValidationError("adapter sets have different structure")
    worst = 0.0
    for k in xa:
        d = np.abs(xa[k] - xb[k]) / np.maximum(1.0, np.maximum(np.abs(xa[k]), np.abs(xb[k])))
        worst = max(worst, float(d.max()) if d.size else 0.0)
    return worst


def compare_monolithic(cfg: ExperimentConfig) -> float:
    """Split training with one client vs. unsplit training on the same batches."""
    if len(cfg.cuts) != 1:
        raise ValidationError("--compare-monolithic requires exactly one client")
    exp, _ = train(cfg)
    c = exp.clients[0]
    split_result = pair(c.adapters, exp.server.adapters[c.client_id], c.partition).adapters
    sampler = batch_sampler(c.data, cfg.batch_size, client_seed(cfg.seed, c.client_id))
    batches = [next(sampler) for _ in range(cfg.rounds)]
    ref, _ = train_monolithic(exp.base, exp.initial, batches, cfg.lr)
    return max_relative_deviation(split_result, ref)


def metrics_csv(result: TrainingResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for m in result.history:
        w.writerow([m.round, repr(m.train_loss), repr(m.eval_loss), repr(m.eval_accuracy),
                    int(m.aggregated), repr(m.makespan)])
    return buf.getvalue()


def preset_tasks(preset: Preset, config, hyper: TrainHyper) -> list[TaskProfile]:
    return [t.task() for t in cost.client_timings(preset, config, hyper)]


def schedule_table(tasks: list[TaskProfile]) -> dict:
    """Makespans of the three policies (brute force only when tractable)."""
    out = {"greedy": greedy_order(tasks), "fifo": fifo_order(tasks)}
    if len(tasks) <= BRUTE_FORCE_LIMIT:
        out["brute_force"] = brute_force_order(tasks)
    return out
