import json

import numpy as np
import pytest

from splitlora import cost
from splitlora.aggregation import pair
from splitlora.autodiff import Tensor
from splitlora.data import TaskSpec, dirichlet_partition, generate
from splitlora.errors import ProtocolError, RegistrationError, SplitMismatchError, ValidationError
from splitlora.harness import max_relative_deviation
from splitlora.model import ModelConfig, Partition, full_gradients, sgd_step
from splitlora.protocol import (ActivationMsg, Client, GradientMsg, Phase, Server, batch_sampler,
                                client_seed, run_round, run_training, setup_federation,
                                train_monolithic)

CFG = ModelConfig()
SPEC = TaskSpec(CFG.vocab, CFG.num_classes, CFG.seq_len)
DATA = generate(SPEC, 240, 0)


def federation(desk, cuts, lr=0.1, alpha=0.5, seed=0):
    _, base, adapters = desk
    shards = dirichlet_partition(DATA, len(cuts), alpha, seed) if len(cuts) > 1 else [DATA]
    return setup_federation(base, adapters, shards, cuts, lr, 8, seed)


def test_activation_shape_and_bytes(desk):
    clients, _ = federation(desk, [1, 3])
    a, b = clients[0].local_step(), clients[1].local_step()
    assert a.activation.shape == b.activation.shape == (8, CFG.seq_len, CFG.hidden)
    assert a.split_index == 1 and b.split_index == 3
    assert a.nbytes == 8 * CFG.seq_len * CFG.hidden * 8 + 8 * 8 + 16
    assert cost.activation_msg_bytes(16, 128, 768) == 12_582_912 + 16 * 8 + 16


def test_phase_machine(desk):
    (c,), server = federation(desk, [2])
    assert c.phase is Phase.IDLE
    with pytest.raises(ProtocolError):
        c.mark_sent()
    msg = c.local_step()
    assert c.phase is Phase.FORWARD_DONE
    with pytest.raises(ProtocolError):
        c.local_step()
    with pytest.raises(ProtocolError):
        c.apply_grad(GradientMsg(0, Tensor(np.zeros(msg.activation.shape))))
    c.mark_sent()
    c.apply_grad(server.process(msg))
    assert c.phase is Phase.BACKWARD_DONE
    with pytest.raises(ProtocolError):
        c.receive(c.adapters)
    c.finish_round(True)
    assert c.phase is Phase.AWAIT_AGGREGATE
    c.receive(c.adapters)
    assert c.phase is Phase.IDLE


def test_zero_gradient_leaves_client_unchanged(desk):
    (c,), _ = federation(desk, [2])
    before = c.adapters.arrays()
    msg = c.local_step()
    c.mark_sent()
    c.apply_grad(GradientMsg(0, Tensor(np.zeros(msg.activation.shape))))
    after = c.adapters.arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_server_errors_and_isolation(desk):
    clients, server = federation(desk, [1, 3])
    msg = clients[0].local_step()
    other = {k: v.copy() for k, v in server.adapters[1].arrays().items()}
    g = server.process(msg)
    assert g.grad.shape == msg.activation.shape
    assert all(np.array_equal(other[k], v) for k, v in server.adapters[1].arrays().items())
    with pytest.raises(RegistrationError):
        server.process(ActivationMsg(7, 1, msg.activation, msg.labels))
    with pytest.raises(SplitMismatchError):
        server.process(ActivationMsg(1, 2, msg.activation, msg.labels))
    assert server.base_param_count() == desk[1].param_count()


def test_single_step_matches_monolithic(desk):
    _, base, adapters = desk
    (c,), server = federation(desk, [2])
    batch = next(batch_sampler(DATA, 8, 99))
    msg = c.local_step(batch)
    c.mark_sent()
    c.apply_grad(server.process(msg))
    split = pair(c.adapters, server.adapters[0], c.partition).adapters
    _, grads = full_gradients(base, adapters, *batch)
    ref = sgd_step(adapters, grads, 0.1)
    assert max_relative_deviation(split, ref) < 1e-10


@pytest.mark.parametrize("cut", [0, 4])
def test_ten_rounds_match_monolithic(desk, cut):
    _, base, adapters = desk
    (c,), server = federation(desk, [cut])
    for r in range(10):
        run_round([c], server, round_index=r + 1)
    split = pair(c.adapters, server.adapters[0], c.partition).adapters
    sampler = batch_sampler(DATA, 8, client_seed(0, 0))
    ref, _ = train_monolithic(base, adapters, [next(sampler) for _ in range(10)], 0.1)
    assert max_relative_deviation(split, ref) < 1e-9


def test_round_trace_is_sequential_and_serialisable(desk):
    clients, server = federation(desk, [1, 1, 2, 2, 3, 3])
    trace = run_round(clients, server, round_index=1)
    iv = sorted(trace.server_intervals())
    assert len(iv) == 6
    assert all(a[1] <= b[0] for a, b in zip(iv, iv[1:]))
    assert sorted(trace.order) == list(range(6))
    lines = trace.to_ndjson().splitlines()
    assert len(lines) == len(trace.events) and json.loads(lines[0])["round"] == 1

    (c,), s1 = federation(desk, [2])
    assert len(run_round([c], s1).server_intervals()) == 1


def test_round_rejects_client_in_wrong_phase(desk):
    clients, server = federation(desk, [1, 2])
    clients[1].local_step()
    with pytest.raises(ProtocolError, match="client 1"):
        run_round(clients, server)
    with pytest.raises(ValidationError):
        run_round(clients[:1], server, order_policy="random")


def test_trace_duration_equals_cost_model_round_time(desk):
    preset = cost.paper_preset()
    cfg = ModelConfig.paper_scale()
    timings = {t.client_id: t for t in cost.client_timings(preset, cfg, cost.TrainHyper())}
    clients, server = federation(desk, preset.cuts)
    trace = run_round(clients, server, "greedy", timings, 1)
    rt = cost.scheme_round_time("proposed", preset, cfg, cost.TrainHyper())
    assert abs(trace.duration - rt.seconds) < 1e-9


def test_fifo_policy_serves_in_arrival_order(desk):
    timings = {i: cost.ClientTiming(i, 0.1 * (3 - i), 0.0, 1.0, 0.0, float(i)) for i in range(3)}
    clients, server = federation(desk, [1, 2, 3])
    assert run_round(clients, server, "fifo", timings, 1).order == [2, 1, 0]


def test_no_aggregation_when_agg_every_exceeds_rounds(desk):
    clients, server = federation(desk, [1, 3])
    res = run_training(clients, server, rounds=3, agg_every=5)
    assert res.aggregations == 0 and not any(m.aggregated for m in res.history)
    assert all(c.phase is Phase.IDLE for c in clients)


def test_aggregation_of_identical_clients_is_a_no_op(desk):
    _, base, adapters = desk
    clients = [Client(i, Partition(cut, 4), base, adapters, DATA, 0.1, 8, seed=5)
               for i, cut in enumerate([1, 2, 3])]
    server = Server(base, 0.1)
    for c in clients:
        server.register(c.client_id, c.partition, adapters)
    res = run_training(clients, server, rounds=2, agg_every=2)
    pre = pair(clients[0].adapters, server.adapters[0], clients[0].partition).adapters
    assert res.global_adapters.adapters.equals(pre)
    for c in clients:
        assert pair(c.adapters, server.adapters[c.client_id], c.partition).adapters.equals(pre)


def test_training_reduces_loss_and_records_history(desk):
    clients, server = federation(desk, [1, 2, 3])
    seen = []
    res = run_training(clients, server, rounds=20, agg_every=5, eval_set=generate(SPEC, 100, 1),
                       on_round=seen.append)
    assert len(res.history) == 20 and seen == res.history
    assert res.aggregations == 4 and res.global_adapters.version == 4
    assert res.history[-1].eval_loss < res.history[0].eval_loss
    with pytest.raises(ValidationError):
        run_training(clients, server, rounds=0, agg_every=1)
