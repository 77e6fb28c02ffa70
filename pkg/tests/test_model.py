import numpy as np
import pytest

from helpers import rel_err, sample_coords
from splitlora.data import TaskSpec, generate
from splitlora.errors import ContractError, DimensionError, SplitMismatchError, ValidationError
from splitlora.model import (ModelConfig, Partition, backward_boundary, backward_client,
                             build_model, evaluate, forward_client, forward_full, forward_server,
                             full_gradients, merge_adapters, predict_logits, sgd_step)


def batch(cfg, n=4, seed=3):
    d = generate(TaskSpec(cfg.vocab, cfg.num_classes, cfg.seq_len), n, seed)
    return d.tokens, d.labels


def randomized(adapters, seed=1, std=0.1):
    """Adapters with nonzero B so every LoRA path carries gradient."""
    rng = np.random.default_rng(seed)
    return adapters.with_values({k: v + rng.normal(0, std, v.shape) for k, v in adapters.arrays().items()})


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(hidden=30, num_heads=4)
    with pytest.raises(ValidationError):
        ModelConfig(num_blocks=0)
    with pytest.raises(ValidationError):
        ModelConfig(lora_rank=64, hidden=32)
    assert ModelConfig.paper_scale().scaling == 2.0


def test_partition_bounds_and_owner():
    p = Partition(2, 4)
    assert list(p.client_blocks) == [0, 1] and list(p.server_blocks) == [2, 3]
    assert p.owner(1) == "client" and p.owner(2) == "server"
    with pytest.raises(ValidationError):
        Partition(5, 4)


def test_build_is_deterministic_and_lora_starts_inert(desk):
    cfg, base, adapters = desk
    base2, adapters2 = build_model(cfg, seed=0)
    assert adapters.equals(adapters2)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(base.tensors(), base2.tensors()))
    assert all(np.all(a.B.data == 0) for a in adapters.adapters.values())
    assert len(adapters.named_tensors()) == 4 * cfg.num_blocks + 2


def test_merged_weights_match_adapter_forward(desk):
    cfg, base, adapters = desk
    tok, _ = batch(cfg)
    ad2 = randomized(adapters)
    merged = merge_adapters(base, ad2)
    no_lora = ad2.subset([], head=True)
    np.testing.assert_allclose(predict_logits(merged, no_lora, tok), predict_logits(base, ad2, tok),
                               rtol=1e-10, atol=1e-12)


def test_full_model_gradient_spot_check(desk):
    cfg, base, adapters = desk
    tok, lab = batch(cfg, n=2)
    ad2 = randomized(adapters)
    _, grads = full_gradients(base, ad2, tok, lab)
    arrays = ad2.arrays()
    rng = np.random.default_rng(0)
    worst = 0.0
    for name in ("blocks.0.q.A", "blocks.3.v.B", "head.weight"):
        for idx in sample_coords(arrays[name].shape, 8, rng):
            vals = {k: v.copy() for k, v in arrays.items()}
            vals[name][idx] += 1e-5
            lp = forward_full(base, ad2.with_values(vals), tok, lab).loss.item()
            vals[name][idx] -= 2e-5
            lm = forward_full(base, ad2.with_values(vals), tok, lab).loss.item()
            worst = max(worst, float(rel_err(grads[name][idx], (lp - lm) / 2e-5)))
    assert worst < 1e-4


@pytest.mark.parametrize("cut", [0, 1, 2, 3, 4])
def test_split_pass_is_bit_exact_with_monolithic(desk, cut):
    cfg, base, adapters = desk
    tok, lab = batch(cfg)
    ad2 = randomized(adapters)
    part = Partition(cut, cfg.num_blocks)
    cp = forward_client(base.client_view(cut), ad2.client_side(part), part, tok)
    sp = forward_server(base, ad2.server_side(part), part, cp.activation, lab)
    ref_loss, ref = full_gradients(base, ad2, tok, lab)
    assert sp.loss.item() == ref_loss
    g_act, server_grads = backward_boundary(sp)
    client_grads = backward_client(cp, ad2.client_side(part), g_act)
    merged = {**client_grads, **server_grads}
    assert merged.keys() == ref.keys()
    for k in ref:
        np.testing.assert_array_equal(merged[k], ref[k])


def test_client_view_hides_server_blocks(desk):
    cfg, base, _ = desk
    view = base.client_view(1)
    assert list(view.blocks) == [0]
    assert view.param_count() < base.param_count()


def test_split_errors(desk):
    cfg, base, adapters = desk
    tok, lab = batch(cfg)
    part = Partition(2, cfg.num_blocks)
    with pytest.raises(SplitMismatchError):
        forward_server(base, adapters.server_side(part), part, np.zeros((4, cfg.seq_len, 7)), lab)
    with pytest.raises(ContractError):
        backward_boundary(None)
    with pytest.raises(ContractError):
        backward_client(None, adapters, np.zeros(1))
    cp = forward_client(base, adapters.client_side(part), part, tok)
    with pytest.raises(DimensionError):
        backward_client(cp, adapters.client_side(part), np.zeros((1, 2, 3)))
    with pytest.raises(DimensionError):
        forward_client(base, adapters, part, tok[:, :5])
    with pytest.raises(ValidationError):
        forward_full(base, adapters, tok, np.full(4, cfg.num_classes))


def test_sgd_step_and_alignment(desk):
    cfg, base, adapters = desk
    tok, lab = batch(cfg, n=16)
    loss0, grads = full_gradients(base, adapters, tok, lab)
    stepped = sgd_step(adapters, grads, 0.1)
    assert forward_full(base, stepped, tok, lab).loss.item() < loss0
    for k, v in stepped.arrays().items():
        np.testing.assert_array_equal(v, adapters.arrays()[k] - 0.1 * grads[k])
    with pytest.raises(ContractError):
        sgd_step(adapters, {k: g for k, g in list(grads.items())[1:]}, 0.1)


def test_evaluate_reports_loss_and_accuracy(desk):
    cfg, base, adapters = desk
    tok, lab = batch(cfg, n=32)
    loss, acc = evaluate(base, adapters, tok, lab)
    assert loss == pytest.approx(np.log(cfg.num_classes), abs=0.2)
    assert 0.0 <= acc <= 1.0
