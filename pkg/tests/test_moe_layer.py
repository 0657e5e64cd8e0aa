import numpy as np
import pytest

from evomoe import numerics as nx
from evomoe.errors import InvariantViolation, ParameterError, PhaseError
from evomoe.gating import GateDecision, GateParams, dts_gate, topk_gate
from evomoe.moe_layer import (
    Expert,
    MoELayer,
    dispatch_combine,
    moe_forward,
    shared_forward,
    spawn_diverse,
)


def _expert(seed, d_model=4, d_ff=6):
    """An expert with non-trivial biases so bias handling is exercised."""
    rng = np.random.default_rng(seed)
    expert = Expert.init(d_model, d_ff, rng)
    expert.b1.assign(rng.normal(0.0, 0.1, d_ff))
    expert.b2.assign(rng.normal(0.0, 0.1, d_model))
    return expert


def _fixed_decision(selected, weights):
    selected = np.asarray(selected, dtype=bool)
    weights = nx.parameter(np.where(selected, weights, 0.0))
    return GateDecision(selected=selected, weights=weights, dense_probs=weights)


def test_spawn_diverse_mask_ratios():
    shared = _expert(0, d_model=50, d_ff=100)
    clones = spawn_diverse(shared, 3, 0.0, seed=1)
    for clone in clones:
        assert np.array_equal(clone.w1.data, shared.w1.data) and np.array_equal(clone.w2.data, shared.w2.data)
        assert np.array_equal(clone.b1.data, shared.b1.data)
        assert clone.w1 is not shared.w1, "experts own their parameters"
    for clone in spawn_diverse(shared, 2, 1.0, seed=1):
        assert not clone.w1.data.any() and not clone.w2.data.any()
        assert np.array_equal(clone.b2.data, shared.b2.data), "biases are never masked"
    masked = spawn_diverse(shared, 2, 0.1, seed=1)
    for clone in masked:
        zeroed = (clone.w1.data == 0.0).mean()
        assert abs(zeroed - 0.1) < 0.01, f"masked share {zeroed}"
    assert not np.array_equal(masked[0].w1.data == 0.0, masked[1].w1.data == 0.0), "masks are independent"
    again = spawn_diverse(shared, 2, 0.1, seed=1)
    assert np.array_equal(again[1].w2.data, masked[1].w2.data)
    with pytest.raises(ParameterError):
        spawn_diverse(shared, 2, 1.5, seed=1)
    with pytest.raises(ParameterError):
        spawn_diverse(shared, 1, 0.1, seed=1)


def test_moe_forward_matches_per_token_loop():
    """Worked example: token routed to e0 and e1 with weights 0.35 / 0.65."""
    experts = [_expert(i) for i in range(3)]
    rng = np.random.default_rng(10)
    x = nx.constant(rng.normal(size=(3, 4)))
    selected = [[True, True, False], [False, False, True], [True, False, True]]
    weights = [[0.35, 0.65, 0.0], [0.0, 0.0, 0.8], [0.5, 0.0, 0.25]]
    y = moe_forward(x, _fixed_decision(selected, weights), experts)
    for s in range(3):
        expected = np.zeros(4)
        for i in range(3):
            if selected[s][i]:
                row = nx.constant(x.data[s : s + 1])
                expected += weights[s][i] * experts[i](row).data[0]
        np.testing.assert_allclose(y.data[s], expected, rtol=1e-12, atol=1e-14)


def test_single_expert_and_identical_experts():
    expert = _expert(3)
    x = nx.constant(np.random.default_rng(11).normal(size=(5, 4)))
    one = _fixed_decision(np.ones((5, 2), dtype=bool) * [True, False], np.ones((5, 2)) * [1.0, 0.0])
    y = moe_forward(x, one, [expert, _expert(4)])
    np.testing.assert_allclose(y.data, expert(x).data, atol=1e-14)
    clones = spawn_diverse(expert, 4, 0.0, seed=0)
    weights = np.random.default_rng(12).dirichlet(np.ones(4), size=5)
    mixed = moe_forward(x, _fixed_decision(np.ones((5, 4), dtype=bool), weights), clones)
    np.testing.assert_allclose(mixed.data, shared_forward(x, expert).data, atol=1e-12)


def test_shared_forward_is_plain_ffn():
    expert = _expert(5)
    x = nx.constant(np.random.default_rng(13).normal(size=(7, 4)))
    direct = nx.ffn(x, expert.w1, expert.b1, expert.w2, expert.b2, "gelu")
    assert np.array_equal(shared_forward(x, expert, "gelu").data, direct.data)


def test_dispatch_groups_tokens_in_order():
    x = nx.constant(np.arange(12.0).reshape(6, 2))
    selected = np.array([[1, 0, 0], [0, 0, 1], [1, 1, 0], [0, 0, 1], [0, 1, 0], [1, 0, 0]], dtype=bool)
    batches, dispatch = dispatch_combine(x, _fixed_decision(selected, selected * 1.0))
    assert [rows.tolist() for rows in dispatch.expert_rows] == [[0, 2, 5], [2, 4], [1, 3]]
    np.testing.assert_array_equal(batches[0].data, x.data[[0, 2, 5]])
    grouped = np.concatenate([b.data for b in batches])
    restored = dispatch.restore(grouped)
    np.testing.assert_array_equal(restored, x.data * selected.sum(axis=1, keepdims=True))
    idle = np.zeros((6, 3), dtype=bool)
    idle[:, 0] = True
    batches, _ = dispatch_combine(x, _fixed_decision(idle, idle * 1.0))
    assert batches[1] is None and batches[2] is None


def test_unselected_experts_never_run():
    layer = MoELayer(experts=[_expert(i) for i in range(4)])
    x = nx.constant(np.random.default_rng(14).normal(size=(6, 4)))
    selected = np.zeros((6, 4), dtype=bool)
    selected[:, 1] = True
    layer.forward(x, _fixed_decision(selected, selected * 1.0))
    assert layer.expert_calls == 6


def test_invalid_decisions_raise():
    experts = [_expert(i) for i in range(3)]
    x = nx.constant(np.ones((2, 4)))
    with pytest.raises(InvariantViolation):
        moe_forward(x, _fixed_decision(np.ones((3, 3), dtype=bool), np.ones((3, 3))), experts)
    stray = GateDecision(
        selected=np.array([[True, False, False]] * 2),
        weights=nx.constant([[0.5, 0.5, 0.0]] * 2),
        dense_probs=nx.constant([[0.5, 0.5, 0.0]] * 2),
    )
    with pytest.raises(InvariantViolation):
        moe_forward(x, stray, experts)
    silent = _fixed_decision(np.ones((2, 3), dtype=bool), [[0.5, 0.5, 0.0], [1 / 3] * 3])
    with pytest.raises(InvariantViolation):
        moe_forward(x, silent, experts)
    empty = np.array([[True, False, False], [False, False, False]])
    with pytest.raises(InvariantViolation):
        moe_forward(x, _fixed_decision(empty, empty * 1.0), experts)


def test_layer_modes():
    layer = MoELayer(shared=_expert(0))
    x = nx.constant(np.ones((2, 4)))
    with pytest.raises(PhaseError):
        layer.forward(x, _fixed_decision(np.ones((2, 2), dtype=bool), np.ones((2, 2))))
    assert set(layer.named()) == {"shared.w1", "shared.b1", "shared.w2", "shared.b2"}
    layer.diversify(3, 0.1, seed=(0, 1), gate=GateParams(w_g=nx.parameter(np.zeros((4, 3)))))
    assert layer.mode == "sparse" and len(layer.experts) == 3
    assert "experts.2.w2" in layer.named() and "gate.w_g" in layer.named()
    with pytest.raises(PhaseError):
        layer.shared_forward(x)
    with pytest.raises(PhaseError):
        layer.diversify(3, 0.1, seed=0)
    with pytest.raises(InvariantViolation):
        MoELayer()
    with pytest.raises(InvariantViolation):
        MoELayer(experts=[_expert(0)])


def test_routed_forward_gradient(gradcheck):
    """Two stacked MoE layers, DTS gate then Top-2, checked against finite differences."""
    rng = np.random.default_rng(15)
    x = nx.parameter(rng.normal(size=(5, 4)))
    first = [_expert(20 + i) for i in range(3)]
    second = [_expert(30 + i) for i in range(3)]
    gate1 = GateParams(w_g=nx.parameter(rng.normal(size=(4, 3))), threshold=0.2)
    w_g2 = nx.parameter(rng.normal(size=(4, 3)))
    coef = rng.normal(size=(5, 4))

    def build():
        h = moe_forward(x, dts_gate(x, gate1, 1.0, 0, 10, rng=np.random.default_rng(3)), first)
        y = moe_forward(h, topk_gate(h, w_g2, 2), second)
        return nx.weighted_total(y, coef)

    params = [x, gate1.w_g, w_g2] + [p for e in first + second for p in e.named().values()]
    assert gradcheck(build, params, samples=40) < 1e-4
