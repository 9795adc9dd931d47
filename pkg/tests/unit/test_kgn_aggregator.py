import pytest
import torch

from hmkg.kgn_aggregator import (
    KnowledgeGraphAggregator,
    NodeSet,
    build_dynamic_edges,
    uniform_fan_in_,
)
from tests.unit.helpers import gradcheck_module, loop_aggregate, make_aggregator


@pytest.mark.parametrize("n_nodes", [1, 2, 3, 6])
def test_aggregate_matches_node_by_node_reference(n_nodes: int):
    aggregator = make_aggregator(top_k=2)
    features = torch.randn(n_nodes, 4, dtype=torch.float64)
    expected_nodes, expected_pooled = loop_aggregate(aggregator, features)
    torch.testing.assert_close(aggregator.update_nodes(features), expected_nodes)
    torch.testing.assert_close(aggregator.aggregate(features), expected_pooled)


def test_edges_exclude_self_and_cap_k_at_n_minus_one():
    heads = torch.randn(4, 3)
    tails = torch.randn(4, 3)
    edges = build_dynamic_edges(heads, tails, top_k=10)
    assert edges.k == 3
    for u in range(4):
        assert sorted(edges.neighbours[u].tolist()) == [v for v in range(4) if v != u]


def test_edges_pick_highest_scores_in_descending_order():
    heads = torch.tensor([[1.0], [0.0], [0.0], [0.0]])
    tails = torch.tensor([[0.0], [1.0], [3.0], [2.0]])
    edges = build_dynamic_edges(heads, tails, top_k=2)
    assert edges.neighbours[0].tolist() == [2, 3]
    torch.testing.assert_close(edges.logits[0], torch.tensor([3.0, 2.0]))


def test_tied_scores_go_to_the_lower_index():
    heads = torch.ones(5, 2)
    tails = torch.ones(5, 2)
    edges = build_dynamic_edges(heads, tails, top_k=2)
    assert edges.neighbours[0].tolist() == [1, 2]
    assert edges.neighbours[1].tolist() == [0, 2]
    assert edges.neighbours[4].tolist() == [0, 1]


def test_single_node_gets_a_self_edge_and_full_weight():
    aggregator = make_aggregator()
    features = torch.randn(1, 4, dtype=torch.float64)
    edges, alpha = aggregator.attention_weights(features)
    assert edges.neighbours.tolist() == [[0]]
    assert alpha.tolist() == [[1.0]]
    pooled = aggregator(features)
    assert pooled.shape == (4,)
    assert torch.isfinite(pooled).all()


def test_attention_rows_sum_to_one():
    aggregator = make_aggregator(top_k=3)
    _, alpha = aggregator.attention_weights(torch.randn(7, 4, dtype=torch.float64))
    torch.testing.assert_close(alpha.sum(dim=-1), torch.ones(7, dtype=torch.float64))
    weights = aggregator.readout_weights(torch.randn(7, 4, dtype=torch.float64))
    assert weights.sum().item() == pytest.approx(1.0)


def test_pooled_output_is_permutation_invariant():
    aggregator = make_aggregator(top_k=2)
    features = torch.randn(6, 4, dtype=torch.float64)
    permutation = torch.randperm(6)
    torch.testing.assert_close(aggregator(features[permutation]), aggregator(features))


def test_batched_graphs_are_independent():
    aggregator = make_aggregator(top_k=3)
    features = torch.randn(3, 16, 4, dtype=torch.float64)
    batched = aggregator(features)
    assert batched.shape == (3, 4)
    for tile in range(3):
        torch.testing.assert_close(batched[tile], aggregator(features[tile]))


def test_gradients_reach_every_parameter():
    aggregator = make_aggregator(top_k=2)
    aggregator(torch.randn(5, 4, dtype=torch.float64)).sum().backward()
    for name, param in aggregator.named_parameters():
        assert param.grad is not None, name
        assert torch.isfinite(param.grad).all(), name


@pytest.mark.parametrize("n", [1, 2, 5])
def test_aggregate_gradients_match_finite_differences(n: int):
    aggregator = make_aggregator(d_in=4, d_attn=3, d_out=4, top_k=2, seed=n)
    assert gradcheck_module(aggregator, torch.randn(n, 4, dtype=torch.float64))


def test_accepts_a_node_set():
    aggregator = make_aggregator()
    features = torch.randn(3, 4, dtype=torch.float64)
    nodes = NodeSet(features, node_keys=["a", "b", "c"])
    assert len(nodes) == 3
    torch.testing.assert_close(aggregator.aggregate(nodes), aggregator(features))


def test_node_set_validation():
    with pytest.raises(ValueError):
        NodeSet(torch.zeros(0, 4))
    with pytest.raises(ValueError):
        NodeSet(torch.zeros(2, 4), node_keys=["a"])
    with pytest.raises(ValueError):
        NodeSet(torch.tensor([[float("nan")]]))


def test_rejects_empty_or_misshaped_input():
    aggregator = make_aggregator()
    with pytest.raises(ValueError, match="empty"):
        aggregator(torch.zeros(0, 4, dtype=torch.float64))
    with pytest.raises(ValueError):
        aggregator(torch.zeros(3, 5, dtype=torch.float64))
    with pytest.raises(ValueError):
        KnowledgeGraphAggregator(4, 3, 4, top_k=0)


def test_reset_parameters_is_seeded_and_bounded():
    first = make_aggregator(seed=11)
    second = make_aggregator(seed=11)
    for a, b in zip(first.parameters(), second.parameters()):
        assert torch.equal(a, b)
    assert first.W_head.abs().max().item() <= 0.5
    assert first.W_msg.abs().max().item() <= 1 / 3**0.5


def test_uniform_fan_in_bounds():
    tensor = torch.empty(1000)
    uniform_fan_in_(tensor, fan_in=16, generator=torch.Generator().manual_seed(0))
    assert tensor.abs().max().item() <= 0.25
    assert tensor.min().item() < 0 < tensor.max().item()
