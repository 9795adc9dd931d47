import math

import einops
import pytest
import torch

from hmkg.bix_fusion import BidirectionalCrossAttention, cross_attention, fuse_roi
from tests.unit.helpers import gradcheck_module


def _bix(**kwargs) -> BidirectionalCrossAttention:
    defaults = dict(d_low=4, d_high=4, d_bix=4, dtype=torch.float64)
    defaults.update(kwargs)
    bix = BidirectionalCrossAttention(**defaults)
    bix.reset_parameters(torch.Generator().manual_seed(0))
    return bix


def test_cross_attention_weights_follow_the_softmax():
    queries = torch.tensor([[math.log(3.0)]], dtype=torch.float64)
    keys = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    values = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    out, weights = cross_attention(queries, keys, values, return_weights=True)
    torch.testing.assert_close(weights[0, 0], torch.tensor([0.75, 0.25], dtype=torch.float64))
    assert out.item() == pytest.approx(0.75)


def test_single_key_returns_the_value_exactly():
    queries = torch.randn(16, 4, dtype=torch.float64)
    keys = torch.randn(1, 4, dtype=torch.float64)
    values = torch.randn(1, 3, dtype=torch.float64)
    out = cross_attention(queries, keys, values)
    assert torch.equal(out, values.expand(16, 3))


def test_multi_head_is_the_concatenation_of_single_heads():
    queries = torch.randn(2, 6, dtype=torch.float64)
    keys = torch.randn(5, 6, dtype=torch.float64)
    values = torch.randn(5, 4, dtype=torch.float64)
    out = cross_attention(queries, keys, values, n_heads=2)
    q = einops.rearrange(queries, "m (h d) -> h m d", h=2)
    k = einops.rearrange(keys, "n (h d) -> h n d", h=2)
    v = einops.rearrange(values, "n (h d) -> h n d", h=2)
    expected = torch.cat([cross_attention(q[h], k[h], v[h]) for h in range(2)], dim=-1)
    torch.testing.assert_close(out, expected)


def test_cross_attention_rejects_bad_shapes():
    with pytest.raises(ValueError):
        cross_attention(torch.zeros(1, 3), torch.zeros(2, 4), torch.zeros(2, 4))
    with pytest.raises(ValueError):
        cross_attention(torch.zeros(1, 4), torch.zeros(2, 4), torch.zeros(3, 4))
    with pytest.raises(ValueError):
        cross_attention(torch.zeros(1, 4), torch.zeros(0, 4), torch.zeros(0, 4))
    with pytest.raises(ValueError):
        cross_attention(torch.zeros(1, 3), torch.zeros(2, 3), torch.zeros(2, 3), n_heads=2)


def test_fused_roi_has_both_directions():
    bix = _bix(d_bix=6)
    f_low = torch.randn(4, dtype=torch.float64)
    nodes = torch.randn(16, 4, dtype=torch.float64)
    fused = bix.fuse_roi(f_low, nodes)
    assert fused.shape == (12,)
    # one low-mag key per ROI, so the pooled H->L half is just the low value
    torch.testing.assert_close(fused[6:], f_low @ bix.W_V_h2l)
    W_Q, W_K, W_V = bix.low_to_high_weights()
    expected_l2h = cross_attention((f_low @ W_Q)[None], nodes @ W_K, nodes @ W_V)[0]
    torch.testing.assert_close(fused[:6], expected_l2h)


def test_fusion_batches_over_tiles():
    bix = _bix(n_heads=2)
    f_low = torch.randn(3, 4, dtype=torch.float64)
    nodes = torch.randn(3, 16, 4, dtype=torch.float64)
    batched = bix(f_low, nodes)
    assert batched.shape == (3, 8)
    for tile in range(3):
        torch.testing.assert_close(batched[tile], bix(f_low[tile], nodes[tile]))


def test_low_to_high_half_sees_the_cells():
    bix = _bix()
    f_low = torch.randn(4, dtype=torch.float64)
    nodes = torch.randn(16, 4, dtype=torch.float64)
    changed = nodes.clone()
    changed[5] += 1.0
    assert not torch.allclose(bix(f_low, nodes)[:4], bix(f_low, changed)[:4])


def test_vector_mode_attends_to_the_pooled_tile():
    bix = _bix(mode="vector")
    f_low = torch.randn(4, dtype=torch.float64)
    nodes = torch.randn(16, 4, dtype=torch.float64)
    pooled = torch.randn(4, dtype=torch.float64)
    fused = bix.fuse_roi(f_low, nodes, pooled)
    torch.testing.assert_close(fused[:4], pooled @ bix.W_V_l2h)
    torch.testing.assert_close(fused[4:], f_low @ bix.W_V_h2l)
    default = bix.fuse_roi(f_low, nodes)
    torch.testing.assert_close(default[:4], nodes.mean(dim=0) @ bix.W_V_l2h)


def test_tied_directions_share_weights():
    tied = _bix(tie_directions=True)
    untied = _bix()
    assert len(list(tied.parameters())) == 3
    assert len(list(untied.parameters())) == 6
    for a, b in zip(tied.high_to_low_weights(), tied.low_to_high_weights()):
        assert a is b
    with pytest.raises(ValueError, match="Tied"):
        BidirectionalCrossAttention(d_low=4, d_high=6, d_bix=4, tie_directions=True)


def test_module_level_fuse_roi_delegates():
    bix = _bix()
    f_low = torch.randn(2, 4, dtype=torch.float64)
    nodes = torch.randn(2, 16, 4, dtype=torch.float64)
    assert torch.equal(fuse_roi(f_low, nodes, bix), bix(f_low, nodes))


def test_rejects_misconfiguration():
    with pytest.raises(ValueError):
        BidirectionalCrossAttention(d_low=4, d_high=4, d_bix=6, n_heads=4)
    with pytest.raises(ValueError):
        BidirectionalCrossAttention(d_low=4, d_high=4, d_bix=4, mode="pairs")  # type: ignore
    bix = _bix()
    with pytest.raises(ValueError):
        bix(torch.randn(5, dtype=torch.float64), torch.randn(16, 4, dtype=torch.float64))


def test_gradients_reach_both_directions():
    bix = _bix()
    bix(torch.randn(2, 4, dtype=torch.float64), torch.randn(2, 16, 4, dtype=torch.float64)).sum().backward()
    for name, param in bix.named_parameters():
        assert param.grad is not None, name


@pytest.mark.parametrize(
    "kwargs",
    [{}, {"mode": "vector"}, {"tie_directions": True}, {"n_heads": 2}],
    ids=["set", "vector", "tied", "two-heads"],
)
def test_fuse_roi_gradients_match_finite_differences(kwargs):
    bix = _bix(**kwargs)
    f_low = torch.randn(2, 4, dtype=torch.float64)
    f_high_nodes = torch.randn(2, 16, 4, dtype=torch.float64)
    assert gradcheck_module(bix, f_low, f_high_nodes)
