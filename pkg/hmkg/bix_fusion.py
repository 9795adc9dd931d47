from dataclasses import dataclass
from typing import Literal, Optional

import einops
import numpy as np
import torch
from jaxtyping import Float
from torch import nn

from hmkg.kgn_aggregator import uniform_fan_in_


def cross_attention(
    queries: Float[torch.Tensor, "... m d"],
    keys: Float[torch.Tensor, "... n d"],
    values: Float[torch.Tensor, "... n d_v"],
    n_heads: int = 1,
    return_weights: bool = False,
) -> Float[torch.Tensor, "... m d_v"] | tuple[torch.Tensor, torch.Tensor]:
    """
    softmax(Q K^T / sqrt(d_head)) V with a row-wise softmax over the n keys.

    With ``n_heads > 1`` the last dimension is split into equal heads and the head
    outputs are concatenated again. ``return_weights`` also returns the
    [... x heads x m x n] attention matrix.
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise ValueError(
            f"queries and keys need the same width. Got {queries.shape[-1]} and {keys.shape[-1]}"
        )
    if keys.shape[-2] != values.shape[-2]:
        raise ValueError(
            f"{keys.shape[-2]} keys for {values.shape[-2]} values"
        )
    if keys.shape[-2] < 1:
        raise ValueError("cross_attention needs at least one key")
    if queries.shape[-1] % n_heads or values.shape[-1] % n_heads:
        raise ValueError(f"widths must be divisible by n_heads={n_heads}")

    q = einops.rearrange(queries, "... m (h d) -> ... h m d", h=n_heads)
    k = einops.rearrange(keys, "... n (h d) -> ... h n d", h=n_heads)
    v = einops.rearrange(values, "... n (h d) -> ... h n d", h=n_heads)
    scores = einops.einsum(q, k, "... h m d, ... h n d -> ... h m n") / np.sqrt(q.shape[-1])
    weights = scores.softmax(dim=-1)
    out = einops.einsum(weights, v, "... h m n, ... h n d -> ... h m d")
    out = einops.rearrange(out, "... h m d -> ... m (h d)")
    if return_weights:
        return out, weights
    return out


@dataclass
class RoiEmbedding:
    f_low: Float[torch.Tensor, "d_low"]
    f_high_nodes: Float[torch.Tensor, "16 d_out"]
    f_high_pooled: Float[torch.Tensor, "d_out"]
    f_fused: Float[torch.Tensor, "two_d_bix"]

    def __post_init__(self):
        if not torch.isfinite(self.f_fused).all():
            raise ValueError("fused ROI embedding is not finite")


class BidirectionalCrossAttention(nn.Module):
    """
    Low->high and high->low cross-attention between a tile's low-magnification vector
    and its high-magnification cell embeddings.

    Each direction owns W_Q, W_K, W_V unless ``tie_directions`` is set, in which case
    both directions use the low->high matrices (this needs d_low == d_high).
    """

    def __init__(
        self,
        d_low: int,
        d_high: int,
        d_bix: int,
        n_heads: int = 1,
        mode: Literal["set", "vector"] = "set",
        tie_directions: bool = False,
        dtype: torch.dtype = torch.float32,
        device: str | torch.device = "cpu",
    ):
        super().__init__()
        if d_bix % n_heads:
            raise ValueError(f"d_bix ({d_bix}) must be divisible by n_heads ({n_heads})")
        if mode not in ("set", "vector"):
            raise ValueError(f"mode must be set or vector. Got {mode}")
        if tie_directions and d_low != d_high:
            raise ValueError(
                f"Tied directions need d_low == d_high. Got {d_low} and {d_high}"
            )
        self.d_low = d_low
        self.d_high = d_high
        self.d_bix = d_bix
        self.n_heads = n_heads
        self.mode = mode
        self.tie_directions = tie_directions

        def empty(d_in: int) -> nn.Parameter:
            return nn.Parameter(torch.zeros(d_in, d_bix, dtype=dtype, device=device))

        self.W_Q_l2h = empty(d_low)
        self.W_K_l2h = empty(d_high)
        self.W_V_l2h = empty(d_high)
        if not tie_directions:
            self.W_Q_h2l = empty(d_high)
            self.W_K_h2l = empty(d_low)
            self.W_V_h2l = empty(d_low)

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        for param in self.parameters():
            uniform_fan_in_(param, fan_in=param.shape[0], generator=generator)

    def low_to_high_weights(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.W_Q_l2h, self.W_K_l2h, self.W_V_l2h

    def high_to_low_weights(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if self.tie_directions:
            return self.W_Q_l2h, self.W_K_l2h, self.W_V_l2h
        return self.W_Q_h2l, self.W_K_h2l, self.W_V_h2l

    def fuse_roi(
        self,
        f_low: Float[torch.Tensor, "... d_low"],
        f_high_nodes: Float[torch.Tensor, "... 16 d_high"],
        f_high_pooled: Optional[Float[torch.Tensor, "... d_high"]] = None,
    ) -> Float[torch.Tensor, "... two_d_bix"]:
        """
        Concatenate [Attn_{L->H}; Attn_{H->L}] for each ROI.

        In "set" mode the high side is the set of cell embeddings and the 16 H->L
        output rows are mean-pooled. In "vector" mode the high side is the pooled
        tile vector (the mean of the nodes if none is given) and both attentions
        see a single key.
        """
        if f_low.shape[-1] != self.d_low or f_high_nodes.shape[-1] != self.d_high:
            raise ValueError(
                f"Expected d_low={self.d_low}, d_high={self.d_high}. "
                + f"Got {f_low.shape[-1]} and {f_high_nodes.shape[-1]}"
            )
        if self.mode == "vector":
            if f_high_pooled is None:
                f_high_pooled = f_high_nodes.mean(dim=-2)
            high = f_high_pooled.unsqueeze(-2)
        else:
            high = f_high_nodes
        low = f_low.unsqueeze(-2)

        W_Q, W_K, W_V = self.low_to_high_weights()
        low_to_high = cross_attention(low @ W_Q, high @ W_K, high @ W_V, self.n_heads)

        W_Q, W_K, W_V = self.high_to_low_weights()
        # one key per ROI, so every H->L row is exactly low @ W_V before pooling
        high_to_low = cross_attention(high @ W_Q, low @ W_K, low @ W_V, self.n_heads)

        return torch.cat(
            [low_to_high.squeeze(-2), high_to_low.mean(dim=-2)], dim=-1
        )

    def forward(
        self,
        f_low: Float[torch.Tensor, "... d_low"],
        f_high_nodes: Float[torch.Tensor, "... 16 d_high"],
        f_high_pooled: Optional[Float[torch.Tensor, "... d_high"]] = None,
    ) -> Float[torch.Tensor, "... two_d_bix"]:
        return self.fuse_roi(f_low, f_high_nodes, f_high_pooled)


def fuse_roi(
    f_low: Float[torch.Tensor, "... d_low"],
    f_high_nodes: Float[torch.Tensor, "... 16 d_high"],
    bix: BidirectionalCrossAttention,
    f_high_pooled: Optional[Float[torch.Tensor, "... d_high"]] = None,
) -> Float[torch.Tensor, "... two_d_bix"]:
    return bix.fuse_roi(f_low, f_high_nodes, f_high_pooled)
