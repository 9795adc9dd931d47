"""
Knowledge-aware dynamic graph aggregation.

Each node is projected to a head and a tail embedding. Node u links to the top-k
nodes v != u by the score head_u . tail_v, receives messages
tail_v * tanh(head_u + tail_v) weighted by a softmax over those scores, and the
updated nodes are pooled by attention against a learned readout query.

Everything is batched over leading dimensions, so [n_tiles x 16 x d] runs one
independent graph per tile.
"""

from dataclasses import dataclass, field
from typing import Any, Optional

import einops
import numpy as np
import torch
import torch.nn.functional as F
from jaxtyping import Float, Int
from torch import nn


@dataclass
class NodeSet:
    features: Float[torch.Tensor, "n d_in"]
    node_keys: list[Any] = field(default_factory=list)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(
                f"NodeSet needs an [n x d_in] matrix with n >= 1. Got {list(self.features.shape)}"
            )
        if not self.node_keys:
            self.node_keys = list(range(self.features.shape[0]))
        if len(self.node_keys) != self.features.shape[0]:
            raise ValueError(
                f"{len(self.node_keys)} node keys for {self.features.shape[0]} nodes"
            )
        if not torch.isfinite(self.features).all():
            raise ValueError("NodeSet features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class EdgeSet:
    neighbours: Int[torch.Tensor, "... n k"]
    logits: Float[torch.Tensor, "... n k"]

    @property
    def k(self) -> int:
        return self.neighbours.shape[-1]


def build_dynamic_edges(
    heads: Float[torch.Tensor, "... n d_attn"],
    tails: Float[torch.Tensor, "... n d_attn"],
    top_k: int,
) -> EdgeSet:
    """
    Link every node to the min(top_k, n - 1) other nodes with the highest head.tail score.

    A stable descending sort puts equal scores in index order, so ties go to the lower
    index. A single node gets a self-edge.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1. Got {top_k}")
    if heads.shape != tails.shape:
        raise ValueError(
            f"heads and tails must have the same shape. Got {list(heads.shape)} and {list(tails.shape)}"
        )
    scores = einops.einsum(heads, tails, "... u a, ... v a -> ... u v")
    n = scores.shape[-1]
    if n == 1:
        neighbours = torch.zeros(scores.shape, dtype=torch.long, device=scores.device)
        return EdgeSet(neighbours=neighbours, logits=scores)

    k = min(top_k, n - 1)
    self_mask = torch.eye(n, dtype=torch.bool, device=scores.device)
    masked = scores.detach().masked_fill(self_mask, float("-inf"))
    order = torch.sort(masked, dim=-1, descending=True, stable=True).indices
    neighbours = order[..., :k]
    return EdgeSet(neighbours=neighbours, logits=scores.gather(-1, neighbours))


class KnowledgeGraphAggregator(nn.Module):
    """
    One Agg: heads/tails, dynamic top-k edges, attention message passing and readout.

    Weights are stored input-major (x @ W), i.e. W_head is [d_in x d_attn].
    """

    def __init__(
        self,
        d_in: int,
        d_attn: int,
        d_out: int,
        top_k: int,
        dtype: torch.dtype = torch.float32,
        device: str | torch.device = "cpu",
    ):
        super().__init__()
        for name, value in (("d_in", d_in), ("d_attn", d_attn), ("d_out", d_out)):
            if value < 1:
                raise ValueError(f"{name} must be >= 1. Got {value}")
        if top_k < 1:
            raise ValueError(f"top_k must be >= 1. Got {top_k}")
        self.d_in = d_in
        self.d_attn = d_attn
        self.d_out = d_out
        self.top_k = top_k

        def empty(*shape: int) -> nn.Parameter:
            return nn.Parameter(torch.zeros(*shape, dtype=dtype, device=device))

        self.W_head = empty(d_in, d_attn)
        self.W_tail = empty(d_in, d_attn)
        self.W_msg = empty(d_attn, d_out)
        self.W_self = empty(d_in, d_out)
        self.readout_query = empty(d_out)

    @torch.no_grad()
    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        for param in (self.W_head, self.W_tail, self.W_msg, self.W_self):
            uniform_fan_in_(param, fan_in=param.shape[0], generator=generator)
        uniform_fan_in_(self.readout_query, fan_in=self.d_out, generator=generator)

    def _check_input(self, features: torch.Tensor) -> None:
        if features.ndim < 2 or features.shape[-1] != self.d_in:
            raise ValueError(
                f"Expected [... x n x {self.d_in}] node features. Got {list(features.shape)}"
            )
        if features.shape[-2] < 1:
            raise ValueError("Cannot aggregate an empty node set")

    def head_tail_project(
        self, features: Float[torch.Tensor, "... n d_in"]
    ) -> tuple[Float[torch.Tensor, "... n d_attn"], Float[torch.Tensor, "... n d_attn"]]:
        self._check_input(features)
        return features @ self.W_head, features @ self.W_tail

    def build_dynamic_edges(
        self,
        heads: Float[torch.Tensor, "... n d_attn"],
        tails: Float[torch.Tensor, "... n d_attn"],
    ) -> EdgeSet:
        return build_dynamic_edges(heads, tails, self.top_k)

    def knowledge_attention_aggregate(
        self,
        features: Float[torch.Tensor, "... n d_in"],
        heads: Float[torch.Tensor, "... n d_attn"],
        tails: Float[torch.Tensor, "... n d_attn"],
        edges: EdgeSet,
    ) -> Float[torch.Tensor, "... n d_out"]:
        alpha = edges.logits.softmax(dim=-1)
        # [... n 1 n a] against [... n k 1] -> tails of each node's neighbours
        neighbour_tails = torch.take_along_dim(
            tails.unsqueeze(-3), edges.neighbours.unsqueeze(-1), dim=-2
        )
        messages = neighbour_tails * torch.tanh(heads.unsqueeze(-2) + neighbour_tails)
        pooled = einops.einsum(alpha, messages, "... u k, ... u k a -> ... u a")
        return F.gelu(features @ self.W_self + pooled @ self.W_msg)

    def attention_weights(
        self, features: Float[torch.Tensor, "... n d_in"]
    ) -> tuple[EdgeSet, Float[torch.Tensor, "... n k"]]:
        heads, tails = self.head_tail_project(features)
        edges = self.build_dynamic_edges(heads, tails)
        return edges, edges.logits.softmax(dim=-1)

    def readout_weights(
        self, nodes: Float[torch.Tensor, "... n d_out"]
    ) -> Float[torch.Tensor, "... n"]:
        return (nodes @ self.readout_query).softmax(dim=-1)

    def readout(self, nodes: Float[torch.Tensor, "... n d_out"]) -> Float[torch.Tensor, "... d_out"]:
        weights = self.readout_weights(nodes)
        return einops.einsum(weights, nodes, "... n, ... n d -> ... d")

    def update_nodes(
        self, features: Float[torch.Tensor, "... n d_in"]
    ) -> Float[torch.Tensor, "... n d_out"]:
        heads, tails = self.head_tail_project(features)
        edges = self.build_dynamic_edges(heads, tails)
        return self.knowledge_attention_aggregate(features, heads, tails, edges)

    def aggregate(self, nodes: NodeSet | torch.Tensor) -> Float[torch.Tensor, "... d_out"]:
        features = nodes.features if isinstance(nodes, NodeSet) else nodes
        return self.readout(self.update_nodes(features))

    def forward(self, features: Float[torch.Tensor, "... n d_in"]) -> Float[torch.Tensor, "... d_out"]:
        return self.aggregate(features)


@torch.no_grad()
def uniform_fan_in_(
    tensor: torch.Tensor, fan_in: int, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Fill in place with U(-a, a), a = 1 / sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    sample = torch.rand(tensor.shape, generator=generator, dtype=torch.float64)
    tensor.copy_((sample * 2.0 - 1.0) * bound)
    return tensor
