from dataclasses import replace
from typing import Any, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from hmkg.config import HMKGRunnerConfig, SynthesisConfig
from hmkg.hmkg_model import HMKGConfig
from hmkg.kgn_aggregator import KnowledgeGraphAggregator
from hmkg.slide_geometry import (
    CELLS_PER_TILE,
    Cohort,
    FeatureBag,
    SurvivalRecord,
    build_geometry,
)
from hmkg.synthetic_cohort import generate_synthetic_cohort

TINY_DIMS = dict(
    d_low=4,
    d_high=4,
    d_attn=4,
    d_out=4,
    d_bix=4,
    d_global_in=4,
    d_global_out=4,
    n_bins=4,
    local_top_k=3,
    global_top_k=2,
)


def build_runner_cfg(**kwargs: Any) -> HMKGRunnerConfig:
    """Small, fast defaults; any field can be overridden."""
    mock_config_dict = dict(
        seed=0,
        **TINY_DIMS,
        epochs=3,
        lr=1e-2,
        folds=2,
        dtype="float64",
        checkpoint_path="checkpoints",
    )
    mock_config_dict.update(kwargs)
    return HMKGRunnerConfig(**mock_config_dict)  # type: ignore


def build_model_cfg(**kwargs: Any) -> HMKGConfig:
    mock_config_dict: dict[str, Any] = dict(seed=0, dtype="float64", **TINY_DIMS)
    mock_config_dict.update(kwargs)
    return HMKGConfig(**mock_config_dict)


def random_bag(
    n_tiles: int,
    d_low: int = 4,
    d_high: int = 4,
    seed: int = 0,
    slide_id: str = "slide",
    dtype: torch.dtype = torch.float64,
) -> FeatureBag:
    generator = torch.Generator().manual_seed(seed)
    return FeatureBag(
        geometry=build_geometry(n_tiles, 224, "row", slide_id=slide_id),
        f_low=torch.randn(n_tiles, d_low, generator=generator, dtype=dtype),
        f_high=torch.randn(n_tiles, CELLS_PER_TILE, d_high, generator=generator, dtype=dtype),
    )


def make_aggregator(
    d_in: int = 4,
    d_attn: int = 3,
    d_out: int = 4,
    top_k: int = 2,
    seed: int = 0,
    dtype: torch.dtype = torch.float64,
) -> KnowledgeGraphAggregator:
    aggregator = KnowledgeGraphAggregator(d_in, d_attn, d_out, top_k, dtype=dtype)
    aggregator.reset_parameters(torch.Generator().manual_seed(seed))
    return aggregator


def build_tiny_cohort(
    size: int = 8,
    seed: int = 7,
    signal_mode: str = "local-motif",
    out_dir: Optional[str] = None,
    **kwargs: Any,
) -> Cohort:
    spec_dict: dict[str, Any] = dict(
        cohort_id="tiny",
        size=size,
        n_tiles_min=1,
        n_tiles_max=3,
        dim_low=4,
        dim_high=4,
        seed=seed,
        signal_mode=signal_mode,
        motif_min_cells=3,
    )
    spec_dict.update(kwargs)
    return generate_synthetic_cohort(SynthesisConfig(**spec_dict), out_dir=out_dir)


def relabel_cohort(cohort: Cohort, events: Sequence[bool]) -> Cohort:
    """Same slides, times 1..n in manifest order with the given event flags."""
    labels = [
        SurvivalRecord(slide_id, float(i + 1), bool(event))
        for i, (slide_id, event) in enumerate(zip(cohort.slide_ids, events))
    ]
    return Cohort(manifest=replace(cohort.manifest, labels=labels), bags=cohort.bags)


def loop_aggregate(
    aggregator: KnowledgeGraphAggregator, features: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Node-by-node reference of the aggregator: (updated nodes, pooled vector)."""
    n = features.shape[0]
    heads = features @ aggregator.W_head
    tails = features @ aggregator.W_tail
    updated = []
    for u in range(n):
        if n == 1:
            neighbours = [0]
        else:
            candidates = [v for v in range(n) if v != u]
            candidates.sort(key=lambda v: (-float(heads[u] @ tails[v]), v))
            neighbours = candidates[: min(aggregator.top_k, n - 1)]
        logits = torch.stack([heads[u] @ tails[v] for v in neighbours])
        alpha = torch.softmax(logits, dim=0)
        message = torch.zeros_like(heads[u])
        for weight, v in zip(alpha, neighbours):
            message = message + weight * tails[v] * torch.tanh(heads[u] + tails[v])
        updated.append(F.gelu(features[u] @ aggregator.W_self + message @ aggregator.W_msg))
    nodes = torch.stack(updated)
    weights = torch.softmax(nodes @ aggregator.readout_query, dim=0)
    return nodes, (weights[:, None] * nodes).sum(dim=0)


def gradcheck_module(module: nn.Module, *inputs: torch.Tensor) -> bool:
    """Central-difference check of module(*inputs) w.r.t. the inputs and every parameter."""
    names = [name for name, _ in module.named_parameters()]
    params = [p.detach().clone().requires_grad_(True) for p in module.parameters()]
    inputs = tuple(x.detach().clone().requires_grad_(True) for x in inputs)
    n_inputs = len(inputs)

    def fn(*tensors: torch.Tensor) -> torch.Tensor:
        return functional_call(module, dict(zip(names, tensors[n_inputs:])), tensors[:n_inputs])

    return torch.autograd.gradcheck(fn, (*inputs, *params), eps=1e-6, atol=1e-6, rtol=1e-4)
