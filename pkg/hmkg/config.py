import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Literal, Optional

import torch

from hmkg import __version__
from hmkg.utils import stable_hash

DTYPE_MAP = {
    "float32": torch.float32,
    "float64": torch.float64,
    "torch.float32": torch.float32,
    "torch.float64": torch.float64,
}

VARIANT_NAMES = (
    "full",
    "single_scale",
    "no_locality",
    "kgn_baseline",
    "mean_mil",
    "max_mil",
    "abmil",
    "transmil",
    "mean_pool",
)

SIGNAL_MODES = ("local-motif", "global-context", "multi-scale", "null")


@dataclass
class HMKGRunnerConfig:
    """
    Configuration for training and evaluating an HMKG survival model on a cohort.

    Args:
        seed (int): Seed for initialization, data order, fold assignment and pseudo-ROI grouping.
        d_low (int): Dimension of the low-magnification tile features.
        d_high (int): Dimension of the high-magnification cell features.
        d_attn (int): Head/tail projection dimension inside every knowledge-aware aggregator.
        d_out (int): Output dimension of the local (ROI-level) aggregator.
        d_bix (int): Attention dimension of the bidirectional cross-attention. The fused ROI vector has length 2 * d_bix.
        d_global_in (int): Input dimension of the slide-level aggregator (the fused ROI vector is projected to it).
        d_global_out (int): Output dimension of the slide-level aggregator, i.e. the slide representation.
        n_bins (int): Number of discrete survival time bins.
        local_top_k (int): Neighbours per node in the ROI-level dynamic graph.
        global_top_k (int): Neighbours per node in the slide-level dynamic graph.
        variant (str): One of full, single_scale, no_locality, kgn_baseline, or a MIL
            baseline: mean_mil, max_mil, abmil, transmil, mean_pool.
        bix_mode (str): "set" attends over the 16 cell embeddings, "vector" over the pooled tile vector only.
        bix_n_heads (int): Number of cross-attention heads.
        tie_bix_directions (bool): Share W_Q, W_K, W_V between the low->high and high->low directions.
        no_locality_mode (str): "random_groups" (seeded pseudo-ROIs) or "global_graph" (one unconstrained graph).
        optimizer (str): "sgd" (with momentum) or "adam".
        lr (float): Learning rate.
        momentum (float): Momentum for SGD.
        weight_decay (float): L2 weight decay.
        epochs (int): Number of passes over the training slides.
        batch_size (int): Slides per optimisation step. 0 means the whole training split.
        max_grad_norm (float, optional): Gradient norm clipping. None disables clipping.
        lr_scheduler_name (str): "constant" or "cosineannealing".
        lr_warm_up_steps (int): Linear warm-up steps.
        censor_alpha (float): Extra weight on the uncensored term of the NLL survival loss.
        eps (float): Clamp applied to hazards and survival before logs.
        folds (int): Number of cross-validation folds.
        cohort_path (str, optional): Directory of the cohort to train on.
        include_mil_baselines (bool): Prepend the MIL baseline rows to ablation runs.
        dtype (str): Floating point precision for parameters and features.
        device (str): Torch device.
        checkpoint_path (str): Directory that interrupted runs save a checkpoint to.
        log_to_wandb (bool): Whether to log to Weights & Biases.
        wandb_project (str): The Weights & Biases project to log to.
        wandb_log_frequency (int): Log every n epochs.
        run_name (str, optional): Name of the run. Derived from the variant and dims if None.
        verbose (bool): Print a short run summary.
    """

    seed: int = 42

    # Dimensions
    d_low: int = 64
    d_high: int = 64
    d_attn: int = 64
    d_out: int = 64
    d_bix: int = 64
    d_global_in: int = 64
    d_global_out: int = 64
    n_bins: int = 4

    # Graph
    local_top_k: int = 6
    global_top_k: int = 8

    # Variant switchboard
    variant: str = "full"
    bix_mode: Literal["set", "vector"] = "set"
    bix_n_heads: int = 1
    tie_bix_directions: bool = False
    no_locality_mode: Literal["random_groups", "global_graph"] = "random_groups"

    # Optimisation
    optimizer: Literal["sgd", "adam"] = "sgd"
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 100
    batch_size: int = 0
    max_grad_norm: Optional[float] = None
    lr_scheduler_name: str = "constant"
    lr_warm_up_steps: int = 0

    # Survival loss
    censor_alpha: float = 0.0
    eps: float = 1e-7

    # Protocol
    folds: int = 4
    cohort_path: Optional[str] = None
    include_mil_baselines: bool = False

    # Misc
    dtype: str = "float32"
    device: str = "cpu"
    checkpoint_path: str = "checkpoints"

    # WANDB
    log_to_wandb: bool = False
    wandb_project: str = "hmkg_survival"
    wandb_log_frequency: int = 1
    run_name: Optional[str] = None
    verbose: bool = False

    def __post_init__(self):
        for name in (
            "d_low",
            "d_high",
            "d_attn",
            "d_out",
            "d_bix",
            "d_global_in",
            "d_global_out",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1. Got {getattr(self, name)}")

        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2. Got {self.n_bins}")

        if self.local_top_k < 1 or self.global_top_k < 1:
            raise ValueError(
                f"top_k values must be >= 1. Got local={self.local_top_k}, global={self.global_top_k}"
            )

        if self.variant not in VARIANT_NAMES:
            raise ValueError(
                f"variant must be one of {list(VARIANT_NAMES)}. Got {self.variant}"
            )

        if self.bix_mode not in ("set", "vector"):
            raise ValueError(f"bix_mode must be set or vector. Got {self.bix_mode}")

        if self.d_bix % self.bix_n_heads != 0:
            raise ValueError(
                f"d_bix ({self.d_bix}) must be divisible by bix_n_heads ({self.bix_n_heads})"
            )

        if self.tie_bix_directions and self.d_low != self.d_out:
            raise ValueError(
                "Tying the BiX directions shares W_Q/W_K/W_V between low and high inputs, "
                + f"which needs d_low == d_out. Got d_low={self.d_low}, d_out={self.d_out}"
            )

        if self.no_locality_mode not in ("random_groups", "global_graph"):
            raise ValueError(
                f"no_locality_mode must be random_groups or global_graph. Got {self.no_locality_mode}"
            )

        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam. Got {self.optimizer}")

        if self.lr_scheduler_name.lower() not in ("constant", "cosineannealing"):
            raise ValueError(
                f"lr_scheduler_name must be constant or cosineannealing. Got {self.lr_scheduler_name}"
            )

        if not self.lr > 0:
            raise ValueError(f"lr must be positive. Got {self.lr}")

        if not 0 < self.eps < 1:
            raise ValueError(f"eps must be in (0, 1). Got {self.eps}")

        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1. Got {self.epochs}")

        if self.batch_size < 0:
            raise ValueError(f"batch_size must be >= 0. Got {self.batch_size}")

        if self.folds < 2:
            raise ValueError(f"folds must be >= 2. Got {self.folds}")

        if self.dtype not in DTYPE_MAP:
            raise ValueError(
                f"dtype must be one of {list(DTYPE_MAP.keys())}. Got {self.dtype}"
            )

        if not 0.0 <= self.censor_alpha <= 1.0:
            raise ValueError(f"censor_alpha must be in [0, 1]. Got {self.censor_alpha}")

        if self.run_name is None:
            self.run_name = f"{self.variant}-d{self.d_out}-T{self.n_bins}-lr{self.lr:.1e}-e{self.epochs}-s{self.seed}"

        if self.verbose:
            print(f"Run name: {self.run_name}")
            print(f"Variant: {self.variant} (bix_mode={self.bix_mode}, no_locality_mode={self.no_locality_mode})")
            print(f"Optimizer: {self.optimizer} lr={self.lr} epochs={self.epochs} folds={self.folds}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPE_MAP[self.dtype]

    def get_model_cfg_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "d_low": self.d_low,
            "d_high": self.d_high,
            "d_attn": self.d_attn,
            "d_out": self.d_out,
            "d_bix": self.d_bix,
            "d_global_in": self.d_global_in,
            "d_global_out": self.d_global_out,
            "n_bins": self.n_bins,
            "local_top_k": self.local_top_k,
            "global_top_k": self.global_top_k,
            "bix_mode": self.bix_mode,
            "bix_n_heads": self.bix_n_heads,
            "tie_bix_directions": self.tie_bix_directions,
            "no_locality_mode": self.no_locality_mode,
            "seed": self.seed,
            "dtype": self.dtype,
            "device": self.device,
        }

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self, path: str) -> None:
        dirname = os.path.dirname(path)
        if dirname and not os.path.exists(dirname):
            os.makedirs(dirname)

        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, cfg: dict[str, Any]) -> "HMKGRunnerConfig":
        valid_field_names = {field.name for field in fields(cls)}
        unknown = set(cfg) - valid_field_names
        if unknown:
            raise ValueError(f"Unknown config fields: {sorted(unknown)}")
        return cls(**cfg)

    @classmethod
    def from_json(cls, path: str) -> "HMKGRunnerConfig":
        with open(path, "r") as f:
            cfg = json.load(f)
        return cls.from_dict(cfg)

    def with_overrides(self, **overrides: Any) -> "HMKGRunnerConfig":
        cfg = self.to_dict()
        # the run name is derived, so let it follow the overrides
        if "run_name" not in overrides:
            cfg["run_name"] = None
        cfg.update(overrides)
        return HMKGRunnerConfig.from_dict(cfg)

    def config_hash(self) -> str:
        cfg = self.to_dict()
        cfg["hmkg_version"] = __version__
        return stable_hash(json.dumps(cfg, sort_keys=True))


@dataclass
class SynthesisConfig:
    """
    Configuration for generating a synthetic cohort with a planted prognostic signal.

    Args:
        cohort_id (str): Name of the cohort, also the slide id prefix.
        size (int): Number of slides.
        n_tiles_min (int): Minimum number of low-magnification tiles per slide.
        n_tiles_max (int): Maximum number of low-magnification tiles per slide.
        dim_low (int): Low-magnification feature dimension.
        dim_high (int): High-magnification feature dimension.
        low_patch_px (int): Low-magnification patch size in pixels.
        seed (int): The generator seed. Generation is a pure function of this config.
        signal_mode (str): local-motif, global-context, multi-scale or null.
        carrier_fraction (float): Fraction of slides carrying the planted signal.
        motif_min_cells (int): Minimum number of co-located motif cells (m) in a carrier tile.
        motif_total_cells (int): Motif cells planted in every local-motif slide; with decoys on,
            whatever is not co-located in the carrier tile is spread over the other tiles.
        motif_strength (float): Norm of the planted direction added to a feature vector.
        noise_scale (float): Standard deviation of the background features.
        effect_size (float): Log hazard ratio at full signal strength.
        base_median_months (float): Median survival time of signal-free slides.
        censor_prob (float): Probability that a slide is censored.
        decoys (bool): Place the same motif material in non-carriers in a non-prognostic arrangement.
    """

    cohort_id: str = "synthetic"
    size: int = 200
    n_tiles_min: int = 4
    n_tiles_max: int = 12
    dim_low: int = 64
    dim_high: int = 64
    low_patch_px: int = 224
    seed: int = 0
    signal_mode: str = "local-motif"
    carrier_fraction: float = 0.5
    motif_min_cells: int = 6
    motif_total_cells: int = 16
    motif_strength: float = 3.0
    noise_scale: float = 1.0
    effect_size: float = 8.0
    base_median_months: float = 36.0
    censor_prob: float = 0.25
    decoys: bool = True

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"size must be >= 1. Got {self.size}")
        if self.n_tiles_min < 1 or self.n_tiles_max < self.n_tiles_min:
            raise ValueError(
                f"Need 1 <= n_tiles_min <= n_tiles_max. Got {self.n_tiles_min}, {self.n_tiles_max}"
            )
        if self.dim_low < 1 or self.dim_high < 1:
            raise ValueError(
                f"Feature dims must be >= 1. Got {self.dim_low}, {self.dim_high}"
            )
        if self.signal_mode not in SIGNAL_MODES:
            raise ValueError(
                f"signal_mode must be one of {list(SIGNAL_MODES)}. Got {self.signal_mode}"
            )
        if not 1 <= self.motif_min_cells <= 16:
            raise ValueError(
                f"motif_min_cells must be in 1..16. Got {self.motif_min_cells}"
            )
        if not self.motif_min_cells <= self.motif_total_cells <= 16:
            raise ValueError(
                f"motif_total_cells must be in motif_min_cells..16. Got {self.motif_total_cells}"
            )
        if not 0.0 <= self.censor_prob < 1.0:
            raise ValueError(f"censor_prob must be in [0, 1). Got {self.censor_prob}")
        if not 0.0 <= self.carrier_fraction <= 1.0:
            raise ValueError(
                f"carrier_fraction must be in [0, 1]. Got {self.carrier_fraction}"
            )
        if self.base_median_months <= 0:
            raise ValueError(
                f"base_median_months must be positive. Got {self.base_median_months}"
            )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, path: str) -> "SynthesisConfig":
        with open(path, "r") as f:
            cfg = json.load(f)
        return cls(**cfg)
