import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Any, Optional, Sequence

import einops
import torch
import torch.nn.functional as F
from jaxtyping import Float
from safetensors import safe_open
from safetensors.torch import load_model, save_model
from torch import nn

from hmkg import __version__
from hmkg.bix_fusion import BidirectionalCrossAttention, RoiEmbedding
from hmkg.config import DTYPE_MAP, VARIANT_NAMES
from hmkg.kgn_aggregator import KnowledgeGraphAggregator, uniform_fan_in_
from hmkg.slide_geometry import CELLS_PER_TILE, FeatureBag
from hmkg.survival_head import HazardOutput, TimeBinning, hazard_output
from hmkg.utils import stable_seed

MODEL_WEIGHTS_PATH = "model_weights.safetensors"
MODEL_CFG_PATH = "cfg.json"
CHECKPOINT_FORMAT_VERSION = "1"

MIL_VARIANTS = ("mean_mil", "max_mil", "abmil", "transmil", "mean_pool")
TRANSMIL_LAYERS = 2
TRANSMIL_MAX_HEADS = 4


@dataclass(frozen=True)
class VariantConfig:
    """Which components a variant uses. None marks a flag that does not apply."""

    name: str
    hierarchical: bool
    locality: Optional[bool]
    multiscale: Optional[bool]

    @classmethod
    def from_name(cls, name: str) -> "VariantConfig":
        if name not in VARIANT_FLAGS:
            raise ValueError(f"Unknown variant {name}. Expected one of {list(VARIANT_NAMES)}")
        hierarchical, locality, multiscale = VARIANT_FLAGS[name]
        return cls(name=name, hierarchical=hierarchical, locality=locality, multiscale=multiscale)

    @property
    def is_mil(self) -> bool:
        return self.name in MIL_VARIANTS

    def table_flags(self) -> dict[str, str]:
        def show(flag: Optional[bool], missing: str) -> str:
            if flag is None:
                return missing
            return "yes" if flag else "no"

        return {
            "hierarchical": show(self.hierarchical, "—"),
            "locality": show(self.locality, "—"),
            "multiscale": show(self.multiscale, "N/A"),
        }


VARIANT_FLAGS: dict[str, tuple[bool, Optional[bool], Optional[bool]]] = {
    "full": (True, True, True),
    "single_scale": (True, True, False),
    "no_locality": (True, False, None),
    "kgn_baseline": (False, None, False),
    "mean_mil": (False, None, False),
    "max_mil": (False, None, False),
    "abmil": (False, None, False),
    "transmil": (False, None, False),
    "mean_pool": (False, None, False),
}


@dataclass
class HMKGConfig:
    variant: str = "full"
    d_low: int = 64
    d_high: int = 64
    d_attn: int = 64
    d_out: int = 64
    d_bix: int = 64
    d_global_in: int = 64
    d_global_out: int = 64
    n_bins: int = 4
    local_top_k: int = 6
    global_top_k: int = 8
    bix_mode: str = "set"
    bix_n_heads: int = 1
    tie_bix_directions: bool = False
    no_locality_mode: str = "random_groups"
    seed: int = 42
    dtype: str = "float32"
    device: str = "cpu"

    def __post_init__(self):
        # validates the name
        VariantConfig.from_name(self.variant)
        if self.dtype not in DTYPE_MAP:
            raise ValueError(f"dtype must be one of {list(DTYPE_MAP)}. Got {self.dtype}")

    @property
    def variant_config(self) -> VariantConfig:
        return VariantConfig.from_name(self.variant)

    @classmethod
    def from_dict(cls, config_dict: dict[str, Any]) -> "HMKGConfig":
        config_dict = {
            k: v for k, v in config_dict.items() if k in cls.__dataclass_fields__
        }
        return cls(**config_dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class LocalStageOutput:
    tile_embeddings: Float[torch.Tensor, "n_groups d_out"]
    node_embeddings: Float[torch.Tensor, "n_groups 16 d_out"]


class HMKG(nn.Module):
    """
    Hierarchical multi-scale knowledge-aware graph survival model.

    full: per-tile graphs over the 16 cells, BiX fusion with the aligned low-mag
    vector, a slide graph over ROIs and the survival head. single_scale skips
    fusion, no_locality replaces tiles by pseudo-ROIs, kgn_baseline is one flat
    graph over every high-mag patch and the MIL variants pool patch embeddings.
    """

    cfg: HMKGConfig
    time_binning: Optional[TimeBinning]

    def __init__(self, cfg: HMKGConfig):
        super().__init__()
        self.cfg = cfg
        self.variant = cfg.variant_config
        self.time_binning = None
        dtype = DTYPE_MAP[cfg.dtype]
        device = cfg.device
        factory = dict(dtype=dtype, device=device)

        if cfg.variant == "mean_pool":
            d_slide = cfg.d_high
        elif self.variant.is_mil:
            self.instance_proj = nn.Linear(cfg.d_high, cfg.d_out, **factory)
            if cfg.variant == "abmil":
                self.attention_V = nn.Linear(cfg.d_out, cfg.d_attn, **factory)
                self.attention_U = nn.Linear(cfg.d_out, cfg.d_attn, **factory)
                self.attention_w = nn.Linear(cfg.d_attn, 1, **factory)
            elif cfg.variant == "transmil":
                self.cls_token = nn.Parameter(torch.zeros(cfg.d_out, **factory))
                layer = nn.TransformerEncoderLayer(
                    d_model=cfg.d_out,
                    nhead=math.gcd(cfg.d_out, TRANSMIL_MAX_HEADS),
                    dim_feedforward=2 * cfg.d_out,
                    dropout=0.0,
                    batch_first=True,
                    **factory,
                )
                self.transformer = nn.TransformerEncoder(
                    layer, num_layers=TRANSMIL_LAYERS, enable_nested_tensor=False
                )
                self.transmil_norm = nn.LayerNorm(cfg.d_out, **factory)
            d_slide = cfg.d_out
        else:
            self.local_kgn = KnowledgeGraphAggregator(
                cfg.d_high, cfg.d_attn, cfg.d_out, cfg.local_top_k, **factory
            )
            d_slide = cfg.d_out

        if self.variant.multiscale:
            self.bix = BidirectionalCrossAttention(
                d_low=cfg.d_low,
                d_high=cfg.d_out,
                d_bix=cfg.d_bix,
                n_heads=cfg.bix_n_heads,
                mode=cfg.bix_mode,  # type: ignore
                tie_directions=cfg.tie_bix_directions,
                **factory,
            )
            self.W_fuse = nn.Parameter(torch.zeros(2 * cfg.d_bix, cfg.d_global_in, **factory))

        if self.variant.hierarchical:
            d_global_in = cfg.d_global_in if self.variant.multiscale else cfg.d_out
            self.global_kgn = KnowledgeGraphAggregator(
                d_global_in, cfg.d_attn, cfg.d_global_out, cfg.global_top_k, **factory
            )
            d_slide = cfg.d_global_out

        self.W_head = nn.Parameter(torch.zeros(d_slide, cfg.n_bins, **factory))
        self.b_head = nn.Parameter(torch.zeros(cfg.n_bins, **factory))

        self.initialize_weights()

    @property
    def dtype(self) -> torch.dtype:
        return self.W_head.dtype

    @property
    def device(self) -> torch.device:
        return self.W_head.device

    @torch.no_grad()
    def initialize_weights(self, seed: Optional[int] = None) -> None:
        """Seeded U(-a, a) with a = 1 / sqrt(fan_in) for every parameter, in registration order."""
        generator = torch.Generator().manual_seed(self.cfg.seed if seed is None else seed)
        for module in self.modules():
            if isinstance(module, (KnowledgeGraphAggregator, BidirectionalCrossAttention)):
                module.reset_parameters(generator)
            elif isinstance(module, nn.MultiheadAttention):
                uniform_fan_in_(module.in_proj_weight, module.embed_dim, generator)
                module.in_proj_bias.zero_()
            elif isinstance(module, nn.Linear):
                uniform_fan_in_(module.weight, module.in_features, generator)
                if module.bias is not None:
                    uniform_fan_in_(module.bias, module.in_features, generator)
        if self.cfg.variant == "transmil":
            uniform_fan_in_(self.cls_token, self.cfg.d_out, generator)
        if self.variant.multiscale:
            uniform_fan_in_(self.W_fuse, self.W_fuse.shape[0], generator)
        uniform_fan_in_(self.W_head, self.W_head.shape[0], generator)
        uniform_fan_in_(self.b_head, self.W_head.shape[0], generator)

    def _features(self, bag: FeatureBag) -> tuple[torch.Tensor, torch.Tensor]:
        if bag.dim_low != self.cfg.d_low or bag.dim_high != self.cfg.d_high:
            raise ValueError(
                f"{bag.slide_id}: feature dims ({bag.dim_low}, {bag.dim_high}) do not match "
                + f"the model's ({self.cfg.d_low}, {self.cfg.d_high})"
            )
        return (
            bag.f_low.to(device=self.device, dtype=self.dtype),
            bag.f_high.to(device=self.device, dtype=self.dtype),
        )

    def pseudo_roi_permutation(self, bag: FeatureBag) -> torch.Tensor:
        """Seeded shuffle of the n * 16 high-mag patches; a function of (seed, slide_id) only."""
        generator = torch.Generator().manual_seed(stable_seed(self.cfg.seed, bag.slide_id))
        return torch.randperm(bag.n_tiles * CELLS_PER_TILE, generator=generator)

    def local_stage(self, bag: FeatureBag) -> LocalStageOutput:
        _, f_high = self._features(bag)
        if self.variant.is_mil:
            raise ValueError(f"{self.variant.name} has no local graph stage")

        if self.variant.locality is False:
            flat = f_high.reshape(-1, self.cfg.d_high)
            if self.cfg.no_locality_mode == "global_graph":
                nodes = self.local_kgn.update_nodes(flat)
                nodes = nodes.reshape(bag.n_tiles, CELLS_PER_TILE, self.cfg.d_out)
                return LocalStageOutput(
                    tile_embeddings=self.local_kgn.readout(nodes), node_embeddings=nodes
                )
            f_high = flat[self.pseudo_roi_permutation(bag)].reshape(
                bag.n_tiles, CELLS_PER_TILE, self.cfg.d_high
            )

        nodes = self.local_kgn.update_nodes(f_high)
        return LocalStageOutput(
            tile_embeddings=self.local_kgn.readout(nodes), node_embeddings=nodes
        )

    def fuse_stage(
        self, bag: FeatureBag, local: LocalStageOutput
    ) -> Float[torch.Tensor, "n_tiles d_roi"]:
        if not self.variant.multiscale:
            return local.tile_embeddings
        f_low, _ = self._features(bag)
        fused = self.bix.fuse_roi(f_low, local.node_embeddings, local.tile_embeddings)
        return fused @ self.W_fuse

    def roi_embeddings(self, bag: FeatureBag) -> list[RoiEmbedding]:
        """Per-tile intermediate vectors of a multi-scale model, for inspection."""
        if not self.variant.multiscale:
            raise ValueError(f"{self.variant.name} does not fuse low and high magnification")
        f_low, _ = self._features(bag)
        local = self.local_stage(bag)
        fused = self.bix.fuse_roi(f_low, local.node_embeddings, local.tile_embeddings)
        return [
            RoiEmbedding(
                f_low=f_low[j],
                f_high_nodes=local.node_embeddings[j],
                f_high_pooled=local.tile_embeddings[j],
                f_fused=fused[j],
            )
            for j in range(bag.n_tiles)
        ]

    def global_stage(
        self, roi_embeddings: Float[torch.Tensor, "n_tiles d_roi"]
    ) -> Float[torch.Tensor, "d_global_out"]:
        return self.global_kgn.aggregate(roi_embeddings)

    def _mil_representation(self, f_high: torch.Tensor) -> Float[torch.Tensor, "d_slide"]:
        flat = f_high.reshape(-1, self.cfg.d_high)
        if self.cfg.variant == "mean_pool":
            return flat.mean(dim=0)
        instances = F.relu(self.instance_proj(flat))
        if self.cfg.variant == "mean_mil":
            return instances.mean(dim=0)
        if self.cfg.variant == "max_mil":
            return instances.max(dim=0).values
        if self.cfg.variant == "transmil":
            tokens = torch.cat([self.cls_token[None, :], instances], dim=0)
            encoded = self.transformer(tokens[None, :, :])
            return self.transmil_norm(encoded[0, 0])
        gate = torch.tanh(self.attention_V(instances)) * torch.sigmoid(
            self.attention_U(instances)
        )
        weights = self.attention_w(gate).squeeze(-1).softmax(dim=0)
        return einops.einsum(weights, instances, "n, n d -> d")

    def slide_representation(self, bag: FeatureBag) -> Float[torch.Tensor, "d_slide"]:
        if self.variant.is_mil:
            _, f_high = self._features(bag)
            return self._mil_representation(f_high)
        if not self.variant.hierarchical:
            _, f_high = self._features(bag)
            return self.local_kgn.aggregate(f_high.reshape(-1, self.cfg.d_high))
        local = self.local_stage(bag)
        return self.global_stage(self.fuse_stage(bag, local))

    def head(self, representation: Float[torch.Tensor, "... d_slide"]) -> Float[torch.Tensor, "... T"]:
        return representation @ self.W_head + self.b_head

    def forward(self, bag: FeatureBag) -> HazardOutput:
        return hazard_output(self.head(self.slide_representation(bag)))

    def forward_batch(self, bags: Sequence[FeatureBag]) -> HazardOutput:
        logits = torch.stack([self.head(self.slide_representation(bag)) for bag in bags])
        return hazard_output(logits)

    @torch.no_grad()
    def predict_risks(self, bags: Sequence[FeatureBag]) -> torch.Tensor:
        was_training = self.training
        self.eval()
        risks = self.forward_batch(bags).risk.detach().cpu()
        self.train(was_training)
        return risks

    def get_name(self) -> str:
        return f"hmkg_{self.cfg.variant}_d{self.cfg.d_out}_T{self.cfg.n_bins}"

    def save_model(self, path: str) -> None:
        os.makedirs(path, exist_ok=True)
        metadata = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "hmkg_version": __version__,
            "hmkg_config": json.dumps(self.cfg.to_dict(), sort_keys=True),
        }
        if self.time_binning is not None:
            metadata["time_binning"] = json.dumps(self.time_binning.to_dict())
        save_model(self, os.path.join(path, MODEL_WEIGHTS_PATH), metadata=metadata)

        with open(os.path.join(path, MODEL_CFG_PATH), "w") as f:
            json.dump(self.cfg.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load_from_pretrained(
        cls, path: str, device: str = "cpu", dtype: str | None = None
    ) -> "HMKG":
        weight_path = os.path.join(path, MODEL_WEIGHTS_PATH)
        if not os.path.exists(weight_path):
            raise FileNotFoundError(f"No {MODEL_WEIGHTS_PATH} in {path}")
        with safe_open(weight_path, framework="pt") as f:
            metadata = f.metadata() or {}
        version = metadata.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"Unsupported checkpoint format {version!r}, expected {CHECKPOINT_FORMAT_VERSION}"
            )

        cfg_dict = json.loads(metadata["hmkg_config"])
        cfg_dict["device"] = device
        if dtype is not None:
            cfg_dict["dtype"] = dtype
        model = cls(HMKGConfig.from_dict(cfg_dict))
        load_model(model, weight_path, device=device)
        if "time_binning" in metadata:
            model.time_binning = TimeBinning.from_dict(json.loads(metadata["time_binning"]))
        return model
