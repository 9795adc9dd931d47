"""
Frozen patch encoders.

Real foundation-model encoders plug in through ``ENCODER_REGISTRY``: register a
factory under a name and refer to it from an ``EncoderSpec``. The stub encoder shipped
here is a seeded random projection of channel-pooled pixel statistics.
"""

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from jaxtyping import Float
from torch import nn

from hmkg.slide_geometry import CELLS_PER_TILE, FeatureBag, GridIndex, SlideGeometry

N_POOLED_STATS = 1 + 4 + CELLS_PER_TILE


class IncompletePatchSetError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    name: str = "stub"
    dim_out: int = 64
    seed: int = 0
    frozen: bool = True

    def __post_init__(self):
        if not self.frozen:
            raise ValueError("Patch encoders are frozen; fine-tuning is not supported")
        if self.dim_out < 1:
            raise ValueError(f"dim_out must be >= 1. Got {self.dim_out}")


class PatchEncoder(Protocol):
    spec: EncoderSpec

    def __call__(
        self, pixels: Float[torch.Tensor, "H W C"]
    ) -> Float[torch.Tensor, "dim_out"]: ...


class StubPatchEncoder(nn.Module):
    """
    Unit-norm random projection of pooled pixel statistics.

    Channels are averaged first, then the statistics are: a constant 1, mean, std,
    min, max and the 16 means of a 4x4 adaptive pooling grid.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        generator = torch.Generator().manual_seed(spec.seed)
        projection = torch.randn(
            N_POOLED_STATS, spec.dim_out, generator=generator, dtype=torch.float64
        ) / np.sqrt(N_POOLED_STATS)
        self.register_buffer("projection", projection)
        self.requires_grad_(False)

    def pooled_stats(
        self, pixels: Float[torch.Tensor, "H W C"]
    ) -> Float[torch.Tensor, "n_stats"]:
        gray = pixels.to(torch.float64).mean(dim=-1)
        grid = F.adaptive_avg_pool2d(gray[None, None], (4, 4)).flatten()
        std = gray.std(unbiased=False)
        return torch.cat(
            [
                torch.ones(1, dtype=torch.float64),
                torch.stack([gray.mean(), std, gray.min(), gray.max()]),
                grid,
            ]
        )

    @torch.no_grad()
    def forward(
        self, pixels: Float[torch.Tensor, "H W C"]
    ) -> Float[torch.Tensor, "dim_out"]:
        embedding = self.pooled_stats(pixels) @ self.projection
        return (embedding / embedding.norm()).to(torch.float32)


class PrecomputedFeatureEncoder(nn.Module):
    """Pass-through for features extracted elsewhere; the input is already the embedding."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec

    @torch.no_grad()
    def forward(self, pixels: torch.Tensor) -> Float[torch.Tensor, "dim_out"]:
        features = pixels.reshape(-1).to(torch.float32)
        if features.shape[0] != self.spec.dim_out:
            raise ValueError(
                f"Precomputed feature has length {features.shape[0]}, spec says {self.spec.dim_out}"
            )
        return features


ENCODER_REGISTRY: dict[str, Callable[[EncoderSpec], nn.Module]] = {
    "stub": StubPatchEncoder,
    "precomputed": PrecomputedFeatureEncoder,
}


def register_encoder(name: str):
    def decorator(factory: Callable[[EncoderSpec], nn.Module]):
        ENCODER_REGISTRY[name] = factory
        return factory

    return decorator


def get_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.name not in ENCODER_REGISTRY:
        raise ValueError(
            f"Unknown encoder {spec.name}. Registered: {sorted(ENCODER_REGISTRY)}"
        )
    return ENCODER_REGISTRY[spec.name](spec)


def _as_tensor(pixels: torch.Tensor | np.ndarray) -> torch.Tensor:
    if isinstance(pixels, np.ndarray):
        pixels = torch.from_numpy(np.ascontiguousarray(pixels))
    return pixels


def encode_patch(
    pixels: torch.Tensor | np.ndarray,
    spec: EncoderSpec,
    encoder: nn.Module | None = None,
) -> Float[torch.Tensor, "dim_out"]:
    pixels = _as_tensor(pixels)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    if pixels.ndim != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1 or pixels.shape[2] < 1:
        raise ValueError(f"Expected a non-empty [H x W x C] patch. Got {list(pixels.shape)}")
    if not torch.isfinite(pixels.to(torch.float64)).all():
        raise ValueError("Patch contains non-finite pixels")
    encoder = encoder if encoder is not None else get_encoder(spec)
    return encoder(pixels)


def encode_bag(
    patches: Mapping[GridIndex, torch.Tensor | np.ndarray]
    | Iterable[tuple[GridIndex, torch.Tensor | np.ndarray]],
    geometry: SlideGeometry,
    spec_low: EncoderSpec,
    spec_high: EncoderSpec,
) -> FeatureBag:
    """
    Encode every tile (index with cell=None) and every cell of ``geometry``.

    Assembly is keyed by GridIndex, so the order in which patches are presented
    does not matter. All indices must share one slide number.
    """
    items = list(patches.items()) if isinstance(patches, Mapping) else list(patches)
    by_index: dict[tuple[int, int | None], torch.Tensor | np.ndarray] = {}
    slides = {index.slide for index, _ in items}
    if len(slides) > 1:
        raise ValueError(f"Patches from several slides given: {sorted(slides)}")
    for index, pixels in items:
        by_index[(index.tile, index.cell)] = pixels

    missing = [
        (j, k)
        for j in range(1, geometry.n_tiles + 1)
        for k in [None, *range(1, CELLS_PER_TILE + 1)]
        if (j, k) not in by_index
    ]
    if missing:
        shown = ", ".join(f"(j={j}, k={k if k is not None else 'low'})" for j, k in missing[:5])
        raise IncompletePatchSetError(
            f"{geometry.slide_id}: {len(missing)} patches missing, e.g. {shown}"
        )

    encoder_low = get_encoder(spec_low)
    encoder_high = get_encoder(spec_high)
    f_low = torch.stack(
        [
            encode_patch(by_index[(j, None)], spec_low, encoder_low)
            for j in range(1, geometry.n_tiles + 1)
        ]
    )
    f_high = torch.stack(
        [
            torch.stack(
                [
                    encode_patch(by_index[(j, k)], spec_high, encoder_high)
                    for k in range(1, CELLS_PER_TILE + 1)
                ]
            )
            for j in range(1, geometry.n_tiles + 1)
        ]
    )
    return FeatureBag(geometry=geometry, f_low=f_low, f_high=f_high)
