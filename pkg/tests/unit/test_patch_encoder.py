import numpy as np
import pytest
import torch
from torch import nn

from hmkg.patch_encoder import (
    ENCODER_REGISTRY,
    EncoderSpec,
    IncompletePatchSetError,
    StubPatchEncoder,
    encode_bag,
    encode_patch,
    get_encoder,
    register_encoder,
)
from hmkg.slide_geometry import CELLS_PER_TILE, GridIndex, build_geometry
from hmkg.utils import stable_hash


def _patches(n_tiles: int, seed: int = 0) -> dict[GridIndex, np.ndarray]:
    rng = np.random.default_rng(seed)
    patches = {}
    for j in range(1, n_tiles + 1):
        patches[GridIndex(1, j)] = rng.random((8, 8, 3))
        for k in range(1, CELLS_PER_TILE + 1):
            patches[GridIndex(1, j, k)] = rng.random((8, 8, 3))
    return patches


def test_stub_encoder_is_deterministic_and_unit_norm():
    spec = EncoderSpec(dim_out=16, seed=3)
    pixels = torch.rand(8, 8, 3)
    first = encode_patch(pixels, spec)
    second = encode_patch(pixels, spec)
    assert first.shape == (16,)
    assert first.dtype == torch.float32
    assert torch.equal(first, second)
    assert first.norm().item() == pytest.approx(1.0, abs=1e-5)


def test_stub_encoder_depends_on_seed():
    pixels = torch.rand(8, 8, 3)
    first = encode_patch(pixels, EncoderSpec(dim_out=16, seed=0))
    second = encode_patch(pixels, EncoderSpec(dim_out=16, seed=1))
    assert not torch.equal(first, second)


def test_single_pixel_and_constant_patches_are_finite():
    spec = EncoderSpec(dim_out=8)
    assert torch.isfinite(encode_patch(torch.ones(1, 1, 3), spec)).all()
    assert torch.isfinite(encode_patch(np.zeros((4, 4)), spec)).all()



def test_one_pixel_changes_change_the_embedding():
    spec = EncoderSpec(dim_out=32, seed=0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        pixels = rng.random((8, 8, 3))
        changed = pixels.copy()
        row, col = rng.integers(8, size=2)
        changed[row, col] += 0.5
        assert not torch.equal(encode_patch(pixels, spec), encode_patch(changed, spec))


def test_all_zero_patches_of_one_shape_share_an_embedding():
    spec = EncoderSpec(dim_out=16, seed=2)
    first = encode_patch(np.zeros((8, 8, 3)), spec)
    second = encode_patch(torch.zeros(8, 8, 3), spec)
    assert torch.equal(first, second)
    assert torch.isfinite(first).all()

def test_encoder_parameters_are_frozen():
    encoder = StubPatchEncoder(EncoderSpec(dim_out=8))
    assert all(not p.requires_grad for p in encoder.parameters())
    with pytest.raises(ValueError, match="frozen"):
        EncoderSpec(frozen=False)


def test_encode_patch_rejects_bad_pixels():
    spec = EncoderSpec(dim_out=8)
    with pytest.raises(ValueError):
        encode_patch(torch.zeros(0, 4, 3), spec)
    bad = torch.zeros(4, 4, 3)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        encode_patch(bad, spec)


def test_unknown_encoder_name_raises():
    with pytest.raises(ValueError, match="Unknown encoder"):
        get_encoder(EncoderSpec(name="missing"))


def test_register_encoder_adds_a_factory():
    @register_encoder("constant-test")
    class ConstantEncoder(nn.Module):
        def __init__(self, spec: EncoderSpec):
            super().__init__()
            self.spec = spec

        def forward(self, pixels: torch.Tensor) -> torch.Tensor:
            return torch.ones(self.spec.dim_out)

    try:
        out = encode_patch(torch.zeros(2, 2, 3), EncoderSpec(name="constant-test", dim_out=5))
        assert torch.equal(out, torch.ones(5))
    finally:
        ENCODER_REGISTRY.pop("constant-test")


def test_precomputed_encoder_passes_features_through():
    spec = EncoderSpec(name="precomputed", dim_out=6)
    features = torch.arange(6, dtype=torch.float32).reshape(1, 6, 1)
    assert torch.equal(encode_patch(features, spec), torch.arange(6, dtype=torch.float32))
    with pytest.raises(ValueError):
        encode_patch(torch.zeros(1, 5, 1), spec)


def test_encode_bag_shapes_and_alignment():
    geometry = build_geometry(2, 8, "row")
    patches = _patches(2)
    spec_low = EncoderSpec(dim_out=6, seed=0)
    spec_high = EncoderSpec(dim_out=5, seed=1)
    bag = encode_bag(patches, geometry, spec_low, spec_high)
    assert bag.f_low.shape == (2, 6)
    assert bag.f_high.shape == (2, CELLS_PER_TILE, 5)
    expected = encode_patch(patches[GridIndex(1, 2, 7)], spec_high)
    assert torch.equal(bag.f_high[1, 6], expected)


def test_encode_bag_is_independent_of_presentation_order():
    geometry = build_geometry(2, 8, "row")
    patches = _patches(2)
    spec = EncoderSpec(dim_out=4)
    forward = encode_bag(list(patches.items()), geometry, spec, spec)
    backward = encode_bag(list(reversed(patches.items())), geometry, spec, spec)
    assert torch.equal(forward.f_low, backward.f_low)
    assert torch.equal(forward.f_high, backward.f_high)


def test_encode_bag_reports_missing_cells():
    geometry = build_geometry(1, 8, "single")
    patches = _patches(1)
    del patches[GridIndex(1, 1, 9)]
    with pytest.raises(IncompletePatchSetError, match="j=1, k=9"):
        encode_bag(patches, geometry, EncoderSpec(dim_out=4), EncoderSpec(dim_out=4))


def test_encode_bag_digest_is_stable():
    geometry = build_geometry(3, 8, "row")

    def digest() -> str:
        specs = EncoderSpec(dim_out=6, seed=0), EncoderSpec(dim_out=5, seed=1)
        bag = encode_bag(_patches(3, seed=5), geometry, *specs)
        return stable_hash(bag.f_low.numpy().tobytes().hex() + bag.f_high.numpy().tobytes().hex())

    first = digest()
    assert first == digest()
    assert len(first) == 64
