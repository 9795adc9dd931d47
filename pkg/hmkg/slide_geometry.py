"""
Multi-scale tiling lattice and cohort plumbing.

Every low-magnification tile j of slide i owns a 4x4 block of high-magnification
cells k = 1..16 in row-major order (k = 4 * row + col + 1). Feature bags keep that
alignment by index: ``f_low[j - 1]`` and ``f_high[j - 1, k - 1]`` describe the same
tissue region at two magnifications.
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np
import torch
from jaxtyping import Float

GRID_SIDE = 4
CELLS_PER_TILE = GRID_SIDE * GRID_SIDE
HEADER_BLOCK = 64
COHORT_MANIFEST_PATH = "cohort.json"
GEOMETRY_SUFFIX = ".geom.json"
FEATURES_SUFFIX = ".feat.bin"


class AlignmentError(ValueError):
    pass


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class GridIndex:
    slide: int
    tile: int
    cell: Optional[int] = None

    def __post_init__(self):
        if self.slide < 1:
            raise ValueError(f"slide index must be >= 1. Got {self.slide}")
        if self.tile < 1:
            raise ValueError(f"tile index must be >= 1. Got {self.tile}")
        if self.cell is not None and not 1 <= self.cell <= CELLS_PER_TILE:
            raise ValueError(f"cell index must be in 1..16. Got {self.cell}")

    @property
    def row(self) -> int:
        return (self._require_cell() - 1) // GRID_SIDE

    @property
    def col(self) -> int:
        return (self._require_cell() - 1) % GRID_SIDE

    @classmethod
    def from_row_col(cls, slide: int, tile: int, row: int, col: int) -> "GridIndex":
        if not (0 <= row < GRID_SIDE and 0 <= col < GRID_SIDE):
            raise ValueError(f"row and col must be in 0..3. Got ({row}, {col})")
        return cls(slide=slide, tile=tile, cell=GRID_SIDE * row + col + 1)

    def _require_cell(self) -> int:
        if self.cell is None:
            raise ValueError(f"{self} is a low-magnification index and has no cell")
        return self.cell


@dataclass
class SlideGeometry:
    slide_id: str
    n_tiles: int
    tile_origins: list[tuple[int, int]]
    low_patch_px: int = 224
    region_px: int = 896

    def __post_init__(self):
        if self.n_tiles < 1:
            raise ValueError(f"n_tiles must be >= 1. Got {self.n_tiles}")
        if self.low_patch_px < 1:
            raise ValueError(f"low_patch_px must be >= 1. Got {self.low_patch_px}")
        if self.region_px != GRID_SIDE * self.low_patch_px:
            raise AlignmentError(
                f"{self.slide_id}: region_px ({self.region_px}) must be 4 * low_patch_px ({self.low_patch_px})"
            )
        self.tile_origins = [(int(x), int(y)) for x, y in self.tile_origins]
        if len(self.tile_origins) != self.n_tiles:
            raise AlignmentError(
                f"{self.slide_id}: {len(self.tile_origins)} tile origins for {self.n_tiles} tiles"
            )
        for x, y in self.tile_origins:
            if x % self.low_patch_px or y % self.low_patch_px:
                raise AlignmentError(
                    f"{self.slide_id}: origin ({x}, {y}) is off the {self.low_patch_px}px low-magnification grid"
                )
        if len(set(self.tile_origins)) != self.n_tiles:
            raise AlignmentError(f"{self.slide_id}: tile origins overlap")

    def cell_indices(self, slide: int, tile: int) -> list[GridIndex]:
        return [GridIndex(slide, tile, k) for k in range(1, CELLS_PER_TILE + 1)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "slide_id": self.slide_id,
            "n_tiles": self.n_tiles,
            "low_patch_px": self.low_patch_px,
            "region_px": self.region_px,
            "tile_origins": [list(o) for o in self.tile_origins],
        }

    @classmethod
    def from_dict(cls, geometry_dict: dict[str, Any]) -> "SlideGeometry":
        return cls(
            slide_id=geometry_dict["slide_id"],
            n_tiles=geometry_dict["n_tiles"],
            tile_origins=[tuple(o) for o in geometry_dict["tile_origins"]],
            low_patch_px=geometry_dict["low_patch_px"],
            region_px=geometry_dict["region_px"],
        )


def build_geometry(
    n_tiles: int,
    low_patch_px: int = 224,
    origin_layout: str | Sequence[tuple[int, int]] = "row",
    slide_id: str = "slide",
) -> SlideGeometry:
    """
    Lay out ``n_tiles`` low-magnification tiles.

    Args:
        origin_layout: "single" (exactly one tile at the origin), "row" (one row of
            tiles), "grid" (row-major raster on the smallest square grid that fits) or
            an explicit list of pixel origins, which must sit on the low-mag grid.
    """
    if n_tiles < 1:
        raise ValueError(f"n_tiles must be >= 1. Got {n_tiles}")
    if low_patch_px < 1:
        raise ValueError(f"low_patch_px must be >= 1. Got {low_patch_px}")

    if isinstance(origin_layout, str):
        if origin_layout == "single":
            if n_tiles != 1:
                raise ValueError(f"single layout needs n_tiles=1. Got {n_tiles}")
            cells = [(0, 0)]
        elif origin_layout == "row":
            cells = [(j, 0) for j in range(n_tiles)]
        elif origin_layout == "grid":
            width = int(np.ceil(np.sqrt(n_tiles)))
            cells = [(j % width, j // width) for j in range(n_tiles)]
        else:
            raise ValueError(f"Unknown origin layout: {origin_layout}")
        origins = [(cx * low_patch_px, cy * low_patch_px) for cx, cy in cells]
    else:
        origins = [(int(x), int(y)) for x, y in origin_layout]

    return SlideGeometry(
        slide_id=slide_id,
        n_tiles=n_tiles,
        tile_origins=origins,
        low_patch_px=low_patch_px,
        region_px=GRID_SIDE * low_patch_px,
    )


def cell_offset(index: GridIndex, geometry: SlideGeometry) -> tuple[int, int]:
    """Top-left pixel (x, y) of a high-mag cell relative to its region origin."""
    if index.cell is None:
        raise ValueError(f"{index} has no cell component")
    if index.tile > geometry.n_tiles:
        raise ValueError(
            f"tile {index.tile} out of range for {geometry.slide_id} with {geometry.n_tiles} tiles"
        )
    return index.col * geometry.low_patch_px, index.row * geometry.low_patch_px


@dataclass
class FeatureBag:
    geometry: SlideGeometry
    f_low: Float[torch.Tensor, "n_tiles d_low"]
    f_high: Float[torch.Tensor, "n_tiles 16 d_high"]

    def __post_init__(self):
        n = self.geometry.n_tiles
        if self.f_low.ndim != 2 or self.f_low.shape[0] != n:
            raise ValueError(
                f"{self.geometry.slide_id}: f_low must be [{n} x d_low]. Got {list(self.f_low.shape)}"
            )
        if self.f_high.ndim != 3 or self.f_high.shape[:2] != (n, CELLS_PER_TILE):
            raise ValueError(
                f"{self.geometry.slide_id}: f_high must be [{n} x 16 x d_high]. Got {list(self.f_high.shape)}"
            )
        for name, tensor in (("f_low", self.f_low), ("f_high", self.f_high)):
            if not torch.isfinite(tensor).all():
                raise ValueError(
                    f"{self.geometry.slide_id}: {name} contains non-finite values"
                )

    @property
    def slide_id(self) -> str:
        return self.geometry.slide_id

    @property
    def n_tiles(self) -> int:
        return self.geometry.n_tiles

    @property
    def dim_low(self) -> int:
        return self.f_low.shape[-1]

    @property
    def dim_high(self) -> int:
        return self.f_high.shape[-1]

    def to(self, *args: Any, **kwargs: Any) -> "FeatureBag":
        return replace(
            self,
            f_low=self.f_low.to(*args, **kwargs),
            f_high=self.f_high.to(*args, **kwargs),
        )


@dataclass
class SurvivalRecord:
    slide_id: str
    time: float
    event: bool
    bin: Optional[int] = None

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError(f"{self.slide_id}: survival time must be > 0. Got {self.time}")
        self.event = bool(self.event)

    @property
    def censored(self) -> bool:
        return not self.event

    def with_bin(self, bin: int) -> "SurvivalRecord":
        return replace(self, bin=bin)


@dataclass
class ManifestEntry:
    slide_id: str
    geometry_path: str
    feature_path: str


@dataclass
class CohortManifest:
    cohort_id: str
    slides: list[ManifestEntry]
    labels: list[SurvivalRecord]
    seed: Optional[int] = None
    dim_low: Optional[int] = None
    dim_high: Optional[int] = None
    # optional magnification metadata, e.g. {"low_mpp": 2.0, "high_mpp": 0.5}
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        slide_ids = [entry.slide_id for entry in self.slides]
        if len(set(slide_ids)) != len(slide_ids):
            raise ValueError(f"{self.cohort_id}: duplicate slide ids in manifest")
        label_ids = [record.slide_id for record in self.labels]
        if len(set(label_ids)) != len(label_ids):
            raise ValueError(f"{self.cohort_id}: duplicate slide ids in labels")
        unlabeled = set(slide_ids) - set(label_ids)
        if unlabeled:
            raise ValueError(f"{self.cohort_id}: slides without labels: {sorted(unlabeled)}")
        missing = set(label_ids) - set(slide_ids)
        if missing:
            raise ValueError(f"{self.cohort_id}: labels without feature files: {sorted(missing)}")

    def entry(self, slide_id: str) -> ManifestEntry:
        for entry in self.slides:
            if entry.slide_id == slide_id:
                return entry
        raise KeyError(slide_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "cohort_id": self.cohort_id,
            "seed": self.seed,
            "dim_low": self.dim_low,
            "dim_high": self.dim_high,
            "metadata": self.metadata,
            "slides": [
                {
                    "slide_id": e.slide_id,
                    "geometry_path": e.geometry_path,
                    "feature_path": e.feature_path,
                }
                for e in self.slides
            ],
            "labels": [
                {"slide_id": r.slide_id, "time": r.time, "event": r.event}
                for r in self.labels
            ],
        }

    @classmethod
    def from_dict(cls, manifest_dict: dict[str, Any]) -> "CohortManifest":
        return cls(
            cohort_id=manifest_dict["cohort_id"],
            slides=[ManifestEntry(**e) for e in manifest_dict["slides"]],
            labels=[SurvivalRecord(**r) for r in manifest_dict["labels"]],
            seed=manifest_dict.get("seed"),
            dim_low=manifest_dict.get("dim_low"),
            dim_high=manifest_dict.get("dim_high"),
            metadata=manifest_dict.get("metadata", {}),
        )


def _encode_header(n_tiles: int, dim_low: int, dim_high: int) -> bytes:
    header = json.dumps(
        {
            "n_tiles": n_tiles,
            "dim_low": dim_low,
            "dim_high": dim_high,
            "dtype": "f32",
            "order": "row-major",
            "endian": "little",
        },
        separators=(",", ":"),
    )
    # pad to a whole number of 64-byte blocks, the last byte being the newline
    n_blocks = (len(header) + 1 + HEADER_BLOCK - 1) // HEADER_BLOCK
    return (header.ljust(n_blocks * HEADER_BLOCK - 1) + "\n").encode("ascii")


def save_feature_bag(bag: FeatureBag, path: str) -> None:
    f_low = bag.f_low.detach().cpu().numpy().astype("<f4")
    f_high = bag.f_high.detach().cpu().numpy().astype("<f4")
    with open(path, "wb") as f:
        f.write(_encode_header(bag.n_tiles, bag.dim_low, bag.dim_high))
        f.write(np.ascontiguousarray(f_low).tobytes(order="C"))
        f.write(np.ascontiguousarray(f_high).tobytes(order="C"))


def save_geometry(geometry: SlideGeometry, path: str) -> None:
    with open(path, "w") as f:
        json.dump(geometry.to_dict(), f, sort_keys=True)


def _read_header(raw: bytes, slide_id: str) -> tuple[dict[str, Any], int]:
    newline = raw.find(b"\n")
    if newline < 0 or (newline + 1) % HEADER_BLOCK:
        raise IngestionError(f"{slide_id}: feature header is not a 64-byte-aligned line")
    try:
        header = json.loads(raw[:newline].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IngestionError(f"{slide_id}: feature header does not parse: {e}") from e
    expected = {"dtype": "f32", "order": "row-major", "endian": "little"}
    for key, value in expected.items():
        if header.get(key) != value:
            raise IngestionError(
                f"{slide_id}: header field {key}={header.get(key)!r}, expected {value!r}"
            )
    for key in ("n_tiles", "dim_low", "dim_high"):
        if not isinstance(header.get(key), int) or header[key] < 1:
            raise IngestionError(f"{slide_id}: header field {key} missing or invalid")
    return header, newline + 1


def _first_non_finite(array: np.ndarray) -> str:
    coordinate = np.argwhere(~np.isfinite(array))[0]
    return "".join(f"[{c}]" for c in coordinate)


def load_feature_bag(entry: ManifestEntry, root: str = "") -> FeatureBag:
    """Read one slide's geometry and features, validating everything against the header."""
    slide_id = entry.slide_id
    geometry_path = os.path.join(root, entry.geometry_path)
    feature_path = os.path.join(root, entry.feature_path)
    for kind, path in (("geometry", geometry_path), ("features", feature_path)):
        if not os.path.exists(path):
            raise IngestionError(f"{slide_id}: {kind} file not found: {path}")

    with open(geometry_path, "r") as f:
        try:
            geometry = SlideGeometry.from_dict(json.load(f))
        except (KeyError, json.JSONDecodeError) as e:
            raise IngestionError(f"{slide_id}: geometry file does not parse: {e}") from e
    if geometry.slide_id != slide_id:
        raise IngestionError(
            f"{slide_id}: geometry file belongs to slide {geometry.slide_id}"
        )

    with open(feature_path, "rb") as f:
        raw = f.read()
    header, offset = _read_header(raw, slide_id)
    n, d_low, d_high = header["n_tiles"], header["dim_low"], header["dim_high"]
    if n != geometry.n_tiles:
        raise IngestionError(
            f"{slide_id}: n_tiles: header says {n}, geometry says {geometry.n_tiles}"
        )

    n_low = n * d_low
    n_high = n * CELLS_PER_TILE * d_high
    payload = np.frombuffer(raw, dtype="<f4", offset=offset)
    if payload.size != n_low + n_high:
        raise IngestionError(
            f"{slide_id}: payload has {payload.size} floats, header implies {n_low + n_high}"
        )
    f_low = payload[:n_low].reshape(n, d_low)
    f_high = payload[n_low:].reshape(n, CELLS_PER_TILE, d_high)
    for name, array in (("f_low", f_low), ("f_high", f_high)):
        if not np.isfinite(array).all():
            raise IngestionError(
                f"{slide_id}: non-finite value at {name}{_first_non_finite(array)}"
            )

    return FeatureBag(
        geometry=geometry,
        f_low=torch.from_numpy(f_low.astype(np.float32)),
        f_high=torch.from_numpy(f_high.astype(np.float32)),
    )


@dataclass
class Cohort:
    manifest: CohortManifest
    bags: dict[str, FeatureBag]

    @property
    def cohort_id(self) -> str:
        return self.manifest.cohort_id

    @property
    def slide_ids(self) -> list[str]:
        return [entry.slide_id for entry in self.manifest.slides]

    @property
    def records(self) -> dict[str, SurvivalRecord]:
        return {r.slide_id: r for r in self.manifest.labels}

    def __len__(self) -> int:
        return len(self.manifest.slides)


def save_cohort(cohort: Cohort, root: str) -> None:
    os.makedirs(root, exist_ok=True)
    for entry in cohort.manifest.slides:
        bag = cohort.bags[entry.slide_id]
        save_geometry(bag.geometry, os.path.join(root, entry.geometry_path))
        save_feature_bag(bag, os.path.join(root, entry.feature_path))
    with open(os.path.join(root, COHORT_MANIFEST_PATH), "w") as f:
        json.dump(cohort.manifest.to_dict(), f, indent=2, sort_keys=True)


def load_cohort(root: str) -> Cohort:
    manifest_path = os.path.join(root, COHORT_MANIFEST_PATH)
    if not os.path.exists(manifest_path):
        raise IngestionError(f"No {COHORT_MANIFEST_PATH} in {root}")
    with open(manifest_path, "r") as f:
        manifest = CohortManifest.from_dict(json.load(f))

    bags = {}
    for entry in manifest.slides:
        bag = load_feature_bag(entry, root)
        for name, expected, got in (
            ("dim_low", manifest.dim_low, bag.dim_low),
            ("dim_high", manifest.dim_high, bag.dim_high),
        ):
            if expected is not None and expected != got:
                raise IngestionError(
                    f"{entry.slide_id}: {name} is {got}, manifest declares {expected}"
                )
        bags[entry.slide_id] = bag
    logging.info(f"Loaded cohort {manifest.cohort_id} with {len(bags)} slides from {root}")
    return Cohort(manifest=manifest, bags=bags)


def manifest_entry_for(slide_id: str) -> ManifestEntry:
    return ManifestEntry(
        slide_id=slide_id,
        geometry_path=f"{slide_id}{GEOMETRY_SUFFIX}",
        feature_path=f"{slide_id}{FEATURES_SUFFIX}",
    )
