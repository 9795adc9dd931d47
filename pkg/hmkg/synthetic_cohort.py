"""
Synthetic cohorts with a planted, known feature -> risk link.

Features are isotropic Gaussian noise. Depending on the signal mode a fixed
direction (the motif, at high magnification, or the context, at low magnification)
is added to selected feature vectors, and survival times are drawn from an
exponential whose rate grows with the planted signal strength.
"""

import logging
from typing import Optional

import numpy as np
import torch

from hmkg.config import SynthesisConfig
from hmkg.slide_geometry import (
    CELLS_PER_TILE,
    Cohort,
    CohortManifest,
    FeatureBag,
    SurvivalRecord,
    build_geometry,
    manifest_entry_for,
    save_cohort,
)

MIN_TIME_MONTHS = 1e-6


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _scatter_decoy_cells(
    rng: np.random.Generator,
    f_high: np.ndarray,
    motif: np.ndarray,
    n_cells: int,
    max_per_tile: int,
    exclude: Optional[int] = None,
) -> int:
    """
    Deal n_cells motif cells round-robin over the tiles other than ``exclude``.

    No tile receives more than max_per_tile; cells that do not fit are dropped.
    Returns the number of cells placed.
    """
    tiles = [t for t in rng.permutation(f_high.shape[0]) if t != exclude]
    if not tiles or max_per_tile < 1:
        return 0
    per_tile = dict.fromkeys(tiles, 0)
    for i in range(min(n_cells, len(tiles) * max_per_tile)):
        per_tile[tiles[i % len(tiles)]] += 1
    for tile, count in per_tile.items():
        if count:
            cells = rng.choice(CELLS_PER_TILE, count, replace=False)
            f_high[tile, cells] += motif
    return sum(per_tile.values())


def generate_synthetic_cohort(
    cfg: SynthesisConfig, out_dir: Optional[str] = None
) -> Cohort:
    """
    Generate a cohort as a pure function of ``cfg`` and optionally write it to ``out_dir``.

    Signal modes:
        local-motif: every slide holds a cluster of co-located motif cells in one tile,
            >= m cells for carriers and < m otherwise; risk grows with the cluster size.
            With decoys on, the rest of motif_total_cells is dealt over the other tiles
            (< m per tile), so the amount of motif material is the same for every slide
            that has room for it and only the within-tile arrangement is prognostic.
        global-context: carriers hold the context direction in a random fraction of
            their low-mag tiles; risk grows with that fraction.
        multi-scale: every slide holds >= m motif cells in one tile and, with decoys on,
            the low-mag context in another; carriers have both on the same tile and a
            fixed risk increase, so neither scale alone is prognostic.
        null: pure noise, labels independent of features.
    """
    rng = np.random.default_rng(cfg.seed)
    motif = _unit(rng, cfg.dim_high) * cfg.motif_strength
    context = _unit(rng, cfg.dim_low) * cfg.motif_strength
    base_rate = np.log(2.0) / cfg.base_median_months

    entries = []
    labels = []
    bags = {}
    strengths = {}
    for s in range(cfg.size):
        slide_id = f"{cfg.cohort_id}-{s:04d}"
        n_tiles = int(rng.integers(cfg.n_tiles_min, cfg.n_tiles_max + 1))
        geometry = build_geometry(
            n_tiles, cfg.low_patch_px, origin_layout="grid", slide_id=slide_id
        )
        f_low = rng.standard_normal((n_tiles, cfg.dim_low)) * cfg.noise_scale
        f_high = (
            rng.standard_normal((n_tiles, CELLS_PER_TILE, cfg.dim_high))
            * cfg.noise_scale
        )
        is_carrier = bool(rng.random() < cfg.carrier_fraction)
        strength = 0.0

        if cfg.signal_mode == "local-motif":
            if is_carrier:
                n_cells = int(rng.integers(cfg.motif_min_cells, cfg.motif_total_cells + 1))
            else:
                n_cells = int(rng.integers(0, cfg.motif_min_cells))
            tile = int(rng.integers(n_tiles))
            cells = rng.choice(CELLS_PER_TILE, n_cells, replace=False)
            f_high[tile, cells] += motif
            strength = n_cells / cfg.motif_total_cells
            if cfg.decoys:
                _scatter_decoy_cells(
                    rng,
                    f_high,
                    motif,
                    cfg.motif_total_cells - n_cells,
                    max_per_tile=cfg.motif_min_cells - 1,
                    exclude=tile,
                )

        elif cfg.signal_mode == "global-context":
            if is_carrier:
                fraction = float(rng.random())
                n_context = max(1, int(round(fraction * n_tiles)))
                tiles = rng.choice(n_tiles, n_context, replace=False)
                f_low[tiles] += context
                strength = n_context / n_tiles

        elif cfg.signal_mode == "multi-scale":
            n_cells = int(rng.integers(cfg.motif_min_cells, cfg.motif_total_cells + 1))
            tiles = rng.permutation(n_tiles)
            cells = rng.choice(CELLS_PER_TILE, n_cells, replace=False)
            f_high[tiles[0], cells] += motif
            if is_carrier:
                f_low[tiles[0]] += context
                strength = 1.0
            elif cfg.decoys and n_tiles > 1:
                f_low[tiles[1]] += context

        rate = base_rate * np.exp(cfg.effect_size * strength)
        event_time = max(float(rng.exponential(1.0 / rate)), MIN_TIME_MONTHS)
        censored = bool(rng.random() < cfg.censor_prob)
        if censored:
            time = max(event_time * float(rng.uniform(0.05, 1.0)), MIN_TIME_MONTHS)
        else:
            time = event_time

        entries.append(manifest_entry_for(slide_id))
        labels.append(SurvivalRecord(slide_id=slide_id, time=time, event=not censored))
        bags[slide_id] = FeatureBag(
            geometry=geometry,
            f_low=torch.from_numpy(f_low.astype(np.float32)),
            f_high=torch.from_numpy(f_high.astype(np.float32)),
        )
        strengths[slide_id] = strength

    manifest = CohortManifest(
        cohort_id=cfg.cohort_id,
        slides=entries,
        labels=labels,
        seed=cfg.seed,
        dim_low=cfg.dim_low,
        dim_high=cfg.dim_high,
        metadata={
            "signal_mode": cfg.signal_mode,
            "synthesis": cfg.to_dict(),
            "planted_strength": strengths,
        },
    )
    cohort = Cohort(manifest=manifest, bags=bags)

    if out_dir is not None:
        save_cohort(cohort, out_dir)
        logging.info(
            f"Wrote {cfg.size}-slide {cfg.signal_mode} cohort {cfg.cohort_id} to {out_dir}"
        )
    return cohort
