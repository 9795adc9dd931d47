import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from hmkg.config import HMKGRunnerConfig
from hmkg.hmkg_model import HMKG, VariantConfig
from hmkg.hmkg_training_runner import HMKGTrainingRunner, TrainRunOutput
from hmkg.metrics import (
    DegenerateSplitError,
    EvalResult,
    LogRankResult,
    UndefinedMetricError,
    aggregate_folds,
    c_index,
    km_curve,
    logrank_test,
    median_split,
)
from hmkg.slide_geometry import Cohort, SurvivalRecord
from hmkg.utils import stable_hash

ABLATION_VARIANTS = ("kgn_baseline", "single_scale", "no_locality", "full")
MIL_BASELINE_VARIANTS = ("mean_pool", "mean_mil", "max_mil", "abmil", "transmil")


def assign_folds(slide_ids: Sequence[str], folds: int, seed: int) -> dict[str, int]:
    """
    Near-equal partition keyed by a stable hash of (seed, slide_id).

    The manifest order has no influence: slides are ranked by hash and dealt out
    round-robin.
    """
    if folds < 2:
        raise ValueError(f"folds must be >= 2. Got {folds}")
    if len(slide_ids) < folds:
        raise ValueError(f"Cohort of {len(slide_ids)} slides is smaller than folds={folds}")
    ranked = sorted(slide_ids, key=lambda s: (stable_hash(f"{seed}:{s}"), s))
    return {slide_id: i % folds for i, slide_id in enumerate(ranked)}


def fit_fold(
    cfg: HMKGRunnerConfig, cohort: Cohort, train_slide_ids: Sequence[str]
) -> TrainRunOutput:
    return HMKGTrainingRunner(cfg, cohort=cohort, train_slide_ids=train_slide_ids).run()


@dataclass
class ModelEvaluation:
    c_index: Optional[float]
    logrank: Optional[LogRankResult]
    risks: dict[str, float]


def evaluate_model(model: HMKG, cohort: Cohort, slide_ids: Optional[Sequence[str]] = None) -> ModelEvaluation:
    """C-index and median-split log-rank of a trained model on (a subset of) a cohort."""
    slide_ids = list(cohort.slide_ids if slide_ids is None else slide_ids)
    risks = model.predict_risks([cohort.bags[s] for s in slide_ids]).numpy()
    records = [cohort.records[s] for s in slide_ids]

    try:
        concordance: Optional[float] = c_index(risks, records)
    except UndefinedMetricError as e:
        logging.warning(f"{cohort.cohort_id}: {e}")
        concordance = None
    try:
        group_hi, group_lo = median_split(risks, records)
        logrank: Optional[LogRankResult] = logrank_test(group_hi, group_lo)
    except (DegenerateSplitError, UndefinedMetricError) as e:
        logging.warning(f"{cohort.cohort_id}: no log-rank test: {e}")
        logrank = None
    return ModelEvaluation(
        c_index=concordance,
        logrank=logrank,
        risks={s: float(r) for s, r in zip(slide_ids, risks)},
    )


def _warn(message: str) -> None:
    logging.warning(message)
    warnings.warn(message)


def cross_validate(
    cfg: HMKGRunnerConfig,
    cohort: Cohort,
    fold_assignment: Optional[dict[str, int]] = None,
) -> EvalResult:
    """
    k-fold cross-validation of ``cfg.variant``.

    Each fold fits the binning and model on the other folds only and scores the
    held-out slides. Held-out risks are median-split per fold and the groups pooled
    across folds for one log-rank test and one pair of Kaplan-Meier curves.
    """
    if fold_assignment is None:
        fold_assignment = assign_folds(cohort.slide_ids, cfg.folds, cfg.seed)
    if set(fold_assignment) != set(cohort.slide_ids):
        raise ValueError("fold assignment does not cover exactly the cohort's slides")

    records = cohort.records
    fold_c_indices: list[Optional[float]] = []
    excluded: list[int] = []
    pooled_hi: list[SurvivalRecord] = []
    pooled_lo: list[SurvivalRecord] = []

    for fold in range(cfg.folds):
        test_ids = [s for s in cohort.slide_ids if fold_assignment[s] == fold]
        train_ids = [s for s in cohort.slide_ids if fold_assignment[s] != fold]
        logging.info(
            f"{cfg.variant} fold {fold}: {len(train_ids)} training, {len(test_ids)} test slides"
        )
        fit = fit_fold(cfg, cohort, train_ids)
        risks = fit.model.predict_risks([cohort.bags[s] for s in test_ids]).numpy()
        test_records = [records[s] for s in test_ids]

        try:
            fold_c_indices.append(c_index(risks, test_records))
        except UndefinedMetricError as e:
            _warn(f"{cfg.variant} fold {fold} excluded: {e}")
            fold_c_indices.append(None)
            excluded.append(fold)

        try:
            group_hi, group_lo = median_split(risks, test_records)
            pooled_hi.extend(group_hi)
            pooled_lo.extend(group_lo)
        except (DegenerateSplitError, ValueError) as e:
            _warn(f"{cfg.variant} fold {fold} not stratified: {e}")

    valid = [c for c in fold_c_indices if c is not None]
    if len(valid) < 2:
        raise UndefinedMetricError(
            f"{cfg.variant} on {cohort.cohort_id}: {len(valid)} of {cfg.folds} folds have a "
            + f"C-index, need 2. Excluded folds: {excluded}"
        )
    summary = aggregate_folds(valid)

    logrank_stat: Optional[float] = None
    logrank_p: Optional[float] = None
    km_high = km_low = None
    if pooled_hi and pooled_lo:
        km_high, km_low = km_curve(pooled_hi), km_curve(pooled_lo)
        try:
            logrank = logrank_test(pooled_hi, pooled_lo)
            logrank_stat, logrank_p = logrank.statistic, logrank.p_value
        except UndefinedMetricError as e:
            _warn(f"{cfg.variant}: no log-rank test: {e}")

    return EvalResult(
        variant=cfg.variant,
        cohort_id=cohort.cohort_id,
        seed=cfg.seed,
        fold_c_indices=fold_c_indices,
        c_index_mean=summary.mean,
        c_index_sd=summary.sd,
        logrank_stat=logrank_stat,
        logrank_p=logrank_p,
        excluded_folds=excluded,
        fold_assignment=dict(fold_assignment),
        flags=VariantConfig.from_name(cfg.variant).table_flags(),
        km_high=km_high,
        km_low=km_low,
    )


def run_ablation(
    cfg: HMKGRunnerConfig,
    cohort: Cohort,
    variants: Optional[Sequence[str]] = None,
) -> list[EvalResult]:
    """Cross-validate every variant on one shared fold assignment."""
    if variants is None:
        variants = list(ABLATION_VARIANTS)
        if cfg.include_mil_baselines:
            variants = list(MIL_BASELINE_VARIANTS) + variants
    fold_assignment = assign_folds(cohort.slide_ids, cfg.folds, cfg.seed)
    results = []
    for variant in variants:
        logging.info(f"Ablation: cross-validating {variant}")
        results.append(cross_validate(cfg.with_overrides(variant=variant), cohort, fold_assignment))
    return results


def mean_c_index(results: Sequence[EvalResult], variant: str) -> float:
    values = [r.c_index_mean for r in results if r.variant == variant]
    if not values:
        raise KeyError(variant)
    return float(np.mean(values))
