import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from lifelines import KaplanMeierFitter

from hmkg.slide_geometry import SurvivalRecord

SIGNIFICANCE_LEVEL = 0.05


class UndefinedMetricError(ValueError):
    pass


class DegenerateSplitError(ValueError):
    pass


def _as_arrays(
    records: Sequence[SurvivalRecord],
) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=bool)
    return times, events


def c_index(risks: Sequence[float] | np.ndarray, records: Sequence[SurvivalRecord]) -> float:
    """
    Harrell's concordance over ordered pairs (a, b) with time_a < time_b and an event at a.

    The pair is concordant when risk_a > risk_b; tied risks count half. Pairs with
    equal times are not comparable.
    """
    risks = np.asarray(risks, dtype=np.float64)
    if risks.shape != (len(records),):
        raise ValueError(f"{risks.shape[0] if risks.ndim else 0} risks for {len(records)} records")
    times, events = _as_arrays(records)

    comparable = (times[:, None] < times[None, :]) & events[:, None]
    n_comparable = int(comparable.sum())
    if n_comparable == 0:
        raise UndefinedMetricError("No comparable pairs: need an event before another time")
    concordant = (risks[:, None] > risks[None, :]) & comparable
    tied = (risks[:, None] == risks[None, :]) & comparable
    return float((concordant.sum() + 0.5 * tied.sum()) / n_comparable)


@dataclass
class KaplanMeierCurve:
    times: np.ndarray
    survival: np.ndarray

    def at(self, t: float) -> float:
        """Right-continuous step value S(t); 1 before the first time point."""
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return 1.0 if idx < 0 else float(self.survival[idx])

    def to_dict(self) -> dict[str, list[float]]:
        return {"times": self.times.tolist(), "survival": self.survival.tolist()}


def km_curve(records: Sequence[SurvivalRecord]) -> KaplanMeierCurve:
    if not records:
        raise ValueError("Kaplan-Meier estimate needs at least one record")
    times, events = _as_arrays(records)
    kmf = KaplanMeierFitter()
    kmf.fit(durations=times, event_observed=events)
    survival_function = kmf.survival_function_
    return KaplanMeierCurve(
        times=survival_function.index.values.astype(np.float64),
        survival=survival_function.iloc[:, 0].values.astype(np.float64),
    )


@dataclass
class LogRankResult:
    statistic: float
    p_value: float

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE_LEVEL


def chi2_1_sf(statistic: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    return math.erfc(math.sqrt(max(statistic, 0.0) / 2.0))


def logrank_test(
    group_a: Sequence[SurvivalRecord], group_b: Sequence[SurvivalRecord]
) -> LogRankResult:
    """Two-group Mantel-Haenszel log-rank test with hypergeometric variance."""
    if not group_a or not group_b:
        raise ValueError(
            f"Both log-rank groups must be non-empty. Got sizes {len(group_a)} and {len(group_b)}"
        )
    times_a, events_a = _as_arrays(group_a)
    times_b, events_b = _as_arrays(group_b)
    all_times = np.concatenate([times_a, times_b])
    all_events = np.concatenate([events_a, events_b])
    event_times = np.unique(all_times[all_events])

    observed_minus_expected = 0.0
    variance = 0.0
    for t in event_times:
        at_risk_a = float((times_a >= t).sum())
        at_risk = at_risk_a + float((times_b >= t).sum())
        deaths_a = float(((times_a == t) & events_a).sum())
        deaths = deaths_a + float(((times_b == t) & events_b).sum())
        observed_minus_expected += deaths_a - deaths * at_risk_a / at_risk
        if at_risk > 1:
            variance += (
                deaths
                * (at_risk_a / at_risk)
                * (1 - at_risk_a / at_risk)
                * (at_risk - deaths)
                / (at_risk - 1)
            )

    if variance <= 0:
        raise UndefinedMetricError("Log-rank variance is zero; the test is undefined")
    statistic = observed_minus_expected**2 / variance
    return LogRankResult(statistic=float(statistic), p_value=chi2_1_sf(statistic))


def median_split_mask(risks: Sequence[float] | np.ndarray) -> np.ndarray:
    """Boolean mask of the high-risk group."""
    risks = np.asarray(risks, dtype=np.float64)
    if risks.size < 2:
        raise ValueError(f"median split needs at least 2 subjects. Got {risks.size}")
    if np.all(risks == risks[0]):
        raise DegenerateSplitError("All risks are equal; the median split is degenerate")
    median = np.median(risks)
    high = risks > median
    if not high.any():
        # the median is the maximum, so the tied block moves up instead
        high = risks >= median
    return high


def median_split(
    risks: Sequence[float] | np.ndarray, records: Sequence[SurvivalRecord]
) -> tuple[list[SurvivalRecord], list[SurvivalRecord]]:
    """Split at the median risk into (high, low); ties at the median go low."""
    if len(risks) != len(records):
        raise ValueError(f"{len(risks)} risks for {len(records)} records")
    high = median_split_mask(risks)
    group_hi = [r for r, h in zip(records, high) if h]
    group_lo = [r for r, h in zip(records, high) if not h]
    return group_hi, group_lo


@dataclass
class FoldSummary:
    mean: float
    sd: float
    values: list[float]


def aggregate_folds(values: Sequence[float]) -> FoldSummary:
    if len(values) < 2:
        raise UndefinedMetricError(f"Need at least 2 folds to aggregate. Got {len(values)}")
    array = np.asarray(values, dtype=np.float64)
    return FoldSummary(
        mean=float(array.mean()), sd=float(array.std(ddof=1)), values=[float(v) for v in values]
    )


@dataclass
class EvalResult:
    """Cross-validated performance of one variant on one cohort."""

    variant: str
    cohort_id: str
    seed: int
    fold_c_indices: list[Optional[float]]
    c_index_mean: float
    c_index_sd: float
    logrank_stat: Optional[float] = None
    logrank_p: Optional[float] = None
    excluded_folds: list[int] = field(default_factory=list)
    fold_assignment: dict[str, int] = field(default_factory=dict)
    flags: dict[str, str] = field(default_factory=dict)
    km_high: Optional[KaplanMeierCurve] = None
    km_low: Optional[KaplanMeierCurve] = None

    def __post_init__(self):
        if self.c_index_sd < 0:
            raise ValueError(f"SD must be non-negative. Got {self.c_index_sd}")

    @property
    def significant(self) -> bool:
        return self.logrank_p is not None and self.logrank_p < SIGNIFICANCE_LEVEL

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "cohort_id": self.cohort_id,
            "seed": self.seed,
            "fold_c_indices": self.fold_c_indices,
            "c_index_mean": self.c_index_mean,
            "c_index_sd": self.c_index_sd,
            "logrank_stat": self.logrank_stat,
            "logrank_p": self.logrank_p,
            "significant": self.significant,
            "excluded_folds": self.excluded_folds,
            "fold_assignment": dict(sorted(self.fold_assignment.items())),
            "flags": self.flags,
        }

    @classmethod
    def from_dict(cls, result_dict: dict[str, Any]) -> "EvalResult":
        return cls(
            **{
                k: v
                for k, v in result_dict.items()
                if k in cls.__dataclass_fields__ and k not in ("km_high", "km_low")
            }
        )
