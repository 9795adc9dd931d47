"""
Discrete-time survival modelling.

Times are bucketed into T bins. The model emits T logits, h_t = sigmoid(logit_t)
is the hazard of bin t, S_t = prod_{tau <= t} (1 - h_tau) the survival and
-sum_t S_t the scalar risk.
"""

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import torch
from jaxtyping import Float, Int

from hmkg.slide_geometry import SurvivalRecord


@dataclass(frozen=True)
class TimeBinning:
    n_bins: int
    cut_points: tuple[float, ...]

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2. Got {self.n_bins}")
        if len(self.cut_points) != self.n_bins - 1:
            raise ValueError(
                f"{self.n_bins} bins need {self.n_bins - 1} cut points. Got {len(self.cut_points)}"
            )
        cuts = np.asarray(self.cut_points, dtype=np.float64)
        if not (cuts > 0).all() or not (np.diff(cuts) > 0).all():
            raise ValueError(f"cut points must be positive and strictly increasing. Got {self.cut_points}")

    def to_dict(self) -> dict[str, Any]:
        return {"n_bins": self.n_bins, "cut_points": list(self.cut_points)}

    @classmethod
    def from_dict(cls, binning_dict: dict[str, Any]) -> "TimeBinning":
        return cls(
            n_bins=int(binning_dict["n_bins"]),
            cut_points=tuple(float(c) for c in binning_dict["cut_points"]),
        )


def discretize_time(records: Sequence[SurvivalRecord], n_bins: int = 4) -> TimeBinning:
    """
    Quantile cut points of the uncensored times (all times if fewer than ``n_bins``
    are uncensored). Pass training records only.
    """
    if not records:
        raise ValueError("Cannot fit a time binning without records")
    times = np.array([r.time for r in records if r.event], dtype=np.float64)
    if times.size < n_bins:
        times = np.array([r.time for r in records], dtype=np.float64)

    cuts = np.quantile(times, np.arange(1, n_bins) / n_bins)
    for i in range(1, cuts.size):
        if cuts[i] <= cuts[i - 1]:
            cuts[i] = np.nextafter(cuts[i - 1], np.inf)
    return TimeBinning(n_bins=n_bins, cut_points=tuple(float(c) for c in cuts))


def assign_bin(record: SurvivalRecord | float, binning: TimeBinning) -> int:
    """Index of the half-open interval [c_{b-1}, c_b) holding the time; the last bin is open above."""
    time = record.time if isinstance(record, SurvivalRecord) else float(record)
    return int(np.searchsorted(binning.cut_points, time, side="right"))


def assign_bins(records: Sequence[SurvivalRecord], binning: TimeBinning) -> list[SurvivalRecord]:
    return [r.with_bin(assign_bin(r, binning)) for r in records]


@dataclass
class HazardOutput:
    logits: Float[torch.Tensor, "... T"]
    hazards: Float[torch.Tensor, "... T"]
    survival: Float[torch.Tensor, "... T"]
    risk: Float[torch.Tensor, "..."]

    @property
    def n_bins(self) -> int:
        return self.logits.shape[-1]


def hazard_output(logits: Float[torch.Tensor, "... T"]) -> HazardOutput:
    hazards = torch.sigmoid(logits)
    survival = torch.cumprod(1 - hazards, dim=-1)
    return HazardOutput(
        logits=logits, hazards=hazards, survival=survival, risk=-survival.sum(dim=-1)
    )


def risk_score(output: HazardOutput) -> Float[torch.Tensor, "..."]:
    return -output.survival.sum(dim=-1)


def nll_surv_loss_from_tensors(
    hazards: Float[torch.Tensor, "batch T"],
    bins: Int[torch.Tensor, "batch"],
    censored: Float[torch.Tensor, "batch"],
    alpha: float = 0.0,
    eps: float = 1e-7,
) -> Float[torch.Tensor, ""]:
    bins = bins.long().unsqueeze(-1)
    censored = censored.to(hazards.dtype).unsqueeze(-1)
    survival = torch.cumprod(1 - hazards, dim=-1)
    # S_{-1} = 1
    survival_padded = torch.cat([torch.ones_like(survival[..., :1]), survival], dim=-1)

    s_before = survival_padded.gather(-1, bins).clamp(min=eps)
    s_at = survival_padded.gather(-1, bins + 1).clamp(min=eps)
    h_at = hazards.gather(-1, bins).clamp(min=eps)

    uncensored_loss = -(1 - censored) * (torch.log(s_before) + torch.log(h_at))
    censored_loss = -censored * torch.log(s_at)
    loss = (1 - alpha) * (censored_loss + uncensored_loss) + alpha * uncensored_loss
    return loss.mean()


def nll_surv_loss(
    output: HazardOutput,
    records: SurvivalRecord | Sequence[SurvivalRecord],
    alpha: float = 0.0,
    eps: float = 1e-7,
) -> Float[torch.Tensor, ""]:
    """
    Mean discrete-time negative log-likelihood.

    For bin b and censoring flag c the per-slide loss is
    -c log S_b - (1 - c) (log S_{b-1} + log h_b); ``alpha`` adds extra weight on the
    uncensored term.
    """
    if isinstance(records, SurvivalRecord):
        records = [records]
    for r in records:
        if r.bin is None:
            raise ValueError(f"{r.slide_id}: no time bin assigned")
        if not 0 <= r.bin < output.n_bins:
            raise ValueError(f"{r.slide_id}: bin {r.bin} outside 0..{output.n_bins - 1}")
    hazards = output.hazards.reshape(-1, output.n_bins)
    if hazards.shape[0] != len(records):
        raise ValueError(f"{hazards.shape[0]} outputs for {len(records)} records")
    bins = torch.tensor([r.bin for r in records], device=hazards.device)
    censored = torch.tensor([float(r.censored) for r in records], device=hazards.device)
    return nll_surv_loss_from_tensors(hazards, bins, censored, alpha=alpha, eps=eps)
