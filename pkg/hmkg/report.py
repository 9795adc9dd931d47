import json
import os
import re
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd

from hmkg import __version__
from hmkg.config import HMKGRunnerConfig
from hmkg.metrics import SIGNIFICANCE_LEVEL, EvalResult

RESULTS_PATH = "results.json"
TABLE_PATH = "table.txt"
KM_PATH = "km.csv"
TABLE_HEADER = "variant | cohort | mean±SD | (*)"
ABLATION_TABLE_HEADER = "variant | hierarch. | locality | multi-scale | cohort | mean±SD | (*)"
TABLE_LAYOUTS = ("results", "ablation")
SIGNIFICANCE_MARKER = "(*)"
_SCORE = r"(?P<mean>-?\d+\.\d+)±(?P<sd>\d+\.\d+) \| ?(?P<marker>\(\*\))?$"
_ROW_PATTERN = re.compile(r"^(?P<variant>\S+) \| (?P<cohort>.+?) \| " + _SCORE)
_ABLATION_ROW_PATTERN = re.compile(
    r"^(?P<variant>\S+) \| (?P<hierarchical>[^|]+?) \| (?P<locality>[^|]+?) \| "
    + r"(?P<multiscale>[^|]+?) \| (?P<cohort>.+?) \| "
    + _SCORE
)


def format_row(result: EvalResult, precision: int = 4) -> str:
    marker = SIGNIFICANCE_MARKER if result.significant else ""
    return (
        f"{result.variant} | {result.cohort_id} | "
        + f"{result.c_index_mean:.{precision}f}±{result.c_index_sd:.{precision}f} | {marker}"
    ).rstrip()


def format_table(results: Sequence[EvalResult], precision: int = 4) -> str:
    return "\n".join([TABLE_HEADER] + [format_row(r, precision) for r in results]) + "\n"


def format_ablation_table(results: Sequence[EvalResult], precision: int = 4) -> str:
    """Rows with the hierarchy / locality / multi-scale switches next to the C-index."""
    lines = [ABLATION_TABLE_HEADER]
    for r in results:
        flags = r.flags
        marker = SIGNIFICANCE_MARKER if r.significant else ""
        lines.append(
            f"{r.variant} | {flags.get('hierarchical', '')} | {flags.get('locality', '')} | "
            + f"{flags.get('multiscale', '')} | {r.cohort_id} | "
            + f"{r.c_index_mean:.{precision}f}±{r.c_index_sd:.{precision}f} | {marker}".rstrip()
        )
    return "\n".join(lines) + "\n"


def format_results_table(results: Sequence[EvalResult], layout: str = "results") -> str:
    if layout not in TABLE_LAYOUTS:
        raise ValueError(f"Unknown table layout {layout}. Expected one of {list(TABLE_LAYOUTS)}")
    return format_ablation_table(results) if layout == "ablation" else format_table(results)


@dataclass
class TableRow:
    variant: str
    cohort_id: str
    mean: float
    sd: float
    significant: bool
    flags: Optional[dict[str, str]] = None


def parse_table(text: str) -> list[TableRow]:
    """Read either table layout back; the header line picks the row format."""
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if lines and lines[0] == ABLATION_TABLE_HEADER:
        pattern, lines = _ABLATION_ROW_PATTERN, lines[1:]
    elif lines and lines[0] == TABLE_HEADER:
        pattern, lines = _ROW_PATTERN, lines[1:]
    else:
        pattern = _ROW_PATTERN
    rows = []
    for line in lines:
        match = pattern.match(line)
        if match is None:
            raise ValueError(f"Not a results table row: {line!r}")
        flags = None
        if pattern is _ABLATION_ROW_PATTERN:
            flags = {key: match[key] for key in ("hierarchical", "locality", "multiscale")}
        rows.append(
            TableRow(
                variant=match["variant"],
                cohort_id=match["cohort"],
                mean=float(match["mean"]),
                sd=float(match["sd"]),
                significant=match["marker"] is not None,
                flags=flags,
            )
        )
    return rows


def improvement_pct(results: Sequence[EvalResult]) -> dict[str, Optional[float]]:
    """How much higher, in percent, the full variant's mean C-index is than each row's."""
    full = {r.cohort_id: r.c_index_mean for r in results if r.variant == "full"}
    improvements: dict[str, Optional[float]] = {}
    for r in results:
        reference = full.get(r.cohort_id)
        key = f"{r.variant}/{r.cohort_id}"
        if reference is None or r.c_index_mean == 0:
            improvements[key] = None
        else:
            improvements[key] = 100.0 * (reference - r.c_index_mean) / r.c_index_mean
    return improvements


def mean_improvement_pct(results: Sequence[EvalResult]) -> dict[str, Optional[float]]:
    """Per variant, the improvement of the full variant averaged over the cohorts where it is defined."""
    improvements = improvement_pct(results)
    per_variant: dict[str, list[float]] = {}
    for r in results:
        value = improvements[f"{r.variant}/{r.cohort_id}"]
        values = per_variant.setdefault(r.variant, [])
        if value is not None:
            values.append(value)
    return {
        variant: float(np.mean(values)) if values else None
        for variant, values in per_variant.items()
    }


def results_document(
    results: Sequence[EvalResult],
    cfg: Optional[HMKGRunnerConfig] = None,
    layout: str = "results",
) -> dict[str, Any]:
    improvements = improvement_pct(results)
    rows = []
    for r in results:
        row = r.to_dict()
        row["improvement_pct"] = improvements[f"{r.variant}/{r.cohort_id}"]
        rows.append(row)
    return {
        "hmkg_version": __version__,
        "config_hash": cfg.config_hash() if cfg is not None else None,
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else (results[0].seed if results else None),
        "significance_level": SIGNIFICANCE_LEVEL,
        "table_layout": layout,
        "mean_improvement_pct": mean_improvement_pct(results),
        "results": rows,
    }


def km_frame(results: Sequence[EvalResult]) -> pd.DataFrame:
    frames = []
    for r in results:
        for group, curve in (("high", r.km_high), ("low", r.km_low)):
            if curve is None:
                continue
            frames.append(
                pd.DataFrame(
                    {
                        "variant": r.variant,
                        "cohort": r.cohort_id,
                        "group": group,
                        "time": curve.times,
                        "survival": curve.survival,
                    }
                )
            )
    if not frames:
        return pd.DataFrame(columns=["variant", "cohort", "group", "time", "survival"])
    return pd.concat(frames, ignore_index=True)


def emit_report(
    results: Sequence[EvalResult],
    out_dir: str,
    cfg: Optional[HMKGRunnerConfig] = None,
    layout: str = "results",
) -> dict[str, str]:
    """
    Write results.json, table.txt and km.csv to ``out_dir`` and return their paths.

    ``layout="ablation"`` writes the table with the variant switch columns.
    """
    if not results:
        raise ValueError("Nothing to report")
    table = format_results_table(results, layout)
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "results": os.path.join(out_dir, RESULTS_PATH),
        "table": os.path.join(out_dir, TABLE_PATH),
        "km": os.path.join(out_dir, KM_PATH),
    }
    with open(paths["results"], "w") as f:
        json.dump(results_document(results, cfg, layout), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(paths["table"], "w") as f:
        f.write(table)
    km_frame(results).to_csv(paths["km"], index=False)
    return paths


def _read_document(path: str) -> dict[str, Any]:
    with open(path, "r") as f:
        return json.load(f)


def load_results(path: str) -> list[EvalResult]:
    return [EvalResult.from_dict(row) for row in _read_document(path)["results"]]


def render_results(path: str) -> str:
    """The table of a results.json, in the layout it was written with."""
    document = _read_document(path)
    results = [EvalResult.from_dict(row) for row in document["results"]]
    return format_results_table(results, document.get("table_layout", "results"))
