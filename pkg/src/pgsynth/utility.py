"""Utility summaries over true and synthetic count tables.

Age-adjusted rates, between-group disparity ratios, urban/rural
classification by population density, and observed-versus-expected
aggregates. Everything consumes immutable tables plus plain count
vectors (or replicate matrices), so the functions are safe to run in
parallel across replicates.

Selectors are dicts mapping dimension names to either one label or a
collection of labels; a stratum matches when every named dimension's
label is allowed. An empty selector matches everything.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SchemaError, UndefinedRateError
from .strata import PriorSpec, StrataTable, _read_table

__all__ = [
    "StandardPopulation",
    "DisparityEstimate",
    "selector_mask",
    "selector_label",
    "age_adjusted_rate",
    "disparity_ratio",
    "urban_rural_classify",
    "observed_vs_expected",
    "summarize_replicates",
    "read_density_csv",
    "write_density_csv",
    "write_metrics_csv",
    "write_observed_expected_csv",
]

RATE_SCALE = 100_000.0


@dataclass(frozen=True)
class StandardPopulation:
    """Fixed age weights for rate standardization.

    weights maps age-group label to a nonnegative weight; the weights sum
    to 1 within 1e-12. Iteration order of the dict fixes the reporting
    order of age groups.
    """

    weights: dict[str, float]

    def __post_init__(self):
        object.__setattr__(
            self, "weights", {str(k): float(v) for k, v in self.weights.items()}
        )
        if not self.weights:
            raise SchemaError("a standard population needs at least one age group")
        vals = np.array(list(self.weights.values()))
        if np.any(vals < 0.0) or not np.all(np.isfinite(vals)):
            raise SchemaError("standard population weights must be finite and nonnegative")
        if abs(vals.sum() - 1.0) > 1e-12:
            raise SchemaError(
                f"standard population weights sum to {vals.sum()!r}, not 1"
            )

    @classmethod
    def from_csv(cls, path) -> "StandardPopulation":
        dim_names, rows = _read_table(path, trailing=("weight",))
        if dim_names != ("age_group",):
            raise SchemaError(f"{path}: expected header age_group,weight")
        weights: dict[str, float] = {}
        for lineno, dims, tail in rows:
            if dims[0] in weights:
                raise SchemaError(f"{path}:{lineno}: duplicate age group {dims[0]!r}")
            try:
                weights[dims[0]] = float(tail[0])
            except ValueError:
                raise SchemaError(
                    f"{path}:{lineno}: weight {tail[0]!r} is not a number"
                ) from None
        return cls(weights=weights)

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["age_group", "weight"])
            for label, weight in self.weights.items():
                writer.writerow([label, repr(weight)])


@dataclass(frozen=True)
class DisparityEstimate:
    """Ratio of age-adjusted rates between two subgroups.

    For replicate input, per_replicate holds one ratio per replicate and
    ratio equals mean_ratio; for a single count vector both collapse to
    the one ratio.
    """

    numerator_group: str
    denominator_group: str
    ratio: float
    per_replicate: tuple[float, ...]
    mean_ratio: float


def selector_mask(table: StrataTable, selector: dict | None) -> np.ndarray:
    """Boolean stratum mask for a selector."""
    mask = np.ones(table.size, dtype=bool)
    if not selector:
        return mask
    for dim, allowed in selector.items():
        labels = np.array(table.column(dim))
        if isinstance(allowed, str):
            mask &= labels == allowed
        else:
            mask &= np.isin(labels, list(allowed))
    return mask


def selector_label(selector: dict | None) -> str:
    if not selector:
        return "all"
    parts = []
    for dim in sorted(selector):
        allowed = selector[dim]
        if isinstance(allowed, str):
            parts.append(f"{dim}={allowed}")
        else:
            parts.append(f"{dim}={'|'.join(sorted(allowed))}")
    return "&".join(parts)


def _dedup_population(
    table: StrataTable, mask: np.ndarray, key_dims: tuple[str, ...] | None
) -> float:
    """Population total, counting repeated demographic cells once.

    Tables that cross a non-demographic dimension (for example cause of
    death) repeat each cell's population along it; key_dims names the
    dimensions that identify a person-cell so the sum is taken over
    unique keys only. None means plain summation.
    """
    idx = np.flatnonzero(mask)
    if key_dims is None:
        return float(table.n[idx].sum())
    positions = [table.dim_index(d) for d in key_dims]
    seen: dict[tuple[str, ...], int] = {}
    total = 0
    for i in idx:
        key = tuple(table.keys[i][j] for j in positions)
        prev = seen.get(key)
        if prev is None:
            seen[key] = int(table.n[i])
            total += int(table.n[i])
        elif prev != int(table.n[i]):
            raise SchemaError(
                f"population differs within demographic cell {key}; "
                "population_key_dims does not identify cells"
            )
    return float(total)


def age_adjusted_rate(
    counts,
    table: StrataTable,
    std: StandardPopulation,
    selector: dict | None = None,
    *,
    age_dim: str = "age",
    population_key_dims: tuple[str, ...] | None = None,
    warn: bool = True,
) -> float:
    """Standard-weighted average of age-specific rates, per 100,000.

    Age groups whose selected population is zero are dropped and the
    remaining weights renormalized (with a warning); a selector with no
    population at all has no rate.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (table.size,):
        raise DomainError("counts must have one entry per stratum")
    mask = selector_mask(table, selector)
    age_labels = np.array(table.column(age_dim))
    present = sorted(set(age_labels[mask]))
    for level in present:
        if level not in std.weights:
            raise SchemaError(
                f"age group {level!r} has no standard population weight"
            )
    kept: list[tuple[float, float]] = []  # (weight, crude rate)
    dropped: list[str] = []
    for level in std.weights:
        if level not in present:
            continue
        level_mask = mask & (age_labels == level)
        pop = _dedup_population(table, level_mask, population_key_dims)
        if pop <= 0.0:
            dropped.append(level)
            continue
        deaths = float(counts[level_mask].sum())
        kept.append((std.weights[level], deaths / pop))
    if not kept:
        raise UndefinedRateError(
            f"selector {selector_label(selector)} has no population in any age group"
        )
    if dropped and warn:
        warnings.warn(
            f"dropping zero-population age groups {dropped} for "
            f"{selector_label(selector)}; weights renormalized",
            stacklevel=2,
        )
    weight_sum = sum(w for w, _ in kept)
    if weight_sum <= 0.0:
        raise UndefinedRateError("all populated age groups carry zero weight")
    return sum(w * r for w, r in kept) / weight_sum * RATE_SCALE


def disparity_ratio(
    counts,
    table: StrataTable,
    std: StandardPopulation,
    group_a: dict,
    group_b: dict,
    *,
    age_dim: str = "age",
    population_key_dims: tuple[str, ...] | None = None,
    warn: bool = True,
) -> DisparityEstimate:
    """Ratio of group A's age-adjusted rate to group B's.

    counts may be one vector or a replicate matrix (one row per
    replicate); with a matrix the estimate carries per-replicate ratios
    and their arithmetic mean.
    """
    arr = np.asarray(counts, dtype=np.float64)
    rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
    ratios = []
    for row in rows:
        rate_a = age_adjusted_rate(
            row, table, std, group_a,
            age_dim=age_dim, population_key_dims=population_key_dims, warn=warn,
        )
        rate_b = age_adjusted_rate(
            row, table, std, group_b,
            age_dim=age_dim, population_key_dims=population_key_dims, warn=warn,
        )
        if rate_b <= 0.0:
            raise UndefinedRateError(
                f"denominator group {selector_label(group_b)} has zero rate"
            )
        ratios.append(rate_a / rate_b)
        warn = False  # one warning per call is enough
    mean = float(np.mean(ratios))
    return DisparityEstimate(
        numerator_group=selector_label(group_a),
        denominator_group=selector_label(group_b),
        ratio=mean if arr.ndim > 1 else float(ratios[0]),
        per_replicate=tuple(float(r) for r in ratios),
        mean_ratio=mean,
    )


def urban_rural_classify(
    table: StrataTable,
    densities: dict[str, float],
    threshold: float,
    *,
    geo_dim: str = "county",
) -> tuple[frozenset[str], frozenset[str]]:
    """Partition geography labels into (urban, rural) by density.

    A geography is urban when its density strictly exceeds the
    threshold. Every geography in the table needs a density.
    """
    labels = sorted(set(table.column(geo_dim)))
    missing = [g for g in labels if g not in densities]
    if missing:
        raise SchemaError(f"no density for geographies {missing}")
    urban = frozenset(g for g in labels if densities[g] > threshold)
    return urban, frozenset(g for g in labels if g not in urban)


def observed_vs_expected(
    table: StrataTable, prior: PriorSpec, aggregation: dict[str, dict]
) -> list[tuple[str, float, float]]:
    """(observed count sum, prior expected sum) per named aggregate."""
    expected = prior.expected_counts(table)
    out = []
    for label, selector in aggregation.items():
        mask = selector_mask(table, selector)
        out.append(
            (label, float(table.y[mask].sum()), float(expected[mask].sum()))
        )
    return out


def summarize_replicates(values) -> dict[str, float]:
    """Mean plus 2.5/97.5 percentile band across replicates."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DomainError("no replicate values to summarize")
    return {
        "mean": float(arr.mean()),
        "p2.5": float(np.percentile(arr, 2.5)),
        "p97.5": float(np.percentile(arr, 97.5)),
    }


def read_density_csv(path) -> dict[str, float]:
    dim_names, rows = _read_table(path, trailing=("density",))
    if dim_names != ("geo",):
        raise SchemaError(f"{path}: expected header geo,density")
    densities: dict[str, float] = {}
    for lineno, dims, tail in rows:
        if dims[0] in densities:
            raise SchemaError(f"{path}:{lineno}: duplicate geography {dims[0]!r}")
        try:
            densities[dims[0]] = float(tail[0])
        except ValueError:
            raise SchemaError(
                f"{path}:{lineno}: density {tail[0]!r} is not a number"
            ) from None
    return densities


def write_density_csv(path, densities: dict[str, float], header_comment=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["geo", "density"])
        for geo in sorted(densities):
            writer.writerow([geo, repr(float(densities[geo]))])


def write_metrics_csv(path, rows, header_comment: str | None = None) -> None:
    """Tidy metric rows: metric, selector, epsilon, replicate, value."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["metric", "selector", "epsilon", "replicate", "value"])
        for metric, selector, epsilon, replicate, value in rows:
            writer.writerow([metric, selector, epsilon, replicate, repr(float(value))])


def write_observed_expected_csv(path, pairs, header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["aggregate", "observed", "expected"])
        for label, observed, expected in pairs:
            writer.writerow([label, repr(float(observed)), repr(float(expected))])
