"""Data model for the strata universe.

A StrataTable holds the groups i = 1..I with populations n_i, observed
counts y_i, and the invariant total. Prior rates come from public
per-cell rates rescaled so expected counts match the invariant total
exactly; truncation bounds are Poisson quantile intervals around the
prior expected counts. All derived artifacts are immutable after
construction and safe to share across threads.

CSV schemas:
    strata:  dim_1,...,dim_k,population,count
    rates:   dim_a,...,dim_m,rate     (dimension subset, excludes geography)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .distributions import poisson_quantile_vec
from .errors import (
    DegeneratePriorError,
    DomainError,
    InfeasibilityError,
    SchemaError,
)

__all__ = [
    "StrataTable",
    "RatesTable",
    "PriorSpec",
    "TruncationBounds",
    "DominanceReport",
    "ClampResult",
    "build_prior",
    "compute_bounds",
    "check_dominance",
    "clamp_observed",
    "joint_feasible_bounds",
]


def _frozen_int_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64).copy()
    arr.flags.writeable = False
    return arr


def _frozen_float_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class StrataTable:
    """The universe of groups with populations, observed counts and total.

    Invariants (validated on construction): y_total equals the sum of
    counts, at least two strata, populations and counts nonnegative,
    keys unique.
    """

    dim_names: tuple[str, ...]
    keys: tuple[tuple[str, ...], ...]
    n: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dim_names", tuple(self.dim_names))
        object.__setattr__(self, "keys", tuple(tuple(k) for k in self.keys))
        object.__setattr__(self, "n", _frozen_int_array(self.n))
        object.__setattr__(self, "y", _frozen_int_array(self.y))
        if len(self.keys) != len(self.n) or len(self.n) != len(self.y):
            raise SchemaError("keys, populations and counts must have equal length")
        if len(self.keys) < 2:
            raise DomainError("a strata table needs at least two strata")
        if any(len(k) != len(self.dim_names) for k in self.keys):
            raise SchemaError("every key must have one label per dimension")
        if np.any(self.n < 0) or np.any(self.y < 0):
            raise DomainError("populations and counts must be nonnegative")
        if len(set(self.keys)) != len(self.keys):
            raise SchemaError("strata keys must be unique")

    @property
    def size(self) -> int:
        return len(self.keys)

    @property
    def y_total(self) -> int:
        return int(self.y.sum())

    def dim_index(self, name: str) -> int:
        try:
            return self.dim_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown dimension {name!r}") from None

    def column(self, name: str) -> tuple[str, ...]:
        """All key labels along one dimension, in stratum order."""
        j = self.dim_index(name)
        return tuple(k[j] for k in self.keys)

    @classmethod
    def from_csv(cls, path) -> "StrataTable":
        dim_names, rows = _read_table(path, trailing=("population", "count"))
        keys = []
        n = []
        y = []
        for lineno, dims, tail in rows:
            keys.append(dims)
            n.append(_parse_nonneg_int(tail[0], "population", path, lineno))
            y.append(_parse_nonneg_int(tail[1], "count", path, lineno))
        return cls(dim_names=dim_names, keys=tuple(keys), n=n, y=y)

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh)
            writer.writerow(list(self.dim_names) + ["population", "count"])
            for key, ni, yi in zip(self.keys, self.n.tolist(), self.y.tolist()):
                writer.writerow(list(key) + [ni, yi])


@dataclass(frozen=True, eq=False)
class RatesTable:
    """Public per-cell rates keyed by a subset of the strata dimensions."""

    dim_names: tuple[str, ...]
    rates: dict[tuple[str, ...], float]

    def __post_init__(self):
        object.__setattr__(self, "dim_names", tuple(self.dim_names))
        object.__setattr__(
            self, "rates", {tuple(k): float(v) for k, v in self.rates.items()}
        )
        for key, rate in self.rates.items():
            if len(key) != len(self.dim_names):
                raise SchemaError("every rate key must have one label per dimension")
            if rate < 0.0 or not np.isfinite(rate):
                raise SchemaError(f"rate for {key} must be a finite nonnegative number")

    @classmethod
    def from_csv(cls, path) -> "RatesTable":
        dim_names, rows = _read_table(path, trailing=("rate",))
        rates: dict[tuple[str, ...], float] = {}
        for lineno, dims, tail in rows:
            if dims in rates:
                raise SchemaError(f"{path}:{lineno}: duplicate rate cell {dims}")
            try:
                rates[dims] = float(tail[0])
            except ValueError:
                raise SchemaError(
                    f"{path}:{lineno}: rate {tail[0]!r} is not a number"
                ) from None
        return cls(dim_names=dim_names, rates=rates)

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh)
            writer.writerow(list(self.dim_names) + ["rate"])
            for key in sorted(self.rates):
                writer.writerow(list(key) + [repr(self.rates[key])])


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Per-stratum prior event rates.

    Specs from build_prior carry rescaled rates, so sum(n * lambda0)
    equals the invariant total exactly; a directly constructed spec may
    hold raw rates instead (rescale_factor 1). Rates carry no geographic
    signal when the source rate table excludes the geographic dimension.
    """

    lambda0: np.ndarray
    rescale_factor: float
    source: RatesTable | None

    def __post_init__(self):
        object.__setattr__(self, "lambda0", _frozen_float_array(self.lambda0))

    def expected_counts(self, table: StrataTable) -> np.ndarray:
        return table.n.astype(np.float64) * self.lambda0


@dataclass(frozen=True, eq=False)
class TruncationBounds:
    """Per-stratum integer intervals [L_i, U_i] plus their tuning knobs."""

    L: np.ndarray
    U: np.ndarray
    alpha: float
    c: float

    def __post_init__(self):
        object.__setattr__(self, "L", _frozen_int_array(self.L))
        object.__setattr__(self, "U", _frozen_int_array(self.U))
        if self.L.shape != self.U.shape:
            raise DomainError("bound arrays must have matching shape")
        if np.any(self.L < 0) or np.any(self.L > self.U):
            raise DomainError("bounds must satisfy 0 <= L_i <= U_i")

    @property
    def widths(self) -> np.ndarray:
        return self.U - self.L


@dataclass(frozen=True)
class DominanceReport:
    """Which strata carry at least as much prior expectation as all others
    combined. Computed from public prior expectations only, never from
    observed counts, so releasing it leaks nothing."""

    flagged: np.ndarray
    expected: np.ndarray
    passed: bool


@dataclass(frozen=True)
class ClampResult:
    """Observed counts clamped into the truncation boxes.

    The clamp diagnostics (how many strata were clamped, and which) depend
    on the confidential counts and must never be written to releasable
    outputs.
    """

    y_clamped: np.ndarray
    clamped_mask: np.ndarray
    clamped_count: int


def build_prior(table: StrataTable, raw_rates: RatesTable) -> PriorSpec:
    """Attach rescaled public rates to every stratum.

    The rescale factor is y_total / sum(n_i * raw_i); it aligns the prior
    expected total with the invariant total exactly.

    Raises:
        SchemaError: a stratum's cell has no rate, or a rate dimension is
            missing from the table.
        DegeneratePriorError: the raw expected total is zero.
    """
    positions = [table.dim_index(name) for name in raw_rates.dim_names]
    raw = np.empty(table.size, dtype=np.float64)
    for i, key in enumerate(table.keys):
        cell = tuple(key[j] for j in positions)
        try:
            raw[i] = raw_rates.rates[cell]
        except KeyError:
            raise SchemaError(
                f"no rate for cell {cell} (stratum {key})"
            ) from None
    denom = float(np.dot(table.n.astype(np.float64), raw))
    if denom <= 0.0:
        raise DegeneratePriorError(
            "total prior expected count is zero; cannot rescale rates"
        )
    factor = table.y_total / denom
    return PriorSpec(lambda0=raw * factor, rescale_factor=factor, source=raw_rates)


def compute_bounds(
    prior: PriorSpec, table: StrataTable, alpha: float, c: float
) -> TruncationBounds:
    """Poisson-quantile truncation intervals around prior expected counts.

    L_i is the alpha/2 quantile of Poisson(E_i / c) and U_i the 1 - 2*alpha
    quantile of Poisson(c * E_i), where E_i = n_i * lambda0_i. The upper
    level is deliberately 1 - 2*alpha rather than 1 - alpha/2: this is the
    interval convention the released reference calibrations are pinned to
    (E = 15, alpha = 1e-4, c = 1 must give U = 30, which the symmetric
    level would miss by two). Both bounds are clamped to the invariant
    total: values above it have zero probability under the sum constraint,
    and leaving U_i larger would only loosen the privacy requirement
    spuriously.
    """
    if not 0.0 < alpha < 0.5:
        raise DomainError("alpha must lie in (0, 1/2)")
    if c < 1.0:
        raise DomainError("c must be at least 1")
    expected = prior.expected_counts(table)
    lower = poisson_quantile_vec(alpha / 2.0, expected / c)
    upper = poisson_quantile_vec(1.0 - 2.0 * alpha, expected * c)
    total = table.y_total
    lower = np.minimum(lower, total)
    # alpha close to 1/2 can invert the levels; keep the box well formed
    upper = np.maximum(np.minimum(upper, total), lower)
    return TruncationBounds(L=lower, U=upper, alpha=float(alpha), c=float(c))


def check_dominance(prior: PriorSpec, table: StrataTable) -> DominanceReport:
    """Flag strata whose prior expected count reaches the combined rest.

    Stratum i is flagged when E_i >= sum_{j != i} E_j. With exactly two
    strata at least one is always flagged; the two-group calibration
    handles that case through the exchange rule instead of refusing.
    """
    expected = prior.expected_counts(table)
    rest = expected.sum() - expected
    flagged = expected >= rest
    return DominanceReport(
        flagged=flagged, expected=expected, passed=not bool(flagged.any())
    )


def clamp_observed(table: StrataTable, bounds: TruncationBounds) -> ClampResult:
    """Clamp observed counts into their boxes: min(max(y_i, L_i), U_i).

    The original table is unmodified. The clamped vector need not sum to
    the invariant total; it only feeds the posterior. Idempotent.
    """
    if len(bounds.L) != table.size:
        raise DomainError("bounds and table sizes differ")
    clamped = np.clip(table.y, bounds.L, bounds.U)
    mask = clamped != table.y
    return ClampResult(
        y_clamped=clamped, clamped_mask=mask, clamped_count=int(mask.sum())
    )


def joint_feasible_bounds(bounds: TruncationBounds, y_total: int) -> TruncationBounds:
    """Tighten boxes to the values reachable under the sum constraint.

    Replaces each box with L'_i = max(L_i, y_total - sum_{j != i} U_j) and
    U'_i = min(U_i, y_total - sum_{j != i} L_j). The feasible set of count
    vectors is unchanged: any vector summing to y_total inside the original
    boxes already satisfies the tightened ones. With two groups this is the
    exchange rule, deriving each group's effective box from the other's
    reflected through the total.

    Raises:
        InfeasibilityError: no integer vector fits the boxes and the total.
    """
    sum_L = int(bounds.L.sum())
    sum_U = int(bounds.U.sum())
    if not sum_L <= y_total <= sum_U:
        raise InfeasibilityError(
            f"boxes admit totals in [{sum_L}, {sum_U}], not {y_total}"
        )
    lower = np.maximum(bounds.L, y_total - (sum_U - bounds.U))
    upper = np.minimum(bounds.U, y_total - (sum_L - bounds.L))
    if np.any(lower > upper):
        raise InfeasibilityError("joint feasibility reduction produced an empty box")
    return TruncationBounds(L=lower, U=upper, alpha=bounds.alpha, c=bounds.c)


def _read_table(path, trailing: tuple[str, ...]):
    """Parse a CSV with dimension columns followed by fixed trailing columns.

    Lines starting with '#' are provenance comments and skipped. Returns
    (dim_names, rows) where each row is (lineno, dim_tuple, tail_values).
    Raises SchemaError with line-numbered diagnostics.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = None
        lineno = 0
        rows = []
        for record in reader:
            lineno += 1
            if not record or (record[0].startswith("#") and header is None):
                continue
            if header is None:
                header = [h.strip() for h in record]
                k = len(header) - len(trailing)
                if k < 1 or tuple(header[k:]) != trailing:
                    raise SchemaError(
                        f"{path}:{lineno}: header must end with {','.join(trailing)}"
                    )
                dim_names = tuple(header[:k])
                continue
            if record and record[0].startswith("#"):
                continue
            if len(record) != len(header):
                raise SchemaError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(record)}"
                )
            k = len(header) - len(trailing)
            rows.append((lineno, tuple(v.strip() for v in record[:k]),
                         [v.strip() for v in record[k:]]))
        if header is None:
            raise SchemaError(f"{path}: empty file, expected a header row")
    return dim_names, rows


def _parse_nonneg_int(text: str, what: str, path, lineno: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise SchemaError(f"{path}:{lineno}: {what} {text!r} is not an integer") from None
    if value < 0:
        raise SchemaError(f"{path}:{lineno}: {what} must be nonnegative")
    return value
