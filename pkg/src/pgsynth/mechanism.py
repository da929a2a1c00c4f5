"""Shared mechanism internals: kernel parameters and completion-mass tables.

The mechanism's law for a synthetic vector z is a product of per-stratum
negative-binomial kernels

    w_i(z) = Gamma(z + clamped_y_i + a_i) / z! * p_i^z,
    p_i = n_i / (b_i + 2 * n_i),

restricted to the box lo_i <= z_i <= hi_i and the slice sum(z) = y_total,
then normalized. Everything here works in log space or with
max-normalized linear tables carrying a separate log offset, because the
raw weights span hundreds of orders of magnitude.

The completion-mass table T_k holds, for each attainable total t, the
summed weight of all ways strata k..I-1 can sum to t. It satisfies
T_k = w_k * T_{k+1} (discrete convolution), with T_I a point mass at 0.
T_0 evaluated at y_total is the normalizer; the tables also drive the
sequential exact sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import log_negbin_kernel
from .errors import InfeasibilityError
from .strata import StrataTable, TruncationBounds

__all__ = [
    "KernelParams",
    "MassTable",
    "build_kernel_params",
    "stratum_log_weights",
    "stratum_weight_table",
    "convolve_mass",
    "delta_table",
    "log_normalizer",
]


@dataclass(frozen=True)
class KernelParams:
    """Everything the conditioned-product law depends on.

    shape: kernel shapes, clamped observed count plus gamma shape.
    log_p: per-stratum log success probability, -inf when n_i = 0.
    lo, hi: inclusive per-stratum support bounds.
    y_total: the invariant total the draw is conditioned on.
    """

    shape: np.ndarray
    log_p: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    y_total: int

    def __post_init__(self):
        for name, dtype in (
            ("shape", np.float64),
            ("log_p", np.float64),
            ("lo", np.int64),
            ("hi", np.int64),
        ):
            arr = np.asarray(getattr(self, name), dtype=dtype).copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if np.any(self.lo > self.hi):
            raise InfeasibilityError("empty per-stratum support")
        if self.lo.sum() > self.y_total or int(self.hi.sum()) < self.y_total:
            raise InfeasibilityError(
                "support boxes cannot reach the invariant total"
            )

    @property
    def size(self) -> int:
        return len(self.shape)


def build_kernel_params(counts, table: StrataTable, calib) -> KernelParams:
    """Kernel parameters for the mechanism run on a raw count vector.

    In truncated mode the counts are clamped into the calibration's boxes
    before entering the shapes; in untruncated mode the support is the
    full range [0, y_total] for every stratum. The conditioning total is
    the raw sum, which the clamp never alters.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != table.size:
        raise InfeasibilityError("count vector length does not match the table")
    y_total = int(counts.sum())
    n = table.n.astype(np.float64)
    with np.errstate(divide="ignore"):
        ratio = np.where(n > 0, calib.b / np.maximum(n, 1.0), np.inf)
        log_p = -np.log(2.0 + ratio)
    bounds: TruncationBounds | None = calib.bounds
    if bounds is not None:
        clamped = np.clip(counts, bounds.L, bounds.U)
        lo = bounds.L.copy()
        hi = np.minimum(bounds.U, y_total)
    else:
        clamped = counts
        lo = np.zeros(table.size, dtype=np.int64)
        hi = np.full(table.size, y_total, dtype=np.int64)
    return KernelParams(
        shape=clamped.astype(np.float64) + calib.a,
        log_p=log_p,
        lo=lo,
        hi=hi,
        y_total=y_total,
    )


@dataclass(frozen=True)
class MassTable:
    """Linear-scale weight table with max-normalization.

    vals[t - lo] holds the (scaled) weight of total t; the true log weight
    is log(vals[t - lo]) + offset. vals.max() == 1 after every rebuild.
    """

    lo: int
    vals: np.ndarray
    offset: float

    @property
    def hi(self) -> int:
        return self.lo + len(self.vals) - 1

    def log_at(self, t: int) -> float:
        idx = t - self.lo
        if idx < 0 or idx >= len(self.vals) or self.vals[idx] <= 0.0:
            return -np.inf
        return float(np.log(self.vals[idx]) + self.offset)


def delta_table() -> MassTable:
    return MassTable(lo=0, vals=np.ones(1), offset=0.0)


def stratum_log_weights(params: KernelParams, i: int) -> tuple[int, np.ndarray]:
    """Log kernel weights of stratum i over its support [lo_i, hi_i]."""
    z = np.arange(params.lo[i], params.hi[i] + 1, dtype=np.int64)
    return int(params.lo[i]), log_negbin_kernel(
        z, float(params.shape[i]), float(params.log_p[i])
    )


def stratum_weight_table(params: KernelParams, i: int) -> MassTable:
    lo, logw = stratum_log_weights(params, i)
    peak = float(np.max(logw))
    if not np.isfinite(peak):
        raise InfeasibilityError(
            f"stratum {i} carries no mass anywhere on its support"
        )
    return MassTable(lo=lo, vals=np.exp(logw - peak), offset=peak)


def convolve_mass(weights: MassTable, table: MassTable, cap: int) -> MassTable:
    """One recursion step T_k = w_k * T_{k+1}, truncated above cap.

    Totals beyond cap (the conditioning total) can never be part of a
    feasible draw, so the axis is cut there to keep PA-scale tables at
    O(y_total) length.
    """
    vals = np.convolve(weights.vals, table.vals)
    lo = weights.lo + table.lo
    keep = cap - lo + 1
    if keep <= 0:
        raise InfeasibilityError("mass table slid entirely above the total")
    vals = vals[:keep]
    peak = float(vals.max())
    if peak <= 0.0:
        raise InfeasibilityError("mass table underflowed to zero")
    return MassTable(
        lo=lo, vals=vals / peak, offset=weights.offset + table.offset + np.log(peak)
    )


def log_normalizer(params: KernelParams) -> float:
    """Log of the total kernel mass on the box-and-total slice."""
    running = delta_table()
    for i in range(params.size - 1, -1, -1):
        running = convolve_mass(
            stratum_weight_table(params, i), running, params.y_total
        )
    value = running.log_at(params.y_total)
    if not np.isfinite(value):
        raise InfeasibilityError("the invariant total is unreachable")
    return value
