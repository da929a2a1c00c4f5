"""Independent reference implementations used to check the package.

Everything here is computed with mpmath arbitrary precision and direct
summation/enumeration, deliberately avoiding the package's own numerics
(scipy special functions, log-space convolutions) so agreement is
evidence rather than tautology.
"""

from __future__ import annotations

import itertools
import math

import mpmath as mp

mp.mp.dps = 60


def poisson_cdf_direct(k: int, mu: float):
    """P(Poisson(mu) <= k) by direct summation."""
    if k < 0:
        return mp.mpf(0)
    mu = mp.mpf(mu)
    total = mp.mpf(0)
    term = mp.e ** (-mu)
    for j in range(k + 1):
        if j > 0:
            term = term * mu / j
        total += term
    return total


def poisson_quantile_direct(q: float, mu: float) -> int:
    """Smallest k with cdf(k) >= q, by scanning."""
    k = 0
    while poisson_cdf_direct(k, mu) < mp.mpf(q):
        k += 1
        if k > 10_000_000:
            raise RuntimeError("quantile scan ran away")
    return k


def log_kernel_direct(z: int, shape: float, p: float):
    """log of Gamma(z + shape) / (z! Gamma(shape)) * p^z.

    The negative-binomial kernel without its (1-p)^shape normalizer,
    which cancels in every conditioned-law ratio. A zero shape is the
    point mass at zero.
    """
    if shape == 0.0:
        return mp.mpf(0) if z == 0 else mp.mpf("-inf")
    z = mp.mpf(z)
    shape = mp.mpf(shape)
    return (
        mp.loggamma(z + shape)
        - mp.loggamma(z + 1)
        - mp.loggamma(shape)
        + z * mp.log(p)
    )


def boxed_compositions(total: int, lo, hi):
    """All integer vectors with lo <= z <= hi and sum(z) == total."""
    k = len(lo)

    def rec(i, remaining):
        if i == k - 1:
            if lo[i] <= remaining <= hi[i]:
                yield (remaining,)
            return
        rest_lo = sum(lo[i + 1:])
        rest_hi = sum(hi[i + 1:])
        for v in range(lo[i], hi[i] + 1):
            if rest_lo <= remaining - v <= rest_hi:
                for tail in rec(i + 1, remaining - v):
                    yield (v,) + tail

    yield from rec(0, total)


def conditioned_law_direct(total: int, shapes, ps, lo, hi):
    """Exact mechanism law by enumeration: dict z -> probability (mpf).

    shapes are the posterior Gamma shapes (clamped counts plus a), ps the
    success fractions n/(b + 2n); strata with p == 0 are degenerate point
    masses at zero.
    """
    weights = {}
    for z in boxed_compositions(total, lo, hi):
        lw = mp.mpf(0)
        for zi, sh, p in zip(z, shapes, ps):
            if p == 0.0:
                if zi != 0:
                    lw = mp.mpf("-inf")
                    break
                continue
            lw += log_kernel_direct(zi, sh, p)
        if lw != mp.mpf("-inf"):
            weights[z] = mp.e**lw
    norm = sum(weights.values())
    if norm == 0:
        raise ValueError("empty support")
    return {z: w / norm for z, w in weights.items()}


def dirichlet_multinomial_pmf(z, a):
    """Closed-form Dirichlet-multinomial pmf at z with concentrations a."""
    total = sum(z)
    a_sum = mp.mpf(sum(a))
    log_p = (
        mp.loggamma(total + 1)
        + mp.loggamma(a_sum)
        - mp.loggamma(total + a_sum)
    )
    for zi, ai in zip(z, a):
        log_p += mp.loggamma(zi + ai) - mp.loggamma(zi + 1) - mp.loggamma(ai)
    return mp.e**log_p


def multinomial_log_pmf(z, probs):
    """log Multinomial(sum z, probs) at z, direct."""
    total = sum(z)
    out = mp.loggamma(total + 1)
    for zi, pi in zip(z, probs):
        out -= mp.loggamma(zi + 1)
        if zi > 0:
            out += zi * mp.log(mp.mpf(pi))
    return out


def normalizer_direct(total: int, shapes, ps, lo, hi):
    """Sum of unnormalized kernel products over the boxed simplex."""
    out = mp.mpf(0)
    for z in boxed_compositions(total, lo, hi):
        lw = mp.mpf(0)
        dead = False
        for zi, sh, p in zip(z, shapes, ps):
            if p == 0.0:
                if zi != 0:
                    dead = True
                    break
                continue
            lw += log_kernel_direct(zi, sh, p)
        if not dead:
            out += mp.e**lw
    return out


def total_variation(pmf_a: dict, pmf_b: dict) -> float:
    keys = set(pmf_a) | set(pmf_b)
    return float(
        sum(abs(pmf_a.get(k, mp.mpf(0)) - pmf_b.get(k, mp.mpf(0))) for k in keys) / 2
    )


def truncated_binomial_pmf(k: int, n: int, p: float, lo: int, hi: int):
    """Binomial(n, p) restricted to [lo, hi], exact."""
    if not lo <= k <= hi:
        return mp.mpf(0)
    num = mp.binomial(n, k) * mp.mpf(p) ** k * mp.mpf(1 - p) ** (n - k)
    den = sum(
        mp.binomial(n, j) * mp.mpf(p) ** j * mp.mpf(1 - p) ** (n - j)
        for j in range(lo, hi + 1)
    )
    return num / den


def neighbor_pairs(total: int, size: int):
    """All ordered dataset pairs differing by one unit transfer."""
    datasets = [
        z for z in itertools.product(range(total + 1), repeat=size)
        if sum(z) == total
    ]
    for y in datasets:
        for i in range(size):
            for j in range(size):
                if i != j and y[i] > 0:
                    x = list(y)
                    x[i] -= 1
                    x[j] += 1
                    yield y, tuple(x)


def clamp(values, lo, hi):
    return [min(max(v, l), h) for v, l, h in zip(values, lo, hi)]


def gamma_log_density(x, shape, rate):
    x, shape, rate = mp.mpf(x), mp.mpf(shape), mp.mpf(rate)
    return shape * mp.log(rate) - mp.loggamma(shape) + (shape - 1) * mp.log(x) - rate * x


def binom(n: int, k: int) -> int:
    return math.comb(n, k)
