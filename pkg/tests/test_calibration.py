"""Hyperparameter calibration: fixed points, closed forms, and gates."""

import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgsynth.calibration import (
    MODE_TRUNCATED,
    MODE_UNTRUNCATED,
    calibration_report,
    dirichlet_reduction,
    nu_truncated,
    nu_untruncated,
    solve_hyperparameters,
    untruncated_floor,
)
from pgsynth.errors import (
    CalibrationError,
    DomainError,
    DominanceError,
    InapplicableError,
    InfeasibilityError,
)
from pgsynth.strata import (
    PriorSpec,
    StrataTable,
    TruncationBounds,
    build_prior,
    compute_bounds,
)
from pgsynth.fixtures import demo_rates, demo_table


def homogeneous_instance(size: int, y_total: int):
    counts = np.zeros(size, dtype=np.int64)
    counts[: y_total % size] = y_total // size + 1
    counts[y_total % size:] = y_total // size
    table = StrataTable(
        dim_names=("g",),
        keys=tuple((f"s{i}",) for i in range(size)),
        n=np.full(size, 50),
        y=counts,
    )
    prior = PriorSpec(
        lambda0=np.full(size, y_total / (50.0 * size)),
        rescale_factor=1.0,
        source=None,
    )
    return table, prior


class TestUntruncatedDemo:
    def test_walkthrough_anchors(self, demo):
        table, prior = demo
        t0 = time.perf_counter()
        calib = solve_hyperparameters(table, prior, 1.0, mode=MODE_UNTRUNCATED)
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0
        assert calib.converged
        assert 115.0 <= calib.a[0] <= 118.0
        assert 57.0 <= calib.a[1] <= 60.0
        assert calib.a[0] == pytest.approx(116.18635101, abs=1e-6)
        assert calib.a[1] == pytest.approx(58.19767069, abs=1e-6)
        assert np.all(calib.slack >= -1e-9)
        # fixed mean: b = a / lambda0
        assert np.allclose(calib.b, calib.a / prior.lambda0)

    def test_requirements_hold_at_solution(self, demo):
        # two strata scale the shortfall by (1 - r)+ instead of the
        # indicator reported by nu_untruncated; recompute from scratch
        table, prior = demo
        calib = solve_hyperparameters(table, prior, 1.0, mode=MODE_UNTRUNCATED)
        n = table.n.astype(float)
        y_tot = table.y_total
        for i in range(table.size):
            b_rest = calib.b.sum() - calib.b[i]
            n_rest = n.sum() - n[i]
            r = (b_rest / n_rest + 2.0) / (calib.b[i] / n[i] + 2.0)
            shortfall = max(1.0 - r, 0.0)
            denom = calib.a.sum() - calib.a[i] + y_tot - 1.0
            nu = (y_tot * shortfall + denom) / denom
            required = y_tot / (math.exp(1.0) / nu - 1.0)
            assert calib.a[i] >= required - 1e-9

    def test_deterministic(self, demo):
        table, prior = demo
        one = solve_hyperparameters(table, prior, 1.0, mode=MODE_UNTRUNCATED)
        two = solve_hyperparameters(table, prior, 1.0, mode=MODE_UNTRUNCATED)
        assert np.array_equal(one.a, two.a)


class TestHomogeneousClosedForm:
    @pytest.mark.parametrize("size,y_total", [(2, 100), (3, 60), (5, 26116)])
    @pytest.mark.parametrize("eps", [0.5, 1.0, 2.0])
    def test_floor_is_exact(self, size, y_total, eps):
        # equal rate-to-prior ratios: nu = 1 and a = y/(e^eps - 1) exactly
        table, prior = homogeneous_instance(size, y_total)
        calib = solve_hyperparameters(table, prior, eps, mode=MODE_UNTRUNCATED)
        want = untruncated_floor(y_total, eps)
        assert np.allclose(calib.a, want, rtol=0, atol=1e-6)

    def test_pa_scale_value(self):
        want = 26116 / (math.e - 1.0)
        assert untruncated_floor(26116, 1.0) == pytest.approx(want, abs=1e-9)
        assert want > 15_000


class TestNuFactors:
    def test_indicator_example(self, demo):
        # complement ratio below 1 with a_(i) = 1 and y = 100 doubles nu
        table, _ = demo
        a = np.array([5.0, 1.0])
        b = np.array([5.0 / 0.015, 1.0 / 0.017])
        nu = nu_untruncated(0, a, b, table)
        denom = 1.0 + 100.0 - 1.0
        assert nu == pytest.approx((100.0 + denom) / denom)
        assert nu == pytest.approx(2.0)

    def test_homogeneous_nu_is_one(self):
        table, prior = homogeneous_instance(3, 30)
        a = np.full(3, 4.0)
        b = a / prior.lambda0
        for i in range(3):
            assert nu_untruncated(i, a, b, table) == pytest.approx(1.0)

    def test_truncated_point_box_nu_is_one(self):
        bounds = TruncationBounds(
            L=np.array([5, 0]), U=np.array([5, 10]), alpha=0.01, c=1.0
        )
        assert nu_truncated(0, 3.0, bounds, 10) == pytest.approx(1.0)


class TestTruncatedDemo:
    def test_walkthrough_anchors(self, demo):
        table, prior = demo
        bounds = compute_bounds(prior, table, 1e-4, 1.0)
        calib = solve_hyperparameters(
            table, prior, 1.0, mode=MODE_TRUNCATED, bounds=bounds
        )
        assert calib.converged
        assert 14.0 <= calib.a[0] <= 14.4
        assert calib.a[0] == pytest.approx(14.1792813, abs=1e-6)
        assert calib.a[1] <= 0.01  # rides the shape floor
        assert calib.exchange_rule_applied
        assert calib.bounds.U[0] == 30
        assert calib.bounds.L.tolist() == [3, 70]
        assert calib.bounds.U.tolist() == [30, 97]

    def test_truncated_needs_bounds(self, demo):
        table, prior = demo
        with pytest.raises(DomainError):
            solve_hyperparameters(table, prior, 1.0, mode=MODE_TRUNCATED)

    def test_requirement_much_smaller_than_untruncated(self, demo):
        table, prior = demo
        bounds = compute_bounds(prior, table, 1e-4, 1.0)
        trunc = solve_hyperparameters(
            table, prior, 1.0, mode=MODE_TRUNCATED, bounds=bounds
        )
        untrunc = solve_hyperparameters(table, prior, 1.0, mode=MODE_UNTRUNCATED)
        assert trunc.a[0] < untrunc.a[0] / 5.0


class TestMonotonicity:
    @given(
        eps_lo=st.floats(min_value=0.1, max_value=2.0),
        bump=st.floats(min_value=0.05, max_value=2.0),
    )
    @settings(max_examples=40, deadline=None)
    def test_untruncated_a_shrinks_with_epsilon(self, eps_lo, bump):
        table = demo_table()
        prior = build_prior(table, demo_rates())
        lo = solve_hyperparameters(table, prior, eps_lo, mode=MODE_UNTRUNCATED)
        hi = solve_hyperparameters(
            table, prior, eps_lo + bump, mode=MODE_UNTRUNCATED
        )
        assert np.all(hi.a <= lo.a + 1e-9)

    def test_truncated_a_shrinks_with_epsilon(self, demo):
        table, prior = demo
        bounds = compute_bounds(prior, table, 1e-4, 1.0)
        prev = None
        for eps in (0.25, 0.5, 1.0, 2.0, 4.0):
            calib = solve_hyperparameters(
                table, prior, eps, mode=MODE_TRUNCATED, bounds=bounds
            )
            if prev is not None:
                assert np.all(calib.a <= prev + 1e-9)
            prev = calib.a


class TestGates:
    def test_epsilon_must_be_positive(self, demo):
        table, prior = demo
        for eps in (0.0, -1.0):
            with pytest.raises(DomainError):
                solve_hyperparameters(table, prior, eps, mode=MODE_UNTRUNCATED)

    def test_unknown_mode(self, demo):
        table, prior = demo
        with pytest.raises(DomainError):
            solve_hyperparameters(table, prior, 1.0, mode="mystery")

    def test_dominant_stratum_rejected_in_truncated_mode(self):
        table = StrataTable(
            dim_names=("g",),
            keys=(("x",), ("y",), ("z",)),
            n=np.array([10, 10, 10]),
            y=np.array([8, 1, 1]),
        )
        prior = PriorSpec(
            lambda0=np.array([0.8, 0.1, 0.1]), rescale_factor=1.0, source=None
        )
        bounds = compute_bounds(prior, table, 1e-3, 1.0)
        with pytest.raises(DominanceError):
            solve_hyperparameters(
                table, prior, 1.0, mode=MODE_TRUNCATED, bounds=bounds
            )

    def test_infeasible_boxes_rejected(self, demo):
        table, prior = demo
        bounds = compute_bounds(prior, table, 0.49, 1.0)
        with pytest.raises(InfeasibilityError):
            solve_hyperparameters(
                table, prior, 1.0, mode=MODE_TRUNCATED, bounds=bounds
            )

    def test_improper_prior_rejected(self):
        table = StrataTable(
            dim_names=("g",), keys=(("a",), ("b",)),
            n=np.array([10, 10]), y=np.array([1, 1]),
        )
        prior = PriorSpec(
            lambda0=np.array([0.0, 0.1]), rescale_factor=1.0, source=None
        )
        with pytest.raises(DomainError):
            solve_hyperparameters(table, prior, 1.0, mode=MODE_UNTRUNCATED)


class TestPointBoxes:
    def test_point_box_stratum_rides_the_floor(self):
        table = StrataTable(
            dim_names=("g",),
            keys=(("x",), ("y",), ("z",)),
            n=np.array([30, 40, 30]),
            y=np.array([3, 4, 3]),
        )
        prior = PriorSpec(
            lambda0=np.array([0.1, 0.1, 0.1]), rescale_factor=1.0, source=None
        )
        bounds = TruncationBounds(
            L=np.array([2, 0, 0]), U=np.array([2, 10, 8]), alpha=0.01, c=1.0
        )
        calib = solve_hyperparameters(
            table, prior, 1.0, mode=MODE_TRUNCATED, bounds=bounds
        )
        # a pinned output needs no prior weight of its own
        assert calib.a[0] == pytest.approx(1e-3)


class TestDirichletReduction:
    def test_homogeneous_reduces(self):
        table, prior = homogeneous_instance(2, 6)
        calib = solve_hyperparameters(table, prior, 1.0, mode=MODE_UNTRUNCATED)
        conc = dirichlet_reduction(calib, table)
        assert np.array_equal(conc, calib.a)

    def test_heterogeneous_refuses(self, demo):
        table, prior = demo
        calib = solve_hyperparameters(table, prior, 1.0, mode=MODE_UNTRUNCATED)
        with pytest.raises(InapplicableError):
            dirichlet_reduction(calib, table)


class TestReport:
    def test_report_contents(self, demo):
        table, prior = demo
        bounds = compute_bounds(prior, table, 1e-4, 1.0)
        calib = solve_hyperparameters(
            table, prior, 1.0, mode=MODE_TRUNCATED, bounds=bounds
        )
        doc = calibration_report(calib, table)
        assert doc["mode"] == MODE_TRUNCATED
        assert doc["epsilon"] == 1.0
        assert doc["alpha"] == 1e-4 and doc["c"] == 1.0
        assert doc["exchange_rule_applied"] is True
        assert [s["key"] for s in doc["strata"]] == [["a"], ["b"]]
        assert doc["strata"][0]["U"] == 30
        assert all(s["slack"] >= -1e-9 for s in doc["strata"])
        # nothing confidential: y never appears
        assert "y" not in doc and all("y" not in s for s in doc["strata"])
