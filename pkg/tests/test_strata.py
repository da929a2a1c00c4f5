"""Strata tables, rates, priors, and truncation boxes."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgsynth.errors import (
    DegeneratePriorError,
    DomainError,
    InfeasibilityError,
    SchemaError,
)
from pgsynth.strata import (
    PriorSpec,
    RatesTable,
    StrataTable,
    build_prior,
    check_dominance,
    clamp_observed,
    compute_bounds,
    joint_feasible_bounds,
)

from _oracles import poisson_quantile_direct


def small_table():
    return StrataTable(
        dim_names=("county", "age"),
        keys=(("c1", "a1"), ("c1", "a2"), ("c2", "a1")),
        n=np.array([100, 200, 50]),
        y=np.array([3, 5, 1]),
    )


class TestStrataTable:
    def test_basic_invariants(self):
        t = small_table()
        assert t.size == 3
        assert t.y_total == 9
        assert t.dim_index("age") == 1
        assert t.column("county") == ("c1", "c1", "c2")

    def test_rejects_single_stratum(self):
        with pytest.raises(DomainError):
            StrataTable(dim_names=("g",), keys=(("a",),), n=np.array([5]),
                        y=np.array([1]))

    def test_rejects_duplicate_keys(self):
        with pytest.raises(SchemaError):
            StrataTable(
                dim_names=("g",), keys=(("a",), ("a",)),
                n=np.array([5, 5]), y=np.array([1, 1]),
            )

    def test_rejects_negative_counts(self):
        with pytest.raises(DomainError):
            StrataTable(
                dim_names=("g",), keys=(("a",), ("b",)),
                n=np.array([5, 5]), y=np.array([1, -1]),
            )

    def test_arrays_frozen(self):
        t = small_table()
        with pytest.raises(ValueError):
            t.y[0] = 99

    def test_csv_roundtrip(self, tmp_path):
        t = small_table()
        path = tmp_path / "s.csv"
        t.to_csv(path, header_comment="roundtrip")
        back = StrataTable.from_csv(path)
        assert back.dim_names == t.dim_names
        assert back.keys == t.keys
        assert np.array_equal(back.n, t.n) and np.array_equal(back.y, t.y)

    def test_csv_schema_error_carries_line_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("county,age,population,count\nc1,a1,10,notanint\n")
        with pytest.raises(SchemaError, match=r"bad\.csv:2"):
            StrataTable.from_csv(path)

    def test_csv_requires_population_count_tail(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("county,age,pop,count\nc1,a1,10,1\n")
        with pytest.raises(SchemaError, match="population,count"):
            StrataTable.from_csv(path)


class TestRatesTable:
    def test_roundtrip_preserves_floats_exactly(self, tmp_path):
        r = RatesTable(dim_names=("age",), rates={("a1",): 0.1234567890123456789,
                                                  ("a2",): 1e-7})
        path = tmp_path / "r.csv"
        r.to_csv(path)
        back = RatesTable.from_csv(path)
        assert back.rates == r.rates

    def test_rejects_negative_rate(self):
        # zero is allowed at the table level; positivity is a prior concern
        with pytest.raises(SchemaError):
            RatesTable(dim_names=("age",), rates={("a1",): -0.1})
        RatesTable(dim_names=("age",), rates={("a1",): 0.0})


class TestBuildPrior:
    def test_rescales_to_match_total(self):
        t = small_table()
        r = RatesTable(dim_names=("age",), rates={("a1",): 0.004, ("a2",): 0.02})
        prior = build_prior(t, r)
        assert prior.expected_counts(t).sum() == pytest.approx(t.y_total)
        # relative mix is untouched by the rescale
        lam = prior.lambda0
        assert lam[0] / lam[2] == pytest.approx(1.0)
        assert lam[1] / lam[0] == pytest.approx(5.0)

    def test_missing_rate_key_is_schema_error(self):
        t = small_table()
        r = RatesTable(dim_names=("age",), rates={("a1",): 0.004})
        with pytest.raises(SchemaError, match="a2"):
            build_prior(t, r)

    def test_zero_total_rate_mass_rejected(self):
        t = StrataTable(
            dim_names=("age",), keys=(("a1",), ("a2",)),
            n=np.array([0, 0]), y=np.array([2, 3]),
        )
        r = RatesTable(dim_names=("age",), rates={("a1",): 0.1, ("a2",): 0.1})
        with pytest.raises(DegeneratePriorError):
            build_prior(t, r)


class TestComputeBounds:
    def test_quantile_levels(self, demo):
        table, prior = demo
        alpha, c = 1e-4, 1.0
        b = compute_bounds(prior, table, alpha, c)
        E = prior.expected_counts(table)
        for i in range(table.size):
            lo = poisson_quantile_direct(alpha / 2, E[i] / c)
            hi = min(poisson_quantile_direct(1 - 2 * alpha, E[i] * c),
                     table.y_total)
            assert b.L[i] == lo and b.U[i] == hi
        # the pinned walkthrough box
        assert b.U[0] == 30 and b.L[0] == 3

    def test_c_widens_boxes(self, demo):
        table, prior = demo
        b1 = compute_bounds(prior, table, 1e-4, 1.0)
        b2 = compute_bounds(prior, table, 1e-4, 2.0)
        assert np.all(b2.L <= b1.L) and np.all(b2.U >= b1.U)

    def test_upper_clamped_to_total(self, demo):
        table, prior = demo
        b = compute_bounds(prior, table, 1e-4, 1.0)
        assert np.all(b.U <= table.y_total)

    @given(
        alpha=st.floats(min_value=1e-8, max_value=0.4),
        c=st.floats(min_value=1.0, max_value=5.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_boxes_always_well_formed(self, alpha, c):
        from pgsynth.fixtures import demo_rates, demo_table

        table = demo_table()
        prior = build_prior(table, demo_rates())
        b = compute_bounds(prior, table, alpha, c)
        assert np.all(b.L <= b.U)
        assert np.all(b.L >= 0)

    def test_bad_knobs_rejected(self, demo):
        table, prior = demo
        with pytest.raises(DomainError):
            compute_bounds(prior, table, 0.0, 1.0)
        with pytest.raises(DomainError):
            compute_bounds(prior, table, 1e-4, 0.5)


class TestDominance:
    def test_two_strata_always_flag_one(self, demo):
        table, prior = demo
        report = check_dominance(prior, table)
        assert not report.passed
        assert report.flagged.tolist() == [False, True]  # E = (15, 85)

    def test_balanced_three_passes(self, tiny3):
        table, prior = tiny3
        assert check_dominance(prior, table).passed


class TestClampAndExchange:
    def test_clamp_observed(self, demo):
        table, prior = demo
        b = compute_bounds(prior, table, 1e-4, 1.0)
        r = clamp_observed(table, b)
        assert np.all(r.y_clamped >= b.L) and np.all(r.y_clamped <= b.U)
        assert r.clamped_count == int(r.clamped_mask.sum())
        # idempotent
        assert np.array_equal(
            np.clip(r.y_clamped, b.L, b.U), r.y_clamped
        )

    def test_exchange_boxes_pin_the_pair(self, demo):
        # with two strata the sum constraint tightens both boxes:
        # z2 = 100 - z1, so z2 inherits [100-U1, 100-L1] intersected
        table, prior = demo
        b = compute_bounds(prior, table, 1e-4, 1.0)
        jb = joint_feasible_bounds(b, table.y_total)
        assert jb.L.tolist() == [3, 70]
        assert jb.U.tolist() == [30, 97]
        total = table.y_total
        assert jb.L[1] == total - b.U[0] and jb.U[1] == total - b.L[0]

    def test_infeasible_boxes_raise(self, demo):
        table, prior = demo
        b = compute_bounds(prior, table, 0.49, 1.0)
        with pytest.raises(InfeasibilityError, match=r"\[91, 91\]"):
            joint_feasible_bounds(b, table.y_total)


class TestPriorSpec:
    def test_direct_construction_keeps_raw_rates(self):
        t = small_table()
        p = PriorSpec(lambda0=np.array([0.1, 0.2, 0.3]), rescale_factor=1.0,
                      source=None)
        assert p.expected_counts(t).tolist() == [10.0, 40.0, 15.0]
