import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinkqr import (
    LongitudinalDataset,
    QuantileGrid,
    Subject,
    build_kink_design,
    build_null_design,
    read_csv,
    validate,
    write_csv,
)
from kinkqr.data import kink_design_matrix
from kinkqr.errors import CsvFormatError, InvalidDataError, InvalidInputError


class TestDesignRows:
    def test_kink_boundary_tie_goes_left(self):
        row = build_kink_design(5.0, (), 5.0)
        assert row.values.tolist() == [1.0, 0.0, 0.0]

    def test_kink_left_regime(self):
        row = build_kink_design(3.0, (2.0,), 5.0)
        assert row.values.tolist() == [1.0, -2.0, 0.0, 2.0]

    def test_kink_right_regime(self):
        row = build_kink_design(7.0, (2.0,), 5.0)
        assert row.values.tolist() == [1.0, 0.0, 2.0, 2.0]

    def test_null_rows(self):
        assert build_null_design(3.0, (2.0,)).values.tolist() == [1.0, 3.0, 2.0]
        assert build_null_design(0.0, ()).values.tolist() == [1.0, 0.0]
        assert build_null_design(-1.5, (0.0, 4.0)).values.tolist() == [
            1.0, -1.5, 0.0, 4.0,
        ]

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            build_kink_design(np.nan, (), 5.0)
        with pytest.raises(InvalidInputError):
            build_kink_design(1.0, (np.inf,), 5.0)
        with pytest.raises(InvalidInputError):
            build_null_design(np.inf, ())

    @given(
        x=st.floats(-50, 50),
        t=st.floats(-50, 50),
        z=st.floats(-10, 10),
    )
    @settings(deadline=None, max_examples=200)
    def test_kink_carriers_sum_to_linear_term(self, x, t, z):
        row = build_kink_design(x, (z,), t).values
        assert row[0] == 1.0
        assert row[1] + row[2] == pytest.approx(x - t, abs=1e-12)
        if x != t:
            assert (row[1] != 0.0) != (row[2] != 0.0) or x == t

    def test_t_below_min_x_kills_left_column(self):
        x = np.linspace(1.0, 9.0, 25)
        X = kink_design_matrix(x, None, 0.5)
        assert np.all(X[:, 1] == 0.0)


class TestQuantileGrid:
    def test_strictly_increasing_required(self):
        with pytest.raises(InvalidInputError):
            QuantileGrid((0.5, 0.5))
        with pytest.raises(InvalidInputError):
            QuantileGrid((0.7, 0.3))

    def test_endpoint_margin(self):
        with pytest.raises(InvalidInputError):
            QuantileGrid((0.005,))
        with pytest.raises(InvalidInputError):
            QuantileGrid((0.995,))
        QuantileGrid((0.01, 0.99))  # exactly on the margin is allowed

    def test_of_coerces(self):
        g = QuantileGrid.of(0.5)
        assert g.taus == (0.5,)
        assert QuantileGrid.of([0.3, 0.7]).K == 2


class TestValidation:
    def test_inconsistent_z_dimension(self):
        subs = [
            Subject("a", np.zeros(2), np.ones(2), np.ones((2, 1))),
            Subject("b", np.zeros(2), np.ones(2), np.ones((2, 2))),
        ]
        report = validate(subs)
        assert not report.ok
        assert any("inconsistent z dimension" in e for e in report.errors)
        with pytest.raises(InvalidDataError):
            LongitudinalDataset(subs)

    def test_no_subjects(self):
        report = validate([])
        assert not report.ok
        assert "no subjects" in report.errors[0]

    def test_non_finite_named_with_row(self):
        subs = [
            Subject("a", np.array([1.0, np.nan]), np.ones(2), np.ones((2, 1))),
            Subject("b", np.zeros(2), np.ones(2), np.ones((2, 1))),
        ]
        report = validate(subs)
        assert not report.ok
        assert any("'a'" in e and "row 1" in e for e in report.errors)

    def test_case1_dataset_counts(self, case1_full):
        report = validate(case1_full)
        assert report.ok
        assert report.N == 200
        assert report.n == 1000
        assert report.q == 1
        assert sorted(set(report.counts)) == [4, 5, 6]

    def test_subject_order_preserved(self, case1_small):
        ids = [s.id for s in case1_small.subjects]
        assert ids == sorted(ids, key=lambda v: int(v[1:]))


class TestCsvRoundTrip:
    def test_round_trip_byte_identical(self, case1_small, tmp_path):
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        write_csv(case1_small, p1)
        ds = read_csv(p1)
        write_csv(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert ds.n == case1_small.n
        np.testing.assert_array_equal(ds.y, case1_small.y)

    def test_header_required(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("id,y,x\n1,2,3\n")
        with pytest.raises(CsvFormatError, match="line 1"):
            read_csv(p)

    def test_bad_value_reports_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("subject,y,x\na,1.0,2.0\na,oops,3.0\nb,1,1\n")
        with pytest.raises(CsvFormatError, match="line 3"):
            read_csv(p)

    def test_wrong_field_count_reports_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("subject,y,x,z1\na,1.0,2.0,1.0\na,1.0,2.0\n")
        with pytest.raises(CsvFormatError, match="line 3"):
            read_csv(p)

    def test_z_columns_must_be_named_in_order(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("subject,y,x,w\na,1,2,3\n")
        with pytest.raises(CsvFormatError, match="z1"):
            read_csv(p)

    def test_interleaved_subjects_grouped_by_first_appearance(self, tmp_path):
        p = tmp_path / "mix.csv"
        p.write_text(
            "subject,y,x\n"
            "a,1.0,1.0\n"
            "b,2.0,2.0\n"
            "a,3.0,3.0\n"
            "b,4.0,4.0\n"
        )
        ds = read_csv(p)
        assert [s.id for s in ds.subjects] == ["a", "b"]
        assert ds.subjects[0].y.tolist() == [1.0, 3.0]


class TestImmutability:
    def test_pooled_views_read_only(self, case1_small):
        with pytest.raises(ValueError):
            case1_small.y[0] = 0.0
        with pytest.raises(ValueError):
            case1_small.x[0] = 0.0
