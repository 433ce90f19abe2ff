import math

import numpy as np
import pytest

from staggercox.core import expand_dataset
from staggercox.heartdata import (HEART_SHA256, compare_fixed_vs_timevarying, default_heart_path,
                                  file_sha256, fit_pseudo_truth, ingest_heart,
                                  semi_synthetic_study, simulate_semi_synthetic,
                                  summary_table, write_heart_csv)

TABLE1 = {"age": (45.17, 9.80), "surgery": (0.16, 0.36), "year": (3.36, 1.86),
          "trt": (0.67, 0.47)}
# (coef, se, p) as printed for the fixed and time-varying models
TABLE3 = {
    "fixed": {"trt": (-1.504, 0.292, 0.00), "age:trt": (-0.259, 0.285, 0.36),
              "surgery:trt": (-2.191, 0.778, 0.00), "year:trt": (0.206, 0.261, 0.43)},
    "time_varying": {"trt": (0.117, 0.340, 0.73), "age:trt": (0.286, 0.254, 0.26),
                     "surgery:trt": (-0.557, 0.777, 0.47), "year:trt": (0.421, 0.260, 0.11)},
}


@pytest.fixture(scope="module")
def heart():
    return ingest_heart(verify_checksum=True)


def test_bundled_file_checksum():
    assert file_sha256(default_heart_path()) == HEART_SHA256


def test_subject_count(heart):
    assert len(heart) == 103
    assert heart.column_names == ("age", "surgery", "year")


def test_table1(heart):
    for name, mean, sd in summary_table(heart):
        m, s = TABLE1[name]
        assert abs(mean - m) <= 0.01 and abs(sd - s) <= 0.01, name


def test_episode_counts(heart):
    tab = expand_dataset(heart)
    transplanted = int(np.isfinite(heart.A).sum())
    assert transplanted == 69
    assert len(tab.start) == 103 + transplanted
    counts = np.bincount(tab.subject, minlength=103)
    assert set(counts[~np.isfinite(heart.A)]) == {1}
    assert set(counts[np.isfinite(heart.A)]) == {2}


def _write(path, rows):
    path.write_text("id,age,year,surgery,wait_time,futime,fustat\n" + "\n".join(rows) + "\n")


def test_missing_wait_is_never_treated(tmp_path):
    p = tmp_path / "h.csv"
    _write(p, ["1,50,2.0,0,,100,1", "2,40,1.0,1,NA,30,0", "3,45,3.0,0,10,20,1"])
    d = ingest_heart(p)
    assert math.isinf(d.A[0]) and math.isinf(d.A[1]) and d.A[2] == 10
    tab = expand_dataset(d)
    assert list(tab.subject) == [0, 1, 2, 2]
    assert not tab.treated[0] and not tab.treated[1]


def test_late_transplant_clamped_with_warning(tmp_path):
    p = tmp_path / "h.csv"
    _write(p, ["1,50,2.0,0,100,100,1", "2,40,1.0,1,5,30,0"])
    with pytest.warns(RuntimeWarning, match="never transplanted"):
        d = ingest_heart(p)
    assert math.isinf(d.A[0]) and d.A[1] == 5


def test_malformed_rows_report_line(tmp_path):
    p = tmp_path / "h.csv"
    _write(p, ["1,50,2.0,0,,100,1", "2,forty,1.0,1,,30,0"])
    with pytest.raises(ValueError, match=r"h\.csv:3: age"):
        ingest_heart(p)
    _write(p, ["1,50,2.0,0,,100,1", "2,40,1.0,1,,30"])
    with pytest.raises(ValueError, match=r":3: expected 7 fields"):
        ingest_heart(p)
    _write(p, ["1,50,2.0,0,,0,1"])
    with pytest.raises(ValueError, match=r":2: .*futime"):
        ingest_heart(p)


def test_checksum_mismatch(tmp_path):
    p = tmp_path / "h.csv"
    _write(p, ["1,50,2.0,0,,100,1"])
    with pytest.raises(ValueError, match="sha256"):
        ingest_heart(p, verify_checksum=True)


def test_round_trip(heart, tmp_path):
    p = tmp_path / "copy.csv"
    write_heart_csv(heart, p)
    again = ingest_heart(p)
    np.testing.assert_array_equal(again.ids, heart.ids)
    np.testing.assert_array_equal(again.X, heart.X)
    np.testing.assert_array_equal(again.A, heart.A)
    np.testing.assert_array_equal(again.U, heart.U)
    np.testing.assert_array_equal(again.event, heart.event)


def test_table3(heart):
    tables = compare_fixed_vs_timevarying(heart)
    for model, expected in TABLE3.items():
        t = tables[model]
        for term, (coef, se, _) in expected.items():
            row = t.row(term)
            assert abs(row["coef"] - coef) <= 0.1, (model, term, row)
            print(f"{model:13s} {term:12s} coef {row['coef']:+.3f} (target {coef:+.3f}) "
                  f"se {row['se']:.3f} (target {se:.3f}) p {row['p']:.3f}")
    fixed, tv = tables["fixed"], tables["time_varying"]
    for term in ("trt", "surgery:trt"):
        assert fixed.row(term)["p"] < 0.01
        assert tv.row(term)["p"] > 0.1
    for term in ("age:trt", "year:trt"):
        assert fixed.row(term)["p"] > 0.1 and tv.row(term)["p"] > 0.1
    # main-effect terms are present in both models
    assert fixed.terms == tv.terms == ("age", "surgery", "year", "trt", "age:trt",
                                        "surgery:trt", "year:trt")


def test_table3_raw_scale_differs_only_in_scaled_terms(heart):
    raw = compare_fixed_vs_timevarying(heart, standardize=False)["fixed"]
    std = compare_fixed_vs_timevarying(heart)["fixed"]
    assert raw.row("surgery:trt")["coef"] == pytest.approx(std.row("surgery:trt")["coef"], abs=1e-6)
    sd_age = heart.X[:, 0].std(ddof=1)
    assert raw.row("age:trt")["coef"] * sd_age == pytest.approx(std.row("age:trt")["coef"],
                                                                   abs=1e-6)


def test_semi_synthetic_replication_shapes(heart):
    truth = fit_pseudo_truth(heart, seed=0)
    assert truth.data.X.shape == (103, 2)
    d1 = simulate_semi_synthetic(truth, 5)
    d2 = simulate_semi_synthetic(truth, 5)
    np.testing.assert_array_equal(d1.A, d2.A)
    np.testing.assert_array_equal(d1.U, d2.U)
    assert np.all(d1.U <= truth.censor_time + 1e-9)
    assert 0 < d1.event.mean() < 1


@pytest.mark.slow
def test_semi_synthetic_one_rep_deterministic(heart):
    a = semi_synthetic_study(heart, reps=1, seed=3)
    b = semi_synthetic_study(heart, reps=1, seed=3)
    assert len(a.rows()) == 4
    assert {(r["method"], r["eta_basis"]) for r in a.rows()} == {
        (m, e) for m in ("s_lasso", "tv_csl") for e in ("linear", "complex")}
    assert a.rows() == b.rows()
