import json

import numpy as np
import pytest
import scipy.linalg

from ipdgi.metrics import (MetricReport, exposure_rate, fid, improvement, ndcg_at_k,
                           sparsity, sparsity_of)

from conftest import make_catalog


def test_exposure_rate_brute_force():
    ranks = {"a": np.array([1, 5, 6, 11]), "b": np.array([2, 3, 20, 7])}
    # k=5: item a has 2/4 users inside, item b has 2/4
    assert exposure_rate(ranks, 5) == pytest.approx(0.5)
    # k=10: a -> 3/4, b -> 3/4
    assert exposure_rate(ranks, 10) == pytest.approx(0.75)
    assert exposure_rate(ranks, 1) == pytest.approx((1 / 4 + 0) / 2)


def test_ndcg_values():
    ranks = {"a": np.array([1])}
    assert ndcg_at_k(ranks, 5) == pytest.approx(1.0)
    ranks = {"a": np.array([5])}
    assert ndcg_at_k(ranks, 5) == pytest.approx(1.0 / np.log2(6))
    ranks = {"a": np.array([6])}
    assert ndcg_at_k(ranks, 5) == 0.0
    mixed = {"a": np.array([1, 6]), "b": np.array([2, 2])}
    expected_a = (1.0 + 0.0) / 2
    expected_b = (1 / np.log2(3) + 1 / np.log2(3)) / 2
    assert ndcg_at_k(mixed, 5) == pytest.approx((expected_a + expected_b) / 2)


def test_metric_input_validation():
    with pytest.raises(ValueError):
        exposure_rate({}, 5)
    with pytest.raises(ValueError):
        exposure_rate({"a": np.array([1])}, 0)
    with pytest.raises(ValueError):
        ndcg_at_k({"a": np.array([1])}, -1)


def _fid_oracle(a, b, shrink=1e-6):
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    s1 = np.cov(a, rowvar=False) + shrink * np.eye(a.shape[1])
    s2 = np.cov(b, rowvar=False) + shrink * np.eye(b.shape[1])
    covmean = scipy.linalg.sqrtm(s1 @ s2)
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * covmean.real))


def test_fid_matches_scipy_sqrtm():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(300, 6))
    b = rng.normal(loc=0.3, scale=1.4, size=(400, 6))
    ours = fid(a, b)
    oracle = _fid_oracle(a, b)
    assert ours == pytest.approx(oracle, rel=1e-6, abs=1e-8)


def test_fid_identity_is_zero():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(200, 8))
    assert fid(a, a.copy()) == pytest.approx(0.0, abs=1e-7)


def test_fid_rejects_bad_shapes():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        fid(rng.normal(size=(10, 3)), rng.normal(size=(10, 4)))
    with pytest.raises(ValueError):
        fid(rng.normal(size=(1, 3)), rng.normal(size=(10, 3)))


def test_improvement():
    assert improvement(0.010, 0.015) == pytest.approx(50.0)
    assert improvement(0.010, 0.005) == pytest.approx(-50.0)
    assert improvement(100.0, 25.0, lower_is_better=True) == pytest.approx(75.0)
    with pytest.raises(ValueError):
        improvement(0.0, 1.0)


def test_sparsity():
    assert sparsity(10, 10, 30) == pytest.approx(70.0)
    catalog = make_catalog(n_users=6, n_items=8, per_user=4)
    assert sparsity_of(catalog) == pytest.approx(100.0 * (1 - 24 / 48))


def test_report_round_trip(tmp_path):
    report = MetricReport(ks=[5, 10], seed=3, corpus={"users": 10})
    report.set_cell("vbpr", "none", 5, er=0.01, target_ndcg=0.02, overall_ndcg=0.3)
    report.set_cell("vbpr", "ipdgi", 5, er=0.02, target_ndcg=0.03, overall_ndcg=0.29)
    report.set_fid("ipdgi", 12.5)
    path = tmp_path / "report.json"
    report.save(path)
    loaded = MetricReport.load(path)
    assert loaded.cell("vbpr", "ipdgi", 5)["er"] == pytest.approx(0.02)
    assert loaded.fids["ipdgi"] == pytest.approx(12.5)
    assert loaded.ks == [5, 10]

    rows = loaded.rows()
    attacked = [r for r in rows if r["condition"] == "ipdgi" and r["k"] == 5][0]
    assert attacked["er_improvement_pct"] == pytest.approx(100.0)
    assert attacked["overall_ndcg_change_pct"] == pytest.approx(100 * (0.29 - 0.3) / 0.3)
    md = loaded.markdown()
    assert "vbpr" in md and "ipdgi" in md


def test_report_schema_version_check(tmp_path):
    report = MetricReport(ks=[5], seed=0, corpus={})
    path = tmp_path / "r.json"
    report.save(path)
    doc = json.loads(path.read_text())
    doc["schema_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        MetricReport.load(path)
