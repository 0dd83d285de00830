import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import expit
from scipy.stats import norm

import sivism.metrics as metrics
from sivism.metrics import SampleSet, cov_rmse, knn_kl, read_samples, test_loglik as predictive_loglik, write_samples
from sivism.targets import GlmDataset


def test_identical_distributions_near_zero():
    rng = np.random.default_rng(0)
    assert abs(knn_kl(rng.normal(size=(100_000, 2)), rng.normal(size=(100_000, 2)))) <= 0.01


def test_unit_shift_gaussians():
    rng = np.random.default_rng(1)
    est = knn_kl(rng.normal(size=(100_000, 1)), rng.normal(1.0, size=(100_000, 1)))
    assert abs(est - 0.5) <= 0.05


def test_knn_kl_invariances():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(3000, 2))
    Q = rng.normal(size=(2500, 2)) * [1.5, 0.7] + 0.3
    base = knn_kl(P, Q)
    assert knn_kl(P[rng.permutation(3000)], Q[rng.permutation(2500)]) == pytest.approx(base, rel=1e-12)
    R, _ = np.linalg.qr(rng.normal(size=(2, 2)))
    assert knn_kl(P @ R.T, Q @ R.T) == pytest.approx(base, rel=1e-9)


def test_brute_force_path_agrees(monkeypatch):
    rng = np.random.default_rng(3)
    P, Q = rng.normal(size=(800, 3)), rng.normal(0.5, size=(900, 3))
    tree = knn_kl(P, Q)
    monkeypatch.setattr(metrics, "KDTREE_MAX_DIM", 0)
    assert knn_kl(P, Q) == pytest.approx(tree, rel=1e-10)


def test_duplicates_are_jittered(caplog):
    P = np.zeros((20, 2))
    P[10:] = 1.0
    Q = np.vstack([P, [[3.0, 3.0]]])
    with caplog.at_level("INFO"):
        val = knn_kl(P, Q)
    assert np.isfinite(val) and "jittered" in caplog.text


def test_set_against_itself_is_zero():
    P = np.random.default_rng(9).normal(size=(500, 2))
    assert knn_kl(P, P.copy()) == 0.0


def test_knn_kl_errors():
    with pytest.raises(ValueError):
        knn_kl(np.zeros((10, 2)), np.zeros((10, 3)))
    with pytest.raises(ValueError):
        knn_kl(np.random.default_rng(0).normal(size=(5, 2)), np.zeros((10, 2)))
    with pytest.raises(ValueError):
        SampleSet(np.array([[np.inf, 0.0]]))


def test_cov_rmse_cases():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(100_000, 2))
    b = rng.normal(size=(100_000, 2))
    assert cov_rmse(a, a) == 0.0
    assert cov_rmse(a, b) <= 0.02
    assert cov_rmse(a, b) == cov_rmse(b, a)
    with pytest.raises(ValueError):
        cov_rmse(a[:1], b)
    with pytest.raises(ValueError):
        cov_rmse(a, rng.normal(size=(10, 3)))


def test_cov_rmse_upper_triangle_count():
    a = np.array([[0.0, 0.0], [2.0, 0.0]])       # cov [[2, 0], [0, 0]]
    b = np.array([[0.0, 0.0], [0.0, 0.0]])
    assert cov_rmse(a, b) == pytest.approx(np.sqrt(4.0 / 3.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cov_rmse_symmetric_and_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(40, 3))
    assert cov_rmse(a, b) == cov_rmse(b, a) > 0
    assert cov_rmse(a, a[rng.permutation(30)]) < 1e-12


def test_loglik_uniform_predictives():
    binary = GlmDataset(np.array([[0.3, -1.0], [2.0, 0.5]]), np.array([1, 0]))
    assert predictive_loglik(np.zeros((1, 3)), binary) == pytest.approx(np.log(0.5))
    multi = GlmDataset(np.array([[0.3], [1.0], [-2.0]]), np.array([0, 2, 1]), n_classes=3)
    assert predictive_loglik(np.zeros((4, 6)), multi) == pytest.approx(np.log(1 / 3))


def test_loglik_dimension_mismatch():
    data = GlmDataset(np.zeros((2, 2)), np.array([0, 1]))
    with pytest.raises(ValueError):
        predictive_loglik(np.zeros((3, 5)), data)


def test_loglik_monotone_in_predictive_probability():
    data = GlmDataset(np.array([[1.0], [1.0]]), np.array([1, 1]))
    vals = [predictive_loglik(np.array([[0.0, b]]), data) for b in (-2.0, 0.0, 0.5, 3.0)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_loglik_matches_quadrature_on_one_parameter():
    # intercept-only model; parameter samples are stratified normal quantiles
    mean, sd = 0.4, 0.9
    S = 8000
    beta = norm.ppf((np.arange(S) + 0.5) / S, mean, sd)[:, None]
    data = GlmDataset(np.zeros((3, 0)), np.array([1, 0, 1]))
    p1, _ = integrate.quad(lambda b: expit(b) * norm.pdf(b, mean, sd), -np.inf, np.inf)
    exact = (2 * np.log(p1) + np.log(1 - p1)) / 3
    assert abs(predictive_loglik(beta, data) - exact) <= 1e-3


def test_loglik_chunking_is_invisible():
    rng = np.random.default_rng(5)
    data = GlmDataset(rng.normal(size=(20, 2)), rng.integers(0, 3, 20), n_classes=3)
    beta = rng.normal(size=(1000, 9))
    assert predictive_loglik(beta, data, chunk=7) == pytest.approx(predictive_loglik(beta, data, chunk=5000), rel=1e-12)


def test_sample_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    X = rng.normal(size=(50, 3)) * 1e-7 + np.pi
    write_samples(tmp_path / "s.csv", SampleSet(X, "q", 11))
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "# dim=3,count=50,seed=11,label=q"
    back = read_samples(tmp_path / "s.csv")
    assert np.array_equal(back.data, X) and back.seed == 11 and back.label == "q"


def test_sample_csv_header_mismatch(tmp_path):
    (tmp_path / "bad.csv").write_text("# dim=3,count=1,seed=0,label=x\n1.0,2.0\n")
    with pytest.raises(ValueError):
        read_samples(tmp_path / "bad.csv")
