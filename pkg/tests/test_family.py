import numpy as np
import pytest

from sivism.diffcore import MLP
from sivism.family import (
    SemiImplicitFamily,
    conditional_score,
    family_grad_path,
    linear_family,
    linear_map,
    linear_marginal_cov,
    load_family,
    oracle_marginal_score,
    reparameterize,
    sample_batch,
    save_family,
)
from sivism.targets import GaussianTarget
from sivism.trainer import sm_objective


def gaussian_logpdf(x, mean, sigma):
    r = (x - mean) / sigma
    return -0.5 * np.sum(r * r) - np.sum(np.log(sigma)) - 0.5 * len(x) * np.log(2 * np.pi)


def test_reparameterization_identity_exact():
    fam = SemiImplicitFamily.init(3, (8,), 2, np.random.default_rng(0))
    b = sample_batch(fam, 50, np.random.default_rng(1))
    assert np.array_equal(b.x, fam.mu(b.z) + fam.sigma * b.eps)


def test_standard_normal_case():
    fam = SemiImplicitFamily(MLP.zeros([2, 4, 2]), np.zeros(2))
    x = fam.sample(1_000_000, np.random.default_rng(2))
    assert np.all(np.abs(x.mean(axis=0)) < 4e-3)


def test_variance_is_law_of_total_variance():
    A = np.array([[0.8, -0.3, 0.1], [0.2, 0.5, -1.0]])
    fam = linear_family(A, 0.0)
    x = fam.sample(400_000, np.random.default_rng(3))
    expected = (A**2).sum(axis=1) + 1.0
    se = np.sqrt(2 * expected**2 / len(x))
    assert np.all(np.abs(x.var(axis=0) - expected) < 4 * se)


def test_sampling_is_deterministic():
    fam = SemiImplicitFamily.init(3, (8,), 2, np.random.default_rng(0))
    a = sample_batch(fam, 10, np.random.default_rng(7))
    b = sample_batch(fam, 10, np.random.default_rng(7))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.z, b.z)


def test_conditional_score_cases():
    fam = SemiImplicitFamily(MLP.zeros([2, 2]), np.zeros(2))
    b = reparameterize(fam, np.zeros((1, 2)), np.array([[1.0, -2.0]]))
    assert np.array_equal(conditional_score(fam, b), [[-1.0, 2.0]])
    b0 = reparameterize(fam, np.zeros((1, 2)), np.zeros((1, 2)))
    assert np.array_equal(conditional_score(fam, b0), np.zeros((1, 2)))


def test_conditional_score_matches_fd():
    rng = np.random.default_rng(4)
    fam = SemiImplicitFamily.init(2, (5,), 3, rng, log_sigma=0.0)
    fam.log_sigma = rng.normal(size=3)
    b = sample_batch(fam, 1, rng)
    mean = fam.mu(b.z[0])
    h = 1e-6
    fd = [(gaussian_logpdf(b.x[0] + h * e, mean, fam.sigma) - gaussian_logpdf(b.x[0] - h * e, mean, fam.sigma)) / (2 * h)
          for e in np.eye(3)]
    assert np.allclose(conditional_score(fam, b)[0], fd, rtol=1e-6, atol=1e-9)


def test_oracle_marginal_score():
    x = np.array([[1.0, -2.0], [0.5, 0.25]])
    assert np.allclose(oracle_marginal_score(np.zeros((2, 2)), np.ones(2), x), -x)
    assert np.allclose(oracle_marginal_score(np.eye(2), np.ones(2), x), -x / 2)
    rng = np.random.default_rng(5)
    A = rng.normal(size=(3, 2))
    sigma = np.array([0.5, 1.0, 1.5])
    tgt = GaussianTarget(np.zeros(3), linear_marginal_cov(A, sigma))
    pts = rng.normal(size=(4, 3))
    assert np.allclose(oracle_marginal_score(A, sigma, pts), tgt.score(pts))
    h = 1e-6
    fd = np.array([[(tgt.log_density(p + h * e) - tgt.log_density(p - h * e)) / (2 * h) for e in np.eye(3)] for p in pts])
    assert np.allclose(oracle_marginal_score(A, sigma, pts), fd, rtol=1e-6, atol=1e-8)


def test_oracle_singular_raises():
    with pytest.raises(np.linalg.LinAlgError):
        oracle_marginal_score(np.ones((2, 1)) * 1e4, np.array([1e-8, 1e-8]), np.ones(2))


def test_linear_map_roundtrip():
    A = np.arange(6.0).reshape(2, 3)
    Aout, b = linear_map(linear_family(A, -1.0))
    assert np.array_equal(Aout, A) and np.array_equal(b, np.zeros(2))


def test_grad_path_zero_and_score_branch():
    fam = SemiImplicitFamily.init(2, (4,), 2, np.random.default_rng(6))
    b = sample_batch(fam, 3, np.random.default_rng(7))
    assert np.array_equal(family_grad_path(fam, b, np.zeros((3, 2)), np.zeros((3, 2))), np.zeros(fam.n_params))
    # d(-exp(-s) eps)/ds = exp(-s) eps
    g = family_grad_path(fam, b, np.zeros((3, 2)), np.ones((3, 2)))
    assert np.allclose(g[-2:], (b.eps / fam.sigma).sum(axis=0))
    assert np.all(g[:-2] == 0)


def test_full_phi_gradient_matches_fd():
    from sivism.trainer import phi_gradient

    rng = np.random.default_rng(8)
    fam = SemiImplicitFamily.init(2, (4,), 2, rng, log_sigma=-0.5, activation="tanh")
    fnet = MLP.init([2, 6, 2], rng, "tanh")
    target = GaussianTarget([0.5, -0.2], [[1.0, 0.4], [0.4, 0.7]])
    z, eps = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    b = reparameterize(fam, z, eps)
    g = phi_gradient(b, target, fnet, fam)
    flat = fam.flat()

    def J(v):
        f2 = fam.copy()
        f2.set_flat(v)
        return sm_objective(reparameterize(f2, z, eps), target, fnet, f2)[0]

    h = 1e-6
    for i in range(len(flat)):
        e = np.zeros_like(flat)
        e[i] = h
        fd = (J(flat + e) - J(flat - e)) / (2 * h)
        assert abs(fd - g[i]) <= 1e-5 * max(abs(fd), 1e-4), i


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    fam = SemiImplicitFamily.init(3, (7, 5), 2, np.random.default_rng(9))
    fam.log_sigma = np.array([np.pi, -1 / 3])
    save_family(tmp_path / "fam.json", fam)
    back = load_family(tmp_path / "fam.json")
    assert np.array_equal(back.flat(), fam.flat())
    assert back.mu.spec == fam.mu.spec


def test_linear_family_fisher_norm_converges():
    # E|grad log q(x)|^2 = tr(C^-1) for the Gaussian marginal
    rng = np.random.default_rng(10)
    A = rng.normal(size=(2, 3))
    fam = linear_family(A, np.log([0.7, 1.2]))
    C = linear_marginal_cov(A, fam.sigma)
    x = fam.sample(100_000, rng)
    s = oracle_marginal_score(A, fam.sigma, x)
    vals = (s * s).sum(axis=1)
    assert abs(vals.mean() - np.trace(np.linalg.inv(C))) < 3 * vals.std() / np.sqrt(len(vals))


def test_denoising_identity_inner_products():
    """E f(x).grad log q(x|z) equals E f(x).grad log q(x) for any fixed f."""
    rng = np.random.default_rng(11)
    A = rng.normal(size=(2, 2))
    fam = linear_family(A, np.log([0.6, 0.9]))
    f = MLP.init([2, 16, 2], np.random.default_rng(12), "tanh")
    b = sample_batch(fam, 100_000, rng)
    fx = f(b.x)
    cond = (fx * conditional_score(fam, b)).sum(axis=1)
    marg = (fx * oracle_marginal_score(A, fam.sigma, b.x)).sum(axis=1)
    d = cond - marg
    assert abs(d.mean()) < 3 * d.std() / np.sqrt(len(d))
