"""Headless oracle battery behind `sivism check`.

Each check returns (passed, detail).  Everything here runs in well under a
minute on one core.
"""
from __future__ import annotations

import numpy as np

from .baselines import HmcConfig, hmc_reverse_conditional, sivi_gradient, sivi_surrogate_elbo
from .diffcore import MLP, mlp_forward, mlp_vjp
from .family import (
    SemiImplicitFamily,
    conditional_score,
    linear_family,
    linear_marginal_cov,
    oracle_marginal_score,
    reparameterize,
    sample_batch,
)
from .metrics import knn_kl
from .targets import TOYS, GaussianTarget, logistic_target, waveform_synthetic
from .trainer import phi_gradient, psi_gradient, sm_objective


def _fd_check(fn, theta, grad, coords, h=1e-6, rtol=1e-5):
    worst = 0.0
    for i in coords:
        e = np.zeros_like(theta)
        e[i] = h
        fd = (fn(theta + e) - fn(theta - e)) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), 1e-3))
    return worst <= rtol, f"max rel err {worst:.2e} over {len(coords)} coords"


def check_mlp_vjp():
    rng = np.random.default_rng(0)
    net = MLP.init([3, 16, 16, 2], rng, "tanh")
    x, c = rng.normal(size=3), rng.normal(size=2)
    gp, _ = mlp_vjp(net.spec, net.params, x, c)
    coords = rng.choice(net.spec.n_params, 60, replace=False)
    return _fd_check(lambda p: c @ mlp_forward(net.spec, p, x), net.params, gp, coords)


def check_target_scores():
    rng = np.random.default_rng(1)
    worst = 0.0
    tgts = [f() for f in TOYS.values()] + [logistic_target(waveform_synthetic(100, 1))]
    for t in tgts:
        x = rng.normal(scale=0.3, size=t.dim)
        s = t.score(x)
        h = 1e-6
        fd = np.array([(t.log_density(x + h * e) - t.log_density(x - h * e)) / (2 * h) for e in np.eye(t.dim)])
        worst = max(worst, np.max(np.abs(fd - s)) / max(np.max(np.abs(fd)), 1e-8))
    return worst <= 1e-4, f"max rel err {worst:.2e} over {len(tgts)} targets"


def _toy_setup(seed):
    rng = np.random.default_rng(seed)
    fam = SemiImplicitFamily.init(3, (10, 10), 2, rng, log_sigma=-0.5, activation="tanh")
    fam.log_sigma = rng.normal(scale=0.3, size=2) - 0.5
    f = MLP.init([2, 12, 12, 2], rng, "tanh")
    z, eps = rng.normal(size=(8, 3)), rng.normal(size=(8, 2))
    return rng, fam, f, z, eps


def check_phi_gradient():
    rng, fam, f, z, eps = _toy_setup(2)
    tgt = TOYS["banana"]()
    g = phi_gradient(reparameterize(fam, z, eps), tgt, f, fam)

    def J(v):
        f2 = fam.copy()
        f2.set_flat(v)
        return sm_objective(reparameterize(f2, z, eps), tgt, f, f2)[0]

    return _fd_check(J, fam.flat(), g, rng.choice(fam.n_params, 60, replace=False))


def check_psi_gradient():
    rng, fam, f, z, eps = _toy_setup(3)
    tgt = TOYS["multimodal"]()
    b = reparameterize(fam, z, eps)
    g = psi_gradient(b, tgt, f, fam)

    def J(p):
        return sm_objective(b, tgt, MLP(f.spec, p), fam)[0]

    return _fd_check(J, f.params, g, rng.choice(f.spec.n_params, 60, replace=False))


def check_surrogate_gradient():
    rng, fam, _, z, eps = _toy_setup(4)
    tgt = TOYS["xshaped"]()
    aux = rng.normal(size=(9, 3))
    _, g = sivi_gradient(fam, tgt, reparameterize(fam, z, eps), aux)

    def J(v):
        f2 = fam.copy()
        f2.set_flat(v)
        return sivi_surrogate_elbo(f2, tgt, 9, reparameterize(f2, z, eps), aux)

    return _fd_check(J, fam.flat(), g, rng.choice(fam.n_params, 60, replace=False))


def check_half_fisher(n=100_000):
    rng = np.random.default_rng(5)
    A = rng.normal(size=(2, 3))
    fam = linear_family(A, np.log([0.7, 1.2]))
    tgt = GaussianTarget([0.2, -0.4], [[1.3, 0.5], [0.5, 0.9]])
    C = linear_marginal_cov(A, fam.sigma)
    B = np.linalg.inv(C) - tgt.prec
    c = tgt.prec @ tgt.mean
    f = MLP.zeros([2, 2])
    f.params = np.concatenate([B.T.ravel(), c])
    _, terms = sm_objective(sample_batch(fam, n, rng), tgt, f, fam)
    half_fd = 0.5 * (np.trace(B @ C @ B.T) + c @ c)
    se = terms.std() / np.sqrt(n)
    return abs(terms.mean() - half_fd) < 3 * se, f"objective {terms.mean():.5f} vs {half_fd:.5f} (se {se:.1e})"


def check_denoising_identity(n=100_000):
    rng = np.random.default_rng(6)
    A = rng.normal(size=(2, 2))
    fam = linear_family(A, np.log([0.6, 0.9]))
    f = MLP.init([2, 8, 2], rng, "tanh")
    b = sample_batch(fam, n, rng)
    fx = f(b.x)
    d = (fx * (conditional_score(fam, b) - oracle_marginal_score(A, fam.sigma, b.x))).sum(axis=1)
    se = d.std() / np.sqrt(n)
    return abs(d.mean()) < 3 * se, f"mean difference {d.mean():.2e} (se {se:.1e})"


def check_knn_kl():
    rng = np.random.default_rng(7)
    est = knn_kl(rng.normal(size=(100_000, 1)), rng.normal(1.0, size=(100_000, 1)))
    return abs(est - 0.5) <= 0.05, f"KL(N(0,1) || N(1,1)) estimate {est:.4f}, exact 0.5"


def check_hmc_conjugate(n=10_000):
    rng = np.random.default_rng(8)
    A = np.array([[1.0, -0.3], [0.4, 0.8]])
    fam = linear_family(A, np.log([0.5, 0.7]))
    b = sample_batch(fam, n, rng)
    z = hmc_reverse_conditional(fam, b.x, HmcConfig(), rng, b.z).z
    P = np.eye(2) + (A.T / fam.sigma**2) @ A
    C = np.linalg.inv(P)
    mean = (b.x / fam.sigma**2) @ A @ C
    w = np.linalg.solve(np.linalg.cholesky(C), (z - mean).T).T
    ok = np.all(np.abs(w.mean(axis=0)) < 3 / np.sqrt(n)) and np.all(np.abs(w.var(axis=0) - 1) < 3 * np.sqrt(2 / n))
    return bool(ok), f"standardized mean {np.round(w.mean(axis=0), 4)}, var {np.round(w.var(axis=0), 4)}"


CHECKS = [
    ("mlp vjp vs finite differences", check_mlp_vjp),
    ("target scores vs finite differences", check_target_scores),
    ("minimax phi-gradient vs finite differences", check_phi_gradient),
    ("minimax psi-gradient vs finite differences", check_psi_gradient),
    ("surrogate ELBO gradient vs finite differences", check_surrogate_gradient),
    ("objective at exact residual = half Fisher divergence", check_half_fisher),
    ("conditional/marginal score inner products agree", check_denoising_identity),
    ("knn KL on unit-shifted Gaussians", check_knn_kl),
    ("HMC reverse conditional, conjugate moments", check_hmc_conjugate),
]


def run_checks(verbose=True):
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:          # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
