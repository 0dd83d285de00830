"""Semi-implicit variational family with N(0, I) mixing and a Gaussian conditional.

    z ~ N(0, I_zdim),   x | z ~ N(mu(z), diag(sigma^2)),   sigma = exp(log_sigma)

sigma is a free vector, not a function of z.  Samples keep z, eps and the
forward cache of mu so gradients can be pushed back through x = mu(z) + sigma*eps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .diffcore import MLP, MLPSpec, ShapeError

CHECKPOINT_VERSION = 1


@dataclass
class SemiImplicitFamily:
    mu: MLP
    log_sigma: np.ndarray

    def __post_init__(self):
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        if self.log_sigma.shape != (self.mu.spec.out_width,):
            raise ShapeError("log_sigma", self.mu.spec.out_width, self.log_sigma.shape)

    @classmethod
    def init(cls, z_dim, hidden, x_dim, rng, log_sigma=-1.0, activation="relu"):
        mu = MLP.init([z_dim, *hidden, x_dim], rng, activation)
        return cls(mu, np.full(x_dim, float(log_sigma)))

    @property
    def z_dim(self):
        return self.mu.spec.in_width

    @property
    def x_dim(self):
        return self.mu.spec.out_width

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    @property
    def n_params(self):
        return self.mu.spec.n_params + self.x_dim

    def flat(self):
        return np.concatenate([self.mu.params, self.log_sigma])

    def set_flat(self, v):
        k = self.mu.spec.n_params
        self.mu.params = np.array(v[:k])
        self.log_sigma = np.array(v[k:])

    def copy(self):
        return SemiImplicitFamily(self.mu.copy(), self.log_sigma.copy())

    def sample(self, n, rng):
        return sample_batch(self, n, rng).x

    def to_dict(self):
        return {"mu": self.mu.to_dict(), "log_sigma": self.log_sigma.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(MLP.from_dict(d["mu"]), np.array(d["log_sigma"], dtype=np.float64))


def linear_family(A, log_sigma):
    """The tractable case mu(z) = A z, whose marginal is N(0, A A^T + diag(sigma^2))."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    spec = MLPSpec((A.shape[1], A.shape[0]))
    params = np.concatenate([A.T.ravel(), np.zeros(A.shape[0])])
    return SemiImplicitFamily(MLP(spec, params), np.broadcast_to(log_sigma, (A.shape[0],)).copy())


def linear_map(family):
    """(A, b) of a single-layer mean network."""
    if len(family.mu.spec.layer_widths) != 2:
        raise ValueError("mean network is not a single affine layer")
    k = family.z_dim * family.x_dim
    W = family.mu.params[:k].reshape(family.z_dim, family.x_dim)
    return W.T.copy(), family.mu.params[k:].copy()


@dataclass
class ReparamSample:
    """A batch of reparameterized draws, one row per sample."""

    x: np.ndarray
    z: np.ndarray
    eps: np.ndarray
    cache: tuple = field(default=None, repr=False)

    def __len__(self):
        return self.x.shape[0]


def sample_batch(family, m, rng):
    if m < 1:
        raise ValueError("batch size must be at least 1")
    z = rng.standard_normal((m, family.z_dim))
    eps = rng.standard_normal((m, family.x_dim))
    return reparameterize(family, z, eps)


def reparameterize(family, z, eps):
    mean, cache = family.mu.forward(z)
    x = mean + family.sigma * eps
    return ReparamSample(x, np.asarray(z, dtype=np.float64), np.asarray(eps, dtype=np.float64), cache)


def conditional_score(family, sample):
    """grad_x log q(x | z) = -eps / sigma."""
    return -sample.eps / family.sigma


def conditional_log_density(family, x, mean):
    """log N(x; mean, diag(sigma^2)), broadcasting over leading axes."""
    r = (x - mean) / family.sigma
    return -0.5 * (r * r).sum(axis=-1) - family.log_sigma.sum() - 0.5 * family.x_dim * np.log(2.0 * np.pi)


def linear_marginal_cov(A, sigma):
    A = np.atleast_2d(A)
    return A @ A.T + np.diag(np.asarray(sigma, dtype=np.float64) ** 2)


def oracle_marginal_score(A, sigma, x):
    """Exact grad_x log q(x) when mu(z) = A z:  -(A A^T + diag(sigma^2))^-1 x."""
    C = linear_marginal_cov(A, sigma)
    if np.linalg.cond(C) > 1e12:
        raise np.linalg.LinAlgError("marginal covariance is numerically singular")
    x = np.asarray(x, dtype=np.float64)
    return -np.linalg.solve(C, x.T).T


def family_grad_path(family, sample, upstream_x, upstream_score):
    """Flat gradient w.r.t. (mu params, log_sigma) given dL/dx and dL/d(conditional score).

    Both upstream arrays have one row per sample; contributions are summed
    over rows.  The sample path is x = mu(z) + sigma*eps, the score path is
    -eps*exp(-log_sigma).
    """
    gx = np.atleast_2d(np.asarray(upstream_x, dtype=np.float64))
    gs = np.atleast_2d(np.asarray(upstream_score, dtype=np.float64))
    if gx.shape != sample.x.shape or gs.shape != sample.x.shape:
        raise ShapeError("upstream gradient", family.x_dim, (gx.shape, gs.shape))
    cache = sample.cache
    if cache is None:
        _, cache = family.mu.forward(sample.z)
    g_mu, _ = family.mu.backward(cache, gx)
    sigma = family.sigma
    g_ls = (gx * sample.eps * sigma).sum(axis=0) + (gs * sample.eps / sigma).sum(axis=0)
    return np.concatenate([g_mu, g_ls])


def save_json(path, payload):
    # json writes floats with repr, which round-trips float64 exactly
    with open(path, "w") as fh:
        json.dump({"version": CHECKPOINT_VERSION, **payload}, fh)


def load_json(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    return payload


def save_family(path, family):
    save_json(path, {"family": family.to_dict()})


def load_family(path):
    return SemiImplicitFamily.from_dict(load_json(path)["family"])
