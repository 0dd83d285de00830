"""Target posteriors: unnormalized log-density, score and score-Jacobian products.

All methods take either one point of shape (d,) or a batch of shape (n, d)
and return matching shapes.  `hvp(x, v)` is the Hessian of the log-density
at x applied to v, row by row; the minimax trainer differentiates S(x)
through the sample path with it.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, logsumexp, softmax

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


def _rows(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {x.shape}")
    return X, single


class Target:
    """Base class.  Subclasses implement the batched `_logp`, `_score`, `_hvp`."""

    dim: int
    name = "target"
    supports_minibatch = False

    def log_density(self, x):
        X, single = _rows(x, self.dim)
        out = self._logp(X)
        return out[0] if single else out

    def score(self, x):
        X, single = _rows(x, self.dim)
        out = self._score(X)
        return out[0] if single else out

    def hvp(self, x, v):
        X, single = _rows(x, self.dim)
        V, _ = _rows(v, self.dim)
        out = self._hvp(X, V)
        return out[0] if single else out

    def sample(self, n, rng):
        raise NotImplementedError(f"{self.name} has no exact sampler")


class GaussianTarget(Target):
    """N(mean, cov); mostly used as a tractable reference."""

    name = "gaussian"

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        self.dim = self.mean.shape[0]
        self.prec = np.linalg.inv(self.cov)
        self._chol = np.linalg.cholesky(self.cov)
        self._logdet = 2.0 * np.log(np.diag(self._chol)).sum()

    def _logp(self, X):
        r = X - self.mean
        return -0.5 * np.einsum("ni,ij,nj->n", r, self.prec, r) - 0.5 * (self._logdet + self.dim * LOG_2PI)

    def _score(self, X):
        return -(X - self.mean) @ self.prec

    def _hvp(self, X, V):
        return -V @ self.prec

    def sample(self, n, rng):
        return self.mean + rng.standard_normal((n, self.dim)) @ self._chol.T


class GaussianMixtureTarget(Target):
    def __init__(self, weights, means, covs, name="mixture"):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.covs = np.asarray(covs, dtype=np.float64)
        self.dim = self.means.shape[1]
        self.name = name
        self.precs = np.linalg.inv(self.covs)
        self.chols = np.linalg.cholesky(self.covs)
        logdets = 2.0 * np.log(np.diagonal(self.chols, axis1=1, axis2=2)).sum(axis=1)
        self._const = np.log(self.weights) - 0.5 * (logdets + self.dim * LOG_2PI)

    def _parts(self, X):
        r = X[:, None, :] - self.means[None]                      # n,K,d
        pr = np.einsum("kij,nkj->nki", self.precs, r)             # P_k r
        comp = self._const - 0.5 * np.einsum("nki,nki->nk", r, pr)
        return comp, -pr

    def _logp(self, X):
        comp, _ = self._parts(X)
        return logsumexp(comp, axis=1)

    def _score(self, X):
        comp, s = self._parts(X)
        resp = softmax(comp, axis=1)
        return np.einsum("nk,nki->ni", resp, s)

    def _hvp(self, X, V):
        comp, s = self._parts(X)
        resp = softmax(comp, axis=1)
        total = np.einsum("nk,nki->ni", resp, s)
        pv = np.einsum("kij,nj->nki", self.precs, V)
        sv = np.einsum("nki,ni->nk", s, V)
        return (np.einsum("nk,nki->ni", resp, -pv + s * sv[:, :, None])
                - total * np.einsum("ni,ni->n", total, V)[:, None])

    def sample(self, n, rng):
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[k] + np.einsum("nij,nj->ni", self.chols[k], eps)


class BananaTarget(Target):
    """x = (v1, v1^2 + v2 + 1) with v ~ N(0, cov); the map has unit Jacobian."""

    name = "banana"
    dim = 2

    def __init__(self, cov=((1.0, 0.9), (0.9, 1.0))):
        self.base = GaussianTarget(np.zeros(2), cov)

    @staticmethod
    def to_v(X):
        return np.stack([X[:, 0], X[:, 1] - X[:, 0] ** 2 - 1.0], axis=1)

    def _logp(self, X):
        return self.base._logp(self.to_v(X))

    def _score(self, X):
        g = self.base._score(self.to_v(X))
        return np.stack([g[:, 0] - 2.0 * X[:, 0] * g[:, 1], g[:, 1]], axis=1)

    def _hvp(self, X, V):
        g = self.base._score(self.to_v(X))
        # J = [[1, 0], [-2 x1, 1]];  H = J^T (-P) J + diag(-2 g2, 0)
        Jv = np.stack([V[:, 0], V[:, 1] - 2.0 * X[:, 0] * V[:, 0]], axis=1)
        u = -Jv @ self.base.prec
        out = np.stack([u[:, 0] - 2.0 * X[:, 0] * u[:, 1], u[:, 1]], axis=1)
        out[:, 0] += -2.0 * g[:, 1] * V[:, 0]
        return out

    def sample(self, n, rng):
        v = self.base.sample(n, rng)
        return np.stack([v[:, 0], v[:, 0] ** 2 + v[:, 1] + 1.0], axis=1)


def banana_target():
    return BananaTarget()


def multimodal_target():
    return GaussianMixtureTarget([0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]],
                                 [np.eye(2), np.eye(2)], name="multimodal")


def xshaped_target():
    return GaussianMixtureTarget([0.5, 0.5], [[0.0, 0.0], [0.0, 0.0]],
                                 [[[2.0, 1.8], [1.8, 2.0]], [[2.0, -1.8], [-1.8, 2.0]]],
                                 name="xshaped")


# --- annealing ------------------------------------------------------------------

@dataclass(frozen=True)
class AnnealSchedule:
    beta0: float = 1.0
    ramp_iterations: int = 0

    def __post_init__(self):
        if not 0.0 < self.beta0 <= 1.0:
            raise ValueError("beta0 must lie in (0, 1]")
        if self.ramp_iterations < 0:
            raise ValueError("ramp_iterations must be non-negative")

    def beta(self, t):
        if self.ramp_iterations == 0 or t >= self.ramp_iterations:
            return 1.0
        return self.beta0 + (1.0 - self.beta0) * t / self.ramp_iterations


class TemperedTarget(Target):
    def __init__(self, base, beta):
        self.base = base
        self.beta = float(beta)
        self.dim = base.dim
        self.name = base.name

    def _logp(self, X):
        return self.beta * self.base._logp(X)

    def _score(self, X):
        return self.beta * self.base._score(X)

    def _hvp(self, X, V):
        return self.beta * self.base._hvp(X, V)


def annealed(target, schedule, t):
    if t < 0:
        raise ValueError("t must be non-negative")
    if schedule is None:
        return target
    beta = schedule.beta(t)
    return target if beta == 1.0 else TemperedTarget(target, beta)


# --- generalized linear models ---------------------------------------------------

@dataclass
class GlmDataset:
    """Covariates without the intercept column, plus 0-based integer labels."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int = 2
    name: str = "data"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y).astype(np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"covariates {self.X.shape} and labels {self.y.shape} disagree")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("dataset contains missing or non-finite covariates")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def design(self):
        return np.hstack([np.ones((self.n, 1)), self.X])

    def subset(self, idx):
        return GlmDataset(self.X[idx], self.y[idx], self.n_classes, self.name)

    def split(self, n_train):
        return self.subset(np.arange(n_train)), self.subset(np.arange(n_train, self.n))

    def standardized(self, ref=None):
        """Columns centred and scaled with the statistics of `ref` (default: self).

        Constant columns are only centred.
        """
        ref = self if ref is None else ref
        mean = ref.X.mean(axis=0)
        sd = ref.X.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return GlmDataset((self.X - mean) / sd, self.y, self.n_classes, self.name)


class LogisticTarget(Target):
    """Bayesian logistic regression with an N(0, alpha^-1 I) prior."""

    name = "logistic"
    supports_minibatch = True

    def __init__(self, data, alpha=0.01, scale=1.0):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        if data.n and not np.all((data.y == 0) | (data.y == 1)):
            raise ValueError("logistic regression needs labels in {0, 1}")
        self.data = data
        self.alpha = float(alpha)
        self.scale = float(scale)
        self.Xd = data.design
        self.yf = data.y.astype(np.float64)
        self.dim = data.n_features + 1

    def subsample(self, idx):
        sub = LogisticTarget(self.data.subset(idx), self.alpha)
        sub.scale = self.data.n / max(len(idx), 1)
        return sub

    def _logp(self, X):
        eta = X @ self.Xd.T
        ll = (self.yf * eta - np.logaddexp(0.0, eta)).sum(axis=1)
        return self.scale * ll - 0.5 * self.alpha * (X * X).sum(axis=1)

    def _score(self, X):
        eta = X @ self.Xd.T
        return self.scale * (self.yf - expit(eta)) @ self.Xd - self.alpha * X

    def _hvp(self, X, V):
        p = expit(X @ self.Xd.T)
        w = p * (1.0 - p)
        return -self.scale * (w * (V @ self.Xd.T)) @ self.Xd - self.alpha * V


class MultinomialTarget(Target):
    """Softmax regression, standard normal prior on beta = (beta_1, ..., beta_R)."""

    name = "multinomial"
    supports_minibatch = True

    def __init__(self, data, scale=1.0):
        self.data = data
        self.scale = float(scale)
        self.R = data.n_classes
        self.p = data.n_features + 1
        self.Xd = data.design
        self.onehot = np.eye(self.R)[data.y]
        self.dim = self.R * self.p

    def subsample(self, idx):
        sub = MultinomialTarget(self.data.subset(idx))
        sub.scale = self.data.n / max(len(idx), 1)
        return sub

    def _logits(self, X):
        B = X.reshape(-1, self.R, self.p)
        return np.einsum("ip,nrp->nir", self.Xd, B)

    def _logp(self, X):
        lsm = log_softmax(self._logits(X), axis=2)
        ll = np.einsum("nir,ir->n", lsm, self.onehot)
        return self.scale * ll - 0.5 * (X * X).sum(axis=1)

    def _score(self, X):
        P = softmax(self._logits(X), axis=2)
        g = np.einsum("nir,ip->nrp", self.onehot[None] - P, self.Xd)
        return self.scale * g.reshape(X.shape[0], -1) - X

    def _hvp(self, X, V):
        P = softmax(self._logits(X), axis=2)
        U = self._logits(V)                                      # V_r . x_i
        pu = P * U
        inner = pu - P * pu.sum(axis=2, keepdims=True)
        g = np.einsum("nir,ip->nrp", inner, self.Xd)
        return -self.scale * g.reshape(X.shape[0], -1) - V


def logistic_target(data, alpha=0.01):
    return LogisticTarget(data, alpha)


def multinomial_target(data):
    return MultinomialTarget(data)


# --- datasets ---------------------------------------------------------------------

def load_csv(path, n_classes=None, label_base=0, name=None):
    """Comma-separated covariates with the label in the last column; header optional."""
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(t) for t in first.strip().split(",")]
        skip = 0
    except ValueError:
        skip = 1
    raw = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    y = raw[:, -1].astype(np.int64) - label_base
    if n_classes is None:
        n_classes = int(y.max()) + 1
    return GlmDataset(raw[:, :-1], y, n_classes, name or os.path.basename(path))


def waveform_synthetic(n=400, seed=0):
    """Breiman's waveform generator (21 covariates), class 0 against the rest.

    Each covariate row is a random convex combination of two of three shifted
    triangular waves plus unit Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    i = np.arange(1, 22)
    h1 = np.maximum(6.0 - np.abs(i - 11), 0.0)
    h2 = np.maximum(6.0 - np.abs(i - 15), 0.0)
    h3 = np.maximum(6.0 - np.abs(i - 7), 0.0)
    pairs = [(h1, h2), (h1, h3), (h2, h3)]
    cls = rng.integers(0, 3, size=n)
    u = rng.uniform(size=(n, 1))
    a = np.stack([pairs[c][0] for c in cls])
    b = np.stack([pairs[c][1] for c in cls])
    X = u * a + (1.0 - u) * b + rng.standard_normal((n, 21))
    return GlmDataset(X, (cls == 0).astype(np.int64), 2, "waveform-synthetic")


def load_waveform(path=None, n=400, seed=0):
    """Waveform data from a UCI-format CSV if one is available, else the synthetic twin."""
    if path is None:
        root = os.environ.get("SIVISM_DATA_DIR")
        cand = os.path.join(root, "waveform.data") if root else None
        path = cand if cand and os.path.exists(cand) else None
    if path is None:
        return waveform_synthetic(n, seed)
    data = load_csv(path, n_classes=3, name="waveform")
    return GlmDataset(data.X[:n], (data.y[:n] == 0).astype(np.int64), 2, "waveform")


def digits_dataset(n=None, seed=0):
    """8x8 handwritten digits bundled with scikit-learn, pixels scaled to [0, 1].

    Serves as the desk-scale stand-in for downsampled MNIST (10 classes, 64 pixels).
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    idx = np.random.default_rng(seed).permutation(len(d.target))
    if n is not None:
        idx = idx[:n]
    return GlmDataset(d.data[idx] / 16.0, d.target[idx], 10, "digits")


def synthetic_multinomial(n=600, n_features=20, n_classes=5, seed=0):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n_classes, n_features + 1))
    X = rng.standard_normal((n, n_features))
    logits = np.hstack([np.ones((n, 1)), X]) @ W.T
    g = rng.gumbel(size=logits.shape)
    return GlmDataset(X, np.argmax(logits + g, axis=1), n_classes, "synthetic-multinomial")


TOYS = {"banana": banana_target, "multimodal": multimodal_target, "xshaped": xshaped_target}
