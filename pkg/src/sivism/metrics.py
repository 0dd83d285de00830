"""Sample-based evaluation: k-NN KL divergence, covariance RMSE, predictive log-likelihood."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import log_softmax, logsumexp

from .trainer import fnet_norm, sm_loss_estimate  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

KDTREE_MAX_DIM = 20


@dataclass
class SampleSet:
    data: np.ndarray
    label: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"sample set {self.label!r} has non-finite entries")

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]


def _as_array(s):
    return s.data if isinstance(s, SampleSet) else np.atleast_2d(np.asarray(s, dtype=np.float64))


def write_samples(path, samples, label="", seed=None):
    """CSV, one row per sample, preceded by a single `#` metadata line."""
    arr = _as_array(samples)
    if isinstance(samples, SampleSet):
        label, seed = samples.label or label, samples.seed if samples.seed is not None else seed
    header = f"dim={arr.shape[1]},count={arr.shape[0]},seed={seed},label={label}"
    np.savetxt(path, arr, fmt="%.17g", delimiter=",", header=header, comments="# ")


def read_samples(path):
    with open(path) as fh:
        first = fh.readline()
    meta = {}
    if first.startswith("#"):
        for part in first[1:].strip().split(","):
            k, _, v = part.partition("=")
            meta[k.strip()] = v.strip()
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if "dim" in meta and data.shape[1] != int(meta["dim"]):
        raise ValueError(f"{path}: header says dim={meta['dim']}, rows have {data.shape[1]}")
    seed = meta.get("seed")
    return SampleSet(data, meta.get("label", ""), None if seed in (None, "None") else int(seed))


def _kth_distance(ref, query, k, exclude_self):
    """Distance from each query row to its k-th nearest neighbour in `ref`."""
    kk = k + 1 if exclude_self else k
    if ref.shape[1] <= KDTREE_MAX_DIM:
        d, _ = cKDTree(ref).query(query, k=kk)
        d = d.reshape(len(query), kk)
        return d[:, kk - 1]
    out = np.empty(len(query))
    for s in range(0, len(query), 1024):
        D = cdist(query[s:s + 1024], ref)
        out[s:s + 1024] = np.partition(D, kk - 1, axis=1)[:, kk - 1]
    return out


def knn_kl(p_samples, q_samples, k=5):
    """k-nearest-neighbour estimate of KL(p || q) from samples of p and q.

    Uses the ratio of the k-th neighbour distance of each p-point within q
    to that within the rest of p.  The estimate can come out slightly
    negative; it is returned as is.
    """
    P, Q = _as_array(p_samples), _as_array(q_samples)
    n, d = P.shape
    m = Q.shape[0]
    if Q.shape[1] != d:
        raise ValueError(f"dimension mismatch: {d} vs {Q.shape[1]}")
    if n < k + 1 or m < k + 1:
        raise ValueError(f"need at least k+1={k + 1} samples in each set")
    if P.shape == Q.shape and np.array_equal(P, Q):
        # one set against itself: with leave-one-out distances on both sides the ratio is 1
        return 0.0
    rho = _kth_distance(P, P, k, exclude_self=True)
    nu = _kth_distance(Q, P, k, exclude_self=False)
    zero = (rho <= 0) | (nu <= 0)
    if zero.any():
        log.info("knn_kl: %d zero neighbour distances, jittered by 1e-12", int(zero.sum()))
        rho = np.maximum(rho, 1e-12)
        nu = np.maximum(nu, 1e-12)
    return float(d * np.mean(np.log(nu / rho)) + np.log(m / (n - 1)))


def sample_cov(s):
    X = _as_array(s)
    if X.shape[0] < 2:
        raise ValueError("covariance needs at least 2 samples")
    return np.cov(X, rowvar=False).reshape(X.shape[1], X.shape[1])


def cov_rmse(a, b):
    """RMSE over the upper triangle (diagonal included) of the two sample covariances."""
    A, B = sample_cov(a), sample_cov(b)
    if A.shape != B.shape:
        raise ValueError(f"dimension mismatch: {A.shape[0]} vs {B.shape[0]}")
    iu = np.triu_indices(A.shape[0])
    return float(np.sqrt(np.mean((A[iu] - B[iu]) ** 2)))


def _class_logprobs(beta, Xd, n_classes):
    """log p(y = r | x, beta) with shape (S, N, R)."""
    p = Xd.shape[1]
    if n_classes == 2 and beta.shape[1] == p:
        eta = beta @ Xd.T
        return np.stack([-np.logaddexp(0.0, eta), -np.logaddexp(0.0, -eta)], axis=2)
    B = beta.reshape(beta.shape[0], n_classes, p)
    return log_softmax(np.einsum("ip,srp->sir", Xd, B), axis=2)


def test_loglik(posterior_samples, data, n_param_samples=None, chunk=500):
    """Mean over test points of log (1/S) sum_s p(y | x, beta_s)."""
    beta = _as_array(posterior_samples)
    if n_param_samples is not None:
        beta = beta[:n_param_samples]
    p = data.n_features + 1
    expected = p if data.n_classes == 2 else data.n_classes * p
    if beta.shape[1] not in (expected, data.n_classes * p):
        raise ValueError(f"samples have dimension {beta.shape[1]}, model needs {expected}")
    Xd = data.design
    rows = np.arange(data.n)
    acc = None
    for s in range(0, beta.shape[0], chunk):
        lp = _class_logprobs(beta[s:s + chunk], Xd, data.n_classes)[:, rows, data.y]
        part = logsumexp(lp, axis=0)
        acc = part if acc is None else np.logaddexp(acc, part)
    return float(np.mean(acc - np.log(beta.shape[0])))
