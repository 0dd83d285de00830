"""ELBO-based baselines (SIVI surrogate bound, UIVI) and the MCMC samplers they use.

SIVI ascends a lower bound on the ELBO that replaces log q(x) with a
log-mean over L+1 conditional densities.  UIVI ascends an unbiased ELBO
gradient whose entropy part needs a draw from the reverse conditional
q(z | x), obtained here by a short warm-started HMC chain.  SGLD provides
ground-truth particles.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .diffcore import NonFiniteError, make_optimizer, optimizer_step
from .family import SemiImplicitFamily, conditional_log_density, family_grad_path, linear_map, sample_batch
from .targets import AnnealSchedule, annealed
from .trainer import MetricTrace, TrainingAborted, TrainState, eval_rng

log = logging.getLogger(__name__)


@dataclass
class HmcConfig:
    iterations: int = 10
    burn_in: int = 5
    leapfrog_steps: int = 5
    step_size: float = 0.1
    target_accept: float = 0.67
    adapt: bool = True

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


@dataclass
class ElboConfig:
    """Settings shared by the SIVI and UIVI trainers."""

    iterations: int = 50_000
    batch_size: int = 100
    lr_phi: float = 1e-3
    optimizer_phi: str = "adam"
    anneal: AnnealSchedule | None = None
    eval_cadence: int = 100
    eval_samples: int = 500
    seed: int = 0
    z_dim: int = 3
    mu_hidden: tuple = (50, 50)
    activation: str = "relu"
    log_sigma_init: float = -1.0
    data_batch: int | None = None
    L: int = 50
    growing_L: bool = False
    hmc: HmcConfig = field(default_factory=HmcConfig)
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    max_consecutive_failures: int = 10

    def __post_init__(self):
        if isinstance(self.anneal, dict):
            self.anneal = AnnealSchedule(**self.anneal)
        if isinstance(self.hmc, dict):
            self.hmc = HmcConfig(**self.hmc)
        self.mu_hidden = tuple(self.mu_hidden)
        if self.iterations < 0 or self.batch_size < 1 or self.L < 0:
            raise ValueError("iterations >= 0, batch_size >= 1 and L >= 0 required")
        if not self.lr_phi > 0:
            raise ValueError("lr_phi must be positive")
        if self.eval_cadence < 1:
            raise ValueError("eval_cadence must be >= 1")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_every < 0:
            raise ValueError("lr_decay must lie in (0, 1] and lr_decay_every >= 0")

    def to_dict(self):
        d = asdict(self)
        d["mu_hidden"] = list(self.mu_hidden)
        return d


@dataclass
class SgldConfig:
    n_particles: int = 100
    step_size: float = 1e-4
    iterations: int = 50_000
    init_scale: float = 1.0
    data_batch: int | None = None
    record_every: int = 0            # 0: keep only the final particle set
    record_from: int = 0

    def __post_init__(self):
        if self.n_particles < 1 or self.iterations < 1 or not self.step_size > 0 or not self.init_scale > 0:
            raise ValueError("SGLD settings must all be positive")
        if self.record_every < 0 or not 0 <= self.record_from < self.iterations:
            raise ValueError("record_every >= 0 and 0 <= record_from < iterations required")

    def to_dict(self):
        return asdict(self)


def init_elbo_state(x_dim, config, family=None):
    rng = np.random.default_rng(config.seed)
    if family is None:
        family = SemiImplicitFamily.init(config.z_dim, config.mu_hidden, x_dim, rng,
                                         config.log_sigma_init, config.activation)
    opt = make_optimizer(config.optimizer_phi, config.lr_phi, family.n_params)
    return TrainState(family=family, f_net=None, opt_phi=opt, opt_psi=None, rng=rng)


def _step_target(state, target, config):
    if config.data_batch and getattr(target, "supports_minibatch", False) and config.data_batch < target.data.n:
        idx = state.rng.choice(target.data.n, size=config.data_batch, replace=False)
        target = target.subsample(idx)
    return annealed(target, config.anneal, state.t)


def _ascend(state, config, grad):
    try:
        state.family.set_flat(optimizer_step(state.opt_phi, state.family.flat(), -grad))
        state.consecutive_skips = 0
    except (NonFiniteError, FloatingPointError) as exc:
        state.skipped += 1
        state.consecutive_skips += 1
        log.warning("step %d skipped: %s", state.t, exc)
        if state.consecutive_skips >= config.max_consecutive_failures:
            raise TrainingAborted(f"{state.consecutive_skips} consecutive non-finite steps") from exc


# --- SIVI -------------------------------------------------------------------------

def _surrogate_parts(family, target, batch, aux_z):
    """Shared forward pass; returns what both the value and the gradient need."""
    aux_z = np.asarray(aux_z, dtype=np.float64).reshape(-1, family.z_dim)
    L = aux_z.shape[0]
    zs = np.vstack([batch.z, aux_z])
    means, cache = family.mu.forward(zs)
    m = len(batch)
    M = np.concatenate([means[:m, None, :], np.broadcast_to(means[None, m:, :], (m, L, family.x_dim))], axis=1)
    diff = batch.x[:, None, :] - M                                    # m, L+1, d
    lq = conditional_log_density(family, batch.x[:, None, :], M)      # m, L+1
    denom = logsumexp(lq, axis=1) - np.log(L + 1)
    logp = target.log_density(batch.x)
    values = logp - denom
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("non-finite density in surrogate ELBO")
    return values, lq, diff, cache, m


def sivi_surrogate_elbo(family, target, L, batch, aux_z):
    """Mean over the batch of log p(x) - log[(q(x|z) + sum_l q(x|z_l)) / (L+1)]."""
    aux_z = np.asarray(aux_z, dtype=np.float64).reshape(-1, family.z_dim)
    if aux_z.shape[0] != L:
        raise ValueError(f"expected {L} auxiliary mixing draws, got {aux_z.shape[0]}")
    values, *_ = _surrogate_parts(family, target, batch, aux_z)
    return float(values.mean())


def sivi_gradient(family, target, batch, aux_z):
    """(value, d value / d phi) for the surrogate ELBO on one batch."""
    values, lq, diff, cache, m = _surrogate_parts(family, target, batch, aux_z)
    w = softmax(lq, axis=1)
    inv_var = np.exp(-2.0 * family.log_sigma)
    wr = w[:, :, None] * diff * inv_var                              # m, L+1, d
    gx = target.score(batch.x) + wr.sum(axis=1)                     # M held fixed
    gM = -wr                                                         # x held fixed
    cot = np.vstack([gx + gM[:, 0, :], gM[:, 1:, :].sum(axis=0)])
    g_mu, _ = family.mu.backward(cache, cot)
    r2 = diff * diff * inv_var
    g_ls = (-(w[:, :, None] * (r2 - 1.0)).sum(axis=1) + gx * batch.eps * family.sigma).sum(axis=0)
    return float(values.mean()), np.concatenate([g_mu, g_ls]) / m


def L_schedule(config, t):
    """Linear ramp from L/5 to L over the first half of training when growing_L is set."""
    if not config.growing_L or config.iterations == 0:
        return config.L
    lo = max(config.L // 5, 1)
    frac = min(t / max(config.iterations / 2, 1), 1.0)
    return int(round(lo + (config.L - lo) * frac))


def sivi_step(state, target, config):
    L = L_schedule(config, state.t)
    batch = sample_batch(state.family, config.batch_size, state.rng)
    aux = state.rng.standard_normal((L, state.family.z_dim))
    tgt = _step_target(state, target, config)
    try:
        _, g = sivi_gradient(state.family, tgt, batch, aux)
    except (NonFiniteError, FloatingPointError) as exc:
        g = np.full(state.family.n_params, np.nan)
        log.warning("surrogate ELBO failed at step %d: %s", state.t, exc)
    _ascend(state, config, g)
    state.t += 1
    return state


def _elbo_eval(state, target, config):
    rng = eval_rng(config.seed, state.t)
    batch = sample_batch(state.family, config.eval_samples, rng)
    aux = rng.standard_normal((config.L, state.family.z_dim))
    return {"iteration": state.t,
            "surrogate_elbo": sivi_surrogate_elbo(state.family, target, config.L, batch, aux)}


def _loop(step, target, config, state, extra_record=None, callback=None):
    start = time.perf_counter()
    end = state.t + config.iterations
    while state.t < end:
        step(state, target, config)
        if config.lr_decay_every and state.t % config.lr_decay_every == 0:
            state.opt_phi.step_size *= config.lr_decay
        if state.t % config.eval_cadence == 0:
            rec = _elbo_eval(state, target, config)
            if extra_record:
                rec.update(extra_record(state))
            rec["wall_time"] = time.perf_counter() - start
            state.trace.append(rec)
            if callback is not None:
                callback(state, rec)
    return state


def sivi_train(target, config, state=None, callback=None):
    if state is None:
        state = init_elbo_state(target.dim, config)
    return _loop(sivi_step, target, config, state, callback=callback)


# --- HMC on the reverse conditional ------------------------------------------------

class HmcError(RuntimeError):
    pass


@dataclass
class HmcResult:
    z: np.ndarray
    step_size: float
    accept_rate: float


def _reverse_potential(family, x, z):
    """U(z) = -log N(z; 0, I) - log q(x | z) up to constants, and its gradient."""
    x = np.broadcast_to(x, (len(z), np.shape(x)[-1]))
    U = np.full(len(z), np.inf)
    grad = np.zeros_like(z)
    with np.errstate(over="ignore", invalid="ignore"):
        mean = family.mu(z)
        r = (x - mean) * np.exp(-2.0 * family.log_sigma)
        Uall = 0.5 * (z * z).sum(axis=1) + 0.5 * (r * (x - mean)).sum(axis=1)
    # rows with non-finite energy stay at U = inf and are always rejected
    ok = np.isfinite(Uall)
    if ok.any():
        _, cache = family.mu.forward(z[ok])
        _, gz = family.mu.backward(cache, r[ok], need_params=False)
        U[ok] = Uall[ok]
        grad[ok] = z[ok] - gz
    return U, grad


def hmc_reverse_conditional(family, x, config, rng, z0, step_size=None):
    """Leapfrog HMC targeting q(z | x) for every row of x, started from z0.

    Returns the state after the last iteration.  During burn-in the shared
    step size is nudged toward the target acceptance rate.
    """
    x = np.atleast_2d(x)
    z = np.array(np.atleast_2d(z0), dtype=np.float64)
    eps = config.step_size if step_size is None else float(step_size)
    U, gU = _reverse_potential(family, x, z)
    if not np.all(np.isfinite(U)):
        raise HmcError("non-finite energy at the initial point")
    n_acc = 0.0
    n_prop = 0
    saw_nonfinite = False
    for it in range(config.iterations):
        p = rng.standard_normal(z.shape)
        H0 = U + 0.5 * (p * p).sum(axis=1)
        zn, gn = z.copy(), gU.copy()
        p = p - 0.5 * eps * gn
        for k in range(config.leapfrog_steps):
            zn = zn + eps * p
            Un, gn = _reverse_potential(family, x, zn)
            if k < config.leapfrog_steps - 1:
                p = p - eps * gn
        p = p - 0.5 * eps * gn
        H1 = Un + 0.5 * (p * p).sum(axis=1)
        with np.errstate(invalid="ignore", over="ignore"):
            log_a = np.minimum(H0 - H1, 0.0)
        finite = np.isfinite(log_a)
        saw_nonfinite |= not finite.all()
        log_a = np.where(finite, log_a, -np.inf)
        accept = np.log(rng.uniform(size=len(z))) < log_a
        z[accept], U[accept], gU[accept] = zn[accept], Un[accept], gn[accept]
        rate = float(np.exp(log_a).mean())
        if it < config.burn_in:
            if config.adapt and eps > 0:
                eps *= float(np.exp((rate - config.target_accept) / np.sqrt(it + 1.0)))
        else:
            n_acc += accept.sum()
            n_prop += len(z)
    if n_acc == 0 and saw_nonfinite:
        raise HmcError("every proposal was rejected and energies were non-finite")
    return HmcResult(z, eps, n_acc / max(n_prop, 1))


def exact_reverse_conditional(family, x, rng):
    """Exact draw from q(z | x) when the mean network is a single affine layer."""
    A, b = linear_map(family)
    inv_var = np.exp(-2.0 * family.log_sigma)
    P = np.eye(family.z_dim) + (A.T * inv_var) @ A
    C = np.linalg.inv(P)
    means = (np.atleast_2d(x) - b) * inv_var @ A @ C
    chol = np.linalg.cholesky(C)
    return means + rng.standard_normal(means.shape) @ chol.T


# --- UIVI ---------------------------------------------------------------------------

def uivi_gradient(family, target, batch, z_rev):
    """Unbiased ELBO gradient given one reverse-conditional draw per sample.

    The marginal score at x is replaced by the conditional score at z',
    held constant, and both scores are pushed through dx/dphi.
    """
    mean_rev = family.mu(z_rev)
    score_q = -(batch.x - mean_rev) * np.exp(-2.0 * family.log_sigma)
    gx = target.score(batch.x) - score_q
    if not np.all(np.isfinite(gx)):
        raise NonFiniteError("non-finite score in UIVI gradient")
    return family_grad_path(family, batch, gx, np.zeros_like(gx)) / len(batch)


def uivi_step(state, target, config, reverse_sampler=None):
    batch = sample_batch(state.family, config.batch_size, state.rng)
    if reverse_sampler is None:
        step = state.extra.get("hmc_step_size", config.hmc.step_size)
        res = hmc_reverse_conditional(state.family, batch.x, config.hmc, state.rng, batch.z, step)
        state.extra["hmc_step_size"] = res.step_size
        state.extra["hmc_accept"] = res.accept_rate
        z_rev = res.z
    else:
        z_rev = reverse_sampler(state.family, batch.x, state.rng)
    tgt = _step_target(state, target, config)
    try:
        g = uivi_gradient(state.family, tgt, batch, z_rev)
    except (NonFiniteError, FloatingPointError):
        g = np.full(state.family.n_params, np.nan)
    _ascend(state, config, g)
    state.t += 1
    return state


def uivi_train(target, config, state=None, callback=None):
    if state is None:
        state = init_elbo_state(target.dim, config)
    extra = lambda s: {"hmc_step_size": s.extra.get("hmc_step_size"), "hmc_accept": s.extra.get("hmc_accept")}
    return _loop(uivi_step, target, config, state, extra, callback)


# --- SGLD ---------------------------------------------------------------------------

@dataclass
class SgldResult:
    particles: np.ndarray
    flagged: np.ndarray
    snapshots: list = field(default_factory=list)


def _particle_streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def sgld_run(target, config, seed, init=None, record_every=None, record_from=0, streams=None):
    """Independent SGLD chains  x <- x + (eta/2) S(x) + sqrt(eta) xi,  one RNG stream per particle.

    Particles whose norm exceeds 1e8 are frozen and flagged.  With
    `record_every`, copies of the particle set at those iterations (after
    `record_from`) are kept in `snapshots`; when it is None the config's
    recording settings apply.
    """
    n, d = config.n_particles, target.dim
    if record_every is None:
        record_every, record_from = config.record_every, config.record_from
    gens = streams if streams is not None else _particle_streams(seed, n)
    if len(gens) != n:
        raise ValueError("need one RNG stream per particle")
    if init is None:
        x = np.stack([config.init_scale * g.standard_normal(d) for g in gens])
    else:
        x = np.array(np.broadcast_to(init, (n, d)), dtype=np.float64)
    batch_rng = np.random.default_rng([int(seed), 99])
    eta = config.step_size
    alive = np.ones(n, dtype=bool)
    snaps = []
    chunk = int(max(1, min(config.iterations, 4_000_000 // max(n * d, 1))))
    t = 0
    while t < config.iterations:
        c = min(chunk, config.iterations - t)
        noise = np.stack([g.standard_normal((c, d)) for g in gens], axis=1)   # c, n, d
        for j in range(c):
            tgt = target
            if config.data_batch and getattr(target, "supports_minibatch", False):
                tgt = target.subsample(batch_rng.choice(target.data.n, config.data_batch, replace=False))
            step = 0.5 * eta * tgt.score(x) + np.sqrt(eta) * noise[j]
            x = np.where(alive[:, None], x + step, x)
            bad = ~np.all(np.isfinite(x), axis=1) | (np.linalg.norm(np.nan_to_num(x, nan=np.inf), axis=1) > 1e8)
            if bad.any() and (bad & alive).any():
                log.warning("SGLD: %d particles diverged at iteration %d", int((bad & alive).sum()), t + j)
                alive &= ~bad
            it = t + j + 1
            if record_every and it > record_from and it % record_every == 0:
                snaps.append(x.copy())
        t += c
    return SgldResult(x, np.flatnonzero(~alive), snaps)
