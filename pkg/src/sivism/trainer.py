"""Minimax score-matching training of a semi-implicit family.

The shared objective, for a batch of reparameterized draws, is

    J(phi, psi) = mean_i  f(x_i).(S(x_i) + eps_i / sigma) - 0.5 |f(x_i)|^2

phi descends it and psi ascends it.  At the psi-optimum f is the score
residual S - grad log q and J equals half the Fisher divergence.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import MLP, NonFiniteError, make_optimizer, mlp_input_jacobian, optimizer_step
from .family import SemiImplicitFamily, conditional_score, family_grad_path, sample_batch
from .targets import AnnealSchedule, annealed

log = logging.getLogger(__name__)

GRADIENT_MODES = ("minimax", "biased_dsm")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 50_000
    inner_steps: int = 1
    batch_size: int = 100
    lr_phi: float = 1e-3
    lr_psi: float = 1e-3
    optimizer_phi: str = "adam"
    optimizer_psi: str = "adam"
    anneal: AnnealSchedule | None = None
    gradient_mode: str = "minimax"
    eval_cadence: int = 100
    eval_samples: int = 500
    seed: int = 0
    z_dim: int = 3
    mu_hidden: tuple = (50, 50)
    f_hidden: tuple = (128, 128)
    activation: str = "relu"
    log_sigma_init: float = -1.0
    data_batch: int | None = None
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    max_consecutive_failures: int = 10

    def __post_init__(self):
        if isinstance(self.anneal, dict):
            self.anneal = AnnealSchedule(**self.anneal)
        self.mu_hidden = tuple(self.mu_hidden)
        self.f_hidden = tuple(self.f_hidden)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.inner_steps < 1 or self.batch_size < 1:
            raise ValueError("inner_steps and batch_size must be >= 1")
        if not (self.lr_phi > 0 and self.lr_psi > 0):
            raise ValueError("learning rates must be positive")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.eval_cadence < 1:
            raise ValueError("eval_cadence must be >= 1")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_every < 0:
            raise ValueError("lr_decay must lie in (0, 1] and lr_decay_every >= 0")

    def to_dict(self):
        d = asdict(self)
        d["mu_hidden"] = list(self.mu_hidden)
        d["f_hidden"] = list(self.f_hidden)
        return d


class MetricTrace(list):
    """Evaluation records, one dict per eval point; serializes to JSONL."""

    def to_jsonl(self):
        return "".join(json.dumps(r) + "\n" for r in self)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls(json.loads(line) for line in fh if line.strip())

    def column(self, key):
        return np.array([r[key] for r in self if key in r], dtype=np.float64)


@dataclass
class TrainState:
    family: SemiImplicitFamily
    f_net: MLP | None
    opt_phi: object
    opt_psi: object
    rng: np.random.Generator
    t: int = 0
    trace: MetricTrace = field(default_factory=MetricTrace)
    skipped: int = 0
    consecutive_skips: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "family": self.family.to_dict(),
            "f_net": None if self.f_net is None else self.f_net.to_dict(),
            "opt_phi": self.opt_phi.to_dict(),
            "opt_psi": None if self.opt_psi is None else self.opt_psi.to_dict(),
            "rng": self.rng.bit_generator.state,
            "t": self.t,
            "skipped": self.skipped,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d):
        from .diffcore import OptimizerState

        rng = np.random.default_rng()
        rng.bit_generator.state = d["rng"]
        return cls(
            family=SemiImplicitFamily.from_dict(d["family"]),
            f_net=None if d["f_net"] is None else MLP.from_dict(d["f_net"]),
            opt_phi=OptimizerState.from_dict(d["opt_phi"]),
            opt_psi=None if d["opt_psi"] is None else OptimizerState.from_dict(d["opt_psi"]),
            rng=rng, t=d["t"], skipped=d.get("skipped", 0), extra=d.get("extra", {}),
        )


def init_state(x_dim, config, family=None, f_net=None):
    rng = np.random.default_rng(config.seed)
    if family is None:
        family = SemiImplicitFamily.init(config.z_dim, config.mu_hidden, x_dim, rng,
                                         config.log_sigma_init, config.activation)
    if f_net is None:
        f_net = MLP.init([x_dim, *config.f_hidden, x_dim], rng, config.activation)
    return TrainState(
        family=family,
        f_net=f_net,
        opt_phi=make_optimizer(config.optimizer_phi, config.lr_phi, family.n_params),
        opt_psi=make_optimizer(config.optimizer_psi, config.lr_psi, f_net.spec.n_params),
        rng=rng,
    )


# --- objective and its gradients -------------------------------------------------

def _checked_score(target, x):
    S = target.score(x)
    bad = ~np.all(np.isfinite(S), axis=1)
    if bad.any():
        raise NonFiniteError(f"non-finite target score at sample {int(np.argmax(bad))}")
    return S


def sm_objective(batch, target, f_net, family):
    """Return (mean objective, per-sample terms)."""
    S = _checked_score(target, batch.x)
    fx = f_net(batch.x)
    terms = (fx * (S - conditional_score(family, batch))).sum(axis=1) - 0.5 * (fx * fx).sum(axis=1)
    return terms.mean(), terms


def _forward(batch, target, f_net, family):
    S = _checked_score(target, batch.x)
    fx, fcache = f_net.forward(batch.x)
    resid = S - conditional_score(family, batch)
    return S, fx, fcache, resid


def phi_gradient(batch, target, f_net, family, detach_score=False):
    """d J / d phi (flat, aligned with family.flat()).

    With detach_score the conditional score -eps/sigma is treated as a
    constant, i.e. the biased estimator used by the ablation.
    """
    _, fx, fcache, resid = _forward(batch, target, f_net, family)
    _, jtu = f_net.backward(fcache, resid - fx, need_params=False)
    gx = jtu + target.hvp(batch.x, fx)
    gs = np.zeros_like(fx) if detach_score else -fx
    return family_grad_path(family, batch, gx, gs) / len(batch)


def psi_gradient(batch, target, f_net, family):
    """d J / d psi."""
    _, fx, fcache, resid = _forward(batch, target, f_net, family)
    g, _ = f_net.backward(fcache, resid - fx)
    return g / len(batch)


# --- steps -------------------------------------------------------------------------

def _step_target(state, target, config):
    tgt = annealed(target, config.anneal, state.t)
    if config.data_batch and getattr(target, "supports_minibatch", False) and config.data_batch < target.data.n:
        idx = state.rng.choice(target.data.n, size=config.data_batch, replace=False)
        tgt = annealed(target.subsample(idx), config.anneal, state.t)
    return tgt


def _skip(state, config, exc):
    state.skipped += 1
    state.consecutive_skips += 1
    log.warning("step %d skipped: %s", state.t, exc)
    if state.consecutive_skips >= config.max_consecutive_failures:
        raise TrainingAborted(f"{state.consecutive_skips} consecutive non-finite steps at t={state.t}") from exc


def _phi_update(state, target, config, detach_score):
    batch = sample_batch(state.family, config.batch_size, state.rng)
    tgt = _step_target(state, target, config)
    try:
        g = phi_gradient(batch, tgt, state.f_net, state.family, detach_score)
        new = optimizer_step(state.opt_phi, state.family.flat(), g)
    except (NonFiniteError, FloatingPointError) as exc:
        _skip(state, config, exc)
        return state
    state.family.set_flat(new)
    state.consecutive_skips = 0
    return state


def phi_step(state, target, config):
    """One descent step on the variational parameters, f frozen."""
    return _phi_update(state, target, config, detach_score=False)


def biased_dsm_step(state, target, config):
    """Descent step that ignores how the conditional score depends on phi."""
    if config.gradient_mode != "biased_dsm":
        raise ValueError("biased_dsm_step requires gradient_mode='biased_dsm'")
    return _phi_update(state, target, config, detach_score=True)


def psi_step(state, target, config):
    """One ascent step on f's parameters on a freshly drawn batch, phi frozen."""
    batch = sample_batch(state.family, config.batch_size, state.rng)
    tgt = _step_target(state, target, config)
    try:
        g = psi_gradient(batch, tgt, state.f_net, state.family)
        state.f_net.params = optimizer_step(state.opt_psi, state.f_net.params, -g)
    except (NonFiniteError, FloatingPointError) as exc:
        _skip(state, config, exc)
        return state
    state.consecutive_skips = 0
    return state


def outer_step(state, target, config):
    if config.gradient_mode == "minimax":
        phi_step(state, target, config)
        for _ in range(config.inner_steps):
            psi_step(state, target, config)
    else:
        # fit f to the residual first, then move phi with the detached score
        for _ in range(config.inner_steps):
            psi_step(state, target, config)
        biased_dsm_step(state, target, config)
    state.t += 1
    if config.lr_decay_every and state.t % config.lr_decay_every == 0:
        state.opt_phi.step_size *= config.lr_decay
        state.opt_psi.step_size *= config.lr_decay
    return state


# --- diagnostics ---------------------------------------------------------------

def eval_rng(seed, t):
    """Evaluation draws use their own stream so eval cadence never perturbs training."""
    return np.random.default_rng([int(seed), int(t), 7])


def sm_loss_estimate(state, target, n=500, rng=None):
    rng = rng if rng is not None else eval_rng(0, state.t)
    batch = sample_batch(state.family, n, rng)
    value, _ = sm_objective(batch, target, state.f_net, state.family)
    return float(value)


def fnet_norm(state, n=500, rng=None):
    """Monte-Carlo E |f(x)|^2 over fresh draws from the current family."""
    rng = rng if rng is not None else eval_rng(0, state.t)
    x = state.family.sample(n, rng)
    fx = state.f_net(x)
    return float((fx * fx).sum(axis=1).mean())


def evaluate(state, target, config):
    rng = eval_rng(config.seed, state.t)
    batch = sample_batch(state.family, config.eval_samples, rng)
    value, _ = sm_objective(batch, target, state.f_net, state.family)
    fx = state.f_net(batch.x)
    return {"iteration": state.t, "sm_loss": float(value),
            "fnet_norm": float((fx * fx).sum(axis=1).mean())}


def train(target, config, state=None, callback=None):
    """Run `config.iterations` outer iterations (one phi step then K psi steps each)."""
    if state is None:
        state = init_state(target.dim, config)
    start = time.perf_counter()
    end = state.t + config.iterations
    while state.t < end:
        outer_step(state, target, config)
        if state.t % config.eval_cadence == 0:
            rec = evaluate(state, target, config)
            rec["beta"] = config.anneal.beta(state.t) if config.anneal else 1.0
            rec["wall_time"] = time.perf_counter() - start
            state.trace.append(rec)
            if callback is not None:
                callback(state, rec)
    return state


# --- oracle identities ----------------------------------------------------------

def epsilon_accuracy(f_net, x, true_residual):
    """Per-sample |residual - f(x)|^2 when the exact residual is known."""
    d = true_residual - f_net(x)
    return (d * d).sum(axis=1)


def lsd_objective(f_net, target, x):
    """Per-sample S.f + tr(grad f) - 0.5 |f|^2 (learned-Stein-discrepancy form, lambda = 1/2)."""
    fx = f_net(x)
    tr = np.trace(mlp_input_jacobian(f_net.spec, f_net.params, x), axis1=1, axis2=2)
    return (target.score(x) * fx).sum(axis=1) + tr - 0.5 * (fx * fx).sum(axis=1)
