import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sivism.diffcore import (
    MLP,
    MLPSpec,
    NonFiniteError,
    ShapeError,
    init_params,
    make_optimizer,
    mlp_forward,
    mlp_input_jacobian,
    mlp_vjp,
    optimizer_step,
)


def straight_line_forward(widths, params, x, act):
    """Scalar-loop evaluation of the same affine + activation chain."""
    h = list(x)
    off = 0
    n_layers = len(widths) - 1
    for layer in range(n_layers):
        n_in, n_out = widths[layer], widths[layer + 1]
        W = [[params[off + i * n_out + j] for j in range(n_out)] for i in range(n_in)]
        off += n_in * n_out
        b = params[off:off + n_out]
        off += n_out
        a = [sum(h[i] * W[i][j] for i in range(n_in)) + b[j] for j in range(n_out)]
        if layer < n_layers - 1:
            a = [max(v, 0.0) if act == "relu" else math.tanh(v) for v in a]
        h = a
    return np.array(h)


def test_spec_validation():
    with pytest.raises(ValueError):
        MLPSpec((3,))
    with pytest.raises(ValueError):
        MLPSpec((3, 0, 2))
    assert MLPSpec((2, 3, 2)).n_params == 2 * 3 + 3 + 3 * 2 + 2


def test_zero_params_give_zero_output():
    spec = MLPSpec((3, 5, 2))
    out = mlp_forward(spec, np.zeros(spec.n_params), np.array([1.0, -2.0, 0.5]))
    assert np.array_equal(out, np.zeros(2))


def test_identity_layer():
    spec = MLPSpec((3, 3))
    params = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    v = np.array([0.3, -1.0, 2.0])
    assert np.array_equal(mlp_forward(spec, params, v), v)
    u = np.array([1.0, 2.0, -3.0])
    _, gx = mlp_vjp(spec, params, v, u)
    assert np.allclose(gx, u)


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_forward_matches_straight_line(act):
    spec = MLPSpec((2, 3, 2), act)
    params = init_params(spec, np.random.default_rng(4)) + np.random.default_rng(5).normal(0, 0.3, spec.n_params)
    x = np.array([1.0, -1.0])
    assert np.allclose(mlp_forward(spec, params, x), straight_line_forward([2, 3, 2], params, x, act), atol=1e-14)


def test_forward_batch_and_purity():
    net = MLP.init([4, 7, 3], np.random.default_rng(0))
    X = np.random.default_rng(1).normal(size=(6, 4))
    out = net(X)
    assert out.shape == (6, 3)
    assert np.array_equal(out, net(X))
    assert np.allclose(out[2], net(X[2]))


def test_shape_errors_name_widths():
    spec = MLPSpec((3, 2))
    with pytest.raises(ShapeError) as err:
        mlp_forward(spec, np.zeros(spec.n_params), np.zeros(4))
    assert err.value.expected == 3
    with pytest.raises(ShapeError):
        mlp_vjp(spec, np.zeros(spec.n_params), np.zeros(3), np.zeros(5))


SPECS = [(2, 3, 2), (3, 8, 8, 2), (5, 4, 1), (1, 6, 6, 3)]


@pytest.mark.parametrize("widths", SPECS)
@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_vjp_matches_finite_differences(widths, act):
    rng = np.random.default_rng(hash((widths, act)) % 2**32)
    spec = MLPSpec(widths, act)
    params = init_params(spec, rng) + rng.normal(0, 0.1, spec.n_params)
    x = rng.normal(size=widths[0])
    c = rng.normal(size=widths[-1])
    gp, gx = mlp_vjp(spec, params, x, c)
    loss = lambda p, xx: c @ mlp_forward(spec, p, xx)
    h = 1e-5
    for i in range(spec.n_params):
        e = np.zeros(spec.n_params)
        e[i] = h
        fd = (loss(params + e, x) - loss(params - e, x)) / (2 * h)
        assert abs(fd - gp[i]) <= 1e-5 * max(abs(fd), 1e-3), (i, fd, gp[i])
    for i in range(widths[0]):
        e = np.zeros(widths[0])
        e[i] = h
        fd = (loss(params, x + e) - loss(params, x - e)) / (2 * h)
        assert abs(fd - gx[i]) <= 1e-5 * max(abs(fd), 1e-3)


def test_relu_subgradient_at_zero_is_zero():
    # hidden pre-activation exactly 0: derivative taken as 0
    spec = MLPSpec((1, 1, 1))
    params = np.array([1.0, 0.0, 2.0, 0.0])
    gp, gx = mlp_vjp(spec, params, np.array([0.0]), np.array([1.0]))
    assert gx[0] == 0.0
    # one-sided difference from below agrees
    h = 1e-6
    left = (mlp_forward(spec, params, np.array([0.0]))[0] - mlp_forward(spec, params, np.array([-h]))[0]) / h
    assert left == 0.0


def test_input_jacobian_matches_vjp():
    net = MLP.init([3, 10, 3], np.random.default_rng(2), "tanh")
    X = np.random.default_rng(3).normal(size=(4, 3))
    J = mlp_input_jacobian(net.spec, net.params, X)
    u = np.random.default_rng(4).normal(size=(4, 3))
    _, gx = mlp_vjp(net.spec, net.params, X, u)
    assert np.allclose(np.einsum("nij,ni->nj", J, u), gx)


def test_nonfinite_backward_reports_layer():
    spec = MLPSpec((1, 2, 1), "tanh")
    params = np.array([1.0, 1.0, 0.0, 0.0, np.inf, 1.0, 0.0])
    with pytest.raises(NonFiniteError) as err:
        mlp_vjp(spec, params, np.array([0.5]), np.array([1.0]))
    assert err.value.layer == 1


# --- optimizers ---------------------------------------------------------------

def test_zero_gradient_is_fixed_point():
    for kind in ("adam", "rmsprop"):
        opt = make_optimizer(kind, 0.1, 3)
        opt.v[:] = 0.5
        p = np.array([1.0, -2.0, 3.0])
        new = optimizer_step(opt, p, np.zeros(3))
        assert np.array_equal(new, p)
        assert opt.t == 1
        assert np.all(opt.v < 0.5)


def test_adam_first_step():
    opt = make_optimizer("adam", 0.1, 1)
    g = 2.5
    new = optimizer_step(opt, np.array([0.0]), np.array([g]))
    assert new[0] == pytest.approx(-0.1 * g / (abs(g) + 1e-8), rel=1e-12)


def test_adam_quadratic_matches_scalar_oracle():
    opt = make_optimizer("adam", 0.1, 1)
    p = np.array([1.0])
    x, m, v = 1.0, 0.0, 0.0
    for t in range(1, 11):
        p = optimizer_step(opt, p, 2 * p)
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert abs(p[0] - x) <= 1e-12


def test_rmsprop_step():
    opt = make_optimizer("rmsprop", 0.01, 1)
    new = optimizer_step(opt, np.array([1.0]), np.array([3.0]))
    assert new[0] == pytest.approx(1.0 - 0.01 * 3.0 / (math.sqrt(0.01 * 9.0) + 1e-8))


def test_nonfinite_gradient_rejected_untouched():
    opt = make_optimizer("adam", 0.1, 2)
    p = np.array([1.0, 2.0])
    with pytest.raises(NonFiniteError):
        optimizer_step(opt, p, np.array([np.nan, 1.0]))
    assert opt.t == 0 and np.array_equal(opt.m, np.zeros(2))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000), st.sampled_from(["adam", "rmsprop"]))
def test_optimizer_permutation_invariance(n, seed, kind):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    a, b = make_optimizer(kind, 0.05, n), make_optimizer(kind, 0.05, n)
    p = rng.normal(size=n)
    q = p[perm].copy()
    for _ in range(3):
        g = rng.normal(size=n)
        p = optimizer_step(a, p, g)
        q = optimizer_step(b, q, g[perm])
    assert np.array_equal(p[perm], q)
    assert np.array_equal(a.m[perm], b.m)
