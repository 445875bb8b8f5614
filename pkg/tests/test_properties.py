"""Always-on property suites: operator algebra, derivatives, feasibility, monotonicity, determinism."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sbdsphere.landscape import HatModel, phi_eval, phi_hat, phi_hat_sigma, quadratic_form, tangent_project
from sbdsphere.prox import ConvOperator, InnerConfig, Penalty, solve_batch
from sbdsphere.signal import SphereConstraint, circ_conv, corr, cyclic_shift, inject, retract
from sbdsphere.solver import SolverConfig, solve

pytestmark = pytest.mark.property

seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)


def _rng(seed):
    return np.random.default_rng(seed)


@given(seeds, st.integers(1, 8), st.integers(0, 24), st.sampled_from(["direct", "fft"]))
def test_corr_is_adjoint_of_conv(seed, k, extra, method):
    rng = _rng(seed)
    m = k + extra
    a, x, y = rng.standard_normal(k), rng.standard_normal(m), rng.standard_normal(m)
    lhs = float(circ_conv(a, x, method) @ y)
    rhs = float(x @ corr(a, y, method))
    assert abs(lhs - rhs) <= 1e-10 * (1 + np.abs(a).sum() * np.linalg.norm(x) * np.linalg.norm(y))


@given(seeds, st.integers(1, 4), st.integers(1, 4), st.integers(0, 5), st.integers(0, 5))
def test_corr_is_adjoint_of_conv_2d(seed, k1, k2, e1, e2):
    rng = _rng(seed)
    m = (k1 + e1, k2 + e2)
    a, x, y = rng.standard_normal((k1, k2)), rng.standard_normal(m), rng.standard_normal(m)
    assert np.isclose(np.sum(circ_conv(a, x) * y), np.sum(x * corr(a, y)), rtol=1e-10, atol=1e-10)


@given(seeds, st.integers(1, 8), st.integers(0, 24), st.integers(-40, 40))
def test_conv_commutes_with_shift(seed, k, extra, tau):
    rng = _rng(seed)
    m = k + extra
    a, x = rng.standard_normal(k), rng.standard_normal(m)
    np.testing.assert_allclose(circ_conv(a, cyclic_shift(x, tau)), cyclic_shift(circ_conv(a, x), tau),
                               rtol=0, atol=1e-12)


@given(seeds, st.integers(1, 8), st.integers(0, 24))
def test_direct_and_fft_paths_agree(seed, k, extra):
    rng = _rng(seed)
    a, x = rng.standard_normal(k), rng.standard_normal(k + extra)
    np.testing.assert_allclose(circ_conv(a, x, "direct"), circ_conv(a, x, "fft"), atol=1e-12)
    np.testing.assert_allclose(corr(a, x, "direct"), corr(a, x, "fft"), atol=1e-12)


@given(seeds, st.integers(2, 5), st.integers(0, 2))
def test_phi_gradient_matches_finite_differences(seed, k, which):
    rng = _rng(seed)
    m = 48
    a0 = rng.standard_normal(k)
    x0 = (rng.random(m) < 0.15) * rng.standard_normal(m)
    x0[0] = 1.0
    y = circ_conv(a0 / np.linalg.norm(a0), x0)
    pen = [Penalty.l1(0.05), Penalty.huber(0.05, 0.004), Penalty.l1(0.2)][which]
    cfg = InnerConfig(tol=1e-13, max_iter=200000)
    a = rng.standard_normal(k)
    a /= np.linalg.norm(a)
    ev = phi_eval(a, y, pen, cfg)
    d = tangent_project(a, rng.standard_normal(k))
    d /= np.linalg.norm(d)
    h = 1e-5

    def on_sphere(t):
        b = a + t * d
        return phi_eval(b / np.linalg.norm(b), y, pen, cfg, ev.x).value

    fd = (on_sphere(h) - on_sphere(-h)) / (2 * h)
    an = float(ev.riem_grad @ d)
    assert abs(fd - an) <= 1e-5 * max(1.0, np.linalg.norm(ev.riem_grad))


@given(seeds, st.integers(2, 4), st.integers(6, 12), st.floats(0.05, 0.9))
def test_phi_hat_equals_its_quadratic_piece(seed, k, m, lam):
    rng = _rng(seed)
    a0 = rng.standard_normal(k)
    a0 /= np.linalg.norm(a0)
    a = rng.standard_normal(k)
    a /= np.linalg.norm(a)
    hm = HatModel(a0, lam, m)
    sigma = hm.sign_pattern(a).sigma
    M, b, c = quadratic_form(sigma, a0, lam, m)
    direct = phi_hat(a, a0, lam, m)
    assert abs(direct - phi_hat_sigma(a, sigma, a0, lam, m)) <= 1e-10
    assert abs(direct - (0.5 * a @ M @ a + b @ a + c)) <= 1e-10
    assert abs(direct - hm.value(a)) <= 1e-10


@given(seeds, st.integers(1, 9), st.sampled_from([SphereConstraint.L2, SphereConstraint.NONNEG, "l4"]))
def test_retraction_lands_on_sphere(seed, k, constraint):
    rng = _rng(seed)
    a = rng.standard_normal(k) * 10.0 ** rng.uniform(-3, 3)
    a[0] = abs(a[0]) + 1e-3
    b = retract(a, constraint)
    q = 4.0 if constraint == "l4" else 2.0
    assert abs(np.sum(np.abs(b) ** q) ** (1 / q) - 1.0) <= 1e-12
    if constraint == SphereConstraint.NONNEG:
        assert np.all(b >= 0)


def test_solver_iterates_stay_on_sphere():
    rng = _rng(3)
    a0 = rng.standard_normal(6)
    x0 = (rng.random(200) < 0.05).astype(float)
    y = circ_conv(a0 / np.linalg.norm(a0), x0)
    res = solve(y, SolverConfig(k=6, seed=1, x_scale=1.0, lambda_min=1e-2))
    norms = [np.linalg.norm(r.kernels[0]) for r in res.trace.records]
    assert max(abs(n - 1.0) for n in norms) <= 1e-12


@given(seeds, st.integers(1, 6), st.sampled_from(["l1", "huber"]))
def test_inner_objective_never_increases(seed, k, kind):
    rng = _rng(seed)
    m = 40
    a = rng.standard_normal(k)
    y = rng.standard_normal(m)
    pen = Penalty.l1(0.3) if kind == "l1" else Penalty.huber(0.3, 0.02)
    op = ConvOperator(a[None, None], (m,))
    values = [solve_batch(op, y[None], pen, None, 0.0, n)[4][0] for n in range(0, 40)]
    assert all(b <= a_ + 1e-14 * abs(a_) for a_, b in zip(values, values[1:]))


def test_solve_is_deterministic_under_seed():
    rng = _rng(11)
    a0 = rng.standard_normal(5)
    x0 = (rng.random(150) < 0.05).astype(float)
    y = circ_conv(a0 / np.linalg.norm(a0), x0)
    cfg = SolverConfig(k=5, seed=7, x_scale=1.0, lambda_min=1e-2)
    r1, r2 = solve(y, cfg), solve(y, cfg)
    assert r1.a_hat.tobytes() == r2.a_hat.tobytes()
    assert [r.value for r in r1.trace.records] == [r.value for r in r2.trace.records]
    r3 = solve(y, SolverConfig(k=5, seed=8, x_scale=1.0, lambda_min=1e-2))
    assert r3.stage1_kernel.tobytes() != r1.stage1_kernel.tobytes()


def test_inject_project_are_adjoint():
    rng = _rng(5)
    a, v = rng.standard_normal(4), rng.standard_normal(11)
    from sbdsphere.signal import project

    assert np.isclose(inject(a, 11) @ v, a @ project(v, 4), rtol=1e-14)
