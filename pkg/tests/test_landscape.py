import numpy as np
import pytest

from sbdsphere.experiments import lq_hessian_constant
from sbdsphere.landscape import (
    HatModel,
    autocorrelation_gram,
    lambda_upper_bound,
    lq_tangent_project,
    phi,
    phi_batch,
    phi_eval,
    phi_hat,
    phi_hessian,
    phi_huber_flat_region,
    pq_derivatives,
    pq_inner_solve,
    pq_value,
    psi,
    riem_grad_phi_hat,
    riem_grad_phi_sigma,
    tangent_project,
    w_matrix_orthogonality,
)
from sbdsphere.prox import InnerConfig, Penalty, solve_x_star
from sbdsphere.signal import circ_conv, corr, cyclic_shift, inject, lq_norm, normalize, project

TIGHT = InnerConfig(tol=1e-13, max_iter=200000)
A0 = np.array([1.0, 8.0, 2.0]) / np.sqrt(69.0)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def sphere_fd(fun, a, d, h=1e-5):
    def at(t):
        b = a + t * d
        return fun(b / np.linalg.norm(b))

    return (at(h) - at(-h)) / (2 * h), (at(h) - 2 * at(0.0) + at(-h)) / (h * h)


# --- psi / phi ------------------------------------------------------------------------


def test_psi_reference_values():
    rng = np.random.default_rng(0)
    a, x, y = rng.standard_normal(3), rng.standard_normal(10), rng.standard_normal(10)
    assert psi(a, np.zeros(10), y, Penalty.l1(0.3)) == pytest.approx(0.5 * y @ y)
    assert psi(a, np.zeros(10), y, Penalty.huber(0.3, 0.01)) == pytest.approx(0.5 * y @ y + 0.3 * 10 * 0.005)
    assert psi(a, x, circ_conv(a, x), Penalty.l1(0.3)) == pytest.approx(0.3 * np.abs(x).sum())
    # scalar-loop recomputation
    r = [y[i] - sum(a[j] * x[(i - j) % 10] for j in range(3)) for i in range(10)]
    ref = 0.5 * sum(v * v for v in r) + 0.3 * sum(abs(v) for v in x)
    assert psi(a, x, y, Penalty.l1(0.3)) == pytest.approx(ref, rel=1e-13)


def test_phi_flat_for_huge_lambda():
    rng = np.random.default_rng(1)
    y = rng.standard_normal(20)
    for _ in range(3):
        assert phi(unit(rng.standard_normal(4)), y, Penalty.l1(100.0)) == pytest.approx(0.5 * y @ y)


@pytest.mark.parametrize("lam", [0.1, 0.5, 0.9])
def test_phi_at_truth_single_spike(lam):
    # x* = (1 - lam) delta, so phi(a0) = lam^2 / 2 + lam (1 - lam)
    y = circ_conv(A0, np.eye(12)[0])
    ev = phi_eval(A0, y, Penalty.l1(lam), TIGHT)
    np.testing.assert_allclose(ev.x, (1 - lam) * np.eye(12)[0], atol=1e-10)
    assert ev.value == pytest.approx(0.5 * lam ** 2 + lam * (1 - lam), abs=1e-12)


def test_phi_batch_matches_single_evaluations():
    rng = np.random.default_rng(2)
    y = circ_conv(A0, (rng.random(64) < 0.1) * rng.standard_normal(64))
    A = np.array([unit(rng.standard_normal(3)) for _ in range(6)])
    F, X, G = phi_batch(A, y, Penalty.l1(0.1), TIGHT, with_grad=True)
    for a, f, g in zip(A, F, G):
        ev = phi_eval(a, y, Penalty.l1(0.1), TIGHT)
        assert f == pytest.approx(ev.value, abs=1e-11)
        np.testing.assert_allclose(g, ev.riem_grad, atol=1e-8)


def test_phi_hessian_matches_second_differences():
    rng = np.random.default_rng(3)
    x0 = (rng.random(48) < 0.1) * rng.standard_normal(48)
    x0[0] = 1.0
    y = circ_conv(A0, x0)
    pen = Penalty.l1(0.1)
    a = unit(A0 + 0.1 * rng.standard_normal(3))
    ev = phi_eval(a, y, pen, TIGHT)
    d = unit(tangent_project(a, rng.standard_normal(3)))
    deriv = phi_hessian(a, y, pen, ev.x)
    _, fd2 = sphere_fd(lambda b: phi_eval(b, y, pen, TIGHT, ev.x).value, a, d, h=1e-4)
    assert float(d @ deriv.riem_hess_apply(d)) == pytest.approx(fd2, rel=1e-3, abs=1e-6)


# --- single-spike surrogate ---------------------------------------------------------


def test_phi_hat_flat_region_is_half():
    a0 = np.array([1.0, 0.0, 0.0])
    # every |u_i| = |a_j| <= 1/sqrt(3) < lam
    assert phi_hat(unit([1.0, 1.0, 1.0]), a0, 0.6, 8) == pytest.approx(0.5, abs=1e-15)


def test_phi_hat_at_truth_single_support():
    a0 = unit([1.0, 0.05, 0.05])
    lam = 0.5
    assert phi_hat(a0, a0, lam, 8) == pytest.approx(0.5 - 0.5 * (1 - lam) ** 2, abs=1e-14)


def test_quadratic_pieces_agree_at_many_points():
    rng = np.random.default_rng(4)
    hm = HatModel(A0, 0.3, 8)
    worst = 0.0
    for _ in range(1000):
        a = unit(rng.standard_normal(3))
        M, b, c = hm.quadratic_form(hm.sign_pattern(a).sigma)
        worst = max(worst, abs(phi_hat(a, A0, 0.3, 8) - (0.5 * a @ M @ a + b @ a + c)))
    assert worst <= 1e-10


@pytest.mark.parametrize("tau", [-1, 0, 1])
def test_surrogate_gradient_vanishes_at_truncations(tau):
    a0 = unit([1.0, 0.05, 0.05])
    t = unit(project(cyclic_shift(inject(a0, 8), tau), 3))
    for s in (1.0, -1.0):
        d = riem_grad_phi_hat(s * t, a0, 0.8, 8)
        assert np.linalg.norm(d.riem_grad) <= 1e-14


def test_surrogate_derivatives_match_finite_differences():
    rng = np.random.default_rng(5)
    hm = HatModel(A0, 0.3, 8)
    checked = 0
    while checked < 20:
        a = unit(rng.standard_normal(3))
        u = hm.correlations(a)
        if np.min(np.abs(np.abs(u) - 0.3)) < 1e-2:
            continue  # too close to a piece boundary
        sigma = hm.sign_pattern(a).sigma
        d = unit(tangent_project(a, rng.standard_normal(3)))
        der = riem_grad_phi_sigma(a, sigma, A0, 0.3, 8)
        fd1, fd2 = sphere_fd(lambda b: phi_hat(b, A0, 0.3, 8), a, d, h=1e-4)
        assert float(der.riem_grad @ d) == pytest.approx(fd1, rel=1e-6, abs=1e-9)
        assert float(d @ der.riem_hess_apply(d)) == pytest.approx(fd2, rel=1e-4, abs=1e-6)
        checked += 1


def test_orthogonality_measure():
    assert w_matrix_orthogonality(A0, [6], 8) == 0.0
    # for a spike the nonzero truncations are the unit vectors at columns 0, m-1, m-2
    assert w_matrix_orthogonality([1.0, 0.0, 0.0], [0, 7, 8], 9) == pytest.approx(0.0, abs=1e-15)
    # columns [1,8,2]/sqrt(69) and [8,2,0]/sqrt(68): operator norm is their cosine
    assert w_matrix_orthogonality(A0, [0, 1], 8) == pytest.approx(24.0 / np.sqrt(69.0 * 68.0), rel=1e-12)
    with pytest.raises(ValueError):
        w_matrix_orthogonality(A0, [], 8)


# --- huber flat region and the lambda bound ---------------------------------------------


def test_flat_region_small_x_approximation():
    rng = np.random.default_rng(6)
    y = rng.standard_normal(24)
    a = unit(rng.standard_normal(3))
    lam, mu = 10.0, 0.01
    res = phi_huber_flat_region(a, y, lam, mu, TIGHT)
    assert res.in_region
    C = np.stack([np.roll(inject(a, 24), j) for j in range(24)], axis=1)
    exact = np.linalg.solve(C.T @ C + (lam / mu) * np.eye(24), C.T @ y)
    np.testing.assert_allclose(exact, (mu / lam) * corr(a, y), atol=5 * (mu / lam) ** 2 * np.abs(C.T @ y).max()
                               * np.linalg.norm(C.T @ C, 2))
    val = phi(a, y, Penalty.huber(lam, mu), TIGHT)
    second_order = (mu / lam) ** 2 * np.linalg.norm(C, 2) ** 2 * float(corr(a, y) @ corr(a, y))
    assert abs(val - res.approx_value) <= second_order


def test_flat_region_decreases_along_top_eigenvector():
    rng = np.random.default_rng(7)
    y = circ_conv(A0, (rng.random(40) < 0.2) * rng.standard_normal(40))
    lam, mu = 50.0, 0.5
    w, V = np.linalg.eigh(autocorrelation_gram(y, 3))
    top = V[:, -1]
    a = unit(top + 0.3 * V[:, 0])
    assert phi_huber_flat_region(a, y, lam, mu, TIGHT).in_region
    d = unit(tangent_project(a, top))
    pen = Penalty.huber(lam, mu)
    fd1, _ = sphere_fd(lambda b: phi(b, y, pen, TIGHT), a, d)
    assert fd1 < 0


def test_lambda_bound_reference_values():
    for k in (1, 3, 7):
        assert lambda_upper_bound(np.eye(16)[0], k) == pytest.approx(np.sqrt(1.0 / k), rel=1e-12)
    rng = np.random.default_rng(8)
    y = rng.standard_normal(16)
    assert lambda_upper_bound(3.0 * y, 3) == pytest.approx(3.0 * lambda_upper_bound(y, 3), rel=1e-12)
    C = np.stack([np.roll(y, j) for j in range(3)], axis=1)  # columns s_j[y] = C_y e_j
    ref = np.sqrt(np.linalg.eigvalsh(C.T @ C)[-1] / 3)
    assert lambda_upper_bound(y, 3) == pytest.approx(ref, rel=1e-12)


def test_autocorrelation_gram_2d_matches_dense():
    rng = np.random.default_rng(9)
    y = rng.standard_normal((6, 5))
    cols = [np.roll(y, (i, j), axis=(0, 1)).ravel() for i in range(2) for j in range(2)]
    C = np.stack(cols, axis=1)
    np.testing.assert_allclose(autocorrelation_gram(y, (2, 2)), C.T @ C, atol=1e-12)


# --- l^p loss on the l^q sphere -------------------------------------------------------


def test_pq_reduces_to_sphere_calculus_for_p_q_2():
    rng = np.random.default_rng(10)
    y = circ_conv(A0, (rng.random(32) < 0.15) * rng.standard_normal(32))
    a = unit(rng.standard_normal(3))
    ev = phi_eval(a, y, Penalty.l1(0.1), TIGHT)
    d = pq_derivatives(a, ev.x, y, 2.0, 2.0, 0.1)
    np.testing.assert_allclose(d.riem_grad, ev.riem_grad, atol=1e-9)
    assert d.value == pytest.approx(ev.value, abs=1e-12)


def test_pq_inner_solution_is_optimal():
    rng = np.random.default_rng(11)
    y = rng.standard_normal(12)
    a = normalize(rng.standard_normal(3), 4)
    x = pq_inner_solve(a, y, 3.0, 0.2)
    f0 = pq_value(a, x, y, 3.0, 0.2)
    for _ in range(200):
        assert pq_value(a, x + 1e-4 * rng.standard_normal(12), y, 3.0, 0.2) >= f0 - 1e-14


@pytest.mark.parametrize("p,q", [(3.0, 2.0), (4.0, 4.0), (2.0, 4.0), (3.0, 3.0)])
def test_pq_gradient_matches_finite_differences(p, q):
    rng = np.random.default_rng(12)
    m = 12
    y = circ_conv(normalize(np.array([1.0, 8.0, 2.0]), q), np.eye(m)[0]) + 0.05 * rng.standard_normal(m)
    lam = 0.1
    a = normalize(rng.standard_normal(3), q)
    x = pq_inner_solve(a, y, p, lam)
    der = pq_derivatives(a, x, y, p, q, lam)
    d = lq_tangent_project(a, rng.standard_normal(3), q)
    d /= np.linalg.norm(d)

    def val(b):
        b = b / lq_norm(b, q)
        return pq_value(b, pq_inner_solve(b, y, p, lam, x_init=x), y, p, lam)

    h = 1e-5
    fd = (val(a + h * d) - val(a - h * d)) / (2 * h)
    assert float(der.riem_grad @ d) == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_pq_hessian_matches_second_differences_on_lq_sphere():
    rng = np.random.default_rng(13)
    m, p, q, lam = 12, 4.0, 4.0, 0.1
    y = inject(normalize(np.array([1.0, 8.0, 2.0]), q), m)
    a = normalize(np.array([1.0, 8.0, 2.0]) + 0.05 * rng.standard_normal(3), q)
    x = pq_inner_solve(a, y, p, lam)
    der = pq_derivatives(a, x, y, p, q, lam)
    d = lq_tangent_project(a, rng.standard_normal(3), q)
    d /= np.linalg.norm(d)

    # along the curve t -> (a + t d) / ||a + t d||_q the second derivative is the
    # Hessian form plus the gradient against the curve's acceleration
    def curve(t):
        b = a + t * d
        return b / lq_norm(b, q)

    def val(t):
        b = curve(t)
        return pq_value(b, pq_inner_solve(b, y, p, lam, x_init=x), y, p, lam)

    h = 1e-3
    fd2 = (val(h) - 2 * val(0.0) + val(-h)) / (h * h)
    acc = (curve(h) - 2 * curve(0.0) + curve(-h)) / (h * h)
    assert float(d @ der.riem_hess_apply(d)) + float(der.riem_grad @ acc) == pytest.approx(fd2, rel=2e-3)


def _truncation_hessian(tau):
    p = q = 4.0
    lam, m = 0.1, 12
    a0 = normalize(np.array([1.0, 8.0, 2.0]), q)
    y = inject(a0, m)
    t = project(cyclic_shift(y, tau), 3)
    ab = t / lq_norm(t, q)
    x = pq_inner_solve(ab, y, p, lam)
    der = pq_derivatives(ab, x, y, p, q, lam)
    nz = np.flatnonzero(ab)
    basis = np.array([lq_tangent_project(ab, np.eye(3)[i], q) for i in nz]).T
    Q = np.linalg.qr(basis)[0][:, :len(nz) - 1]
    H = Q.T @ np.array([der.riem_hess_apply(v) for v in Q.T]).T
    alpha = float(x[np.argmax(np.abs(x))])
    return np.linalg.eigvalsh(0.5 * (H + H.T))[0], alpha, float(np.min(np.abs(ab[nz]) ** (q - 2))), lam, p


@pytest.mark.parametrize("tau", [-1, 0, 1])
def test_matched_truncation_curvature_bound(tau):
    smallest, alpha, scale, lam, p = _truncation_hessian(tau)
    assert smallest >= lq_hessian_constant(alpha, lam, p) * scale * (1 - 1e-9)


@pytest.mark.xfail(strict=True, reason="the published curvature constant omits a factor alpha and overestimates")
@pytest.mark.parametrize("tau", [-1, 0, 1])
def test_published_curvature_constant(tau):
    smallest, alpha, scale, lam, p = _truncation_hessian(tau)
    q = 4.0
    published = (q - 1) * alpha * (lam ** ((p - 2) / (p - 1)) + lam) * scale
    assert smallest >= published


def test_pq_rejects_small_exponents():
    with pytest.raises(ValueError):
        pq_derivatives(A0, np.zeros(8), np.zeros(8), 1.5, 2.0, 0.1)


def test_solve_x_star_agrees_with_phi_eval():
    rng = np.random.default_rng(14)
    y = rng.standard_normal(30)
    a = unit(rng.standard_normal(4))
    ev = phi_eval(a, y, Penalty.l1(0.2), TIGHT)
    xs = solve_x_star(a, y, Penalty.l1(0.2), TIGHT)
    np.testing.assert_allclose(ev.x, xs.x_star, atol=1e-10)
