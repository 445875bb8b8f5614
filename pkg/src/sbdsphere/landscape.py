"""Objectives over the kernel sphere and their Riemannian calculus.

Three families live here:

* the penalized fit ``psi(a, x)`` and its marginalization ``phi(a) = min_x psi``,
  with the Danskin gradient ``project(corr(x*, a (*) x* - y), k)``;
* the single-spike, orthogonal-shift surrogate ``phi_hat`` and its
  piecewise-quadratic pieces ``phi_hat_sigma(a) = 1/2 a'M a + b'a + c``;
* the l^p-loss / l^q-sphere generalization with gradients and Hessians on the
  l^q sphere.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import linalg, optimize

from .prox import (
    SUPPORT_THRESHOLD,
    ConvOperator,
    InnerConfig,
    Penalty,
    sign_support,
    soft_threshold,
    solve_batch,
)
from .signal import circ_conv, corr, cyclic_shift, inject, project

__all__ = [
    "RiemannianDerivatives",
    "SignPattern",
    "PhiEval",
    "FlatRegion",
    "tangent_project",
    "lq_normal",
    "lq_tangent_project",
    "psi",
    "phi",
    "phi_eval",
    "phi_batch",
    "phi_hessian",
    "hat_correlations",
    "classify_sign_pattern",
    "phi_hat",
    "phi_hat_sigma",
    "quadratic_form",
    "riem_grad_phi_sigma",
    "riem_grad_phi_hat",
    "HatModel",
    "truncation_matrix",
    "w_matrix_orthogonality",
    "phi_huber_flat_region",
    "autocorrelation_gram",
    "lambda_upper_bound",
    "pq_value",
    "pq_inner_solve",
    "pq_derivatives",
]


@dataclass
class RiemannianDerivatives:
    value: float
    euclid_grad: np.ndarray
    riem_grad: np.ndarray
    riem_hess_apply: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def hessian_matrix(self):
        """Dense Riemannian Hessian, built column by column from ``riem_hess_apply``."""
        k = self.euclid_grad.size
        eye = np.eye(k)
        cols = [self.riem_hess_apply(eye[i].reshape(self.euclid_grad.shape)).ravel() for i in range(k)]
        H = np.array(cols).T
        return 0.5 * (H + H.T)


@dataclass
class SignPattern:
    sigma: np.ndarray
    support: tuple

    @classmethod
    def from_sigma(cls, sigma):
        sigma = np.asarray(sigma).astype(np.int8)
        return cls(sigma, tuple(int(i) for i in np.flatnonzero(sigma.ravel())))


@dataclass
class PhiEval:
    value: float
    x: np.ndarray
    euclid_grad: np.ndarray
    riem_grad: np.ndarray
    inner_iterations: int
    inner_converged: bool


@dataclass
class FlatRegion:
    in_region: bool
    approx_value: float


def tangent_project(a, v):
    """Project ``v`` onto the tangent space of the l2 sphere at ``a``."""
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    return v - np.vdot(a, v) * a


def lq_normal(a, q):
    """Unit normal of the l^q sphere at ``a``: ``sign(a)|a|^(q-1)`` normalized in l2."""
    a = np.asarray(a, dtype=float)
    v = np.sign(a) * np.abs(a) ** (q - 1)
    return v / np.linalg.norm(v)


def lq_tangent_project(a, v, q):
    xi = lq_normal(a, q)
    return v - np.vdot(xi, v) * xi


# --- the penalized fit and its marginalization ---------------------------------


def psi(a, x, y, penalty):
    """``1/2 ||y - a (*) x||^2 + lam r(x)``."""
    r = np.asarray(y, dtype=float) - circ_conv(a, x)
    return 0.5 * float(np.vdot(r, r)) + float(penalty.value(x))


def phi_eval(a, y, penalty, cfg=None, x_init=None):
    """Value, inner minimizer and Danskin gradients of ``phi`` at ``a``."""
    cfg = cfg or InnerConfig()
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    op = ConvOperator(a[None, None], y.shape)
    xi = None if x_init is None else np.asarray(x_init, dtype=float)[None, None]
    X, iters, _, conv, F = solve_batch(op, y[None], penalty, xi, cfg.tol, cfg.max_iter)
    x = X[0, 0]
    r = op.forward(X)[0] - y
    g = project(corr(x, r, method="fft"), a.shape)
    return PhiEval(float(F[0]), x, g, tangent_project(a, g), int(iters[0]), bool(conv[0]))


def phi(a, y, penalty, cfg=None, x_init=None):
    """Marginalized objective ``min_x psi(a, x)``."""
    return phi_eval(a, y, penalty, cfg, x_init).value


def phi_batch(A, y, penalty, cfg=None, X_init=None, with_grad=False):
    """Evaluate ``phi`` at every row of ``A`` (shape ``(B, *k)``) in one batched solve.

    Returns ``(values, X)`` or ``(values, X, riem_grads)``.
    """
    cfg = cfg or InnerConfig()
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    op = ConvOperator(A[:, None], y.shape)
    xi = None if X_init is None else np.asarray(X_init, dtype=float)[:, None]
    X, _, _, _, F = solve_batch(op, y[None], penalty, xi, cfg.tol, cfg.max_iter)
    X = X[:, 0]
    if not with_grad:
        return F, X
    axes = tuple(range(1, y.ndim + 1))
    R = op.forward(X[:, None]) - y
    G = np.fft.irfftn(np.conj(np.fft.rfftn(X, axes=axes)) * np.fft.rfftn(R, axes=axes), s=y.shape, axes=axes)
    G = G[(slice(None),) + tuple(slice(0, k) for k in A.shape[1:])]
    flatA = A.reshape(len(A), -1)
    flatG = G.reshape(len(G), -1)
    RG = flatG - np.einsum("ij,ij->i", flatA, flatG)[:, None] * flatA
    return F, X, RG.reshape(A.shape)


def phi_hessian(a, y, penalty, x):
    """Riemannian derivatives of ``phi`` at ``a`` given its l1 inner minimizer ``x``.

    The Hessian is the reduced (fixed sign-support) Hessian, valid where the
    support of ``x`` is locally constant.  1D only.
    """
    if penalty.kind != "l1":
        raise ValueError("phi_hessian needs the l1 penalty")
    return pq_derivatives(a, x, y, 2.0, 2.0, penalty.lam)


# --- single-spike surrogate -----------------------------------------------------


def hat_correlations(a, a0, m):
    """``u[i] = <a, project(s_{-i}[inject(a0)], k)>`` for ``i = 0..m-1``."""
    return corr(a, inject(a0, m))


def classify_sign_pattern(a, a0, lam, m):
    u = hat_correlations(a, a0, m)
    return SignPattern.from_sigma(sign_support(soft_threshold(u, lam)))


def phi_hat(a, a0, lam, m):
    """Surrogate objective with ``x0 = delta`` and ``C_a* C_a`` replaced by identity."""
    u = hat_correlations(a, a0, m)
    x = soft_threshold(u, lam)
    a0 = np.asarray(a0, dtype=float)
    return float(0.5 * np.vdot(a0, a0) + 0.5 * np.vdot(x, x) - np.vdot(x, u) + lam * np.abs(x).sum())


def phi_hat_sigma(a, sigma, a0, lam, m):
    """Quadratic piece ``-1/2 ||(u - lam sigma)_I||^2 + 1/2 ||a0||^2``."""
    sigma = np.asarray(sigma, dtype=float)
    u = hat_correlations(a, a0, m)
    d = np.where(sigma != 0, u - lam * sigma, 0.0)
    a0 = np.asarray(a0, dtype=float)
    return float(-0.5 * np.vdot(d, d) + 0.5 * np.vdot(a0, a0))


def truncation_matrix(a0, m):
    """``k x m`` matrix whose column ``i`` is ``project(s_{-i}[inject(a0, m)], k)`` (1D)."""
    a0 = np.asarray(a0, dtype=float)
    if a0.ndim != 1:
        raise ValueError("truncation_matrix is 1D only")
    pad = inject(a0, m)
    return np.stack([project(cyclic_shift(pad, -i), a0.shape) for i in range(m)], axis=1)


def quadratic_form(sigma, a0, lam, m):
    """``(M, b, c)`` with ``phi_hat_sigma(a) = 1/2 a'Ma + b'a + c``."""
    sigma = np.asarray(sigma, dtype=float).ravel()
    W = truncation_matrix(a0, m)
    I = sigma != 0
    WI = W[:, I]
    M = -WI @ WI.T
    b = lam * WI @ sigma[I]
    a0 = np.asarray(a0, dtype=float)
    c = 0.5 * float(np.vdot(a0, a0)) - 0.5 * lam * lam * int(I.sum())
    return M, b, c


class HatModel:
    """The surrogate for one ``(a0, lam, m)`` with its truncation matrix cached (1D)."""

    def __init__(self, a0, lam, m):
        self.a0 = np.asarray(a0, dtype=float)
        self.lam = float(lam)
        self.m = int(m)
        self.W = truncation_matrix(self.a0, self.m)
        self.half_energy = 0.5 * float(self.a0 @ self.a0)

    def correlations(self, a):
        return np.asarray(a, dtype=float) @ self.W

    def sign_pattern(self, a):
        return SignPattern.from_sigma(sign_support(soft_threshold(self.correlations(a), self.lam)))

    def value(self, a):
        u = self.correlations(a)
        x = soft_threshold(u, self.lam)
        return float(self.half_energy + 0.5 * x @ x - x @ u + self.lam * np.abs(x).sum())

    def quadratic_form(self, sigma):
        sigma = np.asarray(sigma, dtype=float).ravel()
        I = sigma != 0
        WI = self.W[:, I]
        return -WI @ WI.T, self.lam * WI @ sigma[I], self.half_energy - 0.5 * self.lam ** 2 * int(I.sum())

    def derivatives(self, a, sigma=None):
        """Derivatives of the quadratic piece for ``sigma`` (default: the pattern active at ``a``)."""
        a = np.asarray(a, dtype=float)
        if sigma is None:
            sigma = self.sign_pattern(a).sigma
        M, b, c = self.quadratic_form(sigma)
        g = M @ a + b
        value = 0.5 * a @ M @ a + b @ a + c
        curv = a @ M @ a + b @ a

        def hess(delta):
            d = tangent_project(a, delta)
            return tangent_project(a, M @ d - curv * d)

        return RiemannianDerivatives(float(value), g, tangent_project(a, g), hess)


def riem_grad_phi_sigma(a, sigma, a0, lam, m):
    """Derivatives of the quadratic piece ``phi_hat_sigma`` on the l2 sphere.

    ``euclid_grad = M a + b``; the Hessian applies
    ``P (M - (a'Ma + b'a) I) P`` with ``P`` the tangent projector at ``a``.
    """
    return HatModel(a0, lam, m).derivatives(a, sigma)


def riem_grad_phi_hat(a, a0, lam, m):
    """Derivatives of ``phi_hat`` using the sign pattern active at ``a``."""
    return HatModel(a0, lam, m).derivatives(a)


def w_matrix_orthogonality(a0, I, m):
    """Operator norm ``||W_I' W_I - I||`` for normalized shift truncations indexed by ``I``."""
    I = sorted(int(i) for i in I)
    if not I:
        raise ValueError("empty support")
    W = truncation_matrix(a0, m)[:, I]
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0):
        raise ValueError("support contains a zero shift truncation")
    W = W / norms
    G = W.T @ W - np.eye(len(I))
    return float(np.max(np.abs(linalg.eigvalsh(G)))) if len(I) > 1 else 0.0


# --- huber flat region and the lambda bound -----------------------------------------


def phi_huber_flat_region(a, y, lam, mu, cfg=None):
    """Whether ``a`` lies in the huber flat region and the small-``x`` approximation of ``phi``.

    ``in_region`` tests ``||x*(a)||_inf <= mu``; ``approx_value`` is
    ``-(mu / 2 lam) ||corr(a, y)||^2 + 1/2 ||y||^2 + lam mu n / 2``, the
    expansion of ``phi`` to first order in ``mu / lam``; the constant is the
    penalty ``lam h_mu(0)`` of an all-zero ``x``.
    """
    y = np.asarray(y, dtype=float)
    ev = phi_eval(a, y, Penalty.huber(lam, mu), cfg)
    c = corr(a, y)
    approx = -(mu / (2 * lam)) * float(np.vdot(c, c)) + 0.5 * float(np.vdot(y, y)) + lam * mu * y.size / 2
    return FlatRegion(bool(np.abs(ev.x).max() <= mu), approx)


def autocorrelation_gram(y, k):
    """The ``k x k`` matrix ``project* C_y* C_y project`` (cyclic autocorrelations of ``y``)."""
    y = np.asarray(y, dtype=float)
    kshape = (int(k),) * y.ndim if np.ndim(k) == 0 else tuple(k)
    axes = tuple(range(y.ndim))
    yh = np.fft.rfftn(y, axes=axes)
    R = np.fft.irfftn(np.abs(yh) ** 2, s=y.shape, axes=axes)
    idx = np.array(list(np.ndindex(*kshape)))
    diff = (idx[None, :, :] - idx[:, None, :]) % np.array(y.shape)
    return R[tuple(diff[..., d] for d in range(y.ndim))]


def lambda_upper_bound(y, k):
    """``sqrt(lambda_max(project* C_y* C_y project) / k)``."""
    G = autocorrelation_gram(y, k)
    top = linalg.eigvalsh(G, subset_by_index=[G.shape[0] - 1, G.shape[0] - 1])[0]
    return float(np.sqrt(max(top, 0.0) / G.shape[0]))


# --- l^p loss on the l^q sphere (1D, dense) ---------------------------------------------


def _shift_columns(v, cols, m):
    v = inject(v, m)
    return np.stack([cyclic_shift(v, c) for c in cols], axis=1)


def pq_value(a, x, y, p, lam):
    r = np.asarray(y, dtype=float) - circ_conv(a, x)
    return float(np.sum(np.abs(r) ** p) / p + lam * np.abs(x).sum())


def pq_inner_solve(a, y, p, lam, tol=1e-12, max_iter=100000, x_init=None):
    """Minimize ``(1/p)||y - a (*) x||_p^p + lam ||x||_1`` over ``x`` (1D, small ``m``).

    Proximal gradient with backtracking identifies the sign support; a Newton
    solve on that support then polishes the active entries.  The polished
    point is accepted once it satisfies the full optimality conditions.
    """
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    m = y.size
    C = _shift_columns(a, range(m), m)
    x = np.zeros(m) if x_init is None else np.array(x_init, dtype=float)

    def smooth(xv):
        r = y - C @ xv
        return float(np.sum(np.abs(r) ** p) / p), -C.T @ (np.sign(r) * np.abs(r) ** (p - 1))

    f, g = smooth(x)
    step = 1.0
    done = 0
    while done < max_iter:
        for _ in range(min(2000, max_iter - done)):
            done += 1
            while True:
                xn = soft_threshold(x - step * g, step * lam)
                fn, gn = smooth(xn)
                d = xn - x
                if fn <= f + g @ d + d @ d / (2 * step) + 1e-15 or step < 1e-20:
                    break
                step *= 0.5
            small = np.linalg.norm(d) <= tol * step
            x, f, g = xn, fn, gn
            step *= 1.2
            if small:
                break
        xp = _polish_support(C, y, p, lam, x)
        if xp is not None:
            return xp
    return x


def _polish_support(C, y, p, lam, x):
    S = np.flatnonzero(np.abs(x) > SUPPORT_THRESHOLD)
    if S.size == 0:
        g = -C.T @ (np.sign(y) * np.abs(y) ** (p - 1))
        return np.zeros_like(x) if np.all(np.abs(g) <= lam * (1 + 1e-9)) else None
    sig = np.sign(x[S])
    A = C[:, S]

    def kkt(xs):
        r = y - A @ xs
        return -A.T @ (np.sign(r) * np.abs(r) ** (p - 1)) + lam * sig

    def jac(xs):
        r = y - A @ xs
        return (p - 1) * A.T @ ((np.abs(r) ** (p - 2))[:, None] * A)

    sol = optimize.root(kkt, x[S], jac=jac, method="hybr", options={"xtol": 1e-15})
    if not np.all(np.sign(sol.x) == sig):
        return None
    out = np.zeros_like(x)
    out[S] = sol.x
    r = y - C @ out
    g = -C.T @ (np.sign(r) * np.abs(r) ** (p - 1))
    off = np.ones(x.size, dtype=bool)
    off[S] = False
    scale = max(1.0, lam)
    if np.max(np.abs(g[S] + lam * sig)) > 1e-9 * scale or np.any(np.abs(g[off]) > lam + 1e-9 * scale):
        return None
    return out


def pq_derivatives(a, x, y, p, q, lam):
    """Derivatives of ``phi_p`` on the l^q sphere at ``(a, x)`` with ``x = x*(a)``.

    The Euclidean gradient is the Danskin gradient of ``psi_p`` in ``a``.  The
    Euclidean Hessian of ``phi_p`` is the Schur complement of the joint
    Hessian over ``a`` and the active entries of ``x`` (implicit function
    theorem on a locally constant sign support).  The Riemannian Hessian adds
    the curvature term of the l^q sphere.
    """
    if p < 2 or q < 2:
        raise ValueError("l^p / l^q calculus needs p >= 2 and q >= 2")
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if a.ndim != 1:
        raise ValueError("pq_derivatives is 1D only")
    m, k = y.size, a.size
    r = y - circ_conv(a, x)
    w = np.sign(r) * np.abs(r) ** (p - 1)
    D = (p - 1) * np.abs(r) ** (p - 2)
    value = float(np.sum(np.abs(r) ** p) / p + lam * np.abs(x).sum())
    # d r / d a = -Cx, columns s_l[x]
    Cx = np.stack([cyclic_shift(x, l) for l in range(k)], axis=1)
    egrad = -Cx.T @ w
    Haa = Cx.T @ (D[:, None] * Cx)
    S = np.flatnonzero(np.abs(x) > SUPPORT_THRESHOLD)
    H = Haa
    if S.size:
        A = _shift_columns(a, S, m)
        Hxx = A.T @ (D[:, None] * A)
        # column i of Hax: d/dx_i of -Cx' w
        Hax = np.stack([-project(cyclic_shift(w, -i), k) + Cx.T @ (D * A[:, j]) for j, i in enumerate(S)], axis=1)
        H = Haa - Hax @ np.linalg.solve(Hxx, Hax.T)
    H = 0.5 * (H + H.T)

    v = np.sign(a) * np.abs(a) ** (q - 1)
    nv2 = float(v @ v)
    xi = v / np.sqrt(nv2)
    rgrad = egrad - (xi @ egrad) * xi
    curv = (q - 1) * float(v @ egrad) / nv2
    diag = np.abs(a) ** (q - 2)

    def hess(delta):
        d = delta - (xi @ delta) * xi
        out = H @ d - curv * diag * d
        return out - (xi @ out) * xi

    return RiemannianDerivatives(value, egrad, rgrad, hess)
