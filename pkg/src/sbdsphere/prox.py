"""Sparsity penalties, their proximal maps, and the inner Lasso-type solver.

The inner problem, for fixed kernels ``a_1..a_N``, is::

    min_x  1/2 || y - sum_n a_n (*) x_n ||^2 + lam * sum_n r(x_n)

with ``r`` either the l1 norm or the huber-mu function.  It is solved by FISTA
with function-value restart, which keeps the objective monotone.  All
arithmetic is batched over a leading axis so that many kernels (for example
every vertex of a landscape grid) can be solved in one sweep.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .signal import _check_fits

__all__ = [
    "Penalty",
    "InnerConfig",
    "InnerSolveResult",
    "InnerSolverError",
    "ConvOperator",
    "soft_threshold",
    "huber_value",
    "huber_grad",
    "prox_huber",
    "solve_x_star",
    "solve_x_star_multi",
    "solve_batch",
    "stationarity_gap",
    "SUPPORT_THRESHOLD",
]

SUPPORT_THRESHOLD = 1e-10


def soft_threshold(u, lam):
    """Entry-wise soft thresholding ``sign(u) * max(|u| - lam, 0)``."""
    if np.any(np.asarray(lam) < 0):
        raise ValueError("threshold must be nonnegative")
    u = np.asarray(u, dtype=float)
    return np.sign(u) * np.maximum(np.abs(u) - lam, 0.0)


def huber_value(x, mu, axis=None):
    """Huber-mu penalty: quadratic ``x^2/(2 mu) + mu/2`` for ``|x| <= mu``, else ``|x|``."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    ax = np.abs(np.asarray(x, dtype=float))
    return np.sum(np.where(ax <= mu, ax * ax / (2 * mu) + mu / 2, ax), axis=axis)


def huber_grad(x, mu):
    x = np.asarray(x, dtype=float)
    return np.clip(x / mu, -1.0, 1.0)


def prox_huber(u, t, mu):
    """Proximal map of ``t * h_mu``."""
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= mu + t, u * (mu / (mu + t)), u - t * np.sign(u))


@dataclass(frozen=True)
class Penalty:
    """Weighted sparsity penalty ``lam * r(x)``.

    ``kind`` is ``"l1"`` or ``"huber"``; ``mu`` is required for huber and must
    satisfy ``mu < lam``.
    """

    kind: str
    lam: float
    mu: float = None

    def __post_init__(self):
        if self.kind not in ("l1", "huber"):
            raise ValueError("unknown penalty kind %r" % self.kind)
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.kind == "huber":
            if self.mu is None or not self.mu > 0:
                raise ValueError("huber penalty needs mu > 0")
            if not self.mu < self.lam:
                raise ValueError("huber penalty needs mu < lambda")
            if self.mu > self.lam / 10:
                warnings.warn("huber mu=%g is not much smaller than lambda=%g" % (self.mu, self.lam))

    @classmethod
    def l1(cls, lam):
        return cls("l1", float(lam))

    @classmethod
    def huber(cls, lam, mu):
        return cls("huber", float(lam), float(mu))

    def with_lam(self, lam):
        return Penalty(self.kind, float(lam), self.mu)

    def value(self, x, axis=None):
        if self.kind == "l1":
            return self.lam * np.sum(np.abs(x), axis=axis)
        return self.lam * huber_value(x, self.mu, axis=axis)

    def prox(self, u, t):
        """Proximal map of ``t * lam * r``; ``t`` may broadcast against ``u``."""
        if self.kind == "l1":
            return soft_threshold(u, t * self.lam)
        return prox_huber(u, t * self.lam, self.mu)


@dataclass
class InnerConfig:
    tol: float = 1e-9
    max_iter: int = 20000


@dataclass
class InnerSolveResult:
    x_star: np.ndarray
    sign_support: np.ndarray
    iterations: int
    residual_norm: float
    objective: float = float("nan")
    converged: bool = True


class InnerSolverError(RuntimeError):
    """Raised when the inner solver misses its tolerance; carries the best iterate."""

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


def sign_support(x):
    x = np.asarray(x)
    return np.where(np.abs(x) > SUPPORT_THRESHOLD, np.sign(x), 0.0).astype(np.int8)


class ConvOperator:
    """Batched sum of circular convolutions ``x -> sum_n a_n (*) x_n``.

    ``kernels`` has shape ``(B, N, *k)``; signals have shape ``(B, N, *m)``
    and observations ``(B, *m)``.  A batch axis of length one broadcasts.
    """

    def __init__(self, kernels, mshape):
        kernels = np.asarray(kernels, dtype=float)
        self.mshape = tuple(mshape)
        self.nd = len(self.mshape)
        kshape = kernels.shape[-self.nd:]
        _check_fits(kshape, self.mshape)
        self.axes = tuple(range(-self.nd, 0))
        padded = np.zeros(kernels.shape[:-self.nd] + self.mshape)
        padded[(Ellipsis,) + tuple(slice(0, k) for k in kshape)] = kernels
        self.ah = np.fft.rfftn(padded, axes=self.axes)
        self.ahc = np.conj(self.ah)
        power = np.sum(np.abs(self.ah) ** 2, axis=1)
        self.lipschitz = power.reshape(power.shape[0], -1).max(axis=1)

    def rows(self, idx):
        """Operator restricted to batch rows ``idx`` (a broadcast batch stays shared)."""
        if self.ah.shape[0] == 1:
            return self
        sub = object.__new__(ConvOperator)
        sub.mshape, sub.nd, sub.axes = self.mshape, self.nd, self.axes
        sub.ah, sub.ahc, sub.lipschitz = self.ah[idx], self.ahc[idx], self.lipschitz[idx]
        return sub

    def forward(self, x):
        xh = np.fft.rfftn(x, axes=self.axes)
        return np.fft.irfftn(np.sum(self.ah * xh, axis=1), s=self.mshape, axes=self.axes)

    def adjoint(self, r):
        rh = np.fft.rfftn(r, axes=self.axes)[:, None]
        return np.fft.irfftn(self.ahc * rh, s=self.mshape, axes=self.axes)


def _rowsum(v, nlead=1):
    return v.reshape(v.shape[:nlead] + (-1,)).sum(axis=-1)


def _rownorm(v, ord=2):
    flat = v.reshape(v.shape[0], -1)
    if ord == np.inf:
        return np.abs(flat).max(axis=1)
    return np.sqrt(np.einsum("ij,ij->i", flat, flat))


def stationarity_gap(op, y, x, penalty):
    """Infinity norm of the minimum-norm element of grad f(x) + lam dr(x), per batch row."""
    g = op.adjoint(op.forward(x) - y)
    if penalty.kind == "huber":
        return _rownorm(g + penalty.lam * huber_grad(x, penalty.mu), np.inf)
    nz = np.abs(x) > 0
    on = np.abs(g + penalty.lam * np.sign(x))
    off = np.maximum(np.abs(g) - penalty.lam, 0.0)
    return _rownorm(np.where(nz, on, off), np.inf)


def solve_batch(op, y, penalty, x_init=None, tol=1e-9, max_iter=20000):
    """FISTA with function-value restart on a batch of inner problems.

    Returns ``(x, iterations, gap_bound, converged, objective)``; all but ``x``
    are per-row arrays.  The stopping rule is ``2 L ||z - x+|| <= tol * scale``
    where ``scale = ||A* y||_inf``, an upper bound on the relative stationarity
    gap of the returned point.  Finished rows leave the working set, so the
    cost follows the total iteration count rather than the slowest row.
    """
    y = np.asarray(y, dtype=float)
    B = max(op.ah.shape[0], y.shape[0])
    N = op.ah.shape[1]
    nd = op.nd
    xshape = (B, N) + op.mshape
    y = np.broadcast_to(y, (B,) + op.mshape)
    L_all = np.broadcast_to(op.lipschitz, (B,)).copy()
    L_all[L_all <= 0] = 1.0
    scale = np.maximum(_rownorm(op.adjoint(y), np.inf), 1e-300)

    x_all = np.zeros(xshape) if x_init is None else np.array(np.broadcast_to(x_init, xshape), dtype=float)
    Ax_all = op.forward(x_all)

    def objective(xv, Axv, yv):
        r = Axv - yv
        return 0.5 * _rowsum(r * r) + penalty.lam * _rowsum(_pen_terms(xv, penalty))

    F_all = objective(x_all, Ax_all, y)
    iters = np.zeros(B, dtype=int)
    gap = np.full(B, np.inf)
    converged = np.zeros(B, dtype=bool)

    idx = np.arange(B)
    sub = op
    yv, L, thresh = y, L_all, tol * scale
    x, Ax, F = x_all.copy(), Ax_all.copy(), F_all.copy()
    z, Az = x.copy(), Ax.copy()
    t = np.ones(B)
    active = np.ones(B, dtype=bool)

    def store(sel):
        rows = idx[sel]
        x_all[rows], F_all[rows] = x[sel], F[sel]

    for _ in range(max_iter):
        n = len(idx)
        xdims = (n,) + (1,) * (1 + nd)
        ydims = (n,) + (1,) * nd
        Lx = L.reshape(xdims)
        g = sub.adjoint(Az - yv)
        xn = penalty.prox(z - g / Lx, 1.0 / Lx)
        Axn = sub.forward(xn)
        Fn = objective(xn, Axn, yv)
        bound = 2.0 * L * _rownorm(z - xn)
        iters[idx] += active
        better = Fn <= F + 1e-15 * np.abs(F)
        done = active & (bound <= thresh)
        accept = active & better
        # worse candidate: drop momentum, next step is a plain descent step from x
        restart = active & ~better & ~done
        gap[idx[done]] = bound[done]
        converged[idx[done]] = True

        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = np.where(accept & ~done, (t - 1.0) / tn, 0.0)
        sel = accept.reshape(xdims)
        selA = accept.reshape(ydims)
        x_acc = np.where(sel, xn, x)
        Ax_acc = np.where(selA, Axn, Ax)
        z = np.where(sel, xn + beta.reshape(xdims) * (xn - x), np.where(restart.reshape(xdims), x, z))
        Az = np.where(selA, Axn + beta.reshape(ydims) * (Axn - Ax), np.where(restart.reshape(ydims), Ax, Az))
        x, Ax = x_acc, Ax_acc
        F = np.where(accept, Fn, F)
        t = np.where(accept, tn, np.where(restart, 1.0, t))
        active &= ~done
        if not active.any():
            break
        if active.sum() <= 0.7 * n:
            store(~active)
            keep = active
            idx = idx[keep]
            sub = op.rows(idx)
            yv = y[idx]
            L, thresh = L_all[idx], (tol * scale)[idx]
            x, Ax, F, z, Az, t = x[keep], Ax[keep], F[keep], z[keep], Az[keep], t[keep]
            active = np.ones(len(idx), dtype=bool)
    store(np.ones(len(idx), dtype=bool))
    return x_all, iters, gap, converged, F_all


def _pen_terms(x, penalty):
    if penalty.kind == "l1":
        return np.abs(x)
    ax = np.abs(x)
    mu = penalty.mu
    return np.where(ax <= mu, ax * ax / (2 * mu) + mu / 2, ax)


def _stack_kernels(kernels):
    kernels = [np.asarray(k, dtype=float) for k in kernels]
    shapes = {k.shape for k in kernels}
    if len(shapes) != 1:
        raise ValueError("all kernels must have the same shape")
    return np.stack(kernels)[None]


def _results(op, y, penalty, x, iters, gap, conv, F, strict):
    exact = stationarity_gap(op, y, x, penalty)
    out = []
    for n in range(x.shape[1]):
        xn = x[0, n]
        out.append(InnerSolveResult(
            x_star=xn,
            sign_support=sign_support(xn),
            iterations=int(iters[0]),
            residual_norm=float(exact[0]),
            objective=float(F[0]),
            converged=bool(conv[0]),
        ))
    if strict and not conv[0]:
        raise InnerSolverError("inner solver did not reach tol in %d iterations" % iters[0], out)
    return out


def solve_x_star(a, y, penalty, cfg=None, x_init=None, strict=True):
    """Minimize ``1/2 ||y - a (*) x||^2 + lam r(x)`` over ``x``.

    Deterministic for fixed inputs.  Warm starting from ``x_init`` changes
    only the iteration count.  Raises :class:`InnerSolverError` (carrying
    the best iterate in ``.best``) if ``cfg.max_iter`` is exhausted and
    ``strict`` is set.
    """
    cfg = cfg or InnerConfig()
    y = np.asarray(y, dtype=float)
    op = ConvOperator(np.asarray(a, dtype=float)[None, None], y.shape)
    xi = None if x_init is None else np.asarray(x_init, dtype=float)[None, None]
    x, iters, gap, conv, F = solve_batch(op, y[None], penalty, xi, cfg.tol, cfg.max_iter)
    res = _results(op, y[None], penalty, x, iters, gap, conv, F, False)[0]
    if strict and not res.converged:
        raise InnerSolverError("inner solver did not reach tol in %d iterations" % res.iterations, res)
    return res


def solve_x_star_multi(kernels, y, penalty, cfg=None, x_init=None, strict=True):
    """Joint minimization over ``x_1..x_N`` for a bank of equally sized kernels."""
    cfg = cfg or InnerConfig()
    y = np.asarray(y, dtype=float)
    op = ConvOperator(_stack_kernels(kernels), y.shape)
    xi = None if x_init is None else np.stack([np.asarray(v, dtype=float) for v in x_init])[None]
    x, iters, gap, conv, F = solve_batch(op, y[None], penalty, xi, cfg.tol, cfg.max_iter)
    return _results(op, y[None], penalty, x, iters, gap, conv, F, strict)
