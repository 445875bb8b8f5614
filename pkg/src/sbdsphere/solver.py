"""Two-stage sphere-constrained sparse blind deconvolution.

Stage I minimizes the huber-smoothed marginal objective from a random point
of the sphere and lands near a signed shift truncation of the kernel.
Stage II zero-pads that kernel into a longer window and follows a decreasing
ladder of ``lam`` values with the l1 penalty, warm-starting each level.

The descent core works on a product of spheres and several observation
channels at once, so the same loop drives single-kernel deconvolution,
dictionary learning (several kernels) and gradient-domain deblurring (two
channels sharing one kernel, nonnegative sphere).
"""

import csv
import warnings
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Union

import numpy as np

from .landscape import lambda_upper_bound
from .prox import ConvOperator, InnerConfig, Penalty, solve_batch
from .seeding import substream
from .signal import SphereConstraint, _as_shape, retract

__all__ = [
    "FixedStep",
    "BacktrackingArmijo",
    "SolverConfig",
    "SolverError",
    "TraceRecord",
    "SolveTrace",
    "RecoveryResult",
    "FixedLambdaResult",
    "random_sphere_point",
    "lift",
    "best_window",
    "lambda_ladder",
    "choose_lambda0",
    "minimize_phi_fixed_lambda",
    "minimize_bank",
    "alternating_minimize_fixed_lambda",
    "stage1",
    "stage2",
    "solve",
    "alternating_solve",
]

# Relative slack on the Armijo test, absorbing rounding in phi near convergence.
VALUE_SLACK = 1e-13
# Largest distance an accepted step may move a kernel (sphere has diameter 2).
MAX_MOVE = 0.5


@dataclass(frozen=True)
class FixedStep:
    size: float = 0.1


@dataclass(frozen=True)
class BacktrackingArmijo:
    c: float = 1e-4
    shrink: float = 0.5


@dataclass
class SolverConfig:
    """Parameters of the two-stage solver.

    ``lambda0=None`` picks half of :func:`lambda_upper_bound` at run time;
    ``mu=None`` means ``lambda_min / 10``; ``k_prime=None`` means ``3 k``.
    ``lambdas`` replaces the geometric Stage II ladder with an explicit one.
    ``x_scale``, when the activation magnitude is known, caps the automatic
    ``lambda0`` at ``0.1 * x_scale``.
    """

    k: Union[int, Sequence[int]]
    k_prime: Optional[Union[int, Sequence[int]]] = None
    lambda0: Optional[float] = None
    lambda_min: float = 1e-4
    beta: float = 2.0
    mu: Optional[float] = None
    max_outer_iters: int = 2000
    max_inner_iters: int = 20000
    inner_tol: float = 1e-9
    grad_tol: float = 1e-6
    ladder_grad_tol: Optional[float] = None
    step_policy: Union[FixedStep, BacktrackingArmijo] = field(default_factory=BacktrackingArmijo)
    seed: int = 0
    lambdas: Optional[Sequence[float]] = None
    x_scale: Optional[float] = None
    stall_iters: int = 50
    stall_noise: float = 1e-6
    constraint: str = SphereConstraint.L2

    def kshape(self, ndim=1):
        return _as_shape(self.k, ndim)

    def kprime_shape(self, ndim=1):
        if self.k_prime is None:
            return tuple(3 * v for v in self.kshape(ndim))
        return _as_shape(self.k_prime, ndim)

    @property
    def mu_value(self):
        return self.lambda_min / 10.0 if self.mu is None else float(self.mu)

    @property
    def inner(self):
        return InnerConfig(tol=self.inner_tol, max_iter=self.max_inner_iters)

    def validate(self, ndim=1):
        ks, kp = self.kshape(ndim), self.kprime_shape(ndim)
        if any(v < 1 for v in ks):
            raise ValueError("kernel size must be positive")
        if any(p < 2 * k - 1 for p, k in zip(kp, ks)):
            raise ValueError("lifted size %s must be at least 2k-1 per axis for k=%s" % (kp, ks))
        if not self.beta > 1:
            raise ValueError("beta must exceed 1")
        if not self.lambda_min > 0:
            raise ValueError("lambda_min must be positive")
        if self.lambda0 is not None and not self.lambda0 > self.lambda_min:
            raise ValueError("lambda0 must exceed lambda_min")
        if not 0 < self.mu_value < self.lambda_min:
            raise ValueError("mu must lie in (0, lambda_min)")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.lambdas is not None and (len(self.lambdas) == 0 or min(self.lambdas) <= 0):
            raise ValueError("lambdas must be a nonempty list of positive values")
        return self


class SolverError(RuntimeError):
    """Raised when a descent fails; ``best`` holds the best iterate reached."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class TraceRecord:
    stage: int
    level: int
    lam: float
    iteration: int
    value: float
    grad_norm: float
    step: float
    inner_iterations: int
    kernels: np.ndarray


@dataclass
class SolveTrace:
    records: List[TraceRecord] = field(default_factory=list)

    def append(self, rec):
        self.records.append(rec)

    def extend(self, other):
        self.records.extend(other.records)

    def __len__(self):
        return len(self.records)

    def values(self, stage=None, level=None):
        return np.array([r.value for r in self.records
                         if (stage is None or r.stage == stage) and (level is None or r.level == level)])

    def segments(self):
        """Keys ``(stage, level)`` in order of first appearance."""
        seen = []
        for r in self.records:
            if (r.stage, r.level) not in seen:
                seen.append((r.stage, r.level))
        return seen

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "level", "lambda", "iteration", "phi", "grad_norm", "step", "inner_iterations"])
            for r in self.records:
                w.writerow([r.stage, r.level, repr(r.lam), r.iteration, repr(r.value),
                            repr(r.grad_norm), repr(r.step), r.inner_iterations])


@dataclass
class FixedLambdaResult:
    kernels: np.ndarray
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    trace: SolveTrace


@dataclass
class RecoveryResult:
    a_hat: np.ndarray
    a_aligned: np.ndarray
    x_hat: np.ndarray
    trace: SolveTrace
    stage1_kernel: np.ndarray
    lambda0: float
    converged: bool
    error_metrics: dict = field(default_factory=dict)


# --- the fixed-lambda objective over a product of spheres --------------------------


class _BankObjective:
    """``sum_c 1/2 ||Y_c - sum_n a_n (*) X_cn||^2 + lam r(X)`` minimized over ``X``.

    ``Y`` has shape ``(C, *m)``; kernels ``(N, *k)``; activations ``(C, N, *m)``.
    """

    def __init__(self, Y, penalty, inner):
        self.Y = np.asarray(Y, dtype=float)
        self.mshape = self.Y.shape[1:]
        self.axes = tuple(range(-len(self.mshape), 0))
        self.penalty = penalty
        self.inner = inner

    def evaluate(self, A, X_init=None):
        op = ConvOperator(A[None], self.mshape)
        X, iters, _, conv, F = solve_batch(op, self.Y, self.penalty, X_init, self.inner.tol, self.inner.max_iter)
        R = op.forward(X) - self.Y
        grad = self.kernel_grad(A.shape, X, R)
        return float(F.sum()), X, grad, int(iters.max()), bool(conv.all())

    def psi(self, A, X):
        op = ConvOperator(A[None], self.mshape)
        R = op.forward(X) - self.Y
        return 0.5 * float(np.vdot(R, R)) + float(self.penalty.value(X)), R

    def kernel_grad(self, kshape, X, R):
        Xh = np.fft.rfftn(X, axes=self.axes)
        Rh = np.fft.rfftn(R, axes=self.axes)[:, None]
        G = np.fft.irfftn(np.sum(np.conj(Xh) * Rh, axis=0), s=self.mshape, axes=self.axes)
        return G[(slice(None),) + tuple(slice(0, k) for k in kshape[1:])]


def _tangent(A, G, constraint):
    flatA = A.reshape(len(A), -1)
    flatG = G.reshape(len(G), -1).copy()
    if constraint == SphereConstraint.NONNEG:
        # coordinates pinned at zero whose descent direction points outward are inactive
        flatG[(flatA <= 0) & (flatG > 0)] = 0.0
    coef = np.einsum("ij,ij->i", flatA, flatG)
    return (flatG - coef[:, None] * flatA).reshape(A.shape)


def _retract_bank(A, fallback, constraint):
    return np.stack([retract(a, constraint, fallback=f) for a, f in zip(A, fallback)])


def _initial_step(X, axes, gnorm):
    Xh = np.fft.rfftn(X, axes=axes)
    power = np.sum(np.abs(Xh) ** 2, axis=0)
    top = float(power.max()) if power.size else 0.0
    s = 1.0 / top if top > 0 else np.inf
    return min(s, MAX_MOVE / max(gnorm, 1e-300))


def minimize_bank(Y, A_init, penalty, cfg, grad_tol=None, X_init=None, stage=0, level=0,
                  strict=True, rng=None):
    """Riemannian gradient descent of the marginal objective over a product of spheres.

    Each iteration solves for ``X*(A)`` (warm-started), takes a step along the
    negative Riemannian gradient and retracts every kernel to its sphere.  With
    :class:`BacktrackingArmijo` the objective is non-increasing up to a
    relative slack of ``VALUE_SLACK``.
    """
    grad_tol = cfg.grad_tol if grad_tol is None else grad_tol
    constraint = cfg.constraint
    obj = _BankObjective(Y, penalty, cfg.inner)
    A = _retract_bank(np.asarray(A_init, dtype=float), A_init, constraint)
    val, X, G, inner_it, _ = obj.evaluate(A, X_init)
    rg = _tangent(A, G, constraint)
    gnorm = float(np.linalg.norm(rg))
    trace = SolveTrace()
    policy = cfg.step_policy
    armijo = isinstance(policy, BacktrackingArmijo)
    step = policy.size if not armijo else _initial_step(X, obj.axes, gnorm)
    stalled = 0
    last = 0.0
    rng = rng if rng is not None else substream(cfg.seed, "stall", stage, level)

    for it in range(cfg.max_outer_iters + 1):
        trace.append(TraceRecord(stage, level, penalty.lam, it, val, gnorm, last, inner_it, A.copy()))
        if gnorm <= grad_tol:
            return FixedLambdaResult(A, X, val, gnorm, it, True, trace)
        if it == cfg.max_outer_iters:
            break
        if armijo:
            s = min(step, MAX_MOVE / gnorm)
            while True:
                An = _retract_bank(A - s * rg, A, constraint)
                valn, Xn, Gn, inner_it, _ = obj.evaluate(An, X)
                if valn <= val - policy.c * s * gnorm * gnorm + VALUE_SLACK * abs(val):
                    break
                s *= policy.shrink
                if s < 1e-14:
                    best = FixedLambdaResult(A, X, val, gnorm, it, False, trace)
                    raise SolverError("line search found no decrease (grad norm %.3e)" % gnorm, best)
        else:
            s = policy.size
            An = _retract_bank(A - s * rg, A, constraint)
            valn, Xn, Gn, inner_it, _ = obj.evaluate(An, X)
        rgn = _tangent(An, Gn, constraint)
        if armijo:
            dA = (An - A).ravel()
            dG = (rgn - rg).ravel()
            curv = float(dA @ dG)
            step = float(dA @ dA) / curv if curv > 0 else 2.0 * s
        stalled = stalled + 1 if val - valn <= 1e-14 * max(1.0, abs(val)) else 0
        A, X, val, rg, last = An, Xn, valn, rgn, s
        gnorm = float(np.linalg.norm(rg))
        if stalled >= cfg.stall_iters:
            noise = _tangent(A, rng.standard_normal(A.shape), SphereConstraint.L2)
            noise *= cfg.stall_noise / max(float(np.linalg.norm(noise)), 1e-300)
            A = _retract_bank(A + noise, A, constraint)
            val, X, G, inner_it, _ = obj.evaluate(A, X)
            rg = _tangent(A, G, constraint)
            gnorm = float(np.linalg.norm(rg))
            stalled = 0

    res = FixedLambdaResult(A, X, val, gnorm, cfg.max_outer_iters, False, trace)
    if strict:
        raise SolverError("no convergence in %d iterations (grad norm %.3e)" % (cfg.max_outer_iters, gnorm), res)
    return res


def minimize_phi_fixed_lambda(y, a_init, penalty, cfg, grad_tol=None, x_init=None, strict=True,
                              stage=0, level=0):
    """Single-kernel, single-channel form of :func:`minimize_bank`.

    Returns a :class:`FixedLambdaResult` whose ``kernels`` and ``x`` are the
    kernel and activation themselves rather than stacked arrays.
    """
    y = np.asarray(y, dtype=float)
    xi = None if x_init is None else np.asarray(x_init, dtype=float)[None, None]
    res = minimize_bank(y[None], np.asarray(a_init, dtype=float)[None], penalty, cfg, grad_tol, xi,
                        stage, level, strict)
    return replace(res, kernels=res.kernels[0], x=res.x[0, 0])


def alternating_minimize_fixed_lambda(y, a_init, penalty, cfg, grad_tol=None, x_init=None,
                                      x_steps=10, strict=True, stage=0, level=0):
    """Block descent on ``psi(a, x)``: ``x_steps`` FISTA steps on ``x``, one Riemannian step on ``a``.

    Stops when the Riemannian ``a``-gradient of ``psi`` is below ``grad_tol``
    and the ``x``-block is solved to ``cfg.inner_tol``; at such a point ``a``
    is stationary for the marginal objective as well.
    """
    grad_tol = cfg.grad_tol if grad_tol is None else grad_tol
    y = np.asarray(y, dtype=float)
    obj = _BankObjective(y[None], penalty, cfg.inner)
    A = np.asarray(a_init, dtype=float)[None].copy()
    X = np.zeros((1, 1) + y.shape) if x_init is None else np.asarray(x_init, dtype=float)[None, None].copy()
    policy = cfg.step_policy
    armijo = isinstance(policy, BacktrackingArmijo)
    trace = SolveTrace()
    constraint = cfg.constraint
    step = policy.size if not armijo else None
    for it in range(cfg.max_outer_iters + 1):
        op = ConvOperator(A[None], y.shape)
        X, _, _, xconv, _ = solve_batch(op, obj.Y, penalty, X, cfg.inner_tol, x_steps)
        val, R = obj.psi(A, X)
        rg = _tangent(A, obj.kernel_grad(A.shape, X, R), constraint)
        gnorm = float(np.linalg.norm(rg))
        if gnorm <= grad_tol and not xconv.all():
            # a looks stationary: finish the x-block before deciding
            X, _, _, xconv, _ = solve_batch(op, obj.Y, penalty, X, cfg.inner_tol, cfg.max_inner_iters)
            val, R = obj.psi(A, X)
            rg = _tangent(A, obj.kernel_grad(A.shape, X, R), constraint)
            gnorm = float(np.linalg.norm(rg))
        trace.append(TraceRecord(stage, level, penalty.lam, it, val, gnorm, 0.0 if step is None else step,
                                 x_steps, A.copy()))
        if gnorm <= grad_tol and xconv.all():
            return FixedLambdaResult(A[0], X[0, 0], val, gnorm, it, True, trace)
        if it == cfg.max_outer_iters or gnorm == 0.0:
            continue
        if armijo:
            s = _initial_step(X, obj.axes, gnorm) if step is None else min(step, MAX_MOVE / gnorm)
            while s >= 1e-14:
                An = _retract_bank(A - s * rg, A, constraint)
                valn, _ = obj.psi(An, X)
                if valn <= val - policy.c * s * gnorm * gnorm + VALUE_SLACK * abs(val):
                    break
                s *= policy.shrink
            else:
                best = FixedLambdaResult(A[0], X[0, 0], val, gnorm, it, False, trace)
                raise SolverError("line search found no decrease (grad norm %.3e)" % gnorm, best)
            step = 2.0 * s
        else:
            An = _retract_bank(A - policy.size * rg, A, constraint)
        A = An
    res = FixedLambdaResult(A[0], X[0, 0], val, gnorm, cfg.max_outer_iters, False, trace)
    if strict:
        raise SolverError("no convergence in %d iterations (grad norm %.3e)" % (cfg.max_outer_iters, gnorm), res)
    return res


# --- the two stages -------------------------------------------------------------------


def random_sphere_point(shape, rng, constraint=SphereConstraint.L2):
    """Uniform point of the unit sphere (or of its nonnegative part)."""
    g = rng.standard_normal(shape)
    if constraint == SphereConstraint.NONNEG:
        g = np.abs(g)
    return g / np.linalg.norm(g)


def lift(a, k_prime):
    """Center ``a`` inside a zero window of shape ``k_prime`` and renormalize."""
    a = np.asarray(a, dtype=float)
    kp = _as_shape(k_prime, a.ndim)
    if any(p < k for p, k in zip(kp, a.shape)):
        raise ValueError("lifted shape %s is smaller than kernel shape %s" % (kp, a.shape))
    out = np.zeros(kp)
    out[tuple(slice((p - k) // 2, (p - k) // 2 + k) for p, k in zip(kp, a.shape))] = a
    return out / np.linalg.norm(out)


def best_window(a, k):
    """Contiguous (cyclic) length-``k`` window of ``a`` holding the most energy, renormalized."""
    a = np.asarray(a, dtype=float)
    ks = _as_shape(k, a.ndim)
    best, arg = -1.0, None
    for off in np.ndindex(*a.shape):
        w = np.roll(a, tuple(-o for o in off), axis=tuple(range(a.ndim)))
        w = w[tuple(slice(0, kk) for kk in ks)]
        e = float(np.vdot(w, w))
        if e > best + 1e-15:
            best, arg = e, w
    n = np.linalg.norm(arg)
    return arg / n if n > 0 else arg


def choose_lambda0(Y, cfg, kshape):
    """``lambda0`` for Stage I, clamped below the flat-region bound.

    Returns ``(lambda0, clamped)``.  The bound is the smallest over channels.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float)) if np.ndim(Y) == 1 else np.asarray(Y, dtype=float)
    bound = min(lambda_upper_bound(y, kshape) for y in Y)
    if bound <= 0:
        raise SolverError("observation is identically zero")
    auto = 0.5 * bound
    if cfg.x_scale is not None:
        auto = min(auto, 0.1 * cfg.x_scale)
    if cfg.lambda0 is None:
        return auto, False
    if cfg.lambda0 >= bound:
        warnings.warn("lambda0 clamped to %.6g" % auto)
        return auto, True
    return float(cfg.lambda0), False


def lambda_ladder(lambda0, cfg):
    """Stage II ladder: ``cfg.lambdas`` if given, else ``lambda0 / beta^j`` while above ``lambda_min``."""
    if cfg.lambdas is not None:
        return [float(v) for v in cfg.lambdas]
    out, lam = [], float(lambda0)
    while lam > cfg.lambda_min:
        out.append(lam)
        lam /= cfg.beta
    return out or [float(cfg.lambda_min)]


def _check_observation(Y):
    if not np.any(Y != 0):
        raise SolverError("observation is identically zero")
    if not np.all(np.isfinite(Y)):
        raise SolverError("observation has non-finite entries")


def _as_channels(y):
    y = np.asarray(y, dtype=float)
    return y[None]


def stage1_bank(Y, n_kernels, cfg, lambda0):
    """Stage I over ``n_kernels`` kernels and the channels ``Y``."""
    Y = np.asarray(Y, dtype=float)
    _check_observation(Y)
    ks = cfg.kshape(Y.ndim - 1)
    rng = substream(cfg.seed, "init")
    A0 = np.stack([random_sphere_point(ks, rng, cfg.constraint) for _ in range(n_kernels)])
    pen = Penalty.huber(lambda0, cfg.mu_value)
    return minimize_bank(Y, A0, pen, cfg, stage=1, level=0, strict=True)


def stage2_bank(Y, A_init, cfg, lambda0, X_init=None):
    """Stage II: lift every kernel and follow the l1 ladder.

    Intermediate levels may stop at ``max_outer_iters`` without raising; the
    last level must converge.
    """
    Y = np.asarray(Y, dtype=float)
    kp = cfg.kprime_shape(Y.ndim - 1)
    A = np.stack([lift(a, kp) for a in A_init])
    ladder = lambda_ladder(lambda0, cfg)
    tol_mid = cfg.ladder_grad_tol if cfg.ladder_grad_tol is not None else cfg.grad_tol
    trace = SolveTrace()
    X = None
    res = None
    for j, lam in enumerate(ladder):
        last = j == len(ladder) - 1
        res = minimize_bank(Y, A, Penalty.l1(lam), cfg, grad_tol=cfg.grad_tol if last else tol_mid,
                            X_init=X, stage=2, level=j, strict=last)
        trace.extend(res.trace)
        A, X = res.kernels, res.x
    res.trace = trace
    return res


def stage1(y, cfg):
    """Stage I on a single 1D or 2D observation; returns the length-``k`` kernel."""
    Y = _as_channels(y)
    cfg.validate(Y.ndim - 1)
    _check_observation(Y)
    lam0, _ = choose_lambda0(Y, cfg, cfg.kshape(Y.ndim - 1))
    return stage1_bank(Y, 1, cfg, lam0).kernels[0]


def stage2(y, a_init, cfg, lambda0=None):
    """Stage II from ``a_init``; ``lambda0`` defaults to the Stage I choice."""
    Y = _as_channels(y)
    cfg.validate(Y.ndim - 1)
    _check_observation(Y)
    if lambda0 is None:
        lambda0, _ = choose_lambda0(Y, cfg, np.shape(a_init))
    res = stage2_bank(Y, np.asarray(a_init, dtype=float)[None], cfg, lambda0)
    a_hat = res.kernels[0]
    return RecoveryResult(a_hat, best_window(a_hat, np.shape(a_init)), res.x[0, 0], res.trace,
                          np.asarray(a_init, dtype=float), float(lambda0), res.converged)


def solve(y, cfg):
    """Stage I followed by Stage II; deterministic given ``cfg.seed``."""
    Y = _as_channels(y)
    cfg.validate(Y.ndim - 1)
    _check_observation(Y)
    ks = cfg.kshape(Y.ndim - 1)
    lam0, _ = choose_lambda0(Y, cfg, ks)
    s1 = stage1_bank(Y, 1, cfg, lam0)
    s2 = stage2_bank(Y, s1.kernels, cfg, lam0)
    trace = SolveTrace()
    trace.extend(s1.trace)
    trace.extend(s2.trace)
    a_hat = s2.kernels[0]
    return RecoveryResult(a_hat, best_window(a_hat, ks), s2.x[0, 0], trace, s1.kernels[0], lam0, s2.converged)


def alternating_solve(y, cfg, x_steps=10):
    """Two-stage scheme with block descent on ``(a, x)`` in place of the marginal descent."""
    y = np.asarray(y, dtype=float)
    cfg.validate(y.ndim)
    _check_observation(y)
    ks = cfg.kshape(y.ndim)
    lam0, _ = choose_lambda0(y[None], cfg, ks)
    rng = substream(cfg.seed, "init")
    a = random_sphere_point(ks, rng, cfg.constraint)
    trace = SolveTrace()
    s1 = alternating_minimize_fixed_lambda(y, a, Penalty.huber(lam0, cfg.mu_value), cfg, x_steps=x_steps,
                                           stage=1, level=0)
    trace.extend(s1.trace)
    a = lift(s1.kernels, cfg.kprime_shape(y.ndim))
    x = None
    ladder = lambda_ladder(lam0, cfg)
    tol_mid = cfg.ladder_grad_tol if cfg.ladder_grad_tol is not None else cfg.grad_tol
    for j, lam in enumerate(ladder):
        last = j == len(ladder) - 1
        res = alternating_minimize_fixed_lambda(y, a, Penalty.l1(lam), cfg, cfg.grad_tol if last else tol_mid,
                                                x, x_steps, strict=last, stage=2, level=j)
        trace.extend(res.trace)
        a, x = res.kernels, res.x
    return RecoveryResult(a, best_window(a, ks), x, trace, s1.kernels, lam0, res.converged)
