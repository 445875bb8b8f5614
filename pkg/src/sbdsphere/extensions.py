"""Dictionary learning over a product of spheres and gradient-domain blind deblurring."""

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .seeding import substream
from .signal import SphereConstraint, circ_conv, inject, normalize
from .solver import (
    SolveTrace,
    SolverConfig,
    SolverError,
    best_window,
    choose_lambda0,
    stage1_bank,
    stage2_bank,
)

__all__ = [
    "KernelBank",
    "ImagePair",
    "CDLResult",
    "DeblurResult",
    "bank_coherence",
    "cdl_solve",
    "image_gradients",
    "deblur_solve",
    "DEBLUR_LADDER",
    "disc_scene",
    "random_walk_kernel",
]

DEBLUR_LADDER = (0.1, 0.01, 0.001, 0.001)


@dataclass
class KernelBank:
    kernels: np.ndarray

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=float)
        if self.kernels.ndim < 2 or len(self.kernels) < 1:
            raise ValueError("a bank holds at least one kernel")
        norms = np.sqrt(np.sum(self.kernels.reshape(len(self.kernels), -1) ** 2, axis=1))
        if np.any(np.abs(norms - 1) > 1e-9):
            raise ValueError("bank kernels must have unit norm")

    def __len__(self):
        return len(self.kernels)

    def __iter__(self):
        return iter(self.kernels)


@dataclass
class ImagePair:
    gx: np.ndarray
    gy: np.ndarray

    def stack(self):
        return np.stack([self.gx, self.gy])


@dataclass
class CDLResult:
    bank: KernelBank
    aligned: KernelBank
    activations: np.ndarray
    stage1: KernelBank
    trace: SolveTrace
    lambda0: float
    converged: bool

    def reconstruction(self):
        return sum(circ_conv(a, x) for a, x in zip(self.bank, self.activations))


@dataclass
class DeblurResult:
    kernel: np.ndarray
    a_hat: np.ndarray
    latent_gradients: ImagePair
    trace: SolveTrace
    lambda0: float
    converged: bool


def bank_coherence(kernels):
    """Largest ``|<a_i, s_tau[a_j]>|`` over distinct pairs and all relative shifts.

    Kernels are compared inside a cyclic window long enough that no shift
    wraps onto itself.  Diagnostic only: no threshold is applied anywhere.
    """
    ks = [np.asarray(a, dtype=float) for a in kernels]
    if len(ks) < 2:
        return 0.0
    m = tuple(2 * s - 1 for s in ks[0].shape)
    axes = tuple(range(len(m)))
    F = [np.fft.rfftn(inject(normalize(a), m), axes=axes) for a in ks]
    best = 0.0
    for i in range(len(ks)):
        for j in range(i + 1, len(ks)):
            c = np.fft.irfftn(np.conj(F[i]) * F[j], s=m, axes=axes)
            best = max(best, float(np.abs(c).max()))
    return best


def cdl_solve(y, n_kernels, cfg):
    """Two-stage recovery of ``n_kernels`` kernels from ``y = sum_n a_n (*) x_n``.

    Stage I descends jointly over all kernels (per-kernel tangent projection)
    from independent random points; Stage II lifts each kernel and runs the
    ladder.  With one kernel this is exactly :func:`sbdsphere.solver.solve`.
    """
    if n_kernels < 1:
        raise ValueError("need at least one kernel")
    y = np.asarray(y, dtype=float)
    Y = y[None]
    cfg.validate(y.ndim)
    ks = cfg.kshape(y.ndim)
    if int(np.prod(ks)) * n_kernels >= y.size:
        warnings.warn("k * N = %d is not below the signal size %d" % (int(np.prod(ks)) * n_kernels, y.size))
    if not np.any(y != 0):
        raise SolverError("observation is identically zero")
    lam0, _ = choose_lambda0(Y, cfg, ks)
    s1 = stage1_bank(Y, n_kernels, cfg, lam0)
    s2 = stage2_bank(Y, s1.kernels, cfg, lam0)
    trace = SolveTrace()
    trace.extend(s1.trace)
    trace.extend(s2.trace)
    aligned = np.stack([best_window(a, ks) for a in s2.kernels])
    return CDLResult(KernelBank(s2.kernels), KernelBank(aligned), s2.x[0], KernelBank(s1.kernels), trace,
                     lam0, s2.converged)


def image_gradients(img):
    """Cyclic forward differences: ``gx`` along columns, ``gy`` along rows."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2 or min(img.shape) < 2:
        raise ValueError("need a 2D image of at least 2x2")
    return ImagePair(np.roll(img, -1, axis=1) - img, np.roll(img, -1, axis=0) - img)


def deblur_solve(y_img, k1, k2, cfg=None):
    """Estimate a nonnegative blur kernel from a blurred image via its gradients.

    Both gradient channels share the kernel; each has its own sparse latent
    gradient map.  The kernel lives on the nonnegative part of the sphere and
    the Stage II ladder defaults to ``DEBLUR_LADDER``.  ``kernel`` is the
    most energetic ``k1 x k2`` window of the lifted estimate ``a_hat``.
    """
    y_img = np.asarray(y_img, dtype=float)
    if k1 > y_img.shape[0] or k2 > y_img.shape[1]:
        raise ValueError("kernel larger than image")
    if cfg is None:
        cfg = SolverConfig(k=(k1, k2))
    if cfg.lambdas is None:
        cfg = replace(cfg, lambdas=DEBLUR_LADDER)
    if cfg.lambda0 is None:
        cfg = replace(cfg, lambda0=cfg.lambdas[0])
    cfg = replace(cfg, k=(k1, k2), constraint=SphereConstraint.NONNEG,
                  lambda_min=min(cfg.lambda_min, min(cfg.lambdas)))
    cfg.validate(2)
    pair = image_gradients(y_img)
    Y = pair.stack()
    if not np.any(Y != 0):
        raise SolverError("image has no gradients (constant image)")
    lam0, _ = choose_lambda0(Y, cfg, (k1, k2))
    s1 = stage1_bank(Y, 1, cfg, lam0)
    s2 = stage2_bank(Y, s1.kernels, cfg, lam0)
    trace = SolveTrace()
    trace.extend(s1.trace)
    trace.extend(s2.trace)
    a_hat = s2.kernels[0]
    X = s2.x[:, 0]
    return DeblurResult(best_window(a_hat, (k1, k2)), a_hat, ImagePair(X[0], X[1]), trace, lam0, s2.converged)


def disc_scene(n, seed=0, shapes=20):
    """Piecewise-constant ``n x n`` test image: a sum of random cyclic discs.

    Its gradients are sparse (nonzero only on disc edges), which is the
    regime the gradient-domain model assumes.
    """
    rng = substream(seed, "scene")
    img = np.zeros((n, n))
    rows, cols = np.mgrid[0:n, 0:n]
    for _ in range(shapes):
        center = rng.uniform(0, n, 2)
        radius = rng.uniform(2, n / 6)
        dr = np.abs(rows - center[0])
        dc = np.abs(cols - center[1])
        dist = np.hypot(np.minimum(dr, n - dr), np.minimum(dc, n - dc))
        img[dist < radius] += rng.uniform(-0.5, 0.5)
    return img


def random_walk_kernel(k, seed=0, steps=None):
    """Nonnegative ``k x k`` motion-blur-like kernel traced by a clipped Gaussian random walk, unit l1 norm."""
    rng = substream(seed, "motion")
    a = np.zeros((k, k))
    pos = np.array([k // 2, k // 2], dtype=float)
    for _ in range(3 * k if steps is None else steps):
        a[int(pos[0]) % k, int(pos[1]) % k] += 1
        pos = np.clip(pos + rng.normal(0, 0.8, 2), 0, k - 1)
    return a / a.sum()
