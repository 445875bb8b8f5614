"""Circular convolution algebra for short kernels and long signals.

Every operator here works on 1D vectors and on 2D arrays (row-major, with an
independent cyclic wrap per axis).  A *short* kernel ``a`` of shape ``k`` acts
on a signal of shape ``m`` through its zero-padded version ``inject(a, m)``.

Conventions (``m`` is the signal length, indices taken mod ``m``)::

    cyclic_shift(v, t)[i] = v[i - t]
    circ_conv(a, x)[i]    = sum_j a~[j] x[i - j]
    corr(a, y)[i]         = <cyclic_shift(a~, i), y> = sum_l a~[l] y[l + i]

so ``corr(a, .)`` is the adjoint of ``x -> circ_conv(a, x)``.
"""

import numpy as np

__all__ = [
    "SphereConstraint",
    "circ_conv",
    "corr",
    "cyclic_shift",
    "inject",
    "project",
    "shift_truncation",
    "normalize",
    "retract",
    "lq_norm",
    "DIRECT_MAX_TAPS",
]

# Above this many kernel taps times signal size the FFT path is used.
DIRECT_MAX_TAPS = 1 << 16

SPHERE_TOL = 1e-12


class SphereConstraint:
    """Names of the kernel constraint sets."""

    L2 = "l2"
    NONNEG = "nonneg"
    NONE = "none"

    @staticmethod
    def lq(q):
        return "l%g" % q


def _shape(v):
    return tuple(np.shape(v))


def _check_fits(kshape, mshape, what="kernel"):
    if len(kshape) != len(mshape):
        raise ValueError("%s has %d dims but signal has %d" % (what, len(kshape), len(mshape)))
    if any(k > m for k, m in zip(kshape, mshape)):
        raise ValueError("%s shape %s does not fit in signal shape %s" % (what, kshape, mshape))
    if any(k < 1 for k in kshape):
        raise ValueError("empty %s" % what)


def _as_shape(m, ndim):
    if np.ndim(m) == 0:
        return (int(m),) * ndim
    return tuple(int(v) for v in m)


def inject(a, m):
    """Zero-pad ``a`` to shape ``m`` (the kernel occupies the leading corner)."""
    a = np.asarray(a, dtype=float)
    mshape = _as_shape(m, a.ndim)
    _check_fits(a.shape, mshape)
    out = np.zeros(mshape)
    out[tuple(slice(0, k) for k in a.shape)] = a
    return out


def project(v, k):
    """Adjoint of :func:`inject`: keep the leading ``k`` entries (per axis)."""
    v = np.asarray(v, dtype=float)
    kshape = _as_shape(k, v.ndim)
    _check_fits(kshape, v.shape)
    return v[tuple(slice(0, kk) for kk in kshape)].copy()


def cyclic_shift(v, tau):
    """Cyclic shift, ``out[i] = v[(i - tau) mod m]``; ``tau`` is an int or a pair."""
    v = np.asarray(v, dtype=float)
    if np.ndim(tau) == 0:
        tau = (int(tau),) * v.ndim if v.ndim == 1 else (int(tau), 0)
    return np.roll(v, tuple(int(t) for t in tau), axis=tuple(range(v.ndim)))


def _use_fft(kshape, mshape, method):
    if method == "fft":
        return True
    if method == "direct":
        return False
    if method != "auto":
        raise ValueError("unknown method %r" % method)
    return int(np.prod(kshape)) * int(np.prod(mshape)) > DIRECT_MAX_TAPS


def circ_conv(a, x, method="auto"):
    """Circular convolution of a short kernel with a signal.

    ``method`` selects the direct O(mk) sum, the FFT path, or ``"auto"``.
    Both paths agree to rounding error.
    """
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    _check_fits(a.shape, x.shape)
    axes = tuple(range(x.ndim))
    if _use_fft(a.shape, x.shape, method):
        ah = np.fft.rfftn(inject(a, x.shape), axes=axes)
        return np.fft.irfftn(ah * np.fft.rfftn(x, axes=axes), s=x.shape, axes=axes)
    out = np.zeros(x.shape)
    for idx in zip(*np.nonzero(a)):
        out += a[idx] * np.roll(x, idx, axis=axes)
    return out


def corr(a, y, method="auto"):
    """Adjoint of ``x -> circ_conv(a, x)``: ``out[i] = <s_i[inject(a)], y>``."""
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_fits(a.shape, y.shape)
    axes = tuple(range(y.ndim))
    if _use_fft(a.shape, y.shape, method):
        ah = np.fft.rfftn(inject(a, y.shape), axes=axes)
        return np.fft.irfftn(np.conj(ah) * np.fft.rfftn(y, axes=axes), s=y.shape, axes=axes)
    out = np.zeros(y.shape)
    for idx in zip(*np.nonzero(a)):
        out += a[idx] * np.roll(y, tuple(-i for i in idx), axis=axes)
    return out


def lq_norm(a, q=2.0):
    a = np.abs(np.asarray(a, dtype=float)).ravel()
    if q == 2:
        return float(np.sqrt(a @ a))
    if np.isinf(q):
        return float(a.max(initial=0.0))
    return float(np.sum(a ** q) ** (1.0 / q))


def normalize(a, q=2.0):
    """Radial projection onto the unit l^q sphere."""
    a = np.asarray(a, dtype=float)
    n = lq_norm(a, q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("cannot normalize a zero or non-finite kernel")
    return a / n


def retract(a, constraint=SphereConstraint.L2, fallback=None):
    """Map a point back onto the constraint set after a step.

    For the nonnegative sphere the negative entries are clipped before
    renormalizing; if nothing survives, the positive part of ``fallback``
    (typically the pre-step point) is used instead.
    """
    a = np.asarray(a, dtype=float)
    if constraint == SphereConstraint.NONE:
        return a.copy()
    if constraint == SphereConstraint.NONNEG:
        b = np.maximum(a, 0.0)
        if not np.any(b > 0):
            if fallback is None:
                raise ValueError("nonnegative retraction produced the zero kernel")
            b = np.maximum(np.asarray(fallback, dtype=float), 0.0)
        return normalize(b)
    if constraint == SphereConstraint.L2:
        return normalize(a)
    if isinstance(constraint, str) and constraint.startswith("l"):
        return normalize(a, float(constraint[1:]))
    raise ValueError("unknown constraint %r" % (constraint,))


def shift_truncation(a0, tau, m, q=2.0):
    """Normalized shift truncation ``P_S[ project(s_tau[inject(a0, m)], k) ]``.

    Raises ``ValueError`` when the truncated window holds no energy.
    """
    a0 = np.asarray(a0, dtype=float)
    t = project(cyclic_shift(inject(a0, m), tau), a0.shape)
    if not np.any(t != 0):
        raise ValueError("shift %r leaves an all-zero truncation" % (tau,))
    return normalize(t, q)
