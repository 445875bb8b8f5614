"""Sparse blind deconvolution by Riemannian descent of the marginal objective on the sphere."""

__version__ = "0.1.0"

from .signal import SphereConstraint, circ_conv, corr, cyclic_shift, inject, project, shift_truncation  # noqa: E402
from .prox import InnerConfig, Penalty, soft_threshold, solve_x_star, solve_x_star_multi  # noqa: E402
from .solver import RecoveryResult, SolverConfig, SolverError, solve, stage1, stage2  # noqa: E402

__all__ = [
    "__version__",
    "SphereConstraint",
    "circ_conv",
    "corr",
    "cyclic_shift",
    "inject",
    "project",
    "shift_truncation",
    "InnerConfig",
    "Penalty",
    "soft_threshold",
    "solve_x_star",
    "solve_x_star_multi",
    "RecoveryResult",
    "SolverConfig",
    "SolverError",
    "solve",
    "stage1",
    "stage2",
]
