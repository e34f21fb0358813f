"""Gaussian and inverse-Wishart parameter algebra.

Gaussian factors are carried either in natural form (precision-mean ``r``,
precision ``Q``) or in moment form (mean ``mu``, covariance ``Sigma``).
Inverse-Wishart factors are carried as (scale ``Psi``, degrees of freedom
``nu``).  Site factors may be improper; only operations that take moments
require positive definiteness.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ImproperError(ValueError):
    """A matrix that must be positive definite is not."""


def symmetrize(M):
    return 0.5 * (M + M.T)


def chol(M):
    """Lower Cholesky factor, raising :class:`ImproperError` if ``M`` is not PD."""
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ImproperError("matrix is not positive definite") from exc


def is_pd(M):
    if M.size == 0:
        return True
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return True


def pd_inv(M):
    """Inverse of a symmetric positive definite matrix via Cholesky."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return M.copy()
    Lc = chol(M)
    Linv = np.linalg.solve(Lc, np.eye(M.shape[0]))
    return Linv.T @ Linv


@dataclass(frozen=True)
class GaussianNat:
    r: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.atleast_1d(np.asarray(self.r, dtype=float)))
        object.__setattr__(self, "Q", np.atleast_2d(np.asarray(self.Q, dtype=float)))


@dataclass(frozen=True)
class GaussianMoments:
    mu: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=float)))
        object.__setattr__(self, "Sigma", np.atleast_2d(np.asarray(self.Sigma, dtype=float)))


@dataclass(frozen=True)
class IWParams:
    Psi: np.ndarray
    nu: float

    def __post_init__(self):
        object.__setattr__(self, "Psi", np.atleast_2d(np.asarray(self.Psi, dtype=float)))
        object.__setattr__(self, "nu", float(self.nu))

    def is_proper(self):
        Q = self.Psi.shape[0]
        return self.nu > Q - 1 and is_pd(self.Psi)


def nat_to_moments(g: GaussianNat) -> GaussianMoments:
    Sigma = symmetrize(pd_inv(g.Q))
    return GaussianMoments(Sigma @ g.r, Sigma)


def moments_to_nat(m: GaussianMoments) -> GaussianNat:
    Q = symmetrize(pd_inv(m.Sigma))
    return GaussianNat(Q @ m.mu, Q)


def iw_combine(parts, Q: int) -> IWParams:
    """Parameters of the (unnormalised) product of inverse-Wishart densities."""
    parts = list(parts)
    if not parts:
        raise ValueError("need at least one inverse-Wishart factor")
    Psi = np.zeros((Q, Q))
    nu = 0.0
    for p in parts:
        if p.Psi.shape != (Q, Q):
            raise ValueError(f"scale matrix shape {p.Psi.shape} does not match Q={Q}")
        Psi = Psi + p.Psi
        nu += p.nu
    return IWParams(Psi, nu + (len(parts) - 1) * (Q + 1))


def iw_cavity(glob: IWParams, site: IWParams, Q: int) -> IWParams:
    """Remove one inverse-Wishart site from the global factor.

    Raises :class:`ImproperError` when the result is not a proper
    inverse-Wishart density; callers skip the site for the pass.
    """
    if glob.Psi.shape != (Q, Q) or site.Psi.shape != (Q, Q):
        raise ValueError("dimension mismatch")
    cav = IWParams(glob.Psi - site.Psi, glob.nu - site.nu - (Q + 1))
    if not cav.is_proper():
        raise ImproperError("inverse-Wishart cavity is improper")
    return cav


@dataclass(frozen=True)
class ReductionMap:
    """Lift from the (1+H)-dim site space to the (Q+H+P)-dim block ``(u_l, gamma, beta)``."""

    A: np.ndarray
    Q: int
    H: int
    P: int

    @property
    def rank_deficient(self):
        return not np.any(self.A[:, 0])


def reduction_matrix(x_n, z_n, H: int) -> ReductionMap:
    x_n = np.atleast_1d(np.asarray(x_n, dtype=float))
    z_n = np.atleast_1d(np.asarray(z_n, dtype=float))
    Q, P = z_n.size, x_n.size
    A = np.zeros((Q + H + P, 1 + H))
    A[:Q, 0] = z_n
    A[Q + H:, 0] = x_n
    A[Q:Q + H, 1:] = np.eye(H)
    return ReductionMap(A, Q, H, P)


def lift_site(A: ReductionMap, low: GaussianNat) -> GaussianNat:
    M = A.A
    return GaussianNat(M @ low.r, symmetrize(M @ low.Q @ M.T))
