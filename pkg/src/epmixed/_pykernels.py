"""Pure-numpy likelihood-site kernels (fallback for the compiled extension).

Both backends expose the same two entry points:

``like_pass_sequential``
    refine every likelihood site in ``order`` against the evolving global,
    applying each damped change immediately;
``like_deltas_parallel``
    refine the given sites against a fixed global and return the summed
    per-block changes.

Skip categories (index into the returned counter array): 0 improper cavity,
1 tilted-moment failure, 2 non-PD tilted covariance, 3 rolled-back update.
"""
from __future__ import annotations

import numpy as np

from .expfam import GaussianMoments, ImproperError, pd_inv, symmetrize
from .model import Likelihood
from .quadrature import TiltedFailure, site_tilted_moments

NAME = "python"

MODEL_ZIP = 0
MODEL_BINOMIAL = 1
N_SKIP = 4

#: Tilted covariances this much narrower than the cavity (in any direction)
#: mean the quadrature collapsed onto a single node; such sites are skipped.
TILT_RTOL = 1e-8


def _reduction(z, x, H):
    Q, P = z.size, x.size
    A = np.zeros((Q + H + P, 1 + H))
    A[:Q, 0] = z
    A[Q + H:, 0] = x
    for h in range(H):
        A[Q + h, 1 + h] = 1.0
    return A


def site_step(Sa, ma, A, rf, Qf, model, y, extra, rule, damping):
    """Damped change ``(dr*, dQ*)`` of one low-dimensional likelihood site.

    ``Sa``/``ma`` are the global marginal covariance/mean over ``(u_l, gamma, beta)``.
    Raises ``(category, message)`` as :class:`SiteSkip`.
    """
    try:
        S_dot = symmetrize(A.T @ Sa @ A)
        Q_dot = symmetrize(pd_inv(S_dot))
        r_dot = Q_dot @ (A.T @ ma)
        Qc = Q_dot - Qf
        rc = r_dot - rf
        Sc = symmetrize(pd_inv(Qc))
    except ImproperError:
        raise SiteSkip(0) from None
    cav = GaussianMoments(Sc @ rc, Sc)
    try:
        lik = Likelihood.ZIP if model == MODEL_ZIP else Likelihood.BINOMIAL_PROBIT
        tm = site_tilted_moments(lik, y, extra, cav, rule)
    except (TiltedFailure, ImproperError, FloatingPointError, np.linalg.LinAlgError):
        raise SiteSkip(1) from None
    mh, Sh = tm.normalized()
    if not (np.all(np.isfinite(mh)) and np.all(np.isfinite(Sh))):
        raise SiteSkip(1)
    Sh = symmetrize(Sh)
    try:
        Qh = symmetrize(pd_inv(Sh))
    except ImproperError:
        raise SiteSkip(2) from None
    if relative_min_eig(Sh, Sc) < TILT_RTOL:
        raise SiteSkip(2)
    rh = Qh @ mh
    return damping * ((rh - rc) - rf), damping * ((Qh - Qc) - Qf)


def relative_min_eig(S, C):
    """Smallest eigenvalue of ``C^{-1/2} S C^{-1/2}`` for PD ``C``."""
    Lc = np.linalg.cholesky(C)
    W = np.linalg.solve(Lc, np.linalg.solve(Lc, S).T)
    return float(np.linalg.eigvalsh(0.5 * (W + W.T))[0])


class SiteSkip(Exception):
    def __init__(self, category):
        super().__init__(category)
        self.category = category


def like_pass_sequential(g, like_r, like_Q, y, extra, X, Z, group, order, model, rule, damping,
                         change_r, change_Q):
    H = like_r.shape[1] - 1
    skips = np.zeros(N_SKIP, dtype=np.int64)
    for n in order:
        l = group[n]
        A = _reduction(Z[n], X[n], H)
        marg = g.marginal_alpha(l)
        try:
            dr, dQ = site_step(marg.Sigma, marg.mu, A, like_r[n], like_Q[n], model, y[n], extra[n], rule, damping)
        except SiteSkip as s:
            skips[s.category] += 1
            change_r[n] = change_Q[n] = 0.0
            continue
        if not g.apply_delta_alpha(l, A @ dQ @ A.T, A @ dr):
            skips[3] += 1
            change_r[n] = change_Q[n] = 0.0
            continue
        like_r[n] += dr
        like_Q[n] = symmetrize(like_Q[n] + dQ)
        change_r[n] = np.linalg.norm(dr)
        change_Q[n] = np.linalg.norm(dQ)
    return skips


def like_deltas_parallel(g, like_r, like_Q, y, extra, X, Z, group, idx, model, rule, damping,
                         dB11, dB12, dB22, dd1, dd2, change_r, change_Q):
    """Refine sites ``idx`` against the fixed global ``g``.

    Accumulates the lifted changes into ``dB11`` .. ``dd2`` in index order and
    updates the sites in place.  ``change_*`` are indexed like ``idx``.
    """
    H = like_r.shape[1] - 1
    Q = g.Q
    skips = np.zeros(N_SKIP, dtype=np.int64)
    margs = {}
    for i, n in enumerate(idx):
        l = group[n]
        if l not in margs:
            margs[l] = g.marginal_alpha(l)
        marg = margs[l]
        A = _reduction(Z[n], X[n], H)
        try:
            dr, dQ = site_step(marg.Sigma, marg.mu, A, like_r[n], like_Q[n], model, y[n], extra[n], rule, damping)
        except SiteSkip as s:
            skips[s.category] += 1
            change_r[i] = change_Q[i] = 0.0
            continue
        dQl = A @ dQ @ A.T
        drl = A @ dr
        dB11[l] += dQl[:Q, :Q]
        dB12[l] += dQl[:Q, Q:]
        dB22 += dQl[Q:, Q:]
        dd1[l] += drl[:Q]
        dd2 += drl[Q:]
        like_r[n] += dr
        like_Q[n] = symmetrize(like_Q[n] + dQ)
        change_r[i] = np.linalg.norm(dr)
        change_Q[i] = np.linalg.norm(dQ)
    return skips
