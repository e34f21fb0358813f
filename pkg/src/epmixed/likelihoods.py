"""Per-observation log-likelihoods and low-dimensional tilted kernels."""
from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln, log_expit, log_ndtr

from .model import Likelihood


def zip_log_f(eta, lam, y, o=0.0):
    """Log-probability of ``y`` under the zero-inflated Poisson model with log link.

    ``lam`` is the logit of the structural-zero probability.  Vectorised over
    ``eta`` and ``lam``.
    """
    eta = np.asarray(eta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    rate_log = eta + o
    if y == 0:
        return np.logaddexp(log_expit(lam), log_expit(-lam) - np.exp(rate_log))
    return log_expit(-lam) + y * rate_log - np.exp(rate_log) - gammaln(y + 1.0)


def binom_log_f(eta, y, trials):
    """Log-probability of ``y`` successes in ``trials`` under a probit link."""
    eta = np.asarray(eta, dtype=float)
    out = gammaln(trials + 1.0) - gammaln(y + 1.0) - gammaln(trials - y + 1.0)
    if y:
        out = out + y * log_ndtr(eta)
    if trials - y:
        out = out + (trials - y) * log_ndtr(-eta)
    return out


def tilted_kernel(model, y, extra):
    """Log-kernel over the low-dimensional site parameter.

    ZIP kernels take ``(linear predictor, lambda)``; binomial kernels take the
    linear predictor alone.
    """
    model = Likelihood(model)
    y = float(y)
    if model is Likelihood.ZIP:
        return lambda a1, a2: zip_log_f(a1, a2, y, extra)
    return lambda a: binom_log_f(a, y, extra)


def _mills(x):
    """``phi(x) / Phi(x)`` evaluated in log space."""
    return np.exp(-0.5 * x * x - 0.5 * np.log(2.0 * np.pi) - log_ndtr(x))


def binom_grad_hess(eta, y, trials):
    """First and second derivatives of :func:`binom_log_f` in ``eta``."""
    rp, rm = _mills(eta), _mills(-eta)
    g = y * rp - (trials - y) * rm
    h = -y * rp * (eta + rp) - (trials - y) * rm * (rm - eta)
    return g, h


def zip_pos_grad_hess(eta, lam, y, o=0.0):
    """Gradient and (diagonal) Hessian of :func:`zip_log_f` for ``y > 0``."""
    rate = np.exp(eta + o)
    p = expit(lam)
    return np.array([y - rate, -p]), np.array([[-rate, 0.0], [0.0, -p * (1.0 - p)]])


def kernel_components(model, y, extra):
    """Log-concave pieces whose exponentials sum to the tilted kernel.

    Each piece is ``(logker, parts)``: ``logker`` is vectorised like
    :func:`tilted_kernel` and ``parts(a)`` returns value, gradient and Hessian
    at a single point ``a``.  The ZIP kernel at ``y = 0`` is the sum of a
    structural-zero piece ``expit(lambda)`` and a Poisson piece
    ``expit(-lambda) exp(-e^(eta + o))``; every other kernel is one piece.
    """
    model = Likelihood(model)
    y = float(y)
    if model is Likelihood.BINOMIAL_PROBIT:
        def parts(a):
            g, h = binom_grad_hess(a[0], y, extra)
            return float(binom_log_f(a[0], y, extra)), np.array([g]), np.array([[h]])

        return [(lambda a: binom_log_f(a, y, extra), parts)]

    def pois_log(a1, a2):
        r = np.asarray(a1, dtype=float) + extra
        return log_expit(-np.asarray(a2, dtype=float)) + y * r - np.exp(r) - gammaln(y + 1.0)

    def pois_parts(a):
        g, h = zip_pos_grad_hess(a[0], a[1], y, extra)
        return float(pois_log(a[0], a[1])), g, h

    pieces = [(pois_log, pois_parts)]
    if y == 0:
        def zero_log(a1, a2):
            return log_expit(np.asarray(a2, dtype=float)) + 0.0 * np.asarray(a1, dtype=float)

        def zero_parts(a):
            p = expit(a[1])
            return float(log_expit(a[1])), np.array([0.0, 1.0 - p]), np.array([[0.0, 0.0], [0.0, -p * (1.0 - p)]])

        pieces.insert(0, (zero_log, zero_parts))
    return pieces


def laplace_mode(parts, mu_c, Sigma_c, max_iter=100):
    """Mode and inverse curvature of ``log k + log N(.; mu_c, Sigma_c)`` for log-concave ``k``.

    Damped Newton with step halving; ``parts`` is as in :func:`kernel_components`.
    """
    mu_c = np.atleast_1d(np.asarray(mu_c, dtype=float))
    Qc = np.linalg.inv(np.atleast_2d(Sigma_c))

    def obj(a, f):
        d = a - mu_c
        return f - 0.5 * d @ Qc @ d

    a = mu_c.copy()
    f, g, h = parts(a)
    cur = obj(a, f)
    for _ in range(max_iter):
        H = Qc - h
        step = np.linalg.solve(H, g - Qc @ (a - mu_c))
        t = 1.0
        while True:
            b = a + t * step
            fb, gb, hb = parts(b)
            new = obj(b, fb)
            if new >= cur or t < 1e-10:
                break
            t *= 0.5
        done = np.max(np.abs(b - a)) <= 1e-12 * (1.0 + np.max(np.abs(a)))
        a, f, g, h, cur = b, fb, gb, hb, new
        if done:
            break
    S = np.linalg.inv(Qc - h)
    return a, 0.5 * (S + S.T)


def tilted_components(model, y, extra, mu_c, Sigma_c):
    """Kernel pieces paired with the mode-centred Gaussian used to place their nodes.

    Returns a list of ``(logker, mode, curvature_covariance)``.
    """
    return [(lk, *laplace_mode(parts, mu_c, Sigma_c)) for lk, parts in kernel_components(model, y, extra)]
