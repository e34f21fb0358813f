"""Adaptive Gauss-Hermite integration of tilted-distribution moments."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import solve_triangular

from .expfam import GaussianMoments, chol


class TiltedFailure(ArithmeticError):
    """Zeroth moment of a tilted distribution is not positive and finite."""


@dataclass(frozen=True)
class QuadRule:
    """Nodes and weights integrating against the standard normal density."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray


@lru_cache(maxsize=None)
def gauss_hermite(order: int) -> QuadRule:
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    x, w = hermegauss(order)
    w = w / np.sqrt(2.0 * np.pi)
    x.setflags(write=False)
    w.setflags(write=False)
    return QuadRule(order, x, w)


class TiltedMoments(NamedTuple):
    """Unnormalised moments, each scaled by ``exp(-log_scale)``."""

    I0: float
    I1: np.ndarray
    I2: np.ndarray
    log_scale: float

    def normalized(self):
        mu = self.I1 / self.I0
        return mu, self.I2 / self.I0 - np.multiply.outer(mu, mu)


def _weights_from_logs(logk, w):
    logk = np.asarray(logk, dtype=float)
    if not np.all(np.isfinite(logk) | (logk == -np.inf)):
        raise TiltedFailure("non-finite log kernel")
    m = np.max(logk)
    if not np.isfinite(m):
        raise TiltedFailure("kernel vanishes at all nodes")
    return w * np.exp(logk - m), m


def tilted_moments_1d(logker, cavity: GaussianMoments, rule: QuadRule, center: GaussianMoments | None = None) -> TiltedMoments:
    """Unnormalised moments of ``ker(a) N(a; cavity)``.

    Nodes sit at ``m + s x_i`` where ``(m, s^2)`` is ``center`` (default: the
    cavity itself); the cavity density is reweighted onto that grid.
    """
    mu = float(cavity.mu[0])
    var = float(cavity.Sigma[0, 0])
    if not var > 0:
        raise TiltedFailure("cavity variance must be positive")
    if center is None:
        a = mu + np.sqrt(var) * rule.nodes
        logk = logker(a)
    else:
        m, s = float(center.mu[0]), float(np.sqrt(center.Sigma[0, 0]))
        if not s > 0:
            raise TiltedFailure("grid scale must be positive")
        x = rule.nodes
        a = m + s * x
        logk = logker(a) - 0.5 * ((a - mu) ** 2 / var - x * x) + np.log(s) - 0.5 * np.log(var)
    wk, lm = _weights_from_logs(logk, rule.weights)
    I0 = wk.sum()
    if not (I0 > 0 and np.isfinite(I0)):
        raise TiltedFailure("zeroth moment not positive")
    return TiltedMoments(I0, np.array([wk @ a]), np.array([[wk @ (a * a)]]), lm)


def tilted_moments_2d(logker, cavity: GaussianMoments, rule: QuadRule, center: GaussianMoments | None = None) -> TiltedMoments:
    """Bivariate analogue of :func:`tilted_moments_1d` on a tensor-product grid."""
    Lc = chol(cavity.Sigma)
    g1, g2 = np.meshgrid(rule.nodes, rule.nodes, indexing="ij")
    std = np.stack([g1.ravel(), g2.ravel()])
    w = np.outer(rule.weights, rule.weights).ravel()
    if center is None:
        pts = cavity.mu[:, None] + Lc @ std
        logk = logker(pts[0], pts[1])
    else:
        Lg = chol(center.Sigma)
        pts = center.mu[:, None] + Lg @ std
        z = solve_triangular(Lc, pts - cavity.mu[:, None], lower=True)
        adj = -0.5 * (np.sum(z * z, axis=0) - np.sum(std * std, axis=0))
        adj += np.sum(np.log(np.diag(Lg))) - np.sum(np.log(np.diag(Lc)))
        logk = logker(pts[0], pts[1]) + adj
    wk, lm = _weights_from_logs(logk, w)
    I0 = wk.sum()
    if not (I0 > 0 and np.isfinite(I0)):
        raise TiltedFailure("zeroth moment not positive")
    I1 = pts @ wk
    I2 = (pts * wk) @ pts.T
    return TiltedMoments(I0, I1, I2, lm)


def combine(parts) -> TiltedMoments:
    """Sum of unnormalised moments held at different log scales."""
    parts = list(parts)
    m = max(t.log_scale for t in parts)
    c = [np.exp(t.log_scale - m) for t in parts]
    return TiltedMoments(sum(ci * t.I0 for ci, t in zip(c, parts)),
                         sum(ci * t.I1 for ci, t in zip(c, parts)),
                         sum(ci * t.I2 for ci, t in zip(c, parts)), m)


def site_tilted_moments(model, y, extra, cavity: GaussianMoments, rule: QuadRule) -> TiltedMoments:
    """Tilted moments of one likelihood site.

    Each log-concave piece of the kernel is integrated on its own grid,
    centred at the mode of that piece times the cavity and scaled by the
    curvature there.
    """
    from .likelihoods import tilted_components

    f = tilted_moments_1d if cavity.mu.size == 1 else tilted_moments_2d
    return combine(f(lk, cavity, rule, GaussianMoments(mode, cov))
                   for lk, mode, cov in tilted_components(model, y, extra, cavity.mu, cavity.Sigma))
