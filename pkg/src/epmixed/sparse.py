"""Block-sparse global Gaussian approximation over ``theta = (u_1..u_L, gamma, beta)``.

The precision matrix is stored as

    Q = [[bdiag(B11_1..B11_L), B12],
         [B12^T,                B22]]

with precision-mean ``r = (d1, d2)``.  Auxiliary statistics

    Bt12_l = B11_l^{-1} B12_l,   dt1 = sum_l Bt12_l^T d1_l,
    Bbar12 = sum_l B12_l^T Bt12_l,   S = B22 - Bbar12,   T = S^{-1}

give every marginal of interest in time independent of ``L``.
"""
from __future__ import annotations

import json

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .expfam import GaussianMoments, ImproperError, chol, pd_inv, symmetrize


class SparseGlobal:
    def __init__(self, B11, B12, B22, d1, d2):
        self.B11 = np.ascontiguousarray(B11, dtype=float)
        self.L, self.Q = self.B11.shape[0], self.B11.shape[1]
        self.K = np.shape(B22)[0]
        self.B12 = np.ascontiguousarray(np.reshape(B12, (self.L, self.Q, self.K)), dtype=float)
        self.B22 = np.ascontiguousarray(np.reshape(B22, (self.K, self.K)), dtype=float)
        self.d1 = np.ascontiguousarray(np.reshape(d1, (self.L, self.Q)), dtype=float)
        self.d2 = np.ascontiguousarray(np.reshape(d2, (self.K,)), dtype=float)
        if self.L < 1:
            raise ValueError("need at least one group")
        self.rollbacks = 0
        self.refresh_aux()

    # -- bookkeeping -------------------------------------------------------

    @property
    def dim(self):
        return self.L * self.Q + self.K

    def copy(self):
        g = SparseGlobal.__new__(SparseGlobal)
        g.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})
        return g

    def refresh_aux(self):
        """Recompute all auxiliary statistics from the base blocks."""
        Bt12 = np.empty_like(self.B12)
        for l in range(self.L):
            c = chol(self.B11[l])
            Bt12[l] = cho_solve((c, True), self.B12[l])
        self.Bt12 = Bt12
        self.dt1 = np.einsum("lqk,lq->k", Bt12, self.d1)
        self.Bbar12 = symmetrize(np.einsum("lqj,lqk->jk", self.B12, Bt12))
        self._set_schur(symmetrize(self.B22 - self.Bbar12))

    def _set_schur(self, S):
        self.S = S
        self.T = symmetrize(pd_inv(S)) if self.K else np.zeros((0, 0))

    # -- marginals ---------------------------------------------------------

    def _eps_mean(self):
        return self.T @ (self.d2 - self.dt1)

    def marginal_u(self, l: int) -> GaussianMoments:
        B11inv = pd_inv(self.B11[l])
        Bt = self.Bt12[l]
        Sigma = symmetrize(B11inv + Bt @ self.T @ Bt.T)
        mu = B11inv @ self.d1[l] - Bt @ self._eps_mean()
        return GaussianMoments(mu, Sigma)

    def marginal_u_all(self):
        """Means ``(L, Q)`` and covariances ``(L, Q, Q)`` of every ``u_l``."""
        B11inv = np.linalg.inv(self.B11)
        B11inv = 0.5 * (B11inv + np.swapaxes(B11inv, 1, 2))
        BtT = self.Bt12 @ self.T
        Sigma = B11inv + BtT @ np.swapaxes(self.Bt12, 1, 2)
        Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, 1, 2))
        mu = np.einsum("lij,lj->li", B11inv, self.d1) - self.Bt12 @ self._eps_mean()
        return mu, Sigma

    def marginal_alpha(self, l: int) -> GaussianMoments:
        """Joint marginal of ``(u_l, gamma, beta)``."""
        Q = self.Q
        B11inv = pd_inv(self.B11[l])
        Bt = self.Bt12[l]
        BtT = Bt @ self.T
        D = Q + self.K
        Sigma = np.empty((D, D))
        Sigma[:Q, :Q] = B11inv + BtT @ Bt.T
        Sigma[:Q, Q:] = -BtT
        Sigma[Q:, :Q] = -BtT.T
        Sigma[Q:, Q:] = self.T
        me = self._eps_mean()
        mu = np.concatenate([B11inv @ self.d1[l] - Bt @ me, me])
        return GaussianMoments(mu, symmetrize(Sigma))

    def marginal_summaries(self):
        """Marginal means and standard deviations of every coordinate of ``theta``."""
        mu_u, Sig_u = self.marginal_u_all()
        var = np.concatenate([np.einsum("lqq->lq", Sig_u).ravel(), np.diag(self.T)])
        mu = np.concatenate([mu_u.ravel(), self._eps_mean()])
        return mu, np.sqrt(var)

    # -- updates -----------------------------------------------------------

    def apply_delta_alpha(self, l: int, dQ, dr) -> bool:
        """Add a ``(Q+K)``-dim precision/precision-mean change to block ``l``.

        Auxiliary statistics are maintained incrementally.  Returns ``False``
        (state untouched, rollback counted) if the result is not proper.
        """
        Q = self.Q
        dQ = np.asarray(dQ, dtype=float)
        dr = np.asarray(dr, dtype=float)
        return self._update_block(l, dQ[:Q, :Q], dQ[:Q, Q:], dQ[Q:, Q:], dr[:Q], dr[Q:])

    def apply_delta_u(self, l: int, dQ, dr) -> bool:
        return self._update_block(l, np.asarray(dQ, dtype=float), None, None, np.asarray(dr, dtype=float), None)

    def _update_block(self, l, dB11, dB12, dB22, dd1, dd2):
        B11 = symmetrize(self.B11[l] + dB11)
        B12 = self.B12[l] if dB12 is None else self.B12[l] + dB12
        B22 = self.B22 if dB22 is None else symmetrize(self.B22 + dB22)
        d1 = self.d1[l] + dd1
        d2 = self.d2 if dd2 is None else self.d2 + dd2
        try:
            c = chol(B11)
            Bt = cho_solve((c, True), B12)
            Bbar = symmetrize(self.Bbar12 - self.B12[l].T @ self.Bt12[l] + B12.T @ Bt)
            S = symmetrize(B22 - Bbar)
            T = symmetrize(pd_inv(S)) if self.K else S
        except ImproperError:
            self.rollbacks += 1
            return False
        self.dt1 = self.dt1 - self.Bt12[l].T @ self.d1[l] + Bt.T @ d1
        self.B11[l], self.B12[l], self.d1[l], self.Bt12[l] = B11, B12, d1, Bt
        self.B22, self.d2 = B22, d2
        self.Bbar12, self.S, self.T = Bbar, S, T
        return True

    def apply_block_deltas(self, dB11, dB12, dB22, dd1, dd2):
        """Add aggregated per-block changes and refresh all auxiliary statistics.

        Raises :class:`ImproperError` (state restored) if the result is improper.
        """
        saved = (self.B11.copy(), self.B12.copy(), self.B22.copy(), self.d1.copy(), self.d2.copy())
        self.B11 += dB11
        self.B11[:] = 0.5 * (self.B11 + np.swapaxes(self.B11, 1, 2))
        self.B12 += dB12
        self.B22 = symmetrize(self.B22 + dB22)
        self.d1 += dd1
        self.d2 = self.d2 + dd2
        try:
            self.refresh_aux()
        except ImproperError:
            self.B11, self.B12, self.B22, self.d1, self.d2 = saved
            self.refresh_aux()
            raise

    # -- sampling ----------------------------------------------------------

    def _factors(self):
        LB = np.linalg.cholesky(self.B11)
        LS = chol(self.S) if self.K else np.zeros((0, 0))
        return LB, LS

    def _Linv(self, LB, LS, v1, v2):
        x1 = np.stack([solve_triangular(LB[l], v1[l], lower=True) for l in range(self.L)])
        x2 = solve_triangular(LS, v2 - np.einsum("lqk,lq...->k...", self.Bt12, v1), lower=True) if self.K else v2
        return x1, x2

    def _LinvT(self, LB, LS, v1, v2):
        x2 = solve_triangular(LS, v2, lower=True, trans="T") if self.K else v2
        x1 = np.stack([solve_triangular(LB[l], v1[l], lower=True, trans="T") for l in range(self.L)])
        x1 = x1 - np.einsum("lqk,k...->lq...", self.Bt12, x2)
        return x1, x2

    def sample(self, noise):
        """Map standard-normal noise ``(dim,)`` or ``(n, dim)`` to draws from the approximation.

        Uses the block Cholesky factor of the precision; no dense factorisation.
        """
        noise = np.asarray(noise, dtype=float)
        single = noise.ndim == 1
        Z = noise[None, :] if single else noise
        LB, LS = self._factors()
        LQ = self.L * self.Q
        z1 = Z[:, :LQ].T.reshape(self.L, self.Q, -1)
        z2 = Z[:, LQ:].T
        w1, w2 = self._Linv(LB, LS, self.d1[..., None], self.d2[:, None])
        t1, t2 = self._LinvT(LB, LS, w1 + z1, w2 + z2)
        out = np.concatenate([t1.reshape(LQ, -1), t2]).T
        return out[0] if single else out

    # -- dense views / serialisation --------------------------------------

    def to_dense(self):
        """Dense ``(Q, r)``; for tests and small problems only."""
        LQ, Q = self.L * self.Q, self.Q
        M = np.zeros((self.dim, self.dim))
        for l in range(self.L):
            s = slice(l * Q, (l + 1) * Q)
            M[s, s] = self.B11[l]
            M[s, LQ:] = self.B12[l]
            M[LQ:, s] = self.B12[l].T
        M[LQ:, LQ:] = self.B22
        return M, np.concatenate([self.d1.ravel(), self.d2])

    def base_dict(self):
        return {"B11": self.B11, "B12": self.B12, "B22": self.B22, "d1": self.d1, "d2": self.d2}

    def to_json(self) -> str:
        def enc(a):
            return {"shape": list(a.shape), "data": [float(format(v, ".17g")) for v in a.ravel()]}

        aux = {"Bt12": self.Bt12, "dt1": self.dt1, "Bbar12": self.Bbar12, "S": self.S, "T": self.T}
        return json.dumps({k: enc(v) for k, v in {**self.base_dict(), **aux}.items()})

    @classmethod
    def from_json(cls, text: str) -> "SparseGlobal":
        raw = json.loads(text)
        arr = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in raw.items()}
        return cls(arr["B11"], arr["B12"], arr["B22"], arr["d1"], arr["d2"])


def lifted_blocks(data, layout, r_star, Q_star):
    """Per-observation lifted site contributions, split into the sparse blocks.

    Returns ``(uu, ue, ee, ru, re)`` with leading axis over observations.
    """
    N = data.N
    Q, H, P = layout.Q, layout.H, layout.P
    m = 1 + H
    A = np.zeros((N, Q + H + P, m))
    A[:, :Q, 0] = data.Z
    A[:, Q + H:, 0] = data.X
    for h in range(H):
        A[:, Q + h, 1 + h] = 1.0
    Ql = np.einsum("nim,nmk,njk->nij", A, Q_star.reshape(N, m, m), A)
    rl = np.einsum("nim,nm->ni", A, r_star.reshape(N, m))
    return Ql[:, :Q, :Q], Ql[:, :Q, Q:], Ql[:, Q:, Q:], rl[:, :Q], rl[:, Q:]


def assemble(sites, data, layout) -> SparseGlobal:
    """Build the global approximation from all Gaussian site approximations."""
    L, Q, K = layout.L, layout.Q, layout.K
    uu, ue, ee, ru, re = lifted_blocks(data, layout, sites.like_r, sites.like_Q)
    B11 = sites.re_Q.copy()
    d1 = sites.re_r.copy()
    B12 = np.zeros((L, Q, K))
    np.add.at(B11, data.group, uu)
    np.add.at(B12, data.group, ue)
    np.add.at(d1, data.group, ru)
    B22 = sites.prior_Q + ee.sum(axis=0)
    d2 = sites.prior_r + re.sum(axis=0)
    return SparseGlobal(B11, B12, B22, d1, d2)
