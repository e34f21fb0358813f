"""Validation oracles.

* :func:`dense_ep_fit` runs the same EP updates on the full, unstructured
  precision matrix (no sparsity is exploited; per-pass cost is quadratic
  in ``L`` or worse).
* :func:`mc_tilted_oracle` estimates weighted Gaussian moments by Monte Carlo.
* :func:`rw_metropolis` is a small random-walk Metropolis sampler, with
  :func:`glmm_logpost` giving the GLMM log posterior in an unconstrained
  (log-Cholesky) parameterisation of ``Sigma``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import qmc
from scipy.linalg.blas import dgemm
from scipy.special import gammaln, log_expit, log_ndtr, ndtr, ndtri

from ._pykernels import TILT_RTOL
from .ep import CHANGE_KEYS, SKIP_NAMES, EPConfig, check_convergence, init_sites
from .expfam import GaussianMoments, IWParams
from .model import Dataset, Likelihood, ModelSpec, PriorSpec, layout_of, rng_for
from .quadrature import TiltedFailure, gauss_hermite, site_tilted_moments


class _NotPD(Exception):
    pass


def _inv_pd(M):
    M = 0.5 * (M + M.T)
    try:
        c = linalg.cho_factor(M, lower=True)
    except linalg.LinAlgError:
        raise _NotPD from None
    if not np.all(np.isfinite(c[0])):
        raise _NotPD
    out = linalg.cho_solve(c, np.eye(M.shape[0]))
    return 0.5 * (out + out.T)


@dataclass
class DenseGlobal:
    """Full precision ``Q`` and precision-mean ``r`` over ``theta``."""

    Q: np.ndarray
    r: np.ndarray
    Sigma: np.ndarray = field(default=None, repr=False)
    mu: np.ndarray = field(default=None, repr=False)

    def refresh(self):
        """Full inversion; also resets any accumulated low-rank drift."""
        S = linalg.inv(0.5 * (self.Q + self.Q.T))
        self.Sigma = np.asfortranarray(0.5 * (S + S.T))
        self.mu = self.Sigma @ self.r

    def update(self, A, dQ, dr) -> bool:
        """``Q += A dQ A'``, ``r += A dr`` with a low-rank update of ``(Sigma, mu)``.

        ``A`` may be a dense ``(D, m)`` matrix or a pair ``(rows, block)``
        giving its nonzero rows.  Returns ``False`` without changing anything
        if the result would not be PD.
        """
        if isinstance(A, tuple):
            rows, Ab = A
        else:
            rows = np.flatnonzero(np.any(A != 0, axis=1))
            Ab = A[rows]
        m = Ab.shape[1]
        V = self.Sigma[:, rows] @ Ab
        S = Ab.T @ V[rows]
        # Q + A dQ A' is PD iff I + R' dQ R is, where S = R R'
        try:
            R = np.linalg.cholesky(0.5 * (S + S.T))
        except np.linalg.LinAlgError:
            return False
        try:
            np.linalg.cholesky(np.eye(m) + R.T @ dQ @ R)
        except np.linalg.LinAlgError:
            return False
        M = dQ @ np.linalg.inv(np.eye(m) + S @ dQ)
        M = 0.5 * (M + M.T)
        amu = Ab.T @ self.mu[rows]
        self.mu = self.mu + V @ (dr - M @ (amu + S @ dr))
        VM = np.asfortranarray(V @ M)
        self.Sigma = dgemm(-1.0, VM, np.asfortranarray(V), beta=1.0, c=self.Sigma, trans_b=True, overwrite_c=True)
        self.Q[np.ix_(rows, rows)] += Ab @ dQ @ Ab.T
        self.r[rows] += Ab @ dr
        return True


@dataclass
class DensePosterior:
    theta: DenseGlobal
    sigma: IWParams
    passes: int
    converged: bool
    skips: dict
    trace: list


class _DenseEP:
    def __init__(self, data: Dataset, spec: ModelSpec, cfg: EPConfig):
        self.data, self.spec, self.cfg = data, spec, cfg
        lay = layout_of(spec, data)
        self.lay = lay
        self.L, self.q, self.H, self.P = lay.L, lay.Q, lay.H, lay.P
        self.D = lay.dim
        self.LQ = lay.L * lay.Q
        self.rule = gauss_hermite(cfg.quad_order)
        s = init_sites(data, spec)
        self.like_r, self.like_Q = s.like_r, s.like_Q
        self.re_r, self.re_Q = s.re_r, s.re_Q
        self.re_Psi, self.re_nu = s.re_Psi, s.re_nu
        self.prior_sigma = s.prior_sigma
        # assemble the dense precision site by site
        Qm = np.zeros((self.D, self.D))
        r = np.zeros(self.D)
        for n in range(data.N):
            rows, Ab = self.rows_like(n, self.A_like(n))
            Qm[np.ix_(rows, rows)] += Ab @ self.like_Q[n] @ Ab.T
            r[rows] += Ab @ self.like_r[n]
        for l in range(self.L):
            sl = slice(l * self.q, (l + 1) * self.q)
            Qm[sl, sl] += self.re_Q[l]
            r[sl] += self.re_r[l]
        Qm[self.LQ:, self.LQ:] += s.prior_Q
        r[self.LQ:] += s.prior_r
        self.g = DenseGlobal(Qm, r)
        self.g.refresh()
        self.sigma = self._sigma_global()
        self.skips_like = np.zeros(4, dtype=np.int64)
        self.skips_re = np.zeros(4, dtype=np.int64)

    def _sigma_global(self):
        q = self.q
        Psi = self.prior_sigma.Psi + self.re_Psi.sum(axis=0)
        nu = self.prior_sigma.nu + self.re_nu.sum() + self.L * (q + 1)
        return IWParams(Psi, nu)

    def A_like(self, n):
        d = self.data
        l = d.group[n]
        A = np.zeros((self.D, 1 + self.H))
        A[l * self.q:(l + 1) * self.q, 0] = d.Z[n]
        A[self.LQ + self.H:, 0] = d.X[n]
        for h in range(self.H):
            A[self.LQ + h, 1 + h] = 1.0
        return A

    def rows_like(self, n, A):
        l = self.data.group[n]
        rows = np.concatenate([np.arange(l * self.q, (l + 1) * self.q), np.arange(self.LQ, self.D)])
        return rows, A[rows]

    def like_site(self, n):
        A = self.A_like(n)
        g = self.g
        rows, Ab = self.rows_like(n, A)
        Sd = Ab.T @ g.Sigma[np.ix_(rows, rows)] @ Ab
        md = Ab.T @ g.mu[rows]
        try:
            Qd = _inv_pd(Sd)
            Qc = Qd - self.like_Q[n]
            rc = Qd @ md - self.like_r[n]
            Sc = _inv_pd(Qc)
        except _NotPD:
            self.skips_like[0] += 1
            return 0.0, 0.0
        cav = GaussianMoments(Sc @ rc, Sc)
        try:
            tm = site_tilted_moments(self.data.likelihood, self.data.y[n], self.data.extra[n], cav, self.rule)
        except (TiltedFailure, ValueError, np.linalg.LinAlgError):
            self.skips_like[1] += 1
            return 0.0, 0.0
        I0, I1, I2 = tm.I0, tm.I1, tm.I2
        mh = I1 / I0
        Sh = I2 / I0 - np.outer(mh, mh)
        try:
            Qh = _inv_pd(Sh)
            # quadrature collapse: tilted far narrower than the cavity
            if linalg.eigh(0.5 * (Sh + Sh.T), Sc, eigvals_only=True)[0] < TILT_RTOL:
                raise _NotPD
        except _NotPD:
            self.skips_like[2] += 1
            return 0.0, 0.0
        delta = self.cfg.damping
        dQ = delta * ((Qh - Qc) - self.like_Q[n])
        dQ = 0.5 * (dQ + dQ.T)
        dr = delta * ((Qh @ mh - rc) - self.like_r[n])
        if not g.update(self.rows_like(n, A), dQ, dr):
            self.skips_like[3] += 1
            return 0.0, 0.0
        self.like_Q[n] = self.like_Q[n] + dQ
        self.like_Q[n] = 0.5 * (self.like_Q[n] + self.like_Q[n].T)
        self.like_r[n] = self.like_r[n] + dr
        return np.linalg.norm(dr), np.linalg.norm(dQ)

    def re_site(self, l):
        q = self.q
        sl = slice(l * q, (l + 1) * q)
        Psi_c = self.sigma.Psi - self.re_Psi[l]
        nu_c = self.sigma.nu - self.re_nu[l] - (q + 1)
        try:
            if not nu_c > q - 1:
                raise _NotPD
            Pinv = _inv_pd(Psi_c)
            Qg = _inv_pd(self.g.Sigma[sl, sl])
            rg = Qg @ self.g.mu[sl]
            w = 2.0 / (nu_c + 1.0)
            Qc = Qg + w * self.re_Q[l]
            rc = rg + w * self.re_r[l]
            Sc = _inv_pd(Qc)
        except _NotPD:
            self.skips_re[0] += 1
            return 0.0, 0.0
        mc = Sc @ rc
        # moments of (1 + u' Pinv u) N(u; mc, Sc)
        k = 1.0 + np.sum(Pinv * Sc) + mc @ Pinv @ mc
        a = Sc @ Pinv @ mc
        m1 = (k * mc + 2.0 * a) / k
        m2 = (k * (Sc + np.outer(mc, mc)) + 2.0 * (Sc @ Pinv @ Sc + np.outer(a, mc) + np.outer(mc, a))) / k
        Sh = m2 - np.outer(m1, m1)
        try:
            Qh = _inv_pd(Sh)
        except _NotPD:
            self.skips_re[2] += 1
            return 0.0, 0.0
        c = -(nu_c + 1.0) / 2.0
        delta = self.cfg.damping
        dQ = delta * (c * (Qh - Qc) - self.re_Q[l])
        dQ = 0.5 * (dQ + dQ.T)
        dr = delta * (c * (Qh @ m1 - rc) - self.re_r[l])
        if not self.g.update((np.arange(l * q, (l + 1) * q), np.eye(q)), dQ, dr):
            self.skips_re[3] += 1
            return 0.0, 0.0
        self.re_Q[l] = self.re_Q[l] + dQ
        self.re_Q[l] = 0.5 * (self.re_Q[l] + self.re_Q[l].T)
        self.re_r[l] = self.re_r[l] + dr
        return np.linalg.norm(dr), np.linalg.norm(dQ)

    def mp(self):
        q, L = self.q, self.L
        pri = self.spec.priors
        den = pri.nu_Sigma + L - q - 1
        acc = pri.Psi_Sigma.copy()
        var_term = np.zeros(q)
        diag_sum = np.zeros(q)
        for l in range(L):
            sl = slice(l * q, (l + 1) * q)
            S, m = self.g.Sigma[sl, sl], self.g.mu[sl]
            acc = acc + S + np.outer(m, m)
            for i in range(q):
                var_term[i] += 2 * S[i, i] ** 2 + 4 * S[i, i] * m[i] ** 2
                diag_sum[i] += S[i, i] + m[i] ** 2
        EO = acc / den
        Ew = 2 * sum(var_term[i] + (pri.Psi_Sigma[i, i] + diag_sum[i]) ** 2 for i in range(q))
        Ew /= den**2 * (pri.nu_Sigma + L - q - 3)
        nu = 2 * sum(EO[i, i] ** 2 for i in range(q)) / Ew + q + 3
        Psi = (nu - q - 1) * EO
        new_Psi = (Psi - pri.Psi_Sigma) / L
        new_nu = (nu - pri.nu_Sigma) / L - q - 1
        dPsi = max(np.linalg.norm(new_Psi - self.re_Psi[l]) for l in range(L))
        dnu = max(abs(new_nu - self.re_nu[l]) for l in range(L))
        self.re_Psi[:] = new_Psi
        self.re_nu[:] = new_nu
        self.sigma = IWParams(0.5 * (Psi + Psi.T), nu)
        return dPsi, dnu

    def run_pass(self):
        self.g.refresh()
        cr = cQ = 0.0
        for n in range(self.data.N):
            a, b = self.like_site(n)
            cr, cQ = max(cr, a), max(cQ, b)
        er = eQ = 0.0
        for l in range(self.L):
            a, b = self.re_site(l)
            er, eQ = max(er, a), max(eQ, b)
        # the MP step uses fresh marginals of the updated global
        self.g.refresh()
        sp, sn = self.mp()
        return dict(zip(CHANGE_KEYS, map(float, (cr, cQ, er, eQ, sp, sn))))


def dense_ep_fit(data: Dataset, spec: ModelSpec, cfg: EPConfig | None = None, on_pass=None) -> DensePosterior:
    """EP with a dense global approximation, sequential schedule only.

    ``on_pass(passes, theta, sigma)`` is called after every pass.
    """
    cfg = cfg or EPConfig()
    ep = _DenseEP(data, spec, cfg)
    history, trace = [], []
    converged = False
    passes = 0
    while passes < cfg.max_passes and not converged:
        t0 = time.perf_counter()
        ch = ep.run_pass()
        passes += 1
        history.append(ch)
        trace.append({"pass": passes, **ch, "seconds": time.perf_counter() - t0})
        converged = check_convergence(history, cfg)
        if on_pass is not None:
            on_pass(passes, ep.g, ep.sigma)
    skips = {"like": dict(zip(SKIP_NAMES, map(int, ep.skips_like))),
             "re": dict(zip(SKIP_NAMES, map(int, ep.skips_re)))}
    return DensePosterior(ep.g, ep.sigma, passes, converged, skips, trace)


# ---------------------------------------------------------------------------
# Monte-Carlo tilted moments


@dataclass
class MCMoments:
    mu: np.ndarray
    Sigma: np.ndarray
    se_mu: np.ndarray
    se_Sigma: np.ndarray


def mc_tilted_oracle(weight, gaussian: GaussianMoments, draws: int, seed: int, sobol: bool = False) -> MCMoments:
    """Self-normalised importance estimates of the moments of ``weight(u) N(u; mu, Sigma)``.

    ``weight`` maps an ``(n, d)`` array of draws to ``n`` nonnegative weights.
    Standard errors use the delta method for ratio estimators.  With
    ``sobol=True`` the normal draws come from a scrambled Sobol sequence
    (``draws`` rounded up to a power of two); the reported standard errors
    are then the i.i.d. ones and overstate the actual error.
    """
    if draws < 10_000:
        raise ValueError("need at least 1e4 draws")
    rng = rng_for(seed, "sample")
    mu = np.atleast_1d(np.asarray(gaussian.mu, dtype=float))
    C = np.linalg.cholesky(np.atleast_2d(gaussian.Sigma))
    if sobol:
        pts = qmc.Sobol(mu.size, scramble=True, seed=rng).random_base2(int(np.ceil(np.log2(draws))))
        z = ndtri(pts)
    else:
        z = rng.standard_normal((draws, mu.size))
    u = mu + z @ C.T
    w = np.asarray(weight(u), dtype=float)
    tot = w.sum()
    if not (tot > 0 and np.isfinite(tot)):
        raise ValueError("total weight is zero or not finite")
    wn = w / tot
    m = wn @ u
    c = u - m
    outer = c[:, :, None] * c[:, None, :]
    S = np.einsum("n,nij->ij", wn, outer)
    se_m = np.sqrt(np.einsum("n,ni->i", wn**2, c**2))
    se_S = np.sqrt(np.einsum("n,nij->ij", wn**2, (outer - S) ** 2))
    return MCMoments(m, S, se_m, se_S)


# ---------------------------------------------------------------------------
# random-walk Metropolis


@dataclass
class MCMCResult:
    samples: np.ndarray
    acceptance: float
    logpost: np.ndarray


def rw_metropolis(logpost, x0, iters: int, step, seed: int, thin: int = 1, burn: int = 0) -> MCMCResult:
    """Gaussian random-walk Metropolis.

    ``step`` is a scalar, a per-coordinate scale vector, or a proposal
    Cholesky factor.  Draws after ``burn`` iterations are kept every ``thin``.
    """
    x = np.array(x0, dtype=float)
    d = x.size
    lp = float(logpost(x))
    if not np.isfinite(lp):
        raise ValueError("log posterior is not finite at the initial point")
    step = np.asarray(step, dtype=float)
    if step.ndim == 0:
        step = np.full(d, float(step))
    if step.ndim == 1:
        step = np.diag(step)
    rng = rng_for(seed, "mcmc")
    n_keep = max(0, (iters - burn) // thin)
    out = np.empty((n_keep, d))
    lps = np.empty(n_keep)
    logu = np.log(rng.random(iters))
    accepted = 0
    k = 0
    block = 65536
    for start in range(0, iters, block):
        stop = min(iters, start + block)
        noise = rng.standard_normal((stop - start, d)) @ step.T
        for i in range(start, stop):
            prop = x + noise[i - start]
            lq = logpost(prop)
            if logu[i] < lq - lp:
                x, lp = prop, lq
                accepted += 1
            if i >= burn and (i - burn) % thin == 0 and k < n_keep:
                out[k] = x
                lps[k] = lp
                k += 1
    return MCMCResult(out[:k], accepted / iters, lps[:k])


def log_chol_to_sigma(phi, Q):
    """Lower-triangular parameters (log diagonal) to ``Sigma = L L'``."""
    Lm = np.zeros((Q, Q))
    Lm[np.tril_indices(Q)] = phi
    di = np.diag_indices(Q)
    Lm[di] = np.exp(Lm[di])
    return Lm @ Lm.T, Lm


def glmm_logpost(data: Dataset, spec: ModelSpec):
    """Log posterior over ``(u, gamma, beta, phi)`` where ``phi`` is the log-Cholesky of ``Sigma``.

    Includes the Jacobian of the map ``phi -> Sigma``.
    """
    lay = layout_of(spec, data)
    L, Q, H, P = lay.L, lay.Q, lay.H, lay.P
    LQ = L * Q
    pri = spec.priors
    prior_r, prior_Q = spec.prior_eps()
    y, Z, X, grp, extra = data.y, data.Z, data.X, data.group, data.extra
    zip_ = data.likelihood is Likelihood.ZIP
    Psi, nu = pri.Psi_Sigma, pri.nu_Sigma
    diag_pos = np.cumsum(np.arange(1, Q + 1)) - 1  # positions of L_ii in tril order
    jac_pow = Q - np.arange(Q) + 1.0
    if zip_:
        lgy = gammaln(y + 1.0)
        zero = y == 0
    else:
        lconst = np.sum(gammaln(extra + 1.0) - gammaln(y + 1.0) - gammaln(extra - y + 1.0))
    nq = Q * (Q + 1) // 2

    def logpost(theta):
        u = theta[:LQ].reshape(L, Q)
        eps = theta[LQ:LQ + H + P]
        phi = theta[LQ + H + P:LQ + H + P + nq]
        Sigma, Lm = log_chol_to_sigma(phi, Q)
        beta = eps[H:]
        eta = np.einsum("nq,nq->n", Z, u[grp]) + X @ beta
        if zip_:
            lam = eps[0]
            rl = eta + extra
            ll = np.where(zero, np.logaddexp(log_expit(lam), log_expit(-lam) - np.exp(rl)),
                          log_expit(-lam) + y * rl - np.exp(rl) - lgy).sum()
        else:
            ll = lconst + np.sum(y * log_ndtr(eta) + (extra - y) * log_ndtr(-eta))
        lp_eps = -0.5 * eps @ prior_Q @ eps + prior_r @ eps
        # u_l ~ N(0, Sigma)
        w = linalg.solve_triangular(Lm, u.T, lower=True)
        logdet = 2.0 * np.sum(phi[diag_pos])
        lp_u = -0.5 * np.sum(w * w) - 0.5 * L * logdet
        # inverse-Wishart prior on Sigma
        Li = linalg.solve_triangular(Lm, np.eye(Q), lower=True)
        lp_s = -0.5 * (nu + Q + 1) * logdet - 0.5 * np.sum((Li @ Psi) * Li)
        log_jac = Q * np.log(2.0) + np.sum(jac_pow * phi[diag_pos])
        out = ll + lp_eps + lp_u + lp_s + log_jac
        return out if np.isfinite(out) else -np.inf

    return logpost


# ---------------------------------------------------------------------------
# comparison helpers


def rel_diff(a, b) -> float:
    """Array-scale relative difference ``max|a - b| / max|b|``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    scale = np.max(np.abs(b), initial=0.0)
    diff = np.max(np.abs(a - b), initial=0.0)
    return float(diff / scale) if scale > 0 else float(diff)


def global_params(theta, sigma: IWParams) -> dict:
    """Copies of the natural parameters ``Q``, ``r``, ``Psi``, ``nu`` of ``q1 * q2``, sparse or dense."""
    if isinstance(theta, DenseGlobal):
        Qm, r = theta.Q, theta.r
    else:
        Qm, r = theta.to_dense()
    return {"Q": np.array(Qm), "r": np.array(r), "Psi": np.array(sigma.Psi), "nu": np.float64(sigma.nu)}


def max_rel_diff(p: dict, q: dict) -> float:
    """Largest :func:`rel_diff` over the parameters shared by two :func:`global_params` dicts."""
    return max(rel_diff(p[k], q[k]) for k in p)


def random_instance(seed: int, likelihood, max_groups: int = 10, max_obs: int = 100, Q: int | None = None):
    """A small random GLMM dataset and model with vague priors.

    Group count (at least 2, so moment propagation is defined under the
    default prior), group sizes, ``Q`` in {1, 2, 3} (unless given), ``P`` in
    {1, 2, 3}, parameters and covariates are all drawn from the
    ``instance`` stream of ``seed``.
    """
    rng = rng_for(seed, "instance")
    likelihood = Likelihood(likelihood)
    L = int(rng.integers(2, max_groups + 1))
    per = max(1, max_obs // L)
    sizes = rng.integers(1, min(per, 10) + 1, size=L)
    group = np.repeat(np.arange(L), sizes)
    N = group.size
    Q = int(rng.integers(1, 4)) if Q is None else Q
    P = int(rng.integers(1, 4))
    X = rng.standard_normal((N, P))
    X[:, 0] = 1.0
    Z = rng.standard_normal((N, Q))
    Z[:, 0] = 1.0
    A = rng.standard_normal((Q, Q))
    Sigma = 0.3 * (A @ A.T / Q + np.eye(Q))
    u = rng.multivariate_normal(np.zeros(Q), Sigma, size=L)
    beta = 0.5 * rng.standard_normal(P)
    eta = np.einsum("nq,nq->n", Z, u[group]) + X @ beta
    if likelihood is Likelihood.ZIP:
        extra = 0.3 * rng.standard_normal(N)
        zero = rng.random(N) < rng.uniform(0.05, 0.3)
        y = np.where(zero, 0, rng.poisson(np.exp(np.minimum(eta + extra, 4.0))))
    else:
        extra = rng.integers(1, 6, size=N).astype(float)
        y = rng.binomial(extra.astype(int), ndtr(eta))
    data = Dataset(y=y, X=X, Z=Z, group=group, extra=extra, likelihood=likelihood)
    spec = ModelSpec(likelihood, PriorSpec.default(likelihood, P, Q))
    return data, spec
