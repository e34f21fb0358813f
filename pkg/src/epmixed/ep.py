"""Expectation propagation with a block-sparse global approximation.

One pass refines every likelihood site, then every random-effects site in
``theta`` (power EP with closed-form tilted moments), then rewrites all
inverse-Wishart sites in ``Sigma`` with a single moment-propagation step.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from ._pykernels import SiteSkip, site_step
from .expfam import GaussianMoments, ImproperError, IWParams, iw_cavity, iw_combine, pd_inv, symmetrize
from .model import Dataset, Likelihood, ModelSpec, ParamLayout, layout_of
from .quadrature import gauss_hermite
from .sparse import SparseGlobal, assemble

SCHEDULES = ("sequential", "parallel")
CHANGE_KEYS = ("like_r", "like_Q", "re_r", "re_Q", "sigma_Psi", "sigma_nu")
CONV_REFERENCES = ("trailing", "initial")
SKIP_NAMES = ("improper_cavity", "tilted_failure", "tilted_not_pd", "rollback")


class EPFailure(ArithmeticError):
    """The global approximation became improper and could not be rescued."""


@dataclass
class EPConfig:
    damping: float = 0.5
    min_passes: int = 5
    max_passes: int = 100
    conv_frac: float = 0.05
    quad_order: int = 21
    schedule: str = "sequential"
    seed: int = 0
    conv_reference: str = "trailing"

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.min_passes < 1 or self.min_passes > self.max_passes:
            raise ValueError("need 1 <= min_passes <= max_passes")
        if not self.conv_frac > 0:
            raise ValueError("conv_frac must be positive")
        if self.quad_order < 1:
            raise ValueError("quad_order must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.conv_reference not in CONV_REFERENCES:
            raise ValueError(f"conv_reference must be one of {CONV_REFERENCES}")


@dataclass
class SiteStore:
    """All site approximations.

    ``like_*`` are the low-dimensional (1+H) likelihood sites, ``re_*`` the
    Gaussian random-effects sites on each ``u_l`` and ``re_Psi``/``re_nu`` the
    inverse-Wishart sites in ``Sigma``.  Prior sites are exact and never change.
    """

    like_r: np.ndarray
    like_Q: np.ndarray
    re_r: np.ndarray
    re_Q: np.ndarray
    re_Psi: np.ndarray
    re_nu: np.ndarray
    prior_r: np.ndarray
    prior_Q: np.ndarray
    prior_sigma: IWParams

    def copy(self):
        return SiteStore(**{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})

    def sigma_parts(self):
        Q = self.re_Psi.shape[1]
        parts = [self.prior_sigma]
        parts += [IWParams(self.re_Psi[l], self.re_nu[l]) for l in range(self.re_nu.size)]
        return parts, Q


def init_sites(data: Dataset, spec: ModelSpec) -> SiteStore:
    layout = layout_of(spec, data)
    N, L, Q, m = data.N, layout.L, layout.Q, 1 + layout.H
    prior_r, prior_Q = spec.prior_eps()
    return SiteStore(
        like_r=np.zeros((N, m)),
        like_Q=np.tile(np.eye(m), (N, 1, 1)),
        re_r=np.zeros((L, Q)),
        re_Q=np.tile(np.eye(Q), (L, 1, 1)),
        re_Psi=np.tile(np.eye(Q), (L, 1, 1)),
        re_nu=np.full(L, Q + 2.0),
        prior_r=prior_r,
        prior_Q=prior_Q,
        prior_sigma=IWParams(spec.priors.Psi_Sigma.copy(), spec.priors.nu_Sigma),
    )


def model_code(likelihood) -> int:
    return kernels.MODEL_ZIP if Likelihood(likelihood) is Likelihood.ZIP else kernels.MODEL_BINOMIAL


@dataclass
class Refinement:
    """Outcome of refining one site: a damped change, or a skip category."""

    skip: int | None = None
    dr: np.ndarray | None = None
    dQ: np.ndarray | None = None
    lifted_dr: np.ndarray | None = None
    lifted_dQ: np.ndarray | None = None

    @property
    def skipped(self):
        return self.skip is not None


def _reduction(data, n, H):
    Q, P = data.Q, data.P
    A = np.zeros((Q + H + P, 1 + H))
    A[:Q, 0] = data.Z[n]
    A[Q + H:, 0] = data.X[n]
    for h in range(H):
        A[Q + h, 1 + h] = 1.0
    return A


def refine_like_site(n: int, g: SparseGlobal, sites: SiteStore, data: Dataset, cfg: EPConfig) -> Refinement:
    """Damped change of likelihood site ``n`` against ``g``; nothing is mutated."""
    H = sites.like_r.shape[1] - 1
    l = int(data.group[n])
    A = _reduction(data, n, H)
    marg = g.marginal_alpha(l)
    try:
        dr, dQ = site_step(marg.Sigma, marg.mu, A, sites.like_r[n], sites.like_Q[n],
                           model_code(data.likelihood), data.y[n], data.extra[n],
                           gauss_hermite(cfg.quad_order), cfg.damping)
    except SiteSkip as s:
        return Refinement(skip=s.category)
    return Refinement(dr=dr, dQ=dQ, lifted_dr=A @ dr, lifted_dQ=A @ dQ @ A.T)


def re_tilted_moments(cavity_u: GaussianMoments, cavity_sigma: IWParams):
    """Mean and covariance of the power-EP tilted distribution of one ``u_l``.

    The tilted kernel is ``(1 + u' Psi^-1 u) N(u; mu, Sigma)``, whose moments
    follow from Gaussian moments of quadratic forms.
    """
    mu = np.asarray(cavity_u.mu, dtype=float)
    S = symmetrize(cavity_u.Sigma)
    Psi = np.asarray(cavity_sigma.Psi, dtype=float)
    Q = mu.size
    if not cavity_sigma.nu > Q - 1:
        raise ImproperError("inverse-Wishart cavity degrees of freedom too small")
    Pinv = pd_inv(Psi)
    pd_inv(S)  # validates
    Pm = Pinv @ mu
    c = 1.0 + np.trace(Pinv @ S) + mu @ Pm
    SPm = S @ Pm
    I1 = c * mu + 2.0 * SPm
    I2 = c * (S + np.outer(mu, mu)) + 2.0 * (S @ Pinv @ S + np.outer(SPm, mu) + np.outer(mu, SPm))
    mh = I1 / c
    return mh, symmetrize(I2 / c - np.outer(mh, mh))


def re_downdate_coef(nu_cavity: float) -> float:
    """Weight of the random-effects site when forming the Gaussian cavity."""
    return 2.0 / (nu_cavity + 1.0)


def re_update_coef(nu_cavity: float) -> float:
    """Scale mapping the tilted-minus-cavity precision change to the site."""
    return -(nu_cavity + 1.0) / 2.0


def refine_re_site(l: int, g: SparseGlobal, sites: SiteStore, sigma_global: IWParams, cfg: EPConfig) -> Refinement:
    """Power-EP refinement of the Gaussian random-effects site on ``u_l``."""
    Q = g.Q
    try:
        cav_s = iw_cavity(sigma_global, IWParams(sites.re_Psi[l], sites.re_nu[l]), Q)
        marg = g.marginal_u(l)
        Qg = symmetrize(pd_inv(marg.Sigma))
        rg = Qg @ marg.mu
        coef = re_downdate_coef(cav_s.nu)
        Qc = symmetrize(Qg + coef * sites.re_Q[l])
        rc = rg + coef * sites.re_r[l]
        Sc = symmetrize(pd_inv(Qc))
    except ImproperError:
        return Refinement(skip=0)
    try:
        mh, Sh = re_tilted_moments(GaussianMoments(Sc @ rc, Sc), cav_s)
    except ImproperError:
        return Refinement(skip=1)
    if not (np.all(np.isfinite(mh)) and np.all(np.isfinite(Sh))):
        return Refinement(skip=1)
    try:
        Qh = symmetrize(pd_inv(Sh))
    except ImproperError:
        return Refinement(skip=2)
    rh = Qh @ mh
    scale = re_update_coef(cav_s.nu)
    dQ = symmetrize(cfg.damping * (scale * (Qh - Qc) - sites.re_Q[l]))
    dr = cfg.damping * (scale * (rh - rc) - sites.re_r[l])
    return Refinement(dr=dr, dQ=dQ, lifted_dr=dr, lifted_dQ=dQ)


def mp_expectations(mu_u, Sigma_u, Psi_prior, nu_prior):
    """``E[Omega]`` and ``E[omega]`` under ``q1`` from the ``u_l`` marginals."""
    L, Q = mu_u.shape
    if not nu_prior + L > Q + 3:
        raise ValueError(f"moment propagation needs nu_Sigma + L > Q + 3 (got {nu_prior} + {L}, Q={Q})")
    a = nu_prior + L - Q - 1
    second = Sigma_u.sum(axis=0) + mu_u.T @ mu_u
    E_Omega = (Psi_prior + second) / a
    d = np.einsum("lii->li", Sigma_u)
    m2 = mu_u**2
    var_part = (2.0 * d**2 + 4.0 * d * m2).sum(axis=0)
    mean_part = (np.diag(Psi_prior) + (d + m2).sum(axis=0)) ** 2
    E_omega = 2.0 * np.sum(var_part + mean_part) / (a**2 * (nu_prior + L - Q - 3))
    return symmetrize(E_Omega), float(E_omega)


def mp_match(E_Omega, E_omega):
    """Inverse-Wishart parameters with the given mean and summed diagonal variance."""
    Q = E_Omega.shape[0]
    nu = 2.0 * np.sum(np.diag(E_Omega) ** 2) / E_omega + Q + 3
    return IWParams(symmetrize((nu - Q - 1) * E_Omega), nu)


def mp_step(g: SparseGlobal, sites: SiteStore, priors) -> IWParams:
    """Rewrite every inverse-Wishart site; returns the new ``q2`` parameters."""
    mu_u, Sigma_u = g.marginal_u_all()
    E_Omega, E_omega = mp_expectations(mu_u, Sigma_u, priors.Psi_Sigma, priors.nu_Sigma)
    try:
        pd_inv(E_Omega)
    except ImproperError:
        raise ImproperError("expected full-conditional mean of Sigma is not positive definite") from None
    new = mp_match(E_Omega, E_omega)
    L, Q = mu_u.shape
    sites.re_Psi[:] = (new.Psi - priors.Psi_Sigma) / L
    sites.re_nu[:] = (new.nu - priors.nu_Sigma) / L - Q - 1
    return new


def check_convergence(history, cfg: EPConfig) -> bool:
    """True when every change type fell below ``conv_frac`` times a 4-pass reference mean.

    The reference is the four passes preceding the current one (``trailing``)
    or the first four passes of the run (``initial``).
    """
    if len(history) < max(cfg.min_passes, 5):
        return False
    cur = history[-1]
    prev = history[:4] if cfg.conv_reference == "initial" else history[-5:-1]
    for key in CHANGE_KEYS:
        c = cur[key]
        if c == 0.0:
            continue
        if not c < cfg.conv_frac * np.mean([h[key] for h in prev]):
            return False
    return True


# ---------------------------------------------------------------------------
# pass machinery (shared with the distributed central node)


class EPState:
    """Mutable EP state: global approximation, sites and ``q2``."""

    def __init__(self, data: Dataset, spec: ModelSpec, cfg: EPConfig, backend=None):
        self.data, self.spec, self.cfg = data, spec, cfg
        self.layout: ParamLayout = layout_of(spec, data)
        self.kern = kernels.get(backend)
        self.rule = gauss_hermite(cfg.quad_order)
        self.model = model_code(data.likelihood)
        self.y = np.ascontiguousarray(data.y, dtype=np.float64)
        self.extra = np.ascontiguousarray(data.extra, dtype=np.float64)
        self.X = np.ascontiguousarray(data.X, dtype=np.float64)
        self.Z = np.ascontiguousarray(data.Z, dtype=np.float64)
        self.group = np.ascontiguousarray(data.group, dtype=np.int64)
        self.sites = init_sites(data, spec)
        self.g = assemble(self.sites, data, self.layout)
        self.sigma = iw_combine(*self.sites.sigma_parts())
        self.skips_like = np.zeros(kernels.N_SKIP, dtype=np.int64)
        self.skips_re = np.zeros(kernels.N_SKIP, dtype=np.int64)
        self.history = []
        self.trace = []
        self.passes = 0

    # -- likelihood sites ---------------------------------------------------

    def like_pass_sequential(self):
        N = self.data.N
        cr, cQ = np.zeros(N), np.zeros(N)
        order = np.arange(N, dtype=np.int64)
        sk = self.kern.like_pass_sequential(
            self.g, self.sites.like_r, self.sites.like_Q, self.y, self.extra, self.X, self.Z,
            self.group, order, self.model, self.rule, self.cfg.damping, cr, cQ)
        self.skips_like += sk
        return float(cr.max(initial=0.0)), float(cQ.max(initial=0.0))

    def like_deltas(self, idx):
        """Refine sites ``idx`` against the current global; returns block deltas and changes."""
        L, Q, K = self.g.L, self.g.Q, self.g.K
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        out = {
            "dB11": np.zeros((L, Q, Q)), "dB12": np.zeros((L, Q, K)), "dB22": np.zeros((K, K)),
            "dd1": np.zeros((L, Q)), "dd2": np.zeros(K),
        }
        cr, cQ = np.zeros(idx.size), np.zeros(idx.size)
        sk = self.kern.like_deltas_parallel(
            self.g, self.sites.like_r, self.sites.like_Q, self.y, self.extra, self.X, self.Z,
            self.group, idx, self.model, self.rule, self.cfg.damping,
            out["dB11"], out["dB12"], out["dB22"], out["dd1"], out["dd2"], cr, cQ)
        return out, np.asarray(sk), float(cr.max(initial=0.0)), float(cQ.max(initial=0.0))

    def apply_like_deltas(self, d):
        try:
            self.g.apply_block_deltas(d["dB11"], d["dB12"], d["dB22"], d["dd1"], d["dd2"])
        except ImproperError:
            raise EPFailure(f"global approximation improper after likelihood updates in pass {self.passes + 1}") from None

    def like_pass_parallel(self):
        saved = (self.sites.like_r.copy(), self.sites.like_Q.copy())
        d, sk, cr, cQ = self.like_deltas(np.arange(self.data.N))
        try:
            self.apply_like_deltas(d)
        except EPFailure:
            self.sites.like_r, self.sites.like_Q = saved
            raise
        self.skips_like += sk
        return cr, cQ

    # -- random-effects sites and MP -------------------------------------------

    def re_pass(self, parallel: bool):
        L, Q = self.g.L, self.g.Q
        cr = cQ = 0.0
        if parallel:
            dB11, dd1 = np.zeros((L, Q, Q)), np.zeros((L, Q))
            upd = []
            for l in range(L):
                ref = refine_re_site(l, self.g, self.sites, self.sigma, self.cfg)
                if ref.skipped:
                    self.skips_re[ref.skip] += 1
                    continue
                dB11[l], dd1[l] = ref.dQ, ref.dr
                upd.append((l, ref))
            try:
                self.g.apply_block_deltas(dB11, np.zeros_like(self.g.B12), np.zeros_like(self.g.B22), dd1,
                                          np.zeros_like(self.g.d2))
            except ImproperError:
                raise EPFailure(f"global approximation improper after random-effects updates in pass {self.passes + 1}") from None
            for l, ref in upd:
                self.sites.re_Q[l] = symmetrize(self.sites.re_Q[l] + ref.dQ)
                self.sites.re_r[l] += ref.dr
                cr, cQ = max(cr, np.linalg.norm(ref.dr)), max(cQ, np.linalg.norm(ref.dQ))
        else:
            for l in range(L):
                ref = refine_re_site(l, self.g, self.sites, self.sigma, self.cfg)
                if ref.skipped:
                    self.skips_re[ref.skip] += 1
                    continue
                if not self.g.apply_delta_u(l, ref.dQ, ref.dr):
                    self.skips_re[3] += 1
                    continue
                self.sites.re_Q[l] = symmetrize(self.sites.re_Q[l] + ref.dQ)
                self.sites.re_r[l] += ref.dr
                cr, cQ = max(cr, np.linalg.norm(ref.dr)), max(cQ, np.linalg.norm(ref.dQ))
        return float(cr), float(cQ)

    def mp(self):
        old_Psi, old_nu = self.sites.re_Psi.copy(), self.sites.re_nu.copy()
        try:
            self.sigma = mp_step(self.g, self.sites, self.spec.priors)
        except ImproperError as e:
            raise EPFailure(str(e)) from None
        dPsi = np.linalg.norm(self.sites.re_Psi - old_Psi, axis=(1, 2)).max()
        dnu = np.abs(self.sites.re_nu - old_nu).max()
        return float(dPsi), float(dnu)

    # -- full pass -------------------------------------------------------------

    def finish_pass(self, like_changes, t0):
        parallel = self.cfg.schedule == "parallel"
        re_changes = self.re_pass(parallel)
        sig_changes = self.mp()
        self.passes += 1
        ch = dict(zip(CHANGE_KEYS, like_changes + re_changes + sig_changes))
        self.history.append(ch)
        self.trace.append({"pass": self.passes, **ch, "seconds": time.perf_counter() - t0})
        return check_convergence(self.history, self.cfg)

    def run_pass(self):
        t0 = time.perf_counter()
        self.g.refresh_aux()
        if self.cfg.schedule == "sequential":
            like = self.like_pass_sequential()
        else:
            like = self.like_pass_parallel()
        return self.finish_pass(like, t0)

    def posterior(self, converged):
        return Posterior(
            theta=self.g, sigma=self.sigma, passes=self.passes, converged=converged,
            skips={"like": dict(zip(SKIP_NAMES, map(int, self.skips_like))),
                   "re": dict(zip(SKIP_NAMES, map(int, self.skips_re)))},
            trace=self.trace, sites=self.sites, layout=self.layout, spec=self.spec,
            group_labels=list(self.data.group_labels), schedule=self.cfg.schedule,
        )


@dataclass
class Posterior:
    theta: SparseGlobal
    sigma: IWParams
    passes: int
    converged: bool
    skips: dict
    trace: list
    sites: SiteStore
    layout: ParamLayout
    spec: ModelSpec
    group_labels: list = field(default_factory=list)
    schedule: str = "sequential"

    @property
    def total_skips(self):
        return sum(self.skips["like"].values()) + sum(self.skips["re"].values())

    def theta_labels(self):
        lay = self.layout
        labels = [f"u[{self.group_labels[l]}][{q + 1}]" for l in range(lay.L) for q in range(lay.Q)]
        if lay.H:
            labels.append("lambda")
        labels += [f"beta[{j + 1}]" for j in range(lay.P)]
        return labels

    def sigma_summary(self):
        """Labels, means and SDs of ``vech(Sigma)`` under ``q2``."""
        Psi, nu = self.sigma.Psi, self.sigma.nu
        Q = Psi.shape[0]
        labels, mean, sd = [], [], []
        for i in range(Q):
            for j in range(i + 1):
                labels.append(f"Sigma[{i + 1},{j + 1}]")
                mean.append(Psi[i, j] / (nu - Q - 1) if nu > Q + 1 else np.inf)
                if nu > Q + 3:
                    var = ((nu - Q + 1) * Psi[i, j] ** 2 + (nu - Q - 1) * Psi[i, i] * Psi[j, j]) / (
                        (nu - Q) * (nu - Q - 1) ** 2 * (nu - Q - 3))
                    sd.append(np.sqrt(var))
                else:
                    sd.append(np.inf)
        return labels, np.array(mean), np.array(sd)

    def summary(self):
        """Component labels with marginal means and SDs (``theta`` then ``vech(Sigma)``)."""
        mu, sd = self.theta.marginal_summaries()
        sl, sm, ss = self.sigma_summary()
        return self.theta_labels() + sl, np.concatenate([mu, sm]), np.concatenate([sd, ss])


def fit(data: Dataset, spec: ModelSpec, cfg: EPConfig | None = None, on_pass=None, backend=None) -> Posterior:
    """Run EP to convergence (or ``cfg.max_passes``).

    ``on_pass(state)`` is called after every pass with the live :class:`EPState`.
    """
    cfg = cfg or EPConfig()
    state = EPState(data, spec, cfg, backend=backend)
    converged = False
    while state.passes < cfg.max_passes and not converged:
        converged = state.run_pass()
        if on_pass is not None:
            on_pass(state)
    return state.posterior(converged)
