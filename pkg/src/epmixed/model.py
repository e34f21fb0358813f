"""Data model: datasets, model/prior specification, parameter layout, simulation."""
from __future__ import annotations

import csv
import enum
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, ndtr

from .expfam import is_pd

#: RNG stream identifiers; every random purpose gets an independent stream
#: derived from the single user seed.
RNG_STREAMS = {"simulate": 0, "sample": 1, "mcmc": 2, "bench": 3, "instance": 4}


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), RNG_STREAMS[purpose]]))


class DataError(ValueError):
    """Malformed or invalid dataset."""


class Likelihood(str, enum.Enum):
    ZIP = "zip"
    BINOMIAL_PROBIT = "binomial"

    @property
    def n_hyper(self) -> int:
        return 1 if self is Likelihood.ZIP else 0

    @property
    def extra_name(self) -> str:
        return "offset" if self is Likelihood.ZIP else "trials"


@dataclass
class PriorSpec:
    """Gaussian prior on (lambda, beta) and inverse-Wishart prior on Sigma."""

    mu_beta: np.ndarray
    Sigma_beta: np.ndarray
    Psi_Sigma: np.ndarray
    nu_Sigma: float
    mu_lambda: float | None = None
    sigma_lambda: float | None = None

    def __post_init__(self):
        self.mu_beta = np.atleast_1d(np.asarray(self.mu_beta, dtype=float))
        P = self.mu_beta.size
        self.Sigma_beta = np.asarray(self.Sigma_beta, dtype=float).reshape(P, P)
        self.Psi_Sigma = np.atleast_2d(np.asarray(self.Psi_Sigma, dtype=float))
        self.nu_Sigma = float(self.nu_Sigma)
        Q = self.Psi_Sigma.shape[0]
        if P and not is_pd(self.Sigma_beta):
            raise ValueError("Sigma_beta must be positive definite")
        if self.Psi_Sigma.shape != (Q, Q) or not is_pd(self.Psi_Sigma):
            raise ValueError("Psi_Sigma must be a positive definite square matrix")
        if not self.nu_Sigma > Q - 1:
            raise ValueError(f"nu_Sigma must exceed Q-1={Q - 1}")
        if self.sigma_lambda is not None and not self.sigma_lambda > 0:
            raise ValueError("sigma_lambda must be positive")

    @classmethod
    def default(cls, likelihood: Likelihood, P: int, Q: int) -> "PriorSpec":
        """Vague priors used for the simulation studies."""
        zip_ = Likelihood(likelihood) is Likelihood.ZIP
        return cls(
            mu_beta=np.zeros(P),
            Sigma_beta=1e4 * np.eye(P),
            Psi_Sigma=np.eye(Q),
            nu_Sigma=Q + 2,
            mu_lambda=0.0 if zip_ else None,
            sigma_lambda=1e4 if zip_ else None,
        )


@dataclass
class ModelSpec:
    likelihood: Likelihood
    priors: PriorSpec

    def __post_init__(self):
        self.likelihood = Likelihood(self.likelihood)
        if self.likelihood is Likelihood.ZIP:
            if self.priors.mu_lambda is None or self.priors.sigma_lambda is None:
                raise ValueError("ZIP model needs mu_lambda and sigma_lambda priors")

    @property
    def H(self) -> int:
        return self.likelihood.n_hyper

    @property
    def P(self) -> int:
        return self.priors.mu_beta.size

    @property
    def Q(self) -> int:
        return self.priors.Psi_Sigma.shape[0]

    def prior_eps(self):
        """Natural parameters ``(r, Q)`` of the Gaussian prior on ``(gamma, beta)``."""
        H, P = self.H, self.P
        mu = np.zeros(H + P)
        cov = np.zeros((H + P, H + P))
        if H:
            mu[0] = self.priors.mu_lambda
            cov[0, 0] = self.priors.sigma_lambda
        mu[H:] = self.priors.mu_beta
        cov[H:, H:] = self.priors.Sigma_beta
        Qp = np.linalg.inv(cov) if H + P else cov
        Qp = 0.5 * (Qp + Qp.T)
        return Qp @ mu, Qp


@dataclass
class Dataset:
    """Observations with dense 0-based group indices.

    ``extra`` holds offsets (ZIP) or trial counts (binomial).
    ``group_labels[l]`` is the original label of group ``l``.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    group: np.ndarray
    extra: np.ndarray
    likelihood: Likelihood
    group_labels: list = field(default=None)

    def __post_init__(self):
        self.likelihood = Likelihood(self.likelihood)
        self.y = np.asarray(self.y, dtype=float)
        N = self.y.size
        self.X = np.asarray(self.X, dtype=float).reshape(N, -1) if N else np.zeros((0, np.shape(self.X)[-1]))
        self.Z = np.asarray(self.Z, dtype=float).reshape(N, -1) if N else np.zeros((0, np.shape(self.Z)[-1]))
        self.group = np.asarray(self.group, dtype=np.int64)
        self.extra = np.asarray(self.extra, dtype=float)
        if N == 0:
            raise DataError("dataset is empty")
        if self.group.shape != (N,) or self.extra.shape != (N,):
            raise DataError("group/extra length does not match responses")
        if self.Z.shape[1] < 1:
            raise DataError("need at least one random-effects covariate")
        L = int(self.group.max()) + 1
        if self.group.min() < 0 or np.bincount(self.group, minlength=L).min() == 0:
            raise DataError("group indices must be dense 0..L-1 with every group observed")
        if self.group_labels is None:
            self.group_labels = [str(i + 1) for i in range(L)]
        if len(self.group_labels) != L:
            raise DataError("group_labels length does not match number of groups")
        if np.any(self.y < 0) or np.any(self.y != np.round(self.y)):
            raise DataError("responses must be nonnegative integers")
        if self.likelihood is Likelihood.BINOMIAL_PROBIT:
            if np.any(self.extra < 1) or np.any(self.extra != np.round(self.extra)):
                raise DataError("trials must be positive integers")
            if np.any(self.extra < self.y):
                raise DataError("trials < response")

    @property
    def N(self) -> int:
        return self.y.size

    @property
    def L(self) -> int:
        return len(self.group_labels)

    @property
    def P(self) -> int:
        return self.X.shape[1]

    @property
    def Q(self) -> int:
        return self.Z.shape[1]

    def subset(self, idx) -> dict:
        idx = np.asarray(idx, dtype=np.int64)
        return {
            "y": self.y[idx], "X": self.X[idx], "Z": self.Z[idx],
            "group": self.group[idx], "extra": self.extra[idx],
        }


@dataclass(frozen=True)
class ParamLayout:
    """Offsets into ``theta = (u_1, ..., u_L, gamma, beta)`` (0-based)."""

    L: int
    Q: int
    H: int
    P: int

    def __post_init__(self):
        if self.L < 1 or self.Q < 1 or self.H < 0 or self.P < 0:
            raise ValueError(f"invalid layout L={self.L}, Q={self.Q}, H={self.H}, P={self.P}")

    @property
    def dim(self) -> int:
        return self.L * self.Q + self.H + self.P

    @property
    def K(self) -> int:
        return self.H + self.P

    def u_slice(self, l: int) -> slice:
        return slice(l * self.Q, (l + 1) * self.Q)

    @property
    def gamma_slice(self) -> slice:
        return slice(self.L * self.Q, self.L * self.Q + self.H)

    @property
    def beta_slice(self) -> slice:
        return slice(self.L * self.Q + self.H, self.dim)


def layout_of(spec: ModelSpec, data: Dataset) -> ParamLayout:
    if data.L < 1:
        raise DataError("no groups")
    if data.Q != spec.Q or data.P != spec.P:
        raise DataError(f"data has (P={data.P}, Q={data.Q}) but model expects (P={spec.P}, Q={spec.Q})")
    return ParamLayout(data.L, data.Q, spec.H, data.P)


_XCOL = re.compile(r"^x(\d+)$")
_ZCOL = re.compile(r"^z(\d+)$")


def load_dataset(path, spec_or_likelihood) -> Dataset:
    """Read a dataset CSV with header ``group,y,<extra>,x1..xP,z1..zQ``."""
    likelihood = getattr(spec_or_likelihood, "likelihood", spec_or_likelihood)
    likelihood = Likelihood(likelihood)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise DataError(f"{path}: no data rows")
    for name in ("group", "y"):
        if name not in header:
            raise DataError(f"{path}: missing column '{name}'")
    xcols = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := _XCOL.match(h)))
    zcols = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := _ZCOL.match(h)))
    if [k for k, _ in xcols] != list(range(1, len(xcols) + 1)):
        raise DataError(f"{path}: fixed-effect columns must be x1..xP")
    if not zcols or [k for k, _ in zcols] != list(range(1, len(zcols) + 1)):
        raise DataError(f"{path}: missing column 'z1' (random-effect columns must be z1..zQ)")
    ig, iy = header.index("group"), header.index("y")
    extra_name = likelihood.extra_name
    ie = header.index(extra_name) if extra_name in header else None

    def num(row_no, col, text):
        try:
            return float(text)
        except ValueError:
            raise DataError(f"{path}: row {row_no}: non-numeric value {text!r} in column '{header[col]}'") from None

    labels, index = [], {}
    group, y, extra, X, Z = [], [], [], [], []
    for k, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {k}: expected {len(header)} cells, got {len(row)}")
        lab = row[ig].strip()
        if lab not in index:
            index[lab] = len(labels)
            labels.append(lab)
        group.append(index[lab])
        y.append(num(k, iy, row[iy]))
        if ie is None:
            extra.append(0.0 if likelihood is Likelihood.ZIP else 1.0)
        else:
            extra.append(num(k, ie, row[ie]))
        X.append([num(k, i, row[i]) for _, i in xcols])
        Z.append([num(k, i, row[i]) for _, i in zcols])
    return Dataset(
        y=np.array(y), X=np.array(X).reshape(len(y), len(xcols)), Z=np.array(Z),
        group=np.array(group), extra=np.array(extra), likelihood=likelihood, group_labels=labels,
    )


def write_dataset(data: Dataset, path) -> None:
    header = ["group", "y", data.likelihood.extra_name]
    header += [f"x{j + 1}" for j in range(data.P)] + [f"z{j + 1}" for j in range(data.Q)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for n in range(data.N):
            w.writerow(
                [data.group_labels[data.group[n]], _fmt_int(data.y[n]), _fmt(data.extra[n])]
                + [_fmt(v) for v in data.X[n]] + [_fmt(v) for v in data.Z[n]]
            )


def _fmt(v: float) -> str:
    return repr(float(v))


def _fmt_int(v: float) -> str:
    return str(int(v))


@dataclass
class SimConfig:
    likelihood: Likelihood
    n_groups: int
    obs_per_group: int
    beta_true: np.ndarray
    Sigma_true: np.ndarray
    seed: int
    lambda_true: float | None = None
    trials: int = 1

    def __post_init__(self):
        self.likelihood = Likelihood(self.likelihood)
        self.beta_true = np.atleast_1d(np.asarray(self.beta_true, dtype=float))
        self.Sigma_true = np.atleast_2d(np.asarray(self.Sigma_true, dtype=float))
        if self.likelihood is Likelihood.ZIP and self.lambda_true is None:
            raise ValueError("ZIP simulation needs lambda_true")

    @property
    def P(self) -> int:
        return self.beta_true.size

    @property
    def Q(self) -> int:
        return self.Sigma_true.shape[0]

    @classmethod
    def scalability_setting(cls, likelihood, n_groups, seed, obs_per_group=10, P=8, Q=2):
        """The simulation setting of the scalability study."""
        likelihood = Likelihood(likelihood)
        signs = np.array([(-1.0) ** j for j in range(P)])
        if likelihood is Likelihood.ZIP:
            return cls(likelihood, n_groups, obs_per_group, 0.25 * signs, 0.5 * np.eye(Q), seed,
                       lambda_true=float(np.log(0.05 / 0.95)))
        return cls(likelihood, n_groups, obs_per_group, signs, 0.5 * np.eye(Q), seed)


def simulate_dataset(sim: SimConfig):
    """Simulate a dataset; returns ``(Dataset, true_params)``."""
    if sim.Sigma_true.shape != (sim.Q, sim.Q) or not is_pd(sim.Sigma_true):
        raise ValueError("Sigma_true must be positive definite")
    if sim.n_groups < 1 or sim.obs_per_group < 1:
        raise ValueError("need at least one group and one observation per group")
    rng = rng_for(sim.seed, "simulate")
    L, P, Q = sim.n_groups, sim.P, sim.Q
    N = L * sim.obs_per_group
    group = np.repeat(np.arange(L), sim.obs_per_group)
    X = rng.standard_normal((N, P))
    Z = rng.standard_normal((N, Q))
    if P:
        X[:, 0] = 1.0
    Z[:, 0] = 1.0
    u = rng.multivariate_normal(np.zeros(Q), sim.Sigma_true, size=L)
    eta = np.einsum("nq,nq->n", Z, u[group]) + X @ sim.beta_true
    if sim.likelihood is Likelihood.ZIP:
        extra = np.zeros(N)
        structural = rng.random(N) < expit(sim.lambda_true)
        y = np.where(structural, 0, rng.poisson(np.exp(eta + extra)))
    else:
        extra = np.full(N, float(sim.trials))
        y = rng.binomial(sim.trials, ndtr(eta))
    data = Dataset(y=y, X=X, Z=Z, group=group, extra=extra, likelihood=sim.likelihood)
    truth = {"beta": sim.beta_true.copy(), "Sigma": sim.Sigma_true.copy(), "u": u}
    if sim.likelihood is Likelihood.ZIP:
        truth["lambda"] = float(sim.lambda_true)
    return data, truth
