"""Accuracy metrics of an approximation against a reference sample set."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GROUPS = ("u", "lambda", "beta", "Sigma")


def component_group(label: str) -> str:
    """Parameter group of a component label such as ``u[3][1]`` or ``Sigma[2,1]``."""
    for g in GROUPS:
        if label == g or label.startswith(g + "["):
            return g
    raise ValueError(f"unrecognised component label {label!r}")


@dataclass
class MarginalSummary:
    labels: list
    mu: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        self.labels = [str(s) for s in self.labels]
        self.mu = np.asarray(self.mu, dtype=float).ravel()
        self.sd = np.asarray(self.sd, dtype=float).ravel()
        if not (len(self.labels) == self.mu.size == self.sd.size):
            raise ValueError("labels, means and SDs must have equal length")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("component labels must be unique")

    @classmethod
    def from_samples(cls, labels, draws) -> "MarginalSummary":
        draws = np.asarray(draws, dtype=float)
        if draws.ndim != 2 or draws.shape[1] != len(labels) or draws.shape[0] < 2:
            raise ValueError("draws must be (n >= 2, n_labels)")
        return cls(labels, draws.mean(axis=0), draws.std(axis=0, ddof=1))

    def select(self, groups=None) -> "MarginalSummary":
        """Restrict to components in ``groups`` (iterable of group names); ``None`` keeps all."""
        if groups is None:
            return self
        groups = set(groups)
        bad = groups - set(GROUPS)
        if bad:
            raise ValueError(f"unknown groups {sorted(bad)}")
        keep = [i for i, s in enumerate(self.labels) if component_group(s) in groups]
        return MarginalSummary([self.labels[i] for i in keep], self.mu[keep], self.sd[keep])


@dataclass
class DevStats:
    dev_mu: float
    adev_mu: float
    dev_sigma: float
    adev_sigma: float

    def as_tuple(self):
        return (self.dev_mu, self.adev_mu, self.dev_sigma, self.adev_sigma)


def dev_stats(approx: MarginalSummary, ref: MarginalSummary, groups=None) -> DevStats:
    """Aggregated standardized deviations of ``approx`` from ``ref``.

    Mean deviations are averaged arithmetically, SD ratios geometrically.
    Components are matched by label.
    """
    approx, ref = approx.select(groups), ref.select(groups)
    if set(approx.labels) != set(ref.labels):
        missing = sorted(set(approx.labels) ^ set(ref.labels))
        raise ValueError(f"component sets differ: {missing[:5]}")
    if not ref.labels:
        raise ValueError("no components selected")
    order = [approx.labels.index(s) for s in ref.labels]
    mu, sd = approx.mu[order], approx.sd[order]
    if np.any(ref.sd <= 0) or np.any(sd <= 0):
        raise ValueError("SDs must be positive")
    dev = (mu - ref.mu) / ref.sd
    ratio = sd / ref.sd
    log_r = np.log(ratio)
    return DevStats(float(dev.mean()), float(np.abs(dev).mean()),
                    float(np.exp(log_r.mean())), float(np.exp(np.abs(log_r).mean())))


def _paired(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] != y.shape[0]:
        raise ValueError("sample sets must have equal size")
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    return x - y


def mmd2_u(x, y, clamp: bool = True) -> float:
    """Unbiased squared MMD with the inner-product kernel ``k(a, b) = a'b``.

    With this kernel the U-statistic core is ``(x_i - y_i)'(x_j - y_j)``, so
    the double sum collapses to ``(|sum d|^2 - sum |d_i|^2) / (m (m - 1))``.
    Negative estimates are set to zero unless ``clamp`` is False.
    """
    d = _paired(x, y)
    m = d.shape[0]
    s = d.sum(axis=0)
    val = (s @ s - np.einsum("ij,ij->", d, d)) / (m * (m - 1))
    return max(float(val), 0.0) if clamp else float(val)


def mmd2_u_se(x, y) -> float:
    """First-order U-statistic standard error of :func:`mmd2_u`."""
    d = _paired(x, y)
    m = d.shape[0]
    h1 = d @ d.mean(axis=0)
    return float(2.0 * h1.std(ddof=1) / np.sqrt(m))
