"""Fit summaries, posterior draw sets and parameter-set extraction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InsufficientDraws
from ..models import MelsParams, RilmParams, SplsmeParams

Z95 = 1.959963984540054


def coefficient_names(prefix, covariates):
    return [f"{prefix}0"] + [f"{prefix}[{c}]" for c in covariates]


def natural_names(model, mean_names, var_names, miss_names):
    names = coefficient_names("beta", mean_names) + ["alpha0"]
    if model == "rilm":
        return names + ["sigma_v1"]
    names += [f"alpha[{c}]" for c in var_names]
    if model == "mels":
        return names + ["sigma_v1", "sigma_v2", "rho_v1v2"]
    return names + coefficient_names("tau", miss_names) + [
        "gamma", "delta", "sigma_eta1", "sigma_eta2", "rho_eta", "sigma_lambda",
    ]


EFFECT_NAMES = {"rilm": ("v1",), "mels": ("v1", "v2"), "splsme": ("eta1", "eta2", "lambda")}


def k_params(model, p, pv, q):
    """Number of non-random-effect parameters (used as the BIC penalty count)."""
    if model == "rilm":
        return p + 3
    if model == "mels":
        return (p + 1) + (pv + 1) + 3
    return (p + 1) + (pv + 1) + (q + 1) + 2 + 4


@dataclass
class FitSummary:
    """Point estimates with 95% intervals.

    For MCMC fits the estimate is the posterior mean and the interval the
    2.5/97.5 percentiles of the pooled draws; for ML fits the interval is Wald.
    ``loglik`` is the marginal log-likelihood of the observed responses at the
    estimate (random effects integrated out).
    """

    model: str
    method: str
    names: list
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    loglik: float = float("nan")
    n_obs: int = 0
    k_params: int = 0
    extra: dict = field(default_factory=dict)

    def get(self, name):
        i = self.names.index(name)
        return float(self.estimate[i]), float(self.lower[i]), float(self.upper[i])

    def as_dict(self):
        return {n: self.get(n) for n in self.names}

    def table(self):
        return [
            {"parameter": n, "estimate": float(e), "lower": float(lo), "upper": float(hi)}
            for n, e, lo, hi in zip(self.names, self.estimate, self.lower, self.upper)
        ]


@dataclass
class PosteriorDrawSet:
    """Pooled post-warmup draws on the natural parameter scale."""

    model: str
    names: list
    values: np.ndarray
    effects: dict
    chain: np.ndarray
    subject_ids: tuple
    mean_names: list
    var_names: list
    miss_names: list
    acceptance: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.values.shape[0]

    @property
    def n_chains(self):
        return int(self.chain.max()) + 1 if self.chain.size else 0

    def column(self, name):
        return self.values[:, self.names.index(name)]

    def chains_of(self, name):
        col = self.column(name) if name in self.names else None
        if col is None:
            raise KeyError(name)
        return np.stack([col[self.chain == c] for c in range(self.n_chains)])

    def params(self, k):
        row = dict(zip(self.names, self.values[k]))
        p, pv, q = len(self.mean_names), len(self.var_names), len(self.miss_names)
        beta = np.array([row[f"beta[{c}]"] for c in self.mean_names]) if p else np.zeros(0)
        if self.model == "rilm":
            return RilmParams(row["beta0"], beta, row["alpha0"], max(row["sigma_v1"], 1e-12),
                              self.effects["v1"][k].copy())
        alpha = np.array([row[f"alpha[{c}]"] for c in self.var_names]) if pv else np.zeros(0)
        if self.model == "mels":
            return MelsParams(
                row["beta0"], beta, row["alpha0"], alpha, row["sigma_v1"], row["sigma_v2"], row["rho_v1v2"],
                self.effects["v1"][k].copy(), self.effects["v2"][k].copy(),
            )
        tau = np.array([row[f"tau[{c}]"] for c in self.miss_names]) if q else np.zeros(0)
        return SplsmeParams(
            row["beta0"], beta, row["alpha0"], alpha, row["tau0"], tau, row["gamma"], row["delta"],
            row["sigma_eta1"], row["sigma_eta2"], row["sigma_lambda"], row["rho_eta"],
            self.effects["eta1"][k].copy(), self.effects["eta2"][k].copy(), self.effects["lambda"][k].copy(),
        )

    def summary(self, loglik=float("nan"), n_obs=0):
        est = self.values.mean(axis=0)
        lo, hi = np.percentile(self.values, [2.5, 97.5], axis=0)
        return FitSummary(
            model=self.model, method="mcmc", names=list(self.names), estimate=est, lower=lo, upper=hi,
            loglik=loglik, n_obs=n_obs,
            k_params=k_params(self.model, len(self.mean_names), len(self.var_names), len(self.miss_names)),
        )

    def effect_summary(self, name):
        """Per-subject posterior mean and 95% interval of a random effect."""
        arr = self.effects[name]
        lo, hi = np.percentile(arr, [2.5, 97.5], axis=0)
        return arr.mean(axis=0), lo, hi

    def csv_rows(self):
        header = ["draw", "chain", *self.names]
        for eff, arr in self.effects.items():
            header += [f"{eff}[{sid}]" for sid in self.subject_ids]
        rows = [header]
        for k in range(self.n_draws):
            row = [k, int(self.chain[k]), *self.values[k].tolist()]
            for arr in self.effects.values():
                row += arr[k].tolist()
            rows.append(row)
        return rows


def evenly_spaced_indices(n_available, m):
    """Indices ``floor((k + 1/2) * N / m)`` for ``k = 0..m-1``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if n_available < m:
        raise InsufficientDraws(f"{n_available} draws available, {m} requested")
    return [int((k + 0.5) * n_available / m) for k in range(m)]


def draw_parameter_sets(fit, m, rng=None):
    """Return ``m`` parameter sets for two-step imputation.

    ``fit`` is a :class:`PosteriorDrawSet` (evenly spaced pooled draws) or a
    :class:`~mixedimpute.inference.ml.RilmFit` (asymptotic normal draws plus
    conditional random intercepts; requires ``rng``).
    """
    if isinstance(fit, PosteriorDrawSet):
        return [fit.params(k) for k in evenly_spaced_indices(fit.n_draws, m)]
    if m < 1:
        raise ValueError("m must be >= 1")
    if rng is None:
        raise ValueError("an rng is required for asymptotic-normal draws")
    return fit.sample_params(m, rng)
