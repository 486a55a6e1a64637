"""RILM, MELS and SPLSME parameter containers and log-likelihoods.

All three are normal location-scale models for a response ``y_ij`` with a
subject random location effect. MELS adds covariates and a random effect in
the log within-subject variance; SPLSME splits both random effects into a part
shared with a random-intercept logistic model of the missing indicator and an
orthogonal residual part.

Likelihoods are conditional on the per-subject random effects, which are
explicit parameters, and include the random-effect densities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionMismatch, DomainError, MissingCovariateInMeanModel, NonFiniteVariance

LOG_2PI = math.log(2.0 * math.pi)
MODELS = ("rilm", "mels", "splsme")


def logistic(x):
    """Overflow-safe logistic function for scalars or arrays."""
    x_arr = np.asarray(x, dtype=float)
    out = np.empty_like(x_arr)
    pos = x_arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x_arr[pos]))
    ex = np.exp(x_arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    if np.ndim(x) == 0:
        return float(out)
    return out


def _arr(v):
    return np.atleast_1d(np.asarray(v, dtype=float))


@dataclass
class RilmParams:
    beta0: float
    beta: np.ndarray
    alpha0: float
    sigma_v1: float
    v1: np.ndarray

    def __post_init__(self):
        self.beta = _arr(self.beta) if np.size(self.beta) else np.zeros(0)
        self.v1 = _arr(self.v1)
        if not self.sigma_v1 > 0:
            raise DomainError(f"sigma_v1 must be positive, got {self.sigma_v1}")

    @property
    def within_variance(self):
        return math.exp(self.alpha0)


@dataclass
class MelsParams:
    beta0: float
    beta: np.ndarray
    alpha0: float
    alpha: np.ndarray
    sigma_v1: float
    sigma_v2: float
    rho_v1v2: float
    v1: np.ndarray
    v2: np.ndarray

    def __post_init__(self):
        self.beta = _arr(self.beta) if np.size(self.beta) else np.zeros(0)
        self.alpha = _arr(self.alpha) if np.size(self.alpha) else np.zeros(0)
        self.v1, self.v2 = _arr(self.v1), _arr(self.v2)
        if not (self.sigma_v1 > 0 and self.sigma_v2 > 0):
            raise DomainError("random-effect scales must be positive")
        if not abs(self.rho_v1v2) < 1:
            raise DomainError(f"|rho_v1v2| must be < 1, got {self.rho_v1v2}")


@dataclass
class SplsmeParams:
    beta0: float
    beta: np.ndarray
    alpha0: float
    alpha: np.ndarray
    tau0: float
    tau: np.ndarray
    gamma: float
    delta: float
    sigma_eta1: float
    sigma_eta2: float
    sigma_lambda: float
    rho_eta: float
    eta1: np.ndarray
    eta2: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.beta = _arr(self.beta) if np.size(self.beta) else np.zeros(0)
        self.alpha = _arr(self.alpha) if np.size(self.alpha) else np.zeros(0)
        self.tau = _arr(self.tau) if np.size(self.tau) else np.zeros(0)
        self.eta1, self.eta2, self.lam = _arr(self.eta1), _arr(self.eta2), _arr(self.lam)
        if not (self.sigma_eta1 > 0 and self.sigma_eta2 > 0 and self.sigma_lambda > 0):
            raise DomainError("random-effect scales must be positive")
        if not abs(self.rho_eta) < 1:
            raise DomainError(f"|rho_eta| must be < 1, got {self.rho_eta}")

    @property
    def v1(self):
        return self.eta1 + self.gamma * self.lam

    @property
    def v2(self):
        return self.eta2 + self.delta * self.lam


# ---------------------------------------------------------------------------
# Cholesky reparameterisation
# ---------------------------------------------------------------------------

@dataclass
class CholeskyBlock:
    """Lower-triangular factor of the random-effect covariance.

    ``(v1, v2) = [[s11, 0], [s21, s22]] @ (z1, z2)``; SPLSME appends an
    independent third effect ``lambda = s33 * z3``.
    """

    s11: float
    s21: float
    s22: float
    s33: float | None = None
    z: np.ndarray | None = field(default=None, repr=False)

    def matrix(self):
        if self.s33 is None:
            return np.array([[self.s11, 0.0], [self.s21, self.s22]])
        return np.array([[self.s11, 0.0, 0.0], [self.s21, self.s22, 0.0], [0.0, 0.0, self.s33]])

    def covariance(self):
        S = self.matrix()
        return S @ S.T

    def effects(self):
        """Per-subject random effects ``S z`` as an ``(n, 2|3)`` array."""
        if self.z is None:
            raise ValueError("no z-vectors attached")
        return np.asarray(self.z) @ self.matrix().T


def cholesky_reparam(sigma1, sigma2, rho, sigma3=None):
    """Map (scale, scale, correlation[, scale]) to a :class:`CholeskyBlock`."""
    if not abs(rho) < 1:
        raise DomainError(f"|rho| must be < 1, got {rho}")
    scales = (sigma1, sigma2) if sigma3 is None else (sigma1, sigma2, sigma3)
    if any(not s > 0 for s in scales):
        raise DomainError(f"scales must be positive, got {scales}")
    return CholeskyBlock(
        s11=float(sigma1),
        s21=float(sigma2 * rho),
        s22=float(sigma2 * math.sqrt(1.0 - rho * rho)),
        s33=None if sigma3 is None else float(sigma3),
    )


def cholesky_inverse(block):
    """Inverse of :func:`cholesky_reparam`; returns ``(sigma1, sigma2, rho[, sigma3])``."""
    if not (block.s11 > 0 and block.s22 > 0):
        raise DomainError("s11 and s22 must be positive")
    sigma2 = math.hypot(block.s21, block.s22)
    out = (block.s11, sigma2, block.s21 / sigma2)
    if block.s33 is not None:
        if not block.s33 > 0:
            raise DomainError("s33 must be positive")
        out = out + (block.s33,)
    return out


def missing_variance_share(loading, sigma_lambda, sigma_eta):
    """Share of a random effect's variance explained by the missingness effect."""
    if sigma_lambda < 0 or sigma_eta < 0:
        raise DomainError("scales must be non-negative")
    shared = (loading * sigma_lambda) ** 2
    total = shared + sigma_eta**2
    if total == 0:
        if sigma_lambda == 0 and sigma_eta == 0:
            raise DomainError("sigma_lambda and sigma_eta are both zero")
        return 0.0
    return shared / total


# ---------------------------------------------------------------------------
# location / scale predictors
# ---------------------------------------------------------------------------

def _check(design, params, names):
    n = design.n_subjects
    if params.beta.shape[0] != design.X_mean.shape[1]:
        raise DimensionMismatch(f"beta has {params.beta.shape[0]} entries, design has {design.X_mean.shape[1]}")
    if hasattr(params, "alpha") and params.alpha.shape[0] != design.X_var.shape[1]:
        raise DimensionMismatch(f"alpha has {params.alpha.shape[0]} entries, design has {design.X_var.shape[1]}")
    if hasattr(params, "tau") and params.tau.shape[0] != design.T.shape[1]:
        raise DimensionMismatch(f"tau has {params.tau.shape[0]} entries, design has {design.T.shape[1]}")
    for nm in names:
        if getattr(params, nm).shape[0] != n:
            raise DimensionMismatch(f"{nm} has {getattr(params, nm).shape[0]} entries, expected {n} subjects")


def _xdot(X, coef):
    if X.shape[1] == 0:
        return np.zeros(X.shape[0])
    with np.errstate(invalid="ignore"):
        return X @ coef


def location_scale(params, design):
    """Per-row mean and log-variance of the response under ``params``.

    Rows whose covariates are missing get ``NaN``.
    """
    subj = design.subj
    if isinstance(params, RilmParams):
        _check(design, params, ("v1",))
        mu = params.beta0 + _xdot(design.X_mean, params.beta) + params.v1[subj]
        logvar = np.full(design.n_rows, float(params.alpha0))
        logvar[np.isnan(mu)] = np.nan
        return mu, logvar
    if isinstance(params, MelsParams):
        _check(design, params, ("v1", "v2"))
        v1, v2 = params.v1, params.v2
    elif isinstance(params, SplsmeParams):
        _check(design, params, ("eta1", "eta2", "lam"))
        v1, v2 = params.v1, params.v2
    else:
        raise TypeError(f"unsupported parameter type {type(params).__name__}")
    mu = params.beta0 + _xdot(design.X_mean, params.beta) + v1[subj]
    logvar = params.alpha0 + _xdot(design.X_var, params.alpha) + v2[subj]
    return mu, logvar


def missing_linear_predictor(params, design):
    _check(design, params, ("lam",))
    return params.tau0 + _xdot(design.T, params.tau) + params.lam[design.subj]


def _usable_rows(design):
    use = design.observed
    if (use & design.covariate_missing).any():
        raise MissingCovariateInMeanModel(
            f"covariates of {design.response!r} are missing on rows where it is observed"
        )
    return use


def _normal_part(params, design):
    use = _usable_rows(design)
    mu, logvar = location_scale(params, design)
    per = kernels.normal_by_subject(
        design.y, np.where(use, mu, 0.0), np.where(use, logvar, 0.0), use, design.subj, design.n_subjects
    )
    if np.isneginf(per).any():
        raise NonFiniteVariance("log within-variance exceeds the representable range")
    return float(per.sum())


def normal_logpdf(x, sd):
    x = np.asarray(x, dtype=float)
    return -0.5 * LOG_2PI - math.log(sd) - 0.5 * (x / sd) ** 2


def bivariate_normal_logpdf(a, b, sd1, sd2, rho):
    za = np.asarray(a, dtype=float) / sd1
    zb = np.asarray(b, dtype=float) / sd2
    one_m = 1.0 - rho * rho
    q = (za * za - 2.0 * rho * za * zb + zb * zb) / one_m
    return -LOG_2PI - math.log(sd1) - math.log(sd2) - 0.5 * math.log(one_m) - 0.5 * q


def loglik_rilm(params, design, parts=False):
    y_part = _normal_part(params, design)
    re_part = float(normal_logpdf(params.v1, params.sigma_v1).sum())
    if parts:
        return {"y": y_part, "missing": 0.0, "random": re_part}
    return y_part + re_part


def loglik_mels(params, design, parts=False):
    y_part = _normal_part(params, design)
    re_part = float(
        bivariate_normal_logpdf(params.v1, params.v2, params.sigma_v1, params.sigma_v2, params.rho_v1v2).sum()
    )
    if parts:
        return {"y": y_part, "missing": 0.0, "random": re_part}
    return y_part + re_part


def loglik_splsme(params, design, parts=False):
    y_part = _normal_part(params, design)
    eta = missing_linear_predictor(params, design)
    m_part = float(kernels.bernoulli_logit_by_subject(design.m, eta, design.subj, design.n_subjects).sum())
    re_part = float(
        bivariate_normal_logpdf(params.eta1, params.eta2, params.sigma_eta1, params.sigma_eta2, params.rho_eta).sum()
        + normal_logpdf(params.lam, params.sigma_lambda).sum()
    )
    if parts:
        return {"y": y_part, "missing": m_part, "random": re_part}
    return y_part + m_part + re_part


def loglik(params, design, parts=False):
    if isinstance(params, SplsmeParams):
        return loglik_splsme(params, design, parts)
    if isinstance(params, MelsParams):
        return loglik_mels(params, design, parts)
    if isinstance(params, RilmParams):
        return loglik_rilm(params, design, parts)
    raise TypeError(f"unsupported parameter type {type(params).__name__}")
