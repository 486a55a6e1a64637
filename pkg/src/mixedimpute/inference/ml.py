"""Marginal maximum likelihood for the random-intercept model.

Integrating out the random intercept gives, per subject, a normal vector with
compound-symmetric covariance ``exp(alpha0) I + sigma_v1^2 J``. The fixed
effects are profiled out by GLS, so the optimiser only searches over
``(alpha0, sigma_v1^2)`` with ``sigma_v1^2 >= 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .. import kernels
from ..errors import InvalidConfig, MissingCovariateInMeanModel, NonConvergence, SingularHessian
from ..models import RilmParams
from .draws import Z95, FitSummary, PosteriorDrawSet, k_params, natural_names


def _usable(design):
    use = design.observed
    if (use & design.covariate_missing).any():
        raise MissingCovariateInMeanModel(
            f"covariates of {design.response!r} are missing on rows where it is observed"
        )
    return use


def rilm_marginal_loglik(theta, design):
    """Marginal log-likelihood at ``theta = (beta0, beta..., alpha0, sigma_v1)``."""
    use = _usable(design)
    p = design.X_mean.shape[1]
    beta0, beta, alpha0, sigma = theta[0], theta[1:1 + p], theta[1 + p], theta[2 + p]
    mean = beta0 + (design.X_mean[use] @ beta if p else 0.0)
    resid = np.zeros(design.n_rows)
    resid[use] = design.y[use] - mean
    per = kernels.cs_marginal_by_subject(resid, use, design.subj, design.n_subjects, float(alpha0), float(sigma**2))
    return float(per.sum())


@dataclass
class RilmFit:
    summary: FitSummary
    theta: np.ndarray
    cov: np.ndarray
    design: object
    boundary: bool = False

    @property
    def model(self):
        return "rilm"

    def conditional_intercepts(self, theta):
        """Conditional mean and variance of each subject's random intercept."""
        d = self.design
        use = d.observed
        p = d.X_mean.shape[1]
        beta0, beta, alpha0, sigma = theta[0], theta[1:1 + p], theta[1 + p], abs(theta[2 + p])
        resid = d.y[use] - beta0 - (d.X_mean[use] @ beta if p else 0.0)
        s1 = np.bincount(d.subj[use], weights=resid, minlength=d.n_subjects)
        cnt = np.bincount(d.subj[use], minlength=d.n_subjects)
        if sigma == 0.0:
            return np.zeros(d.n_subjects), np.zeros(d.n_subjects)
        a = math.exp(alpha0)
        var = 1.0 / (1.0 / sigma**2 + cnt / a)
        return var * s1 / a, var

    def _theta_draws(self, n, rng):
        w, Q = np.linalg.eigh(0.5 * (self.cov + self.cov.T))
        root = Q * np.sqrt(np.clip(w, 0.0, None))
        return self.theta[None, :] + rng.standard_normal((n, self.theta.size)) @ root.T

    def sample_params(self, m, rng):
        p = self.design.X_mean.shape[1]
        out = []
        for th in self._theta_draws(m, rng):
            mean, var = self.conditional_intercepts(th)
            v1 = mean + np.sqrt(var) * rng.standard_normal(mean.shape[0])
            out.append(RilmParams(th[0], th[1:1 + p], th[1 + p], max(abs(th[2 + p]), 1e-12), v1))
        return out

    def draw_set(self, n, rng):
        """Asymptotic-normal draws packaged as a :class:`PosteriorDrawSet`."""
        d = self.design
        values = self._theta_draws(n, rng)
        values[:, -1] = np.abs(values[:, -1])
        v1 = np.empty((n, d.n_subjects))
        for k in range(n):
            mean, var = self.conditional_intercepts(values[k])
            v1[k] = mean + np.sqrt(var) * rng.standard_normal(d.n_subjects)
        return PosteriorDrawSet(
            model="rilm", names=list(self.summary.names), values=values, effects={"v1": v1},
            chain=np.zeros(n, dtype=int), subject_ids=d.subject_ids, mean_names=list(d.mean_names),
            var_names=[], miss_names=[],
        )


def _hessian(f, x, rel_step=1e-4):
    k = x.size
    h = rel_step * np.maximum(1.0, np.abs(x))
    H = np.empty((k, k))
    f0 = f(x)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i + 1, k):
            ej = np.zeros(k)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h[i] * h[j])
    return H


def fit_rilm_ml(design, maxiter=1000):
    """Fit RILM by marginal ML; returns a :class:`RilmFit` with Wald intervals."""
    use = _usable(design)
    cnt = np.bincount(design.subj[use], minlength=design.n_subjects)
    if (cnt >= 2).sum() < 2:
        raise InvalidConfig("RILM ML needs at least 2 subjects with 2 or more observed occasions")

    X = np.column_stack([np.ones(use.sum()), design.X_mean[use]])
    y = design.y[use]
    s = design.subj[use]
    n_subj = design.n_subjects
    k = X.shape[1]
    XtX = X.T @ X
    Xty = X.T @ y
    Sx = np.zeros((n_subj, k))
    np.add.at(Sx, s, X)
    Sy = np.bincount(s, weights=y, minlength=n_subj)
    cntf = cnt.astype(float)

    def gls(alpha0, psi):
        a = math.exp(alpha0)
        c = psi / (a + cntf * psi)
        A = XtX - (Sx * c[:, None]).T @ Sx
        b = Xty - Sx.T @ (c * Sy)
        return np.linalg.solve(A, b)

    def full_negll(theta):
        return -rilm_marginal_loglik(theta, design)

    def profile_negll(x):
        alpha0, psi = x
        coef = gls(alpha0, psi)
        return full_negll(np.concatenate([coef, [alpha0, math.sqrt(max(psi, 0.0))]]))

    coef0 = np.linalg.lstsq(X, y, rcond=None)[0]
    r = y - X @ coef0
    s2 = float(r @ r / max(len(y) - k, 1))
    subj_means = Sy / np.maximum(cntf, 1) - (Sx / np.maximum(cntf, 1)[:, None]) @ coef0
    psi0 = max(float(np.var(subj_means[cnt > 0])) - s2 / max(cntf.mean(), 1.0), 0.05 * s2)
    x0 = np.array([math.log(max(s2 - psi0, 0.1 * s2)), psi0])
    res = optimize.minimize(
        profile_negll, x0, method="L-BFGS-B", bounds=[(None, None), (0.0, None)],
        options={"maxiter": maxiter, "ftol": 1e-15, "gtol": 1e-10},
    )
    if res.nit >= maxiter or not np.isfinite(res.fun):
        raise NonConvergence(f"RILM ML did not converge: {res.message}")
    alpha0, psi = float(res.x[0]), float(res.x[1])
    coef = gls(alpha0, psi)
    boundary = psi <= 1e-14 * math.exp(alpha0)
    sigma = 0.0 if boundary else math.sqrt(psi)
    theta = np.concatenate([coef, [alpha0, sigma]])

    dim = theta.size
    cov = np.zeros((dim, dim))
    free = dim - 1 if boundary else dim
    H = _hessian(lambda t: full_negll(np.concatenate([t, theta[free:]])), theta[:free])
    H = 0.5 * (H + H.T)
    w = np.linalg.eigvalsh(H)
    if not np.all(np.isfinite(w)) or w.min() <= 0:
        raise SingularHessian("observed information is not positive definite")
    cov[:free, :free] = np.linalg.inv(H)
    se = np.sqrt(np.diag(cov))
    lower, upper = theta - Z95 * se, theta + Z95 * se
    lower[-1] = max(lower[-1], 0.0)

    names = natural_names("rilm", design.mean_names, [], [])
    summary = FitSummary(
        model="rilm", method="ml", names=names, estimate=theta.copy(), lower=lower, upper=upper,
        loglik=-float(full_negll(theta)), n_obs=int(use.sum()),
        k_params=k_params("rilm", len(design.mean_names), 0, 0),
        extra={"within_variance": math.exp(alpha0), "boundary": bool(boundary)},
    )
    return RilmFit(summary=summary, theta=theta, cov=cov, design=design, boundary=bool(boundary))
