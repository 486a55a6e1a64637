import numpy as np
import pytest

from mixedimpute import DesignSpec, PanelDataset, build_design
from mixedimpute.inference import draw_parameter_sets, fit_rilm_ml, rilm_marginal_loglik


def _panel(y, x=None, n_subjects=None, n_occ=None):
    subject = np.repeat([f"s{i}" for i in range(n_subjects)], n_occ)
    occ = np.tile(np.arange(n_occ), n_subjects)
    cols = {"y": y} if x is None else {"y": y, "x": x}
    return PanelDataset(subject, 1 + occ // 10, 1 + occ % 10, cols)


def test_zero_random_intercept_collapses_to_ols():
    rng = np.random.default_rng(0)
    n, ni = 8, 10
    x = rng.normal(size=(n, ni))
    e = rng.normal(size=(n, ni))
    # exact zero between-subject spread: the ML variance component sits on the boundary
    x -= x.mean(axis=1, keepdims=True)
    e -= e.mean(axis=1, keepdims=True)
    y = 1.0 + 2.0 * x + e
    d = build_design(_panel(y.ravel(), x.ravel(), n, ni), DesignSpec(["x"]), "y")
    fit = fit_rilm_ml(d)
    X = np.column_stack([np.ones(n * ni), x.ravel()])
    ols = np.linalg.lstsq(X, y.ravel(), rcond=None)[0]
    np.testing.assert_allclose(fit.theta[:2], ols, atol=1e-6)
    assert fit.boundary
    assert fit.summary.get("sigma_v1")[0] == 0.0


def _dense_loglik(y_by_subject, beta0, alpha0, sigma):
    """Marginal loglik from the dense covariance; ``beta0`` may be an array."""
    beta0 = np.atleast_1d(beta0)
    total = np.zeros(beta0.size)
    for yi in y_by_subject:
        k = yi.size
        cov = np.exp(alpha0) * np.eye(k) + sigma**2 * np.ones((k, k))
        r = yi[None, :] - beta0[:, None]
        _, logdet = np.linalg.slogdet(cov)
        quad = np.einsum("bi,ij,bj->b", r, np.linalg.inv(cov), r)
        total += -0.5 * (k * np.log(2 * np.pi) + logdet + quad)
    return total


def test_balanced_toy_matches_grid_search():
    y = np.array([[0.1, -0.4, 0.8, 0.3, -0.2, 0.5], [3.2, 2.6, 3.9, 3.1, 2.7, 3.5]])
    d = build_design(_panel(y.ravel(), None, 2, 6), DesignSpec(), "y")
    fit = fit_rilm_ml(d)
    step = 0.02
    b_grid = np.arange(0.5, 2.9 + 1e-9, step)
    a_grid = np.arange(-2.5, 0.5 + 1e-9, step)
    s_grid = np.arange(0.5, 4.0 + 1e-9, step)
    best, arg = -np.inf, None
    for a in a_grid:
        for s in s_grid:
            vals = _dense_loglik(y, b_grid, a, s)
            k = int(np.argmax(vals))
            if vals[k] > best:
                best, arg = vals[k], (b_grid[k], a, s)
    # the ML optimum is at least as good as any grid point and lies within one step of the grid argmax
    assert fit.summary.loglik >= best - 1e-9
    for est, g in zip(fit.theta, arg):
        assert abs(est - g) <= step + 1e-9
    assert rilm_marginal_loglik(fit.theta, d) == pytest.approx(_dense_loglik(y, *fit.theta)[0], abs=1e-10)


def test_mcar_slope_coverage():
    rng = np.random.default_rng(2024)
    n, ni, reps = 50, 30, 100
    covered = 0
    for _ in range(reps):
        x = rng.normal(size=(n, ni))
        y = 0.5 + 1.0 * x + rng.normal(scale=0.8, size=(n, 1)) + rng.normal(size=(n, ni))
        y = y.ravel()
        y[rng.random(n * ni) < 0.2] = np.nan
        fit = fit_rilm_ml(build_design(_panel(y, x.ravel(), n, ni), DesignSpec(["x"]), "y"))
        lo, hi = fit.summary.lower[1], fit.summary.upper[1]
        covered += lo < 1.0 < hi
    assert 0.88 <= covered / reps <= 1.0


def test_near_zero_covariance_draws_sit_on_estimate():
    rng = np.random.default_rng(3)
    y = rng.normal(size=40) + np.repeat(rng.normal(size=4), 10)
    fit = fit_rilm_ml(build_design(_panel(y, None, 4, 10), DesignSpec(), "y"))
    fit.cov = np.zeros_like(fit.cov)
    sets = draw_parameter_sets(fit, 5, rng=np.random.default_rng(0))
    for p in sets:
        np.testing.assert_allclose([p.beta0, p.alpha0, p.sigma_v1], fit.theta, atol=1e-6)


def test_wald_interval_contains_estimate():
    rng = np.random.default_rng(4)
    y = rng.normal(size=60) + np.repeat(rng.normal(size=6), 10)
    s = fit_rilm_ml(build_design(_panel(y, None, 6, 10), DesignSpec(), "y")).summary
    assert np.all(s.lower <= s.estimate) and np.all(s.estimate <= s.upper)
    assert s.names == ["beta0", "alpha0", "sigma_v1"]
