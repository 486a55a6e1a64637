"""MNAR panel generator with a shared missingness effect, and tau0 calibration.

Generation order per replication:

1. subject-level ``x2 ~ N(mu, var)``;
2. ``lambda_i ~ N(0, sigma_lambda^2)`` and
   ``m_ij ~ Bernoulli(L(tau0 + tau1 day + tau2 [beep = 1] + tau3 [beep = last] + lambda_i))``;
3. ``x1`` from its shared-parameter location-scale law (using ``x2`` and ``lambda``);
4. ``y`` likewise, using ``x1``, ``x2`` and the same ``lambda``.

``x1`` and ``y`` are then masked wherever ``m_ij = 1``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import DesignSpec, PanelDataset, build_design
from .errors import InvalidConfig, NoBracket
from .models import logistic

MISSING_KEYS = ("tau0", "tau1", "tau2", "tau3", "sigma_lambda")
X1_KEYS = ("beta0", "beta2", "alpha0", "alpha2", "gamma", "delta", "sigma_eta1", "sigma_eta2", "rho")
Y_KEYS = ("beta0", "beta1", "beta2", "alpha0", "alpha1", "alpha2", "gamma", "delta", "sigma_eta1", "sigma_eta2", "rho")

DEFAULT_SCENARIO = {
    "n_subjects": 20,
    "n_days": 5,
    "n_beeps": 6,
    "target_missing_rate": 0.20,
    "seed": 20240101,
    "x2": {"mu": 2.0, "var": 1.0},
    "missing": {"tau0": None, "tau1": 0.1, "tau2": 1.0, "tau3": 0.5, "sigma_lambda": 1.0},
    "x1": {
        "beta0": 5.0, "beta2": 0.5, "alpha0": 0.0, "alpha2": 0.1, "gamma": -0.5, "delta": 0.5,
        "sigma_eta1": 1.0, "sigma_eta2": 0.5, "rho": -0.2,
    },
    "y": {
        "beta0": 2.0, "beta1": 1.0, "beta2": 1.0, "alpha0": 0.0, "alpha1": 0.1, "alpha2": 0.05, "gamma": -0.5,
        "delta": 0.5, "sigma_eta1": 1.0, "sigma_eta2": 1.0, "rho": -0.2,
    },
}

# design terms used when fitting the generated data
TIME_TERMS = ["cont(day)", "dummy(beep=1)"]


def default_designs(n_beeps=6):
    """Fitting designs for ``x1`` and ``y`` on generated data."""
    time = TIME_TERMS + [f"dummy(beep={n_beeps})"]
    return {
        "x1": DesignSpec(["x2", *time], ["x2", *time], time),
        "y": DesignSpec(["x1", "x2", *time], ["x1", "x2", *time], time),
    }


@dataclass
class ScenarioConfig:
    """Generator truth and layout. Nested blocks mirror the scenario file schema."""

    n_subjects: int = 20
    n_days: int = 5
    n_beeps: int = 6
    target_missing_rate: float = 0.20
    seed: int = 0
    x2: dict = field(default_factory=lambda: dict(DEFAULT_SCENARIO["x2"]))
    missing: dict = field(default_factory=lambda: dict(DEFAULT_SCENARIO["missing"]))
    x1: dict = field(default_factory=lambda: dict(DEFAULT_SCENARIO["x1"]))
    y: dict = field(default_factory=lambda: dict(DEFAULT_SCENARIO["y"]))

    def __post_init__(self):
        self.validate()

    def validate(self):
        for attr in ("n_subjects", "n_days", "n_beeps"):
            v = getattr(self, attr)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InvalidConfig(f"{attr}: must be a positive integer, got {v!r}")
        if self.n_beeps < 2:
            raise InvalidConfig("n_beeps: first- and last-beep dummies need at least 2 beeps")
        if not 0 < float(self.target_missing_rate) < 1:
            raise InvalidConfig(f"target_missing_rate: must lie in (0, 1), got {self.target_missing_rate!r}")
        for block, keys in (("x2", ("mu", "var")), ("missing", MISSING_KEYS), ("x1", X1_KEYS), ("y", Y_KEYS)):
            values = getattr(self, block)
            if not isinstance(values, dict):
                raise InvalidConfig(f"{block}: must be a mapping")
            extra = set(values) - set(keys)
            if extra:
                raise InvalidConfig(f"{block}.{sorted(extra)[0]}: unknown key")
            for k in keys:
                if k not in values:
                    raise InvalidConfig(f"{block}.{k}: missing")
                v = values[k]
                if block == "missing" and k == "tau0" and (v is None or v == "-inf"):
                    continue
                try:
                    v = float(v)
                except (TypeError, ValueError):
                    raise InvalidConfig(f"{block}.{k}: not a number ({v!r})") from None
                if k != "tau0" and not math.isfinite(v):
                    raise InvalidConfig(f"{block}.{k}: must be finite")
                values[k] = v
        if self.x2["var"] < 0:
            raise InvalidConfig("x2.var: must be non-negative")
        if self.missing["sigma_lambda"] < 0:
            raise InvalidConfig("missing.sigma_lambda: must be non-negative")
        for block in ("x1", "y"):
            b = getattr(self, block)
            if b["sigma_eta1"] < 0 or b["sigma_eta2"] < 0:
                raise InvalidConfig(f"{block}.sigma_eta*: must be non-negative")
            if not abs(b["rho"]) < 1:
                raise InvalidConfig(f"{block}.rho: must lie in (-1, 1)")

    @classmethod
    def from_mapping(cls, cfg):
        cfg = dict(cfg or {})
        known = {"n_subjects", "n_days", "n_beeps", "target_missing_rate", "seed", "x2", "missing", "x1", "y"}
        extra = set(cfg) - known
        if extra:
            raise InvalidConfig(f"{sorted(extra)[0]}: unknown scenario key")
        base = copy.deepcopy(DEFAULT_SCENARIO)
        for k, v in cfg.items():
            if isinstance(base.get(k), dict):
                if not isinstance(v, dict):
                    raise InvalidConfig(f"{k}: must be a mapping")
                base[k].update(v)
            else:
                base[k] = v
        return cls(**base)

    def to_mapping(self):
        return {
            "n_subjects": int(self.n_subjects), "n_days": int(self.n_days), "n_beeps": int(self.n_beeps),
            "target_missing_rate": float(self.target_missing_rate), "seed": int(self.seed),
            "x2": dict(self.x2), "missing": dict(self.missing), "x1": dict(self.x1), "y": dict(self.y),
        }

    def with_overrides(self, overrides):
        """Copy with dotted-key overrides, e.g. ``{"y.alpha0": 1.0}``."""
        cfg = copy.deepcopy(self.to_mapping())
        for key, val in overrides.items():
            parts = key.split(".")
            node = cfg
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise InvalidConfig(f"{key}: unknown scenario key")
                node = node[p]
            if parts[-1] not in node:
                raise InvalidConfig(f"{key}: unknown scenario key")
            node[parts[-1]] = val
        return ScenarioConfig.from_mapping(cfg)

    def label(self):
        y = self.y
        return f"alpha0={y['alpha0']:g},rho={y['rho']:g},gamma={y['gamma']:g},delta={y['delta']:g}"


@dataclass
class SimulatedDataset:
    dataset: PanelDataset
    truth: dict
    config: ScenarioConfig

    @property
    def mask(self):
        return np.asarray(self.truth["m"], dtype=bool)

    def truth_record(self):
        """JSON-serialisable truth record (latent effects and complete values)."""
        out = {}
        for k, v in self.truth.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
            else:
                out[k] = v
        out["scenario"] = self.config.to_mapping()
        return out


def _time_grid(n_days, n_beeps):
    day = np.repeat(np.arange(1, n_days + 1), n_beeps)
    beep = np.tile(np.arange(1, n_beeps + 1), n_days)
    return day, beep


def _time_predictor(missing, day, beep, n_beeps):
    return missing["tau1"] * day + missing["tau2"] * (beep == 1) + missing["tau3"] * (beep == n_beeps)


def expected_missing_rate(config, tau0, n_lambda=10_000, seed=0):
    """Expected missing fraction: Monte Carlo over lambda, exact over the occasion grid."""
    miss = config.missing
    day, beep = _time_grid(config.n_days, config.n_beeps)
    base = _time_predictor(miss, day, beep, config.n_beeps)
    if miss["sigma_lambda"] == 0:
        lam = np.zeros(1)
    else:
        lam = miss["sigma_lambda"] * np.random.default_rng(seed).standard_normal(n_lambda)
    return float(logistic(tau0 + base[None, :] + lam[:, None]).mean())


def calibrate_tau0(config, target_rate=None, tolerance=0.005, n_lambda=10_000, seed=0):
    """Missingness intercept whose expected missing rate equals ``target_rate``."""
    target = float(config.target_missing_rate if target_rate is None else target_rate)
    if not 0 < target < 1:
        raise InvalidConfig(f"target rate must lie in (0, 1), got {target}")

    def gap(t0):
        return expected_missing_rate(config, t0, n_lambda, seed) - target

    lo, hi = -20.0, 20.0
    if not gap(lo) < 0 < gap(hi):
        raise NoBracket(f"target rate {target} is not bracketed by tau0 in [{lo}, {hi}]")
    tau0 = optimize.brentq(gap, lo, hi, xtol=1e-12, rtol=1e-14, maxiter=500)
    if not abs(gap(tau0)) < tolerance:
        raise NoBracket("root search did not reach the requested tolerance")
    return float(tau0)


def resolve_tau0(config):
    tau0 = config.missing["tau0"]
    if tau0 is None:
        return calibrate_tau0(config)
    if tau0 == "-inf":
        return -math.inf
    return float(tau0)


def _effects(rng, n, s1, s2, rho):
    z = rng.standard_normal((n, 2))
    e1 = s1 * z[:, 0]
    e2 = s2 * (rho * z[:, 0] + math.sqrt(1.0 - rho * rho) * z[:, 1])
    return e1, e2


def generate(config, replication=0, tau0=None):
    """Generate one replication. ``tau0`` overrides calibration (pass it to reuse one)."""
    cfg = config
    n, J = cfg.n_subjects, cfg.n_days * cfg.n_beeps
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed) & (2**63 - 1), int(replication)]))
    if tau0 is None:
        tau0 = resolve_tau0(cfg)
    day1, beep1 = _time_grid(cfg.n_days, cfg.n_beeps)
    day = np.tile(day1, n)
    beep = np.tile(beep1, n)
    subj = np.repeat(np.arange(n), J)

    # step 1
    x2_i = cfg.x2["mu"] + math.sqrt(cfg.x2["var"]) * rng.standard_normal(n)
    x2 = x2_i[subj]
    # step 2
    miss = cfg.missing
    lam = miss["sigma_lambda"] * rng.standard_normal(n)
    eta_m = tau0 + _time_predictor(miss, day, beep, cfg.n_beeps) + lam[subj]
    if math.isinf(tau0):
        m = np.zeros(n * J, dtype=bool)
    else:
        m = rng.uniform(size=n * J) < logistic(eta_m)
    # step 3
    a = cfg.x1
    e1, e2 = _effects(rng, n, a["sigma_eta1"], a["sigma_eta2"], a["rho"])
    mu1 = a["beta0"] + a["beta2"] * x2 + e1[subj] + a["gamma"] * lam[subj]
    lv1 = a["alpha0"] + a["alpha2"] * x2 + e2[subj] + a["delta"] * lam[subj]
    x1 = mu1 + np.exp(0.5 * lv1) * rng.standard_normal(n * J)
    # step 4
    b = cfg.y
    f1, f2 = _effects(rng, n, b["sigma_eta1"], b["sigma_eta2"], b["rho"])
    mu2 = b["beta0"] + b["beta1"] * x1 + b["beta2"] * x2 + f1[subj] + b["gamma"] * lam[subj]
    lv2 = b["alpha0"] + b["alpha1"] * x1 + b["alpha2"] * x2 + f2[subj] + b["delta"] * lam[subj]
    y = mu2 + np.exp(0.5 * lv2) * rng.standard_normal(n * J)

    width = len(str(n))
    ids = [f"s{i + 1:0{width}d}" for i in range(n)]
    x1_obs = np.where(m, np.nan, x1)
    y_obs = np.where(m, np.nan, y)
    ds = PanelDataset(
        [ids[i] for i in subj], day, beep, {"x1": x1_obs, "x2": x2, "y": y_obs},
        missingness_covariate_names=tuple(TIME_TERMS + [f"dummy(beep={cfg.n_beeps})"]),
    )
    truth = {
        "replication": int(replication), "tau0": float(tau0), "m": m, "lambda": lam, "x2": x2_i,
        "eta1_x1": e1, "eta2_x1": e2, "eta1_y": f1, "eta2_y": f2, "x1": x1, "y": y,
    }
    return SimulatedDataset(dataset=ds, truth=truth, config=cfg)


# ---------------------------------------------------------------------------
# truth on each model's natural scale
# ---------------------------------------------------------------------------

_TIME_TAU = {"cont(day)": "tau1", "dummy(beep=1)": "tau2"}


def truth_parameters(config, variable, model, design, tau0=None):
    """True parameter values named as in the fitted model's summary.

    RILM and MELS marginalise the shared effect: ``v1 = eta1 + gamma lambda``
    and ``v2 = eta2 + delta lambda``. Covariates absent from the generator have
    truth 0. RILM's ``alpha0`` is the generator's variance intercept.
    """
    b = config.x1 if variable == "x1" else config.y
    sl = config.missing["sigma_lambda"]
    coef_of = {"x2": "beta2"} if variable == "x1" else {"x1": "beta1", "x2": "beta2"}
    var_of = {"x2": "alpha2"} if variable == "x1" else {"x1": "alpha1", "x2": "alpha2"}
    out = {"beta0": b["beta0"], "alpha0": b["alpha0"]}
    for nm in design.mean_names:
        out[f"beta[{nm}]"] = b[coef_of[nm]] if nm in coef_of else 0.0
    s1, s2, rho = b["sigma_eta1"], b["sigma_eta2"], b["rho"]
    sv1 = math.sqrt(s1**2 + (b["gamma"] * sl) ** 2)
    sv2 = math.sqrt(s2**2 + (b["delta"] * sl) ** 2)
    if model == "rilm":
        out["sigma_v1"] = sv1
        return out
    for nm in design.var_names:
        out[f"alpha[{nm}]"] = b[var_of[nm]] if nm in var_of else 0.0
    if model == "mels":
        out["sigma_v1"] = sv1
        out["sigma_v2"] = sv2
        out["rho_v1v2"] = (rho * s1 * s2 + b["gamma"] * b["delta"] * sl**2) / (sv1 * sv2)
        return out
    time_tau = dict(_TIME_TAU, **{f"dummy(beep={config.n_beeps})": "tau3"})
    out["tau0"] = config.missing["tau0"] if tau0 is None else tau0
    for nm in design.miss_names:
        out[f"tau[{nm}]"] = config.missing[time_tau[nm]] if nm in time_tau else 0.0
    out.update(gamma=b["gamma"], delta=b["delta"], sigma_eta1=s1, sigma_eta2=s2, rho_eta=rho, sigma_lambda=sl)
    return out


def design_for(sim, variable, spec=None):
    spec = spec or default_designs(sim.config.n_beeps)[variable]
    return build_design(sim.dataset, spec, variable)
