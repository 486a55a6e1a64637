"""Adaptive random-walk Metropolis-Hastings for MELS and SPLSME.

Random-effect covariances are sampled through their Cholesky factor ``S`` and
per-subject standard-normal vectors ``z`` (``effects = S z``). Each iteration
sweeps a fixed sequence of blocks, each a symmetric Gaussian random walk:

``beta`` / ``alpha`` / ``tau`` / ``loadings`` / ``scales``
    plain updates of one coefficient group.
``*_shift``
    the same increment on a coefficient group, with ``z`` moved so that every
    subject's random effect absorbs the subject-mean change of the linear
    predictor. Breaks the intercept / random-effect ridge.
``recenter``
    a walk on (log s11, s21, log s22, [log s33, gamma, delta]) that holds the
    random effects fixed (``z' = S'^{-1} S z``); the likelihood is unchanged,
    so only priors and the Jacobian enter the ratio.
``z``
    independent per-subject proposals, accepted subject by subject (the target
    factorises over subjects given the globals).

All proposals are symmetric, so the acceptance probability is
``min(1, posterior ratio x Jacobian)``. Proposal scales (and, at three warmup
checkpoints, proposal covariances) are adapted during warmup only.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .. import kernels
from ..errors import DivergedChain, InvalidConfig, MissingCovariateInMeanModel, NonFiniteTarget
from .diagnostics import summarize
from .draws import PosteriorDrawSet, coefficient_names, natural_names

POSITIVE = ("s11", "s22", "s33")


@dataclass
class PriorSpec:
    coefficient_sd: float = 10.0
    scale_sd: float = 5.0
    loading_sd: float = 5.0

    def __post_init__(self):
        if min(self.coefficient_sd, self.scale_sd, self.loading_sd) <= 0:
            raise InvalidConfig("prior standard deviations must be positive")


@dataclass
class McmcConfig:
    chains: int = 2
    warmup_iters: int = 2000
    sampling_iters: int = 3000
    thin: int = 1
    seed: int = 0
    proposal_scales: dict = field(default_factory=dict)
    target_acceptance: float = 0.30
    prior_spec: PriorSpec = field(default_factory=PriorSpec)
    fixed: dict = field(default_factory=dict)
    divergence_window: int = 1000
    jobs: int = 1

    def __post_init__(self):
        if isinstance(self.prior_spec, dict):
            self.prior_spec = PriorSpec(**self.prior_spec)
        if self.chains < 1 or self.thin < 1:
            raise InvalidConfig("chains and thin must be >= 1")
        if self.warmup_iters < 0:
            raise InvalidConfig("warmup_iters must be >= 0")
        if self.sampling_iters < 10 * self.chains:
            raise InvalidConfig("sampling_iters must be at least 10 x chains")
        if not 0 < self.target_acceptance < 1:
            raise InvalidConfig("target_acceptance must lie in (0, 1)")
        if any(not v > 0 for v in self.proposal_scales.values()):
            raise InvalidConfig("proposal scales must be positive")

    @classmethod
    def from_mapping(cls, cfg):
        cfg = dict(cfg or {})
        if "prior_spec" in cfg and isinstance(cfg["prior_spec"], dict):
            cfg["prior_spec"] = PriorSpec(**cfg["prior_spec"])
        return cls(**cfg)


DEFAULT_SCALES = {
    "beta": 0.05, "alpha": 0.05, "tau": 0.1, "loadings": 0.1, "scales": 0.05, "recenter": 0.1, "z": 0.3,
}


# ---------------------------------------------------------------------------
# target
# ---------------------------------------------------------------------------

class _Target:
    def __init__(self, model, design, prior):
        if model not in ("mels", "splsme"):
            raise InvalidConfig(f"MH sampler supports mels and splsme, not {model!r}")
        use = design.observed
        if (use & design.covariate_missing).any():
            raise MissingCovariateInMeanModel(
                f"covariates of {design.response!r} are missing on rows where it is observed"
            )
        self.model = model
        self.design = design
        self.prior = prior
        self.splsme = model == "splsme"
        self.n = design.n_subjects
        self.r = 3 if self.splsme else 2

        names = coefficient_names("beta", design.mean_names) + coefficient_names("alpha", design.var_names)
        if self.splsme:
            names += coefficient_names("tau", design.miss_names) + ["gamma", "delta"]
        names += ["s11", "s21", "s22"] + (["s33"] if self.splsme else [])
        self.names = names
        self.idx = {nm: i for i, nm in enumerate(names)}
        p, pv, q = len(design.mean_names), len(design.var_names), len(design.miss_names)
        self.beta = np.arange(0, p + 1)
        self.alpha = np.arange(p + 1, p + pv + 2)
        off = p + pv + 2
        if self.splsme:
            self.tau = np.arange(off, off + q + 1)
            self.loadings = np.array([off + q + 1, off + q + 2])
            off += q + 3
        else:
            self.tau = np.arange(0)
            self.loadings = np.arange(0)
        self.chol = np.arange(off, len(names))
        coef = np.concatenate([self.beta, self.alpha, self.tau])
        self.coef_idx = coef

        # observed-row arrays for the normal part
        self.yo = design.y[use]
        self.Xm = design.X_mean[use]
        self.Xv = design.X_var[use]
        self.so = design.subj[use]
        self.ones_o = np.ones(self.yo.shape[0], dtype=bool)
        # all-row arrays for the missingness part
        self.T = design.T
        self.s_all = design.subj
        self.mvec = design.m

        # subject means of [1, x] rows, used by the shift moves
        cnt_o = np.maximum(np.bincount(self.so, minlength=self.n), 1).astype(float)
        cnt_a = np.maximum(np.bincount(self.s_all, minlength=self.n), 1).astype(float)

        def subject_means(X, s, cnt):
            out = np.ones((self.n, X.shape[1] + 1))
            for c in range(X.shape[1]):
                out[:, c + 1] = np.bincount(s, weights=X[:, c], minlength=self.n) / cnt
            return out

        self.xbar_mean = subject_means(self.Xm, self.so, cnt_o)
        self.xbar_var = subject_means(self.Xv, self.so, cnt_o)
        self.tbar = subject_means(self.T, self.s_all, cnt_a) if self.splsme else None

        # prior precisions per global; positivity-constrained entries
        w = np.zeros(len(names))
        w[coef] = prior.coefficient_sd**-2
        w[self.loadings] = prior.loading_sd**-2
        w[self.chol] = prior.scale_sd**-2
        self.prior_w = w
        self.pos_idx = np.array([self.idx[nm] for nm in POSITIVE if nm in self.idx], dtype=int)

    # -- pieces ------------------------------------------------------------
    def S(self, g):
        s11, s21, s22 = g[self.chol[0]], g[self.chol[1]], g[self.chol[2]]
        if not self.splsme:
            return np.array([[s11, 0.0], [s21, s22]])
        s33 = g[self.chol[3]]
        gam, dlt = g[self.loadings[0]], g[self.loadings[1]]
        return np.array([[s11, 0.0, gam * s33], [s21, s22, dlt * s33], [0.0, 0.0, s33]])

    def log_det_S(self, g):
        val = g[self.chol[0]] * g[self.chol[2]]
        if self.splsme:
            val *= g[self.chol[3]]
        return math.log(abs(val))

    def effects(self, g, z):
        return z @ self.S(g).T

    def ly(self, g, e):
        b = g[self.beta]
        a = g[self.alpha]
        mu = b[0] + self.Xm @ b[1:] + e[self.so, 0]
        lv = a[0] + self.Xv @ a[1:] + e[self.so, 1]
        return kernels.normal_by_subject(self.yo, mu, lv, self.ones_o, self.so, self.n)

    def lm(self, g, e):
        if not self.splsme:
            return np.zeros(self.n)
        t = g[self.tau]
        eta = t[0] + self.T @ t[1:] + e[self.s_all, 2]
        return kernels.bernoulli_logit_by_subject(self.mvec, eta, self.s_all, self.n)

    def log_prior(self, g):
        if self.pos_idx.size and not g[self.pos_idx].min() > 0:
            return -np.inf
        return -0.5 * float(g @ (self.prior_w * g))

    # -- natural scale -----------------------------------------------------
    def natural(self, g, z):
        s11, s21, s22 = g[self.chol[0]], g[self.chol[1]], g[self.chol[2]]
        sig2 = math.hypot(s21, s22)
        vals = list(g[self.beta]) + list(g[self.alpha])
        e1 = s11 * z[:, 0]
        e2 = s21 * z[:, 0] + s22 * z[:, 1]
        if not self.splsme:
            vals += [s11, sig2, s21 / sig2]
            return vals, (e1, e2)
        s33 = g[self.chol[3]]
        vals += list(g[self.tau]) + list(g[self.loadings]) + [s11, sig2, s21 / sig2, s33]
        return vals, (e1, e2, s33 * z[:, 2])


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class _Block:
    """Gaussian random-walk increment with adaptable scale and covariance."""

    def __init__(self, name, idx, kind, scale):
        self.name = name
        self.idx = np.asarray(idx, dtype=int)
        self.kind = kind
        self.dim = self.idx.size
        self.L = np.eye(self.dim) * scale
        self.log_h = 0.0
        self.k = 0
        self.accepted = 0
        self.tried = 0
        self.run = 0

    def step(self, rng):
        return math.exp(self.log_h) * (self.L @ rng.standard_normal(self.dim))

    def adapt(self, acc, target):
        self.k += 1
        self.log_h += (acc - target) / self.k**0.6

    def set_covariance(self, samples):
        if samples.shape[0] < 2 * self.dim + 2:
            return
        cov = np.atleast_2d(np.cov(samples, rowvar=False))
        cov = cov + np.eye(self.dim) * (1e-8 + 1e-6 * np.mean(np.diag(cov)))
        try:
            self.L = np.linalg.cholesky(cov) * (2.38 / math.sqrt(self.dim))
        except np.linalg.LinAlgError:
            return
        self.log_h = 0.0
        self.k = 0


class _ZBlock:
    def __init__(self, n, r, scale):
        self.name = "z"
        self.n, self.r = n, r
        self.L = np.tile(np.eye(r) * scale, (n, 1, 1))
        self.log_h = np.zeros(n)
        self.k = 0
        self.accepted = 0.0
        self.tried = 0
        self.run = 0

    def step(self, rng):
        eps = rng.standard_normal((self.n, self.r))
        return np.exp(self.log_h)[:, None] * np.einsum("nij,nj->ni", self.L, eps)

    def adapt(self, acc, target):
        self.k += 1
        self.log_h += (acc - target) / self.k**0.6

    def set_covariance(self, samples):
        # samples: (T, n, r)
        if samples.shape[0] < 2 * self.r + 2:
            return
        for i in range(self.n):
            cov = np.cov(samples[:, i, :], rowvar=False)
            cov = cov + np.eye(self.r) * (1e-8 + 1e-6 * np.mean(np.diag(cov)))
            try:
                self.L[i] = np.linalg.cholesky(cov) * (2.38 / math.sqrt(self.r))
            except np.linalg.LinAlgError:
                continue
        self.log_h[:] = 0.0
        self.k = 0


def _to_u(target, g, idx):
    u = g[idx].copy()
    for j, gi in enumerate(idx):
        if target.names[gi] in POSITIVE:
            u[j] = math.log(u[j])
    return u


# ---------------------------------------------------------------------------
# chain
# ---------------------------------------------------------------------------

class _Chain:
    def __init__(self, target, config, chain_index):
        self.t = target
        self.cfg = config
        self.rng = np.random.default_rng(np.random.SeedSequence([int(config.seed) & (2**63 - 1), chain_index]))
        unknown = set(config.fixed) - set(target.names)
        if unknown:
            raise InvalidConfig(f"unknown fixed parameters: {sorted(unknown)}")
        self.fixed = np.array([nm in config.fixed for nm in target.names])
        self._init_state()
        self._make_blocks()

    def _free(self, idx):
        return np.array([i for i in idx if not self.fixed[i]], dtype=int)

    def _init_state(self):
        t, rng = self.t, self.rng
        g = np.zeros(len(t.names))
        X = np.column_stack([np.ones(t.yo.shape[0]), t.Xm])
        coef, *_ = np.linalg.lstsq(X, t.yo, rcond=None)
        resid = t.yo - X @ coef
        g[t.beta] = coef
        g[t.alpha[0]] = math.log(max(float(resid.var()), 1e-6))
        for nm in POSITIVE:
            if nm in t.idx:
                g[t.idx[nm]] = 0.5
        jitter = np.concatenate([t.beta, t.alpha, t.tau, t.loadings])
        g[jitter] += 0.05 * rng.standard_normal(jitter.size)
        for nm in POSITIVE:
            if nm in t.idx:
                g[t.idx[nm]] *= math.exp(0.05 * rng.standard_normal())
        for nm, val in self.cfg.fixed.items():
            g[t.idx[nm]] = float(val)
        z = np.zeros((t.n, t.r))
        self.g, self.z = g, z
        self.e = t.effects(g, z)
        self.ly = t.ly(g, self.e)
        self.lm = t.lm(g, self.e)
        self.lp = t.log_prior(g)
        if not (np.isfinite(self.lp) and np.all(np.isfinite(self.ly)) and np.all(np.isfinite(self.lm))):
            raise NonFiniteTarget("log posterior is not finite at the initial point")
        self.cur = self._total(self.ly, self.lm, self.lp, self.z)

    def _scale(self, name):
        return self.cfg.proposal_scales.get(name, DEFAULT_SCALES.get(name.replace("_shift", ""), 0.1))

    def _make_blocks(self):
        t = self.t
        blocks = []
        chol_fixed = self.fixed[t.chol].any() or (t.splsme and self.fixed[t.loadings].any())
        for name, idx in (("beta", t.beta), ("alpha", t.alpha), ("tau", t.tau)):
            free = self._free(idx)
            if free.size:
                blocks.append(_Block(name, free, "plain", self._scale(name) / math.sqrt(free.size)))
                if not chol_fixed:
                    blocks.append(_Block(f"{name}_shift", free, "shift", self._scale(name) / math.sqrt(free.size)))
        if t.splsme:
            free = self._free(t.loadings)
            if free.size:
                blocks.append(_Block("loadings", free, "plain", self._scale("loadings")))
        free = self._free(t.chol)
        if free.size:
            blocks.append(_Block("scales", free, "plain", self._scale("scales")))
        if not chol_fixed:
            rc = np.concatenate([t.chol, t.loadings])
            blocks.append(_Block("recenter", rc, "recenter", self._scale("recenter") / math.sqrt(rc.size)))
        self.blocks = blocks
        self.zblock = _ZBlock(t.n, t.r, self._scale("z"))
        self._shift_base = {"beta": t.xbar_mean, "alpha": t.xbar_var, "tau": t.tbar}
        self._shift_col = {"beta": 0, "alpha": 1, "tau": 2}
        self._shift_pos = {}
        for b in blocks:
            if b.kind == "shift":
                base_idx = {"beta": t.beta, "alpha": t.alpha, "tau": t.tau}[b.name[:-6]]
                self._shift_pos[b.name] = np.searchsorted(base_idx, b.idx)

    # -- one block update ----------------------------------------------------
    def _total(self, ly, lm, lp, z):
        zf = z.ravel()
        return float(ly.sum() + lm.sum()) + lp - 0.5 * float(zf @ zf)

    def _update(self, block):
        t = self.t
        d = block.step(self.rng)
        g2 = self.g.copy()
        log_jac = 0.0
        if block.kind == "recenter":
            u = _to_u(t, self.g, block.idx) + d
            for j, gi in enumerate(block.idx):
                g2[gi] = math.exp(u[j]) if t.names[gi] in POSITIVE else u[j]
                if t.names[gi] in POSITIVE:
                    log_jac += math.log(g2[gi]) - math.log(self.g[gi])
        else:
            g2[block.idx] += d
        lp2 = t.log_prior(g2)
        if not np.isfinite(lp2):
            return False
        base = block.name[:-6] if block.kind == "shift" else block.name
        if block.kind == "recenter":
            S_old, S_new = t.S(self.g), t.S(g2)
            z2 = np.linalg.solve(S_new, S_old @ self.z.T).T
            log_jac += t.n * (t.log_det_S(self.g) - t.log_det_S(g2))
            e2, ly2, lm2 = self.e, self.ly, self.lm
        elif block.kind == "shift":
            full = np.zeros(self._shift_base[base].shape[1])
            full[self._shift_pos[block.name]] = d
            de = np.zeros((t.n, t.r))
            de[:, self._shift_col[base]] = -(self._shift_base[base] @ full)
            z2 = self.z + np.linalg.solve(t.S(g2), de.T).T
            e2 = t.effects(g2, z2)
            ly2 = t.ly(g2, e2) if base != "tau" else self.ly
            lm2 = t.lm(g2, e2) if base == "tau" else self.lm
        else:
            z2 = self.z
            if base in ("scales", "loadings"):
                e2 = t.effects(g2, z2)
                ly2 = t.ly(g2, e2)
                lm2 = t.lm(g2, e2) if base == "scales" else self.lm
            else:
                e2 = self.e
                ly2 = t.ly(g2, e2) if base in ("beta", "alpha") else self.ly
                lm2 = t.lm(g2, e2) if base == "tau" else self.lm
        new = self._total(ly2, lm2, lp2, z2)
        if math.log(self.rng.uniform()) < new - self.cur + log_jac:
            self.g, self.z, self.e, self.ly, self.lm, self.lp = g2, z2, e2, ly2, lm2, lp2
            self.cur = new
            return True
        return False

    def _update_z(self):
        t = self.t
        z2 = self.z + self.zblock.step(self.rng)
        e2 = t.effects(self.g, z2)
        ly2 = t.ly(self.g, e2)
        lm2 = t.lm(self.g, e2)
        cur = self.ly + self.lm - 0.5 * np.sum(self.z * self.z, axis=1)
        new = ly2 + lm2 - 0.5 * np.sum(z2 * z2, axis=1)
        with np.errstate(invalid="ignore"):
            log_r = new - cur
        log_u = np.log(self.rng.uniform(size=t.n))
        acc = log_u < log_r
        if acc.any():
            self.z = np.where(acc[:, None], z2, self.z)
            self.e = t.effects(self.g, self.z)
            self.ly = np.where(acc, ly2, self.ly)
            self.lm = np.where(acc, lm2, self.lm)
            self.cur = self._total(self.ly, self.lm, self.lp, self.z)
        return acc

    # -- driver ----------------------------------------------------------------
    def run(self):
        cfg, t = self.cfg, self.t
        W, N = cfg.warmup_iters, cfg.sampling_iters
        target = cfg.target_acceptance
        checkpoints = {W // 4, W // 2, (3 * W) // 4} if W >= 40 else set()
        hist_g = np.empty((W, len(t.names)))
        hist_z = np.empty((W, t.n, t.r))
        keep = list(range(0, N, cfg.thin))
        out_g = np.empty((len(keep), len(t.names)))
        out_z = np.empty((len(keep), t.n, t.r))
        kept = 0
        for it in range(W + N):
            sampling = it >= W
            for b in self.blocks:
                ok = self._update(b)
                if sampling:
                    b.tried += 1
                    b.accepted += ok
                    b.run = 0 if ok else b.run + 1
                    if b.run >= cfg.divergence_window:
                        raise DivergedChain(f"block {b.name!r} rejected {b.run} consecutive proposals")
                else:
                    b.adapt(float(ok), target)
            acc = self._update_z()
            zb = self.zblock
            if sampling:
                zb.tried += 1
                zb.accepted += float(acc.mean())
                zb.run = 0 if acc.any() else zb.run + 1
                if zb.run >= cfg.divergence_window:
                    raise DivergedChain("no subject accepted a z proposal over the divergence window")
                j = it - W
                if j % cfg.thin == 0:
                    out_g[kept] = self.g
                    out_z[kept] = self.z
                    kept += 1
            else:
                zb.adapt(acc.astype(float), target)
                hist_g[it] = self.g
                hist_z[it] = self.z
                if it + 1 in checkpoints:
                    lo, hi = (it + 1) // 2, it + 1
                    for b in self.blocks:
                        if b.kind == "recenter":
                            samples = np.array([_to_u(t, g, b.idx) for g in hist_g[lo:hi]])
                        else:
                            samples = hist_g[lo:hi][:, b.idx]
                        b.set_covariance(samples)
                    zb.set_covariance(hist_z[lo:hi])
        acceptance = {b.name: b.accepted / max(b.tried, 1) for b in self.blocks}
        acceptance["z"] = zb.accepted / max(zb.tried, 1)
        return out_g, out_z, acceptance


def _run_one(args):
    model, design, config, chain_index = args
    target = _Target(model, design, config.prior_spec)
    return _Chain(target, config, chain_index).run()


def run_mh(model, design, config=None):
    """Sample the MELS or SPLSME posterior; returns a :class:`PosteriorDrawSet`.

    ``design`` is the model's :class:`~mixedimpute.data.DesignMatrices` (the
    dataset enters only through it).
    """
    config = config or McmcConfig()
    target = _Target(model, design, config.prior_spec)
    jobs = [(model, design, config, c) for c in range(config.chains)]
    if config.jobs > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.jobs, config.chains)) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_Chain(target, config, c).run() for c in range(config.chains)]

    names = natural_names(model, design.mean_names, design.var_names, design.miss_names)
    eff_names = ("v1", "v2") if model == "mels" else ("eta1", "eta2", "lambda")
    values, effects, chain = [], {k: [] for k in eff_names}, []
    acceptance = {}
    for c, (gs, zs, acc) in enumerate(results):
        for g, z in zip(gs, zs):
            vals, effs = target.natural(g, z)
            values.append(vals)
            for k, arr in zip(eff_names, effs):
                effects[k].append(arr)
        chain.extend([c] * gs.shape[0])
        for k, v in acc.items():
            acceptance.setdefault(k, []).append(v)
    values = np.asarray(values, dtype=float)
    draws = PosteriorDrawSet(
        model=model, names=names, values=values, effects={k: np.asarray(v) for k, v in effects.items()},
        chain=np.asarray(chain, dtype=int), subject_ids=design.subject_ids, mean_names=list(design.mean_names),
        var_names=list(design.var_names), miss_names=list(design.miss_names), acceptance=acceptance,
    )
    _check_draws(draws)
    draws.diagnostics = summarize({nm: draws.chains_of(nm) for nm in names})
    return draws


def _check_draws(draws):
    for nm in draws.names:
        col = draws.column(nm)
        if nm.startswith("sigma_") and not np.all(col > 0):
            raise AssertionError(f"{nm} draws must be positive")
        if nm.startswith("rho_") and not np.all(np.abs(col) < 1):
            raise AssertionError(f"{nm} draws must lie in (-1, 1)")


def with_budget(config, warmup, sampling, chains=None):
    """Copy of ``config`` with a different iteration budget."""
    return replace(config, warmup_iters=warmup, sampling_iters=sampling, chains=chains or config.chains)
