"""Hot numerical kernels with a numba path and a pure-numpy path.

Every public function dispatches on :data:`mixedimpute._accel.BACKEND`. Both
implementations are kept importable (``*_numpy`` / ``*_numba``) so they can be
cross-checked and benchmarked against each other.

Row arrays are always subject-sorted; ``subj`` holds the 0-based subject index
of each row.
"""
import math

import numpy as np

from ._accel import BACKEND, njit

LOG_2PI = math.log(2.0 * math.pi)
# |log variance| beyond this is treated as a non-finite variance
LOGVAR_LIMIT = 500.0


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def normal_by_subject_numpy(y, mu, logvar, use, subj, n_subj):
    out = np.zeros(n_subj)
    if not use.any():
        return out
    lv = logvar[use]
    r = y[use] - mu[use]
    with np.errstate(over="ignore"):
        terms = -0.5 * (LOG_2PI + lv + r * r * np.exp(-lv))
    out += np.bincount(subj[use], weights=terms, minlength=n_subj)
    bad = np.abs(lv) > LOGVAR_LIMIT
    if bad.any():
        out[np.unique(subj[use][bad])] = -np.inf
    return out


def bernoulli_logit_by_subject_numpy(m, eta, subj, n_subj):
    # log L(eta)^m (1 - L(eta))^(1-m) = m * eta - softplus(eta)
    terms = m * eta - np.logaddexp(0.0, eta)
    return np.bincount(subj, weights=terms, minlength=n_subj)


def cs_marginal_by_subject_numpy(resid, use, subj, n_subj, log_a, b):
    """Marginal normal log-density with covariance ``a I + b J`` per subject."""
    a = math.exp(log_a)
    s = subj[use]
    r = resid[use]
    cnt = np.bincount(s, minlength=n_subj).astype(float)
    s1 = np.bincount(s, weights=r, minlength=n_subj)
    s2 = np.bincount(s, weights=r * r, minlength=n_subj)
    d = a + cnt * b
    quad = (s2 - b * s1 * s1 / d) / a
    logdet = (cnt - 1.0) * log_a + np.log(d)
    out = -0.5 * (cnt * LOG_2PI + logdet + quad)
    out[cnt == 0] = 0.0
    return out


def node_marginal_by_subject_numpy(y, mu, logvar, use, subj, n_subj, node_loc, node_ls, log_w):
    """log sum_k w_k prod_j N(y_j | mu_j + loc_k, exp(logvar_j + ls_k)) per subject."""
    out = np.zeros(n_subj)
    if not use.any():
        return out
    r = (y[use] - mu[use])[:, None] - node_loc[None, :]
    lv = logvar[use][:, None] + node_ls[None, :]
    with np.errstate(over="ignore"):
        terms = -0.5 * (LOG_2PI + lv + r * r * np.exp(-lv))
    ind = np.zeros((n_subj, terms.shape[0]))
    ind[subj[use], np.arange(terms.shape[0])] = 1.0
    per = ind @ terms + log_w[None, :]
    peak = per.max(axis=1, keepdims=True)
    return (peak + np.log(np.exp(per - peak).sum(axis=1, keepdims=True)))[:, 0]


def discrete_metropolis_numpy(log_p, x0, offsets, log_u):
    """Run a symmetric random-walk MH chain on states ``0..S-1``.

    The proposal from state ``s`` is ``(s + offset) % S`` with ``offset``
    uniform on ``1..S-1``. Returns visit counts per state.
    """
    n_states = log_p.shape[0]
    counts = np.zeros(n_states, dtype=np.int64)
    x = int(x0)
    for t in range(offsets.shape[0]):
        prop = (x + offsets[t]) % n_states
        if log_u[t] < log_p[prop] - log_p[x]:
            x = prop
        counts[x] += 1
    return counts


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

@njit(cache=True)
def normal_by_subject_numba(y, mu, logvar, use, subj, n_subj):
    out = np.zeros(n_subj)
    for i in range(y.shape[0]):
        if not use[i]:
            continue
        s = subj[i]
        lv = logvar[i]
        if abs(lv) > LOGVAR_LIMIT:
            out[s] = -np.inf
            continue
        r = y[i] - mu[i]
        out[s] += -0.5 * (LOG_2PI + lv + r * r * math.exp(-lv))
    return out


@njit(cache=True)
def bernoulli_logit_by_subject_numba(m, eta, subj, n_subj):
    out = np.zeros(n_subj)
    for i in range(m.shape[0]):
        e = eta[i]
        if e > 0.0:
            sp = e + math.log1p(math.exp(-e))
        else:
            sp = math.log1p(math.exp(e))
        out[subj[i]] += m[i] * e - sp
    return out


@njit(cache=True)
def cs_marginal_by_subject_numba(resid, use, subj, n_subj, log_a, b):
    a = math.exp(log_a)
    cnt = np.zeros(n_subj)
    s1 = np.zeros(n_subj)
    s2 = np.zeros(n_subj)
    for i in range(resid.shape[0]):
        if use[i]:
            s = subj[i]
            cnt[s] += 1.0
            s1[s] += resid[i]
            s2[s] += resid[i] * resid[i]
    out = np.zeros(n_subj)
    for s in range(n_subj):
        if cnt[s] == 0.0:
            continue
        d = a + cnt[s] * b
        quad = (s2[s] - b * s1[s] * s1[s] / d) / a
        logdet = (cnt[s] - 1.0) * log_a + math.log(d)
        out[s] = -0.5 * (cnt[s] * LOG_2PI + logdet + quad)
    return out


@njit(cache=True)
def node_marginal_by_subject_numba(y, mu, logvar, use, subj, n_subj, node_loc, node_ls, log_w):
    n_nodes = node_loc.shape[0]
    acc = np.zeros((n_subj, n_nodes))
    for k in range(n_nodes):
        acc[:, k] = log_w[k]
    for i in range(y.shape[0]):
        if not use[i]:
            continue
        s = subj[i]
        for k in range(n_nodes):
            lv = logvar[i] + node_ls[k]
            r = y[i] - mu[i] - node_loc[k]
            acc[s, k] += -0.5 * (LOG_2PI + lv + r * r * math.exp(-lv))
    out = np.zeros(n_subj)
    for s in range(n_subj):
        peak = -np.inf
        for k in range(n_nodes):
            if acc[s, k] > peak:
                peak = acc[s, k]
        tot = 0.0
        for k in range(n_nodes):
            tot += math.exp(acc[s, k] - peak)
        out[s] = peak + math.log(tot)
    return out


@njit(cache=True)
def discrete_metropolis_numba(log_p, x0, offsets, log_u):
    n_states = log_p.shape[0]
    counts = np.zeros(n_states, dtype=np.int64)
    x = x0
    for t in range(offsets.shape[0]):
        prop = (x + offsets[t]) % n_states
        if log_u[t] < log_p[prop] - log_p[x]:
            x = prop
        counts[x] += 1
    return counts


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_IMPLS = {
    "numpy": {
        "normal_by_subject": normal_by_subject_numpy,
        "bernoulli_logit_by_subject": bernoulli_logit_by_subject_numpy,
        "cs_marginal_by_subject": cs_marginal_by_subject_numpy,
        "node_marginal_by_subject": node_marginal_by_subject_numpy,
        "discrete_metropolis": discrete_metropolis_numpy,
    },
    "numba": {
        "normal_by_subject": normal_by_subject_numba,
        "bernoulli_logit_by_subject": bernoulli_logit_by_subject_numba,
        "cs_marginal_by_subject": cs_marginal_by_subject_numba,
        "node_marginal_by_subject": node_marginal_by_subject_numba,
        "discrete_metropolis": discrete_metropolis_numba,
    },
}

normal_by_subject = _IMPLS[BACKEND]["normal_by_subject"]
bernoulli_logit_by_subject = _IMPLS[BACKEND]["bernoulli_logit_by_subject"]
cs_marginal_by_subject = _IMPLS[BACKEND]["cs_marginal_by_subject"]
node_marginal_by_subject = _IMPLS[BACKEND]["node_marginal_by_subject"]
discrete_metropolis = _IMPLS[BACKEND]["discrete_metropolis"]


def implementations(name):
    """Return ``{"numpy": f, "numba": g}`` for kernel ``name``."""
    return {backend: table[name] for backend, table in _IMPLS.items()}
