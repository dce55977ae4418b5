"""Shared fixtures and independent reference implementations for the tests.

The oracles here deliberately avoid the package's own kernels: they work on
the explicit 2N-row expansion, use scipy.stats densities or mpmath, and solve
least squares with dense dummy-variable designs.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
from scipy import optimize, stats

from matchsens import MatchedDataset, ModelParams, SensitivityParams


def random_dataset(seed: int, n_sets: int = 12, k: int = 2, set_size: int = 4,
                   beta: float = 1.0) -> MatchedDataset:
    """Matched sets of ``set_size`` with at least one treated and one control."""
    rng = np.random.default_rng(seed)
    n = n_sets * set_size
    sets = np.repeat(np.arange(n_sets), set_size)
    X = rng.normal(size=(n, k)) * 0.5
    z = np.zeros(n, dtype=int)
    for s in range(n_sets):
        rows = np.flatnonzero(sets == s)
        n_t = rng.integers(1, set_size)
        z[rng.choice(rows, n_t, replace=False)] = 1
    alpha = rng.normal(size=n_sets)
    y = alpha[sets] + X @ rng.normal(size=k) + beta * z + rng.normal(size=n)
    names = [f"x{j + 1}" for j in range(k)]
    return MatchedDataset(X, z, y, [f"s{s}" for s in sets], names)


def random_params(ds: MatchedDataset, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(
        kappa0=float(rng.normal(scale=0.5)),
        kappa={c: float(rng.normal(scale=0.5)) for c in ds.covariate_names},
        psi={c: float(rng.normal()) for c in ds.covariate_names},
        set_effects={s: float(rng.normal()) for s in ds.set_labels},
        sigma=float(rng.uniform(0.5, 2.0)),
        beta=float(rng.normal()),
    )


# ---------------------------------------------------------------- oracles


def _arrays(ds: MatchedDataset, gamma: ModelParams):
    names = ds.covariate_names
    kappa = np.array([gamma.kappa.get(c, 0.0) for c in names])
    psi = np.array([gamma.psi.get(c, 0.0) for c in names])
    a = np.array([gamma.set_effects[ds.set_labels[s]] for s in ds.set_index])
    eta = gamma.kappa0 + ds.X @ kappa
    mu = a + ds.X @ psi + gamma.beta * ds.z
    return eta, mu


def oracle_joint_logs(ds, gamma, sp):
    """log p(z, y, U=u) for u = 0, 1 from scipy.stats, term by term."""
    eta, mu = _arrays(ds, gamma)
    out = []
    for u in (0, 1):
        prior = sp.p if u == 1 else 1.0 - sp.p
        lp = math.log(prior) if prior > 0 else -math.inf
        ez = stats.bernoulli.logpmf(ds.z, stats.logistic.cdf(eta + sp.lam * u))
        ey = stats.norm.logpdf(ds.y, loc=mu + sp.delta * u, scale=gamma.sigma)
        out.append(lp + ez + ey)
    return out


def oracle_loglik(ds, gamma, sp) -> float:
    l0, l1 = oracle_joint_logs(ds, gamma, sp)
    return float(sum(np.logaddexp(a, b) for a, b in zip(l0, l1)))


def oracle_weight_mp(z, y, eta, mu, sigma, p, lam, delta) -> float:
    """Posterior P(U=1) in 60-digit arithmetic, no log-space tricks."""
    with mpmath.workdps(60):
        def dens(u):
            e = 1 / (1 + mpmath.exp(-(mpmath.mpf(eta) + lam * u)))
            pz = e if z == 1 else 1 - e
            r = (mpmath.mpf(y) - mu - delta * u) / sigma
            return pz * mpmath.exp(-r * r / 2)
        num = p * dens(1)
        return float(num / (num + (1 - p) * dens(0)))


def oracle_outcome_wls(ds, w1, delta):
    """Weighted OLS on the explicit 2N-row expansion with set dummies.

    Returns ``(psi, set_effects, beta, sigma)``.
    """
    n = ds.n_subjects
    dummies = np.eye(ds.n_sets)[ds.set_index]
    design = np.column_stack([ds.X, ds.z, dummies])
    D2 = np.vstack([design, design])
    u = np.concatenate([np.zeros(n), np.ones(n)])
    y2 = np.concatenate([ds.y, ds.y]) - delta * u
    w2 = np.concatenate([1.0 - w1, w1])
    sw = np.sqrt(w2)
    coef, *_ = np.linalg.lstsq(D2 * sw[:, None], y2 * sw, rcond=None)
    resid = y2 - D2 @ coef
    sigma = math.sqrt(float(np.sum(w2 * resid ** 2)) / n)
    k = ds.n_covariates
    return coef[:k], coef[k + 1:], float(coef[k]), sigma


def oracle_q2(kappa_full, ds, w1, lam) -> float:
    """Expected complete-data treatment log-likelihood on the 2N rows."""
    eta = kappa_full[0] + ds.X @ np.asarray(kappa_full[1:])
    total = 0.0
    for u, w in ((0, 1.0 - w1), (1, w1)):
        total += float(np.sum(w * stats.bernoulli.logpmf(ds.z, stats.logistic.cdf(eta + lam * u))))
    return total


def oracle_treatment_max(ds, w1, lam):
    """Maximize Q2 with BFGS from zero, independent of the Newton kernel."""
    k = ds.n_covariates + 1

    def neg(theta):
        eta = theta[0] + ds.X @ theta[1:]
        f = 0.0
        g = np.zeros(k)
        Xl = np.column_stack([np.ones(ds.n_subjects), ds.X])
        for u, w in ((0, 1.0 - w1), (1, w1)):
            e = eta + lam * u
            f -= np.sum(w * (ds.z * e - np.logaddexp(0.0, e)))
            g -= Xl.T @ (w * (ds.z - stats.logistic.cdf(e)))
        return f, g

    res = optimize.minimize(neg, np.zeros(k), jac=True, method="BFGS",
                            options={"gtol": 1e-11, "maxiter": 10000})
    return res.x


def fe_ols(ds):
    """Plain fixed-effects least squares of y on X and z with set dummies."""
    dummies = np.eye(ds.n_sets)[ds.set_index]
    D = np.column_stack([ds.X, ds.z, dummies])
    coef, *_ = np.linalg.lstsq(D, ds.y, rcond=None)
    return coef


@pytest.fixture
def small_ds():
    return random_dataset(7)


@pytest.fixture
def null_sp():
    return SensitivityParams(0.5, 0.0, 0.0)
