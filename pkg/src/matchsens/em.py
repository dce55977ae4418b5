"""EM by the method of weights for the binary latent-confounder model.

For fixed sensitivity parameters ``(p, lam, delta)`` the model is::

    U ~ Bern(p)
    P(Z = 1 | x, U) = expit(kappa0 + kappa'x + lam * U)
    Y | x, U, Z ~ Normal(a_set + psi'x + delta * U + beta * Z, sigma^2)

Each subject is treated as two weighted rows (U = 0 and U = 1). Because
the two weights of a subject sum to one, the weighted M-steps on the 2N
expanded rows collapse to N-row computations:

* outcome: least squares of ``y - delta * w1`` on the within-set demeaned
  design, plus ``delta^2 * w1 * (1 - w1)`` in the residual sum of squares;
* treatment: a logistic likelihood mixing the offsets 0 and ``lam`` with
  weights ``1 - w1`` and ``w1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .errors import DataError, NumericalError, RankDeficient, Separation, SingularInformation
from . import _kernels as _k
from .model import MatchedDataset, ModelParams, SensitivityParams, Subject

__all__ = [
    "FitResult",
    "OutcomeFit",
    "em_fit",
    "m_step_outcome",
    "m_step_treatment",
    "observed_loglik",
    "posterior_weight",
    "posterior_weights",
    "prune_covariates",
]

LOG_2PI = math.log(2.0 * math.pi)
PRUNE_TOL = 1e-10
RANK_TOL = 1e-10
KAPPA_MAX = 30.0
IRLS_GTOL = 1e-8
IRLS_MAX_ITER = 100


def _log_prior(p: float) -> tuple[float, float]:
    lp1 = math.log(p) if p > 0 else -math.inf
    lp0 = math.log1p(-p) if p < 1 else -math.inf
    return lp0, lp1


class OutcomeFit(NamedTuple):
    psi: np.ndarray
    set_effects: np.ndarray
    beta: float
    sigma: float


def prune_covariates(ds: MatchedDataset, tol: float = PRUNE_TOL) -> tuple[int, ...]:
    """Indices of covariates with pooled within-set variance >= ``tol``.

    Covariates constant within every matched set are collinear with the
    set effects and are dropped from the outcome model only.
    """
    if ds.n_covariates == 0:
        return ()
    resid = _demean(ds.X, ds.set_index, _set_sizes(ds))
    var = (resid ** 2).sum(axis=0) / ds.n_subjects
    return tuple(int(j) for j in np.flatnonzero(var >= tol))


def _set_sizes(ds: MatchedDataset) -> np.ndarray:
    return np.bincount(ds.set_index, minlength=ds.n_sets).astype(float)


def _demean(v, codes, sizes):
    if v.ndim == 1:
        means = np.bincount(codes, weights=v, minlength=sizes.shape[0]) / sizes
    else:
        means = np.empty((sizes.shape[0], v.shape[1]))
        for j in range(v.shape[1]):
            means[:, j] = np.bincount(codes, weights=v[:, j], minlength=sizes.shape[0])
        means /= sizes[:, None]
    return v - means[codes]


class _Problem:
    """Design quantities that stay fixed across EM iterations."""

    def __init__(self, ds: MatchedDataset, keep: tuple[int, ...] | None = None,
                 outcome: bool = True, drop_aliased: bool = False):
        self.ds = ds
        self.n = ds.n_subjects
        self.codes = ds.set_index
        self.sizes = _set_sizes(ds)
        self.y = np.ascontiguousarray(ds.y, dtype=float)
        self.z = ds.z.astype(float)
        self.keep = prune_covariates(ds) if keep is None else tuple(keep)
        if drop_aliased and self.keep:
            self.keep = self._unaliased(self.keep)
        self.Xk = np.ascontiguousarray(ds.X[:, list(self.keep)])
        self.Xl = np.column_stack([np.ones(self.n), ds.X])
        self.D = np.column_stack([self.Xk, self.z])
        if outcome:
            self._factor_outcome()

    def _unaliased(self, keep):
        # Largest set of covariates that, after removing set effects and z,
        # is linearly independent (column pivoting picks the survivors).
        Xt = _demean(self.ds.X[:, list(keep)], self.codes, self.sizes)
        zt = _demean(self.z[:, None], self.codes, self.sizes)[:, 0]
        zz = zt @ zt
        if zz > 0:
            Xt = Xt - np.outer(zt, zt @ Xt / zz)
        _, r, piv = linalg.qr(Xt, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        if diag.size == 0 or diag[0] == 0:
            return ()
        rank = int(np.sum(diag >= RANK_TOL * diag[0]))
        return tuple(keep[j] for j in sorted(piv[:rank]))

    def _factor_outcome(self):
        ds = self.ds
        Dt = _demean(self.D, self.codes, self.sizes)
        names = [ds.covariate_names[j] for j in self.keep] + [ds.treatment_name]
        q, r, piv = linalg.qr(Dt, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        if diag[0] == 0:
            raise RankDeficient(names)
        bad = diag < RANK_TOL * diag[0]
        if bad.any():
            raise RankDeficient([names[piv[i]] for i in np.flatnonzero(bad)])
        M = np.empty((Dt.shape[1], self.n))
        # Dt is orthogonal to the set indicators, so M @ t == M @ demean(t)
        M[piv] = linalg.solve_triangular(r, q.T)
        self.M = M


def _outcome_step(prob: _Problem, w1: np.ndarray, delta: float) -> OutcomeFit:
    coef = np.empty(prob.D.shape[1])
    a = np.empty(prob.sizes.shape[0])
    sigma = _k.outcome_step(prob.M, prob.D, prob.y, prob.codes, prob.sizes, w1,
                            float(delta), coef, a)
    return OutcomeFit(coef[:-1], a, float(coef[-1]), float(sigma))


def _treatment_step(prob: _Problem, w1: np.ndarray, lam: float,
                    kappa: np.ndarray | None = None) -> np.ndarray:
    k = prob.Xl.shape[1]
    kappa = np.zeros(k) if kappa is None else np.array(kappa, dtype=float)
    status = _k.treatment_step(prob.Xl, prob.z, np.ascontiguousarray(w1, dtype=float),
                               float(lam), kappa, IRLS_GTOL, IRLS_MAX_ITER, KAPPA_MAX)
    _raise_treatment(status)
    return kappa


def _raise_treatment(status: int) -> None:
    if status == 1:
        raise SingularInformation()
    if status == 2:
        raise Separation(f"max |kappa| exceeds {KAPPA_MAX:g}")


def _estep(prob: _Problem, kappa, psi, a, beta, sigma, sp: SensitivityParams):
    """Posterior P(U=1) per subject and the observed-data log-likelihood."""
    lp0, lp1 = _log_prior(sp.p)
    w1 = np.empty(prob.n)
    ll = _k.estep(prob.Xl, np.asarray(kappa, dtype=float), prob.Xk,
                  np.asarray(psi, dtype=float), np.asarray(a, dtype=float), prob.codes,
                  prob.z, prob.y, float(beta), float(sigma), lp0, lp1,
                  float(sp.lam), float(sp.delta), w1)
    return w1, float(ll)


@dataclass
class FitResult:
    params: ModelParams
    weights: np.ndarray
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    pruned_covariates: list[str] = field(default_factory=list)

    @property
    def beta(self) -> float:
        return self.params.beta

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    def to_dict(self) -> dict:
        p = self.params
        return {
            "beta": p.beta,
            "sigma": p.sigma,
            "kappa0": p.kappa0,
            "kappa": dict(p.kappa),
            "psi": dict(p.psi),
            "set_effects": dict(p.set_effects),
            "loglik_trace": [float(v) for v in self.loglik_trace],
            "iterations": self.iterations,
            "converged": self.converged,
            "pruned_covariates": list(self.pruned_covariates),
        }


def _to_params(prob: _Problem, kappa, psi, a, beta, sigma) -> ModelParams:
    ds = prob.ds
    return ModelParams(
        kappa0=float(kappa[0]),
        kappa=dict(zip(ds.covariate_names, map(float, kappa[1:]))),
        psi={ds.covariate_names[j]: float(v) for j, v in zip(prob.keep, psi)},
        set_effects=dict(zip(ds.set_labels, map(float, a))),
        sigma=float(sigma),
        beta=float(beta),
    )


def _from_params(prob: _Problem, gamma: ModelParams):
    ds = prob.ds
    try:
        kappa = np.array([gamma.kappa0] + [gamma.kappa[c] for c in ds.covariate_names])
        a = np.array([gamma.set_effects[s] for s in ds.set_labels])
    except KeyError as e:
        raise DataError(f"model parameters lack an entry for {e.args[0]!r}") from None
    psi = np.array([gamma.psi.get(ds.covariate_names[j], 0.0) for j in prob.keep])
    return kappa, psi, a, gamma.beta, gamma.sigma


def _subject_problem(ds: MatchedDataset, gamma: ModelParams) -> _Problem:
    keep = tuple(j for j, c in enumerate(ds.covariate_names) if c in gamma.psi)
    return _Problem(ds, keep, outcome=False)


def posterior_weights(ds: MatchedDataset, gamma: ModelParams, sp: SensitivityParams) -> np.ndarray:
    """P(U = 1 | data; gamma) for every subject, computed in log space."""
    prob = _subject_problem(ds, gamma)
    w1, _ = _estep(prob, *_from_params(prob, gamma), sp)
    return w1


def posterior_weight(subject: Subject, gamma: ModelParams, sp: SensitivityParams) -> float:
    """Posterior probability that ``subject`` has U = 1.

    For a treated subject this is::

        p e(x+lam) phi(r/s) / [p e(x+lam) phi(r/s) + (1-p) e(x) phi((r+delta)/s)]

    with ``e(x) = expit(kappa0 + kappa'x)`` and
    ``r = y - a - psi'x - delta - beta``; controls use ``1 - e`` and drop
    ``beta`` from ``r``.
    """
    names = list(subject.x)
    x = np.array([subject.x[c] for c in names], dtype=float)
    kappa = np.array([gamma.kappa0] + [gamma.kappa.get(c, 0.0) for c in names])
    psi = np.array([gamma.psi.get(c, 0.0) for c in names])
    lp0, lp1 = _log_prior(sp.p)
    w1 = np.empty(1)
    _k.estep(np.concatenate([[1.0], x])[None, :], kappa, x[None, :], psi,
             np.array([gamma.set_effects[subject.set_id]]), np.zeros(1, dtype=np.intp),
             np.array([float(subject.z)]), np.array([float(subject.y)]),
             float(gamma.beta), float(gamma.sigma), lp0, lp1,
             float(sp.lam), float(sp.delta), w1)
    return float(w1[0])


def observed_loglik(ds: MatchedDataset, gamma: ModelParams, sp: SensitivityParams) -> float:
    """Observed-data log-likelihood, marginalizing U by log-sum-exp."""
    prob = _subject_problem(ds, gamma)
    _, ll = _estep(prob, *_from_params(prob, gamma), sp)
    return ll


def _as_w1(ds: MatchedDataset, weights) -> np.ndarray:
    w1 = np.ascontiguousarray(weights, dtype=float).reshape(-1)
    if w1.shape[0] != ds.n_subjects:
        raise DataError("weights must have one entry per subject")
    if not np.all(np.isfinite(w1)) or np.any((w1 < 0) | (w1 > 1)):
        raise DataError("posterior weights must lie in [0, 1]")
    return w1


def m_step_outcome(ds: MatchedDataset, weights, sp: SensitivityParams,
                   keep: tuple[int, ...] | None = None) -> tuple[dict, dict, float, float]:
    """Weighted fixed-effects regression maximizing the outcome part of Q.

    ``weights`` are the posterior P(U=1) per subject. Returns
    ``(psi, set_effects, beta, sigma)``; ``psi`` is keyed by the covariates
    kept after pruning and ``sigma`` is the MLE (denominator N).
    """
    prob = _Problem(ds, keep)
    fit = _outcome_step(prob, _as_w1(ds, weights), sp.delta)
    psi = {ds.covariate_names[j]: float(v) for j, v in zip(prob.keep, fit.psi)}
    effects = dict(zip(ds.set_labels, map(float, fit.set_effects)))
    return psi, effects, fit.beta, fit.sigma


def m_step_treatment(ds: MatchedDataset, weights, sp: SensitivityParams,
                     start=None) -> tuple[float, dict]:
    """Weighted logistic regression with offset ``lam * U``; returns ``(kappa0, kappa)``."""
    prob = _Problem(ds, (), outcome=False)
    kappa = _treatment_step(prob, _as_w1(ds, weights), sp.lam, start)
    return float(kappa[0]), dict(zip(ds.covariate_names, map(float, kappa[1:])))


def _default_init(prob: _Problem):
    zeros = np.zeros(prob.n)
    kappa = _treatment_step(prob, zeros, 0.0)
    out = _outcome_step(prob, zeros, 0.0)
    return kappa, out.psi, out.set_effects, out.beta, out.sigma


_STATUS = {2: SingularInformation, 3: Separation}


def _run(prob: _Problem, sp: SensitivityParams, start, tol: float, max_iter: int):
    kappa, psi, a, beta, sigma = start
    if not sigma > 0:
        raise NumericalError("outcome model fits the data exactly (sigma = 0)")
    kappa = np.array(kappa, dtype=float)
    psi_beta = np.append(np.asarray(psi, dtype=float), beta)
    a = np.array(a, dtype=float)
    lp0, lp1 = _log_prior(sp.p)
    w1 = np.empty(prob.n)
    trace = np.empty(max_iter + 1)
    it, status, sigma = _k.em_loop(
        prob.Xl, prob.Xk, prob.M, prob.D, prob.y, prob.z, prob.codes, prob.sizes,
        lp0, lp1, float(sp.lam), float(sp.delta), kappa, psi_beta, a, float(sigma),
        float(tol), int(max_iter), IRLS_GTOL, IRLS_MAX_ITER, KAPPA_MAX, w1, trace,
    )
    if status in _STATUS:
        raise _STATUS[status]()
    if status == 4:
        raise NumericalError("outcome model fits the data exactly (sigma = 0)")
    theta = (kappa, psi_beta[:-1], a, float(psi_beta[-1]), float(sigma))
    return theta, w1, trace[: it + 1], it, status == 0


def em_fit(ds: MatchedDataset, sp: SensitivityParams, init: ModelParams | None = None,
           tol: float = 1e-6, max_iter: int = 1000) -> FitResult:
    """Maximum-likelihood fit of the model at fixed ``sp``.

    Stops when the observed log-likelihood changes by less than ``tol``;
    running out of iterations sets ``converged=False`` instead of raising.
    ``init`` defaults to plain logistic and fixed-effects OLS fits that
    ignore U.
    """
    if not tol > 0:
        raise DataError("tol must be positive")
    prob = _Problem(ds)
    start = _default_init(prob) if init is None else _from_params(prob, init)
    theta, w1, trace, it, ok = _run(prob, sp, start, tol, max_iter)
    return _result(prob, theta, w1, trace, it, ok)


def _result(prob, theta, w1, trace, it, ok) -> FitResult:
    names = prob.ds.covariate_names
    return FitResult(
        params=_to_params(prob, *theta),
        weights=w1,
        loglik_trace=trace,
        iterations=it,
        converged=ok,
        pruned_covariates=[c for j, c in enumerate(names) if j not in prob.keep],
    )
