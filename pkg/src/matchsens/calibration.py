"""Compare the hypothesized confounder with observed covariates.

A fitted model's posterior weights turn each subject into two weighted
rows (U = 1 and U = 0). On that expanded data the outcome regression is
decomposed with Pratt's measure and general dominance, and the treatment
regression with general dominance on McFadden's pseudo-R^2. Weights are
fractional frequencies (total mass N). Matched-set effects are not part
of these regressions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Sequence, TextIO

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit

from .em import FitResult
from .errors import DataError, RankDeficient, Separation, TooManyVariables
from .model import MatchedDataset

__all__ = [
    "MAX_VARIABLES",
    "ExpandedDataset",
    "ImportanceTable",
    "dominance_analysis",
    "expand_weighted",
    "generalized_dominance_propensity",
    "pratt_importance",
]

MAX_VARIABLES = 20
U_NAME = "U"
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class ExpandedDataset:
    """2N weighted rows; rows ``2l`` and ``2l + 1`` are subject ``l`` with
    U = 1 (weight ``w1``) and U = 0 (weight ``1 - w1``)."""

    X: np.ndarray
    u: np.ndarray
    z: np.ndarray
    y: np.ndarray
    set_index: np.ndarray
    weight: np.ndarray
    subject: np.ndarray
    covariate_names: tuple
    treatment_name: str = "z"
    outcome_name: str = "y"
    source_fit: FitResult | None = field(default=None, repr=False, compare=False)

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    @property
    def variables(self) -> list[str]:
        """Default outcome-model variables: covariates, U and the treatment."""
        return [*self.covariate_names, U_NAME, self.treatment_name]

    @property
    def propensity_variables(self) -> list[str]:
        return [*self.covariate_names, U_NAME]

    def column(self, name: str) -> np.ndarray:
        if name in self.covariate_names:
            return self.X[:, self.covariate_names.index(name)]
        if name == U_NAME:
            return self.u.astype(float)
        if name == self.treatment_name:
            return self.z.astype(float)
        if name == self.outcome_name:
            return self.y
        raise DataError(f"unknown variable {name!r}")

    def design(self, names: Sequence[str]) -> np.ndarray:
        return np.column_stack([self.column(v) for v in names]) if names else \
            np.empty((self.n_rows, 0))

    def collapse(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per-subject ``(X, z, y, total weight)`` after summing each row pair."""
        total = np.bincount(self.subject, weights=self.weight)
        first = self.subject[::2]
        return self.X[::2], self.z[::2], self.y[::2], total[first]


def expand_weighted(ds: MatchedDataset, fit: FitResult) -> ExpandedDataset:
    """Expand ``ds`` with the posterior weights of ``fit``."""
    w1 = np.asarray(fit.weights, dtype=float)
    if w1.shape != (ds.n_subjects,):
        raise DataError("fit weights do not match the dataset")
    if not fit.converged:
        raise DataError("calibration needs a converged fit")
    if U_NAME in ds.covariate_names or U_NAME == ds.treatment_name:
        raise DataError(f"the name {U_NAME!r} is reserved for the unmeasured confounder")
    n = ds.n_subjects
    rep = np.repeat(np.arange(n), 2)
    u = np.tile(np.array([1, 0], dtype=np.int8), n)
    weight = np.empty(2 * n)
    weight[0::2] = w1
    weight[1::2] = 1.0 - w1
    return ExpandedDataset(
        X=ds.X[rep], u=u, z=ds.z[rep], y=ds.y[rep], set_index=ds.set_index[rep],
        weight=weight, subject=rep, covariate_names=ds.covariate_names,
        treatment_name=ds.treatment_name, outcome_name=ds.outcome_name, source_fit=fit,
    )


@dataclass(frozen=True)
class ImportanceTable:
    """Per-variable contributions to a model's (pseudo-)R^2.

    ``excluded`` lists subsets left out because their fit failed
    (generalized dominance only).
    """

    method: str
    names: tuple
    contributions: np.ndarray
    total: float
    excluded: tuple = ()

    @property
    def shares(self) -> np.ndarray:
        return self.contributions / self.total

    @property
    def entries(self) -> list[tuple[str, float, float]]:
        return [(n, float(c), float(s))
                for n, c, s in zip(self.names, self.contributions, self.shares)]

    def contribution(self, name: str) -> float:
        return float(self.contributions[self.names.index(name)])

    def sorted_entries(self) -> list[tuple[str, float, float]]:
        order = np.argsort(-self.contributions, kind="stable")
        return [self.entries[i] for i in order]

    def write_csv(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["variable", "contribution", "share"])
        for name, c, s in self.sorted_entries():
            w.writerow([name, repr(c), repr(s)])


# ------------------------------------------------------------ weighted moments

def _check_names(ex: ExpandedDataset, names, default) -> list[str]:
    names = list(default if names is None else names)
    if not names:
        raise DataError("no variables given")
    if len(set(names)) != len(names):
        raise DataError("variable names must be distinct")
    for v in names:
        ex.column(v)
    return names


def _correlations(ex: ExpandedDataset, names: list[str]):
    """Weighted correlation matrix of the variables and their correlations with y."""
    w = ex.weight / ex.weight.sum()
    V = ex.design(names)
    Vc = V - w @ V
    yc = ex.y - w @ ex.y
    var = w @ Vc ** 2
    vy = w @ yc ** 2
    flat = [names[j] for j in np.flatnonzero(~(var > 0))]
    if flat:
        raise RankDeficient(flat)
    if not vy > 0:
        raise DataError("outcome has zero weighted variance")
    sd = np.sqrt(var)
    R = (Vc * w[:, None]).T @ Vc / np.outer(sd, sd)
    r = (w @ (Vc * yc[:, None])) / (sd * math.sqrt(vy))
    return R, r, Vc * np.sqrt(w)[:, None]


def pratt_importance(ex: ExpandedDataset, outcome_vars: Sequence[str] | None = None
                     ) -> ImportanceTable:
    """Pratt's decomposition ``d_j = b_j * rho_j`` of the weighted R^2.

    ``b_j`` is the standardized coefficient of the weighted regression of
    y on the variables (with intercept) and ``rho_j`` the weighted
    correlation of variable j with y; the ``d_j`` sum to R^2.
    """
    names = _check_names(ex, outcome_vars, ex.variables)
    R, r, Vs = _correlations(ex, names)
    _, rr, piv = linalg.qr(Vs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rr))
    bad = diag < _RANK_TOL * diag[0]
    if bad.any():
        raise RankDeficient([names[piv[i]] for i in np.flatnonzero(bad)])
    b = linalg.solve(R, r, assume_a="pos")
    d = b * r
    return ImportanceTable("pratt", tuple(names), d, float(d.sum()))


def _r2_correlation(R: np.ndarray, r: np.ndarray) -> Callable[[np.ndarray], float]:
    def r2(idx: np.ndarray) -> float:
        if idx.size == 0:
            return 0.0
        Rs = R[np.ix_(idx, idx)]
        rs = r[idx]
        return float(rs @ np.linalg.pinv(Rs, rcond=_RANK_TOL, hermitian=True) @ rs)
    return r2


def _popcount(masks: np.ndarray) -> np.ndarray:
    return np.array([bin(m).count("1") for m in masks.tolist()], dtype=np.intp)


def _general_dominance(k: int, values: np.ndarray) -> np.ndarray:
    """General-dominance weights from subset values indexed by bitmask.

    NaN values mark failed subsets; pairs touching one are skipped and
    each subset size averages only the pairs that remain.
    """
    masks = np.arange(1 << k)
    size = _popcount(masks)
    out = np.empty(k)
    for j in range(k):
        bit = 1 << j
        base = masks[(masks & bit) == 0]
        gain = values[base | bit] - values[base]
        sz = size[base]
        per_size = []
        for s in range(k):
            g = gain[(sz == s) & np.isfinite(gain)]
            if g.size:
                per_size.append(g.mean())
        out[j] = np.mean(per_size) if per_size else math.nan
    return out


def _subset_values(k: int, fn: Callable[[np.ndarray], float]) -> np.ndarray:
    values = np.empty(1 << k)
    for m in range(1 << k):
        idx = np.array([j for j in range(k) if m >> j & 1], dtype=np.intp)
        values[m] = fn(idx)
    return values


def _check_cap(names):
    if len(names) > MAX_VARIABLES:
        raise TooManyVariables(len(names), MAX_VARIABLES)


def dominance_analysis(ex: ExpandedDataset, outcome_vars: Sequence[str] | None = None
                       ) -> ImportanceTable:
    """General dominance of the weighted outcome regression.

    For each variable, the R^2 gained by adding it to a subset of the
    others is averaged within each subset size, then across sizes. The
    contributions sum to the full-model R^2. Subset R^2 values use a
    pseudo-inverse, so exactly collinear variables are allowed.
    """
    names = _check_names(ex, outcome_vars, ex.variables)
    _check_cap(names)
    R, r, _ = _correlations(ex, names)
    values = _subset_values(len(names), _r2_correlation(R, r))
    contrib = _general_dominance(len(names), values)
    return ImportanceTable("dominance", tuple(names), contrib, float(values[-1]))


def _weighted_logistic(V: np.ndarray, z: np.ndarray, w: np.ndarray, max_iter: int = 100,
                       gtol: float = 1e-10, coef_max: float = 30.0) -> float:
    """Weighted log-likelihood at the MLE of a logistic regression of z on [1, V].

    Newton steps use a least-squares solve so aliased columns are harmless.
    """
    A = np.column_stack([np.ones(len(z)), V])
    coef = np.zeros(A.shape[1])
    sign = 2.0 * z - 1.0
    ll = float(w @ log_expit(sign * (A @ coef)))
    scale = w.sum()
    for _ in range(max_iter):
        p = expit(A @ coef)
        grad = A.T @ (w * (z - p))
        h = np.sqrt(w * p * (1 - p))
        step = np.linalg.lstsq(A * h[:, None], (w * (z - p)) / np.where(h > 0, h, 1.0),
                               rcond=None)[0]
        # a vanishing gradient with O(1) Newton steps signals separation
        if np.linalg.norm(grad) < gtol * scale and np.abs(step).max() < 1e-4:
            return ll
        t = 1.0
        while True:
            trial = coef + t * step
            ll_t = float(w @ log_expit(sign * (A @ trial)))
            if ll_t >= ll - 1e-12 * abs(ll) or t < 1e-8:
                break
            t *= 0.5
        coef, ll = trial, ll_t
        if not np.all(np.isfinite(coef)) or np.abs(coef[1:]).max(initial=0.0) > coef_max:
            raise Separation("calibration logistic fit")
    p = expit(A @ coef)
    if np.linalg.norm(A.T @ (w * (z - p))) < 1e-6 * scale:
        return ll
    raise Separation("calibration logistic fit did not converge")


def generalized_dominance_propensity(ex: ExpandedDataset,
                                     propensity_vars: Sequence[str] | None = None
                                     ) -> ImportanceTable:
    """General dominance of the weighted treatment model on McFadden's R^2.

    Each subset model is a weighted logistic regression of z with an
    intercept, U entering as an ordinary regressor. Subsets whose fit
    separates are excluded and listed in ``excluded``; if the full model
    separates, :class:`Separation` is raised.
    """
    names = _check_names(ex, propensity_vars, ex.propensity_variables)
    if ex.treatment_name in names:
        raise DataError("the treatment cannot explain itself")
    _check_cap(names)
    z = ex.z.astype(float)
    w = ex.weight
    V = ex.design(names)
    zbar = (w @ z) / w.sum()
    if not 0.0 < zbar < 1.0:
        raise DataError("treatment has a single weighted level")
    ll0 = float(w @ (z * math.log(zbar) + (1 - z) * math.log1p(-zbar)))
    excluded = []

    def pseudo_r2(idx: np.ndarray) -> float:
        if idx.size == 0:
            return 0.0
        try:
            return 1.0 - _weighted_logistic(V[:, idx], z, w) / ll0
        except Separation:
            excluded.append(tuple(names[i] for i in idx))
            return math.nan

    values = _subset_values(len(names), pseudo_r2)
    if not math.isfinite(values[-1]):
        raise Separation("full calibration propensity model")
    contrib = _general_dominance(len(names), values)
    return ImportanceTable("generalized_dominance", tuple(names), contrib,
                           float(values[-1]), tuple(excluded))
