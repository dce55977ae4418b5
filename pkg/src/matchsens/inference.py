"""Block-bootstrap intervals for the treatment effect and the (lam, delta)
significance boundary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import em as _em
from ._rng import substream
from .errors import DataError, MatchSensError, NumericalError, TooManyFailures
from .model import MatchedDataset, ModelParams, SensitivityParams

__all__ = [
    "BootConfig",
    "BoundaryPoint",
    "IntervalEstimate",
    "block_bootstrap_ci",
    "boundary_search",
    "default_delta_grid",
    "is_significant",
    "write_boundary_csv",
]

MAX_FAILED_SHARE = 0.05

#: ``resample(rng, n_sets) -> picks``; the default draws uniformly with replacement.
Resampler = Callable[[np.random.Generator, int], np.ndarray]


def _uniform_resample(rng: np.random.Generator, n_sets: int) -> np.ndarray:
    return rng.integers(0, n_sets, size=n_sets)


@dataclass(frozen=True)
class IntervalEstimate:
    """Percentile bootstrap interval for beta.

    ``replicates`` holds the replicate estimates in replicate order, NaN
    for replicates that failed.
    """

    beta_hat: float
    ci_low: float
    ci_high: float
    level: float = 0.95
    n_boot: int = 0
    n_failed: int = 0
    replicates: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False,
                                   compare=False)

    def __post_init__(self):
        if not self.ci_low <= self.ci_high:
            raise ValueError("ci_low must not exceed ci_high")

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "level": self.level,
            "n_boot": self.n_boot,
            "n_failed": self.n_failed,
        }


def is_significant(est: IntervalEstimate) -> bool:
    """True when 0 lies outside the closed interval ``[ci_low, ci_high]``."""
    return not (est.ci_low <= 0.0 <= est.ci_high)


@dataclass(frozen=True)
class BootConfig:
    """Bootstrap settings shared by boundary searches and simulation studies.

    ``warm_start`` starts each replicate's EM from the full-data fit
    (set effects carried over from the drawn sets) instead of the default
    initialisation; both are deterministic.
    """

    n_boot: int = 500
    level: float = 0.95
    seed: int = 0
    warm_start: bool = True
    tol: float = 1e-6
    max_iter: int = 1000

    def __post_init__(self):
        if self.n_boot < 2:
            raise DataError("n_boot must be at least 2")
        if not 0.0 < self.level < 1.0:
            raise DataError("level must lie in (0, 1)")
        if not self.tol > 0:
            raise DataError("tol must be positive")


def _replicate_beta(ds, sp, picks, full, warm_start, tol, max_iter):
    """beta-hat on the resample ``picks``, or NaN when the fit fails.

    Covariates whose within-set variation is aliased in the resample are
    left out of its outcome model; z itself is never dropped.
    """
    boot = ds.take_sets(picks)
    try:
        prob = _em._Problem(boot, drop_aliased=True)
        if warm_start and full is not None and set(prob.keep) <= set(full[0]):
            kappa, psi, a, beta, sigma = full[1]
            psi = psi[[full[0].index(j) for j in prob.keep]]
            start = (kappa, psi, a[picks], beta, sigma)
        else:
            start = _em._default_init(prob)
        theta, _, _, _, ok = _em._run(prob, sp, start, tol, max_iter)
    except NumericalError:
        return math.nan
    return theta[3] if ok else math.nan


def _bootstrap_chunk(ds, sp, seed, indices, full, resample, warm_start, tol, max_iter):
    out = np.empty(len(indices))
    n_sets = ds.n_sets
    for k, b in enumerate(indices):
        picks = np.asarray(resample(substream(seed, "bootstrap", b), n_sets), dtype=np.intp)
        if picks.shape != (n_sets,) or picks.min() < 0 or picks.max() >= n_sets:
            raise DataError("resampler must return n_sets indices into the sets")
        out[k] = _replicate_beta(ds, sp, picks, full, warm_start, tol, max_iter)
    return out


def block_bootstrap_ci(
    ds: MatchedDataset,
    sp: SensitivityParams,
    n_boot: int = 500,
    level: float = 0.95,
    seed: int = 0,
    *,
    fit: _em.FitResult | None = None,
    warm_start: bool = True,
    tol: float = 1e-6,
    max_iter: int = 1000,
    n_jobs: int = 1,
    resample: Resampler | None = None,
) -> IntervalEstimate:
    """Percentile confidence interval for beta from a matched-set bootstrap.

    Each replicate draws ``I`` sets with replacement (replicate ``b`` uses
    the stream ``(seed, "bootstrap", b)``), relabels them so duplicates get
    their own fixed effect and refits EM. The interval is given by the
    type-7 quantiles at ``(1 - level) / 2`` and ``(1 + level) / 2`` of the
    successful replicates.

    Parameters
    ----------
    fit : FitResult, optional
        Full-data fit at ``sp``; computed when omitted.
    n_jobs : int
        Worker processes; results are reduced in replicate order, so the
        output does not depend on it.
    resample : callable, optional
        ``resample(rng, n_sets)`` returning the drawn set positions.

    Raises
    ------
    TooManyFailures
        When 5% or more of the replicates fail.
    """
    cfg = BootConfig(n_boot=n_boot, level=level, seed=seed, warm_start=warm_start,
                     tol=tol, max_iter=max_iter)
    if fit is None:
        fit = _em.em_fit(ds, sp, tol=tol, max_iter=max_iter)
    prob = _em._Problem(ds, outcome=False, keep=_em.prune_covariates(ds))
    full = (prob.keep, _em._from_params(prob, fit.params))
    resample = resample or _uniform_resample
    args = (ds, sp, seed)
    kw = (full, resample, cfg.warm_start, tol, max_iter)
    if n_jobs == 1 or n_boot < 2 * max(n_jobs, 1):
        betas = _bootstrap_chunk(*args, range(n_boot), *kw)
    else:
        from joblib import Parallel, delayed

        chunks = np.array_split(np.arange(n_boot), 4 * (n_jobs if n_jobs > 0 else 8))
        parts = Parallel(n_jobs=n_jobs)(
            delayed(_bootstrap_chunk)(*args, c.tolist(), *kw) for c in chunks if len(c)
        )
        betas = np.concatenate(parts)
    ok = np.isfinite(betas)
    n_failed = int(n_boot - ok.sum())
    if n_failed >= MAX_FAILED_SHARE * n_boot and n_failed > 0:
        raise TooManyFailures(n_failed, n_boot)
    alpha = 1.0 - level
    lo, hi = np.quantile(betas[ok], [alpha / 2, 1 - alpha / 2], method="linear")
    return IntervalEstimate(fit.beta, float(lo), float(hi), level, n_boot, n_failed, betas)


@dataclass(frozen=True)
class BoundaryPoint:
    """Largest delta keeping the effect significant at a fixed lambda.

    ``status`` is ``interior``, ``at_grid_max``, ``never_significant`` or
    ``failed``. ``estimate`` and ``fit_snapshot`` belong to
    ``delta_star`` (to delta = 0 when never significant); ``delta_star``
    is NaN when never significant or failed.
    """

    lam: float
    delta_star: float
    status: str
    fit_snapshot: ModelParams | None = None
    estimate: IntervalEstimate | None = None
    error: str | None = None


def default_delta_grid(ds: MatchedDataset) -> tuple[float, float]:
    """Default ``(delta_max, tol_delta)``: four and one hundredth outcome SDs."""
    sd = float(np.std(ds.y, ddof=1))
    return 4.0 * sd, 0.01 * sd


def _search_one(ds, p, lam, delta_max, tol_delta, boot: BootConfig):
    def evaluate(delta):
        sp = SensitivityParams(p, lam, delta)
        fit = _em.em_fit(ds, sp, tol=boot.tol, max_iter=boot.max_iter)
        est = block_bootstrap_ci(ds, sp, boot.n_boot, boot.level, boot.seed, fit=fit,
                                 warm_start=boot.warm_start, tol=boot.tol,
                                 max_iter=boot.max_iter)
        return fit, est

    try:
        fit0, est0 = evaluate(0.0)
        if not is_significant(est0):
            return BoundaryPoint(lam, math.nan, "never_significant", fit0.params, est0)
        if delta_max == 0.0:
            return BoundaryPoint(lam, 0.0, "at_grid_max", fit0.params, est0)
        fit_hi, est_hi = evaluate(delta_max)
        if is_significant(est_hi):
            return BoundaryPoint(lam, delta_max, "at_grid_max", fit_hi.params, est_hi)
        lo, hi, best = 0.0, delta_max, (fit0, est0)
        while hi - lo >= tol_delta:
            mid = 0.5 * (lo + hi)
            fit, est = evaluate(mid)
            if is_significant(est):
                lo, best = mid, (fit, est)
            else:
                hi = mid
        return BoundaryPoint(lam, lo, "interior", best[0].params, best[1])
    except MatchSensError as exc:
        return BoundaryPoint(lam, math.nan, "failed", error=f"{type(exc).__name__}: {exc}")


def boundary_search(
    ds: MatchedDataset,
    p: float,
    lambda_grid: Sequence[float],
    delta_max: float,
    tol_delta: float,
    boot_cfg: BootConfig | None = None,
    n_jobs: int = 1,
) -> list[BoundaryPoint]:
    """For each lambda, bisect delta on ``[0, delta_max]`` for the significance edge.

    Significance is assumed monotone in delta; the search keeps the
    significant end of the bracket and stops once the bracket is narrower
    than ``tol_delta``. Every evaluation uses the bootstrap seed of
    ``boot_cfg``, so all (lam, delta) pairs share the same resamples.
    A point that raises is returned with status ``failed``.
    """
    lambda_grid = [float(v) for v in lambda_grid]
    if not lambda_grid:
        raise DataError("lambda grid is empty")
    if not (delta_max >= 0.0 and math.isfinite(delta_max)):
        raise DataError("delta_max must be finite and non-negative")
    if not tol_delta > 0.0:
        raise DataError("tol_delta must be positive")
    SensitivityParams(p, 0.0, 0.0)
    boot = boot_cfg or BootConfig()
    if n_jobs == 1 or len(lambda_grid) == 1:
        return [_search_one(ds, p, lam, delta_max, tol_delta, boot) for lam in lambda_grid]
    from joblib import Parallel, delayed

    return list(Parallel(n_jobs=n_jobs)(
        delayed(_search_one)(ds, p, lam, delta_max, tol_delta, boot) for lam in lambda_grid
    ))


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def boundary_columns(covariate_names: Iterable[str]) -> list[str]:
    names = list(covariate_names)
    return (["lambda", "delta_star", "status", "beta_hat", "ci_low", "ci_high"]
            + [f"kappa_{c}" for c in names] + [f"psi_{c}" for c in names])


def write_boundary_csv(points: Sequence[BoundaryPoint], covariate_names: Sequence[str],
                       stream: TextIO) -> None:
    """One row per lambda; coefficient columns are blank when unavailable
    (failed point, or a covariate pruned from the outcome model)."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(boundary_columns(covariate_names))
    for pt in points:
        est, snap = pt.estimate, pt.fit_snapshot
        row = [_fmt(pt.lam), _fmt(pt.delta_star), pt.status]
        row += [_fmt(est.beta_hat), _fmt(est.ci_low), _fmt(est.ci_high)] if est else ["", "", ""]
        row += [_fmt(snap.kappa.get(c)) if snap else "" for c in covariate_names]
        row += [_fmt(snap.psi.get(c)) if snap else "" for c in covariate_names]
        w.writerow(row)
