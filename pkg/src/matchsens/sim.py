"""Simulation designs for coverage and power studies, plus the greedy
propensity-score full matcher they need.

Stratum-level covariates are drawn once per stratum and shared by its
members (optionally jittered per subject). Treatment follows a logistic
model and the response is linear or strongly nonlinear in the
covariates; ``U`` enters both with the true sensitivity parameters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np
from scipy.special import expit

from . import _kernels as _k
from ._rng import derive_seed, substream
from .em import IRLS_GTOL, IRLS_MAX_ITER, KAPPA_MAX
from .errors import DataError, MatchSensError, NoControl, NoTreated, Separation, SingularInformation
from .inference import BootConfig, block_bootstrap_ci, is_significant
from .model import MatchedDataset, SensitivityParams, standardize

__all__ = [
    "COVARIATE_NAMES",
    "DgpConfig",
    "PRESETS",
    "SimulatedData",
    "StudyReport",
    "full_match",
    "linear_predictor_treatment",
    "mean_response",
    "preset",
    "propensity_scores",
    "run_study",
    "simulate_dataset",
]

COVARIATE_NAMES = ("X1", "X2", "X3", "X4", "X5", "X6", "X7")
COVARIATE_MEAN = np.array([3.0, 1.0, 5.0, 2.0, 6.0, 4.0, 5.0])
COVARIATE_SD = np.array([1.0, 0.15, 1.5, 0.2, 1.0, 0.8, 1.0])
TREATMENT_COEF = np.array([-0.03, 0.08, 0.02, -0.9, 0.6, -0.5, 0.7])
TREATMENT_INTERCEPT = -1.5
LINEAR_COEF = np.array([0.1, -0.08, 0.04, -0.9, 2.0, -0.5, 1.0])
LINEAR_INTERCEPT = -5.0

RESPONSES = ("linear", "nonlinear")
ERRORS = ("normal", "student_t", "laplace")


@dataclass(frozen=True)
class DgpConfig:
    """Simulation design.

    ``error_param`` is the SD for ``normal``, the degrees of freedom for
    ``student_t`` and the rate for ``laplace`` (density
    ``rate/2 * exp(-rate |e|)``). ``jitter`` is the half-width of the
    uniform per-subject noise added to every covariate; 0 means subjects
    of a stratum share identical covariates.
    """

    n_strata: int = 100
    stratum_size: int = 10
    response: str = "linear"
    error: str = "normal"
    error_param: float = 1.5
    beta: float = 2.0
    lambda_true: float = 0.0
    delta_true: float = 0.0
    p_true: float = 0.5
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.n_strata) != self.n_strata or self.n_strata < 1:
            raise DataError("n_strata must be a positive integer")
        if int(self.stratum_size) != self.stratum_size or self.stratum_size < 1:
            raise DataError("stratum_size must be a positive integer")
        if self.response not in RESPONSES:
            raise DataError(f"response must be one of {', '.join(RESPONSES)}")
        if self.error not in ERRORS:
            raise DataError(f"error must be one of {', '.join(ERRORS)}")
        if not (self.error_param > 0 and math.isfinite(self.error_param)):
            raise DataError("error_param must be positive")
        if not 0.0 <= self.p_true <= 1.0:
            raise DataError("p_true must lie in [0, 1]")
        if not (self.jitter >= 0 and math.isfinite(self.jitter)):
            raise DataError("jitter must be non-negative")
        for name in ("beta", "lambda_true", "delta_true"):
            if not math.isfinite(getattr(self, name)):
                raise DataError(f"{name} must be finite")
        if int(self.seed) != self.seed or self.seed < 0:
            raise DataError("seed must be a non-negative integer")

    @property
    def n_subjects(self) -> int:
        return self.n_strata * self.stratum_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object], base: "DgpConfig | None" = None
                     ) -> "DgpConfig":
        """Build from string or typed values, e.g. a parsed config file."""
        base = base or cls()
        kinds = {f: type(v) for f, v in asdict(base).items()}
        out = {}
        for key, raw in values.items():
            if key not in kinds:
                raise DataError(f"unknown configuration key {key!r}")
            try:
                out[key] = kinds[key](raw) if kinds[key] is not int else int(str(raw))
            except ValueError:
                raise DataError(f"bad value for {key!r}: {raw!r}") from None
        return replace(base, **out)


def linear_predictor_treatment(X: np.ndarray) -> np.ndarray:
    """Treatment log-odds at U = 0."""
    return X @ TREATMENT_COEF + TREATMENT_INTERCEPT


def mean_response(X: np.ndarray, response: str = "linear") -> np.ndarray:
    """Response surface at Z = 0, U = 0."""
    if response == "linear":
        return X @ LINEAR_COEF + LINEAR_INTERCEPT
    if response == "nonlinear":
        return (0.7 * X[:, 0] ** 2 - 0.8 * X[:, 1] ** 3 - 0.7 * np.cbrt(np.abs(X[:, 2]))
                + 0.2 * X[:, 4] ** 2 - X[:, 5] + 2.0 * X[:, 6])
    raise DataError(f"response must be one of {', '.join(RESPONSES)}")


def _errors(rng: np.random.Generator, cfg: DgpConfig, n: int) -> np.ndarray:
    if cfg.error == "normal":
        return rng.normal(0.0, cfg.error_param, n)
    if cfg.error == "student_t":
        return rng.standard_t(cfg.error_param, n)
    return rng.laplace(0.0, 1.0 / cfg.error_param, n)


@dataclass(frozen=True)
class SimulatedData:
    """Unmatched simulated subjects; ``stratum`` gives each one's stratum.

    ``u`` is the latent confounder, kept for diagnostics only.
    ``stratum_X`` holds the covariates drawn per stratum before jitter.
    """

    X: np.ndarray
    z: np.ndarray
    y: np.ndarray
    u: np.ndarray
    stratum: np.ndarray
    stratum_X: np.ndarray | None = None
    covariate_names: tuple = COVARIATE_NAMES

    @property
    def n_subjects(self) -> int:
        return self.y.shape[0]


def simulate_dataset(cfg: DgpConfig, rng: np.random.Generator | None = None) -> SimulatedData:
    """Draw one dataset; the default stream is ``(cfg.seed, "simulate")``."""
    rng = rng if rng is not None else substream(cfg.seed, "simulate")
    n = cfg.n_subjects
    Xs = rng.normal(COVARIATE_MEAN, COVARIATE_SD, size=(cfg.n_strata, len(COVARIATE_MEAN)))
    stratum = np.repeat(np.arange(cfg.n_strata), cfg.stratum_size)
    X = Xs[stratum]
    if cfg.jitter > 0:
        X = X + rng.uniform(-cfg.jitter, cfg.jitter, size=X.shape)
    u = (rng.random(n) < cfg.p_true).astype(np.int8)
    pz = expit(linear_predictor_treatment(X) + cfg.lambda_true * u)
    z = (rng.random(n) < pz).astype(np.int8)
    y = (mean_response(X, cfg.response) + cfg.beta * z + cfg.delta_true * u
         + _errors(rng, cfg, n))
    return SimulatedData(X, z, y, u, stratum, Xs)


def propensity_scores(X: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Fitted probabilities of a plain logistic regression of z on [1, X]."""
    n = X.shape[0]
    Xl = np.column_stack([np.ones(n), X])
    kappa = np.zeros(Xl.shape[1])
    st = _k.treatment_step(Xl, z.astype(float), np.zeros(n), 0.0, kappa, IRLS_GTOL,
                           IRLS_MAX_ITER, KAPPA_MAX)
    if st == 1:
        raise SingularInformation("propensity model")
    if st == 2:
        raise Separation("propensity model")
    return expit(Xl @ kappa)


def _nearest(sorted_scores: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Position in ``sorted_scores`` nearest to each value (ties to the lower)."""
    pos = np.searchsorted(sorted_scores, values)
    lo = np.clip(pos - 1, 0, len(sorted_scores) - 1)
    hi = np.clip(pos, 0, len(sorted_scores) - 1)
    take_hi = np.abs(sorted_scores[hi] - values) < np.abs(values - sorted_scores[lo])
    return np.where(take_hi, hi, lo)


def _greedy_groups(scores: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Group index per subject: every control joins its nearest treated;
    a treated left without controls takes its nearest control, either
    pulling it out of a group that has other controls or joining the
    control's one-control group."""
    treated = np.flatnonzero(z == 1)
    control = np.flatnonzero(z == 0)
    t_order = treated[np.argsort(scores[treated], kind="stable")]
    c_order = control[np.argsort(scores[control], kind="stable")]
    group = np.full(z.shape[0], -1, dtype=np.intp)
    group[treated] = np.arange(len(treated))
    anchor = t_order[_nearest(scores[t_order], scores[control])]
    group[control] = group[anchor]
    n_controls = np.bincount(group[control], minlength=len(treated))
    next_group = len(treated)
    for t in treated:
        g = group[t]
        if n_controls[g] > 0:
            continue
        c = c_order[_nearest(scores[c_order], scores[t:t + 1])[0]]
        gc = group[c]
        if n_controls[gc] > 1:
            n_controls[gc] -= 1
            group[c] = group[t] = next_group
            n_controls = np.append(n_controls, 1)
            next_group += 1
        else:
            group[t] = gc
    return group


def _strata_groups(scores: np.ndarray, z: np.ndarray, stratum: np.ndarray) -> np.ndarray:
    """Strata as sets; a stratum lacking an arm joins, intact, the valid
    stratum with the nearest mean propensity score."""
    labels, codes = np.unique(stratum, return_inverse=True)
    size = np.bincount(codes)
    n_treated = np.bincount(codes, weights=z)
    mean_score = np.bincount(codes, weights=scores) / size
    valid = (n_treated > 0) & (n_treated < size)
    if not valid.any():
        return _greedy_groups(scores, z)
    ok = np.flatnonzero(valid)
    order = ok[np.argsort(mean_score[ok], kind="stable")]
    target = np.arange(len(labels))
    bad = np.flatnonzero(~valid)
    target[bad] = order[_nearest(mean_score[order], mean_score[bad])]
    return target[codes]


def full_match(data: SimulatedData, scores: np.ndarray | None = None,
               keep_strata: bool | None = None) -> MatchedDataset:
    """Greedy full matching on the propensity score.

    Parameters
    ----------
    scores : array, optional
        Propensity scores; by default from a plain logistic fit on the
        observed covariates.
    keep_strata : bool, optional
        Keep each stratum together as one set. Defaults to True exactly
        when covariates are identical within every stratum.

    Every returned set has at least one treated and one control subject;
    set labels are ``"0", "1", ...`` in order of first appearance.
    """
    z = np.asarray(data.z)
    if not (z == 1).any():
        raise NoTreated()
    if not (z == 0).any():
        raise NoControl()
    if scores is None:
        scores = propensity_scores(data.X, z)
    scores = np.asarray(scores, dtype=float)
    if keep_strata is None:
        keep_strata = _constant_within(data.X, data.stratum)
    if keep_strata:
        group = _strata_groups(scores, z, data.stratum)
    else:
        group = _greedy_groups(scores, z)
    _, first = np.unique(group, return_index=True)
    rank = np.empty(group.max() + 1, dtype=np.intp)
    rank[group[np.sort(first)]] = np.arange(len(first))
    return MatchedDataset(data.X, z, data.y, [str(g) for g in rank[group]],
                          list(data.covariate_names))


def _constant_within(X: np.ndarray, stratum: np.ndarray) -> bool:
    order = np.argsort(stratum, kind="stable")
    s, Xo = stratum[order], X[order]
    same = s[1:] == s[:-1]
    return bool(np.all(Xo[1:][same] == Xo[:-1][same]))


# ---------------------------------------------------------------- studies

Grid = Sequence[tuple[float, float]]


@dataclass(frozen=True)
class StudyReport:
    """Coverage and power over simulation replicates.

    Coverage and ``mean_beta_hat`` refer to the fit at the true
    ``(lambda, delta)``; power is the share of successful replicates
    whose interval excludes 0. ``records`` keeps per-replicate results in
    replicate order: for each grid point ``(beta_hat, ci_low, ci_high,
    n_failed)`` or an error string.
    """

    config: DgpConfig
    fit_p: float
    grid: tuple
    n_reps: int
    n_boot: int
    level: float
    coverage: float
    coverage_se: float
    power_by_params: dict
    n_failed_by_params: dict
    mean_beta_hat: float
    mc_se: float
    records: list = field(default_factory=list, repr=False)

    def power(self, lam: float, delta: float) -> float:
        return self.power_by_params[(float(lam), float(delta))]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "fit_p": self.fit_p,
            "n_reps": self.n_reps,
            "n_boot": self.n_boot,
            "level": self.level,
            "coverage": self.coverage,
            "coverage_se": self.coverage_se,
            "mean_beta_hat": self.mean_beta_hat,
            "mc_se": self.mc_se,
            "power": [
                {"lambda": lam, "delta": d, "power": self.power_by_params[(lam, d)],
                 "n_failed": self.n_failed_by_params[(lam, d)]}
                for lam, d in self.grid
            ],
            "records": self.records,
        }

    def write_power_csv(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["lambda", "delta", "power", "n_failed"])
        for lam, d in self.grid:
            w.writerow([repr(lam), repr(d), repr(self.power_by_params[(lam, d)]),
                        self.n_failed_by_params[(lam, d)]])


def _study_rep(cfg: DgpConfig, grid, fit_p: float, boot: BootConfig, rep: int) -> list:
    try:
        data = simulate_dataset(cfg, substream(cfg.seed, "rep", rep, "data"))
        ds = standardize(full_match(data))
    except MatchSensError as exc:
        return [f"{type(exc).__name__}: {exc}"] * len(grid)
    seed = derive_seed(cfg.seed, "rep", rep, "bootstrap")
    out = []
    for lam, delta in grid:
        try:
            est = block_bootstrap_ci(ds, SensitivityParams(fit_p, lam, delta), boot.n_boot,
                                     boot.level, seed, warm_start=boot.warm_start,
                                     tol=boot.tol, max_iter=boot.max_iter)
            out.append([est.beta_hat, est.ci_low, est.ci_high, est.n_failed])
        except MatchSensError as exc:
            out.append(f"{type(exc).__name__}: {exc}")
    return out


def run_study(
    cfg: DgpConfig,
    params_grid: Grid,
    n_reps: int,
    boot_cfg: BootConfig | None = None,
    *,
    fit_p: float | None = None,
    n_jobs: int = 1,
    progress: Callable[[int, int], None] | None = None,
) -> StudyReport:
    """Simulate, match, standardize and bootstrap ``n_reps`` times.

    Parameters
    ----------
    params_grid : sequence of (lam, delta)
        Fitting points; the true ``(lambda_true, delta_true)`` is added
        when absent.
    fit_p : float, optional
        ``p`` used for fitting; defaults to ``cfg.p_true``.

    Replicate ``r`` draws its data from ``(cfg.seed, "rep", r, "data")``
    and shares one bootstrap seed across all grid points. Replicates are
    independent and reduced in order, so ``n_jobs`` does not change the
    result.
    """
    if int(n_reps) != n_reps or n_reps < 1:
        raise DataError("n_reps must be a positive integer")
    boot = boot_cfg or BootConfig()
    fit_p = cfg.p_true if fit_p is None else float(fit_p)
    SensitivityParams(fit_p, 0.0, 0.0)
    grid = [(float(a), float(b)) for a, b in params_grid]
    truth = (float(cfg.lambda_true), float(cfg.delta_true))
    if truth not in grid:
        grid.append(truth)
    grid = tuple(dict.fromkeys(grid))
    if n_jobs == 1:
        records = []
        for r in range(n_reps):
            records.append(_study_rep(cfg, grid, fit_p, boot, r))
            if progress:
                progress(r + 1, n_reps)
    else:
        from joblib import Parallel, delayed

        records = list(Parallel(n_jobs=n_jobs)(
            delayed(_study_rep)(cfg, grid, fit_p, boot, r) for r in range(n_reps)
        ))
    return _summarize(cfg, grid, fit_p, boot, records)


def _summarize(cfg, grid, fit_p, boot, records) -> StudyReport:
    power, failed = {}, {}
    for g, key in enumerate(grid):
        ok = [rec[g] for rec in records if not isinstance(rec[g], str)]
        failed[key] = len(records) - len(ok)
        sig = [not (lo <= 0.0 <= hi) for _, lo, hi, _ in ok]
        power[key] = float(np.mean(sig)) if sig else math.nan
    t = grid.index((float(cfg.lambda_true), float(cfg.delta_true)))
    ok = [rec[t] for rec in records if not isinstance(rec[t], str)]
    betas = np.array([r[0] for r in ok])
    cover = np.array([r[1] <= cfg.beta <= r[2] for r in ok], dtype=float)
    n_ok = len(ok)
    coverage = float(cover.mean()) if n_ok else math.nan
    return StudyReport(
        config=cfg,
        fit_p=fit_p,
        grid=grid,
        n_reps=len(records),
        n_boot=boot.n_boot,
        level=boot.level,
        coverage=coverage,
        coverage_se=math.sqrt(coverage * (1 - coverage) / n_ok) if n_ok else math.nan,
        power_by_params=power,
        n_failed_by_params=failed,
        mean_beta_hat=float(betas.mean()) if n_ok else math.nan,
        mc_se=float(betas.std(ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else math.nan,
        records=records,
    )


# ---------------------------------------------------------------- presets

_GRID_LARGE = ((0.0, 0.0), (1.0, 1.0), (1.5, 1.5), (2.0, 2.0), (2.5, 2.5), (3.0, 3.0))
_GRID_SMALL = ((0.0, 0.0), (0.5, 0.5), (0.8, 0.8), (1.0, 1.0), (1.5, 1.5), (2.0, 2.0))

PRESETS: dict[str, tuple[DgpConfig, tuple]] = {
    "linear-s1": (DgpConfig(), _GRID_LARGE),
    "linear-s2": (DgpConfig(n_strata=200, stratum_size=20), _GRID_LARGE),
    "nonlinear": (DgpConfig(response="nonlinear"), _GRID_LARGE),
    "linear-small": (DgpConfig(beta=1.0), _GRID_SMALL),
    "nonlinear-small": (DgpConfig(response="nonlinear", beta=1.0), _GRID_SMALL),
    "t2": (DgpConfig(beta=1.0, error="student_t", error_param=2.0), _GRID_SMALL),
    "laplace": (DgpConfig(beta=1.0, error="laplace", error_param=1.5), _GRID_SMALL),
    "jitter-02": (DgpConfig(beta=1.0, jitter=0.2), _GRID_SMALL),
    "jitter-05": (DgpConfig(beta=1.0, jitter=0.5), _GRID_SMALL),
    "jitter-10": (DgpConfig(beta=1.0, jitter=1.0), _GRID_SMALL),
}


def preset(name: str, seed: int = 0) -> tuple[DgpConfig, tuple]:
    """``(config, grid)`` of a named scenario with the given seed."""
    try:
        cfg, grid = PRESETS[name]
    except KeyError:
        raise DataError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return replace(cfg, seed=seed), grid
