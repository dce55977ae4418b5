import io
import itertools

import numpy as np
import pytest
from scipy import optimize, special

from matchsens import SensitivityParams, em_fit
from matchsens import calibration
from matchsens.calibration import (
    ExpandedDataset,
    dominance_analysis,
    expand_weighted,
    generalized_dominance_propensity,
    pratt_importance,
)
from matchsens.em import FitResult
from matchsens.errors import DataError, RankDeficient, Separation, TooManyVariables
from matchsens.model import MatchedDataset

from conftest import random_dataset


def _expanded(seed, n=400, k=3, corr=0.5, noise=1.0, z_coef=None):
    """Synthetic expanded data with correlated covariates and random weights."""
    rng = np.random.default_rng(seed)
    C = np.full((k, k), corr) + (1 - corr) * np.eye(k)
    X = rng.multivariate_normal(np.zeros(k), C, size=n)
    u = rng.integers(0, 2, n)
    eta = X @ (np.ones(k) * 0.4 if z_coef is None else z_coef) + 0.8 * u - 0.2
    z = (rng.random(n) < special.expit(eta)).astype(np.int8)
    y = X @ np.linspace(1.0, 0.2, k) + 1.5 * u + 0.7 * z + noise * rng.normal(size=n)
    rep = np.repeat(np.arange(n // 2), 2)
    w1 = rng.uniform(size=n // 2)
    weight = np.empty(n)
    weight[0::2], weight[1::2] = w1, 1 - w1
    names = tuple(f"x{j + 1}" for j in range(k))
    return ExpandedDataset(X, u.astype(np.int8), z, y, rep, weight, rep, names)


def _wls_r2(ex, names):
    w = ex.weight
    A = np.column_stack([np.ones(ex.n_rows)] + [ex.column(v) for v in names])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], ex.y * sw, rcond=None)
    resid = ex.y - A @ coef
    ybar = np.average(ex.y, weights=w)
    return 1 - (w @ resid ** 2) / (w @ (ex.y - ybar) ** 2), coef[1:]


def _general_dominance_oracle(names, value):
    k = len(names)
    out = []
    for j in range(k):
        others = [i for i in range(k) if i != j]
        by_size = []
        for s in range(k):
            gains = [value(tuple(sorted(S + (j,)))) - value(S)
                     for S in itertools.combinations(others, s)]
            by_size.append(np.mean(gains))
        out.append(np.mean(by_size))
    return np.array(out)


def _weighted_mcfadden(ex, names):
    z = ex.z.astype(float)
    w = ex.weight
    A = np.column_stack([np.ones(ex.n_rows)] + [ex.column(v) for v in names])

    def neg(c):
        e = A @ c
        return -(w @ (z * e - np.logaddexp(0, e))), -A.T @ (w * (z - special.expit(e)))

    res = optimize.minimize(neg, np.zeros(A.shape[1]), jac=True, method="BFGS",
                            options={"gtol": 1e-10})
    zb = np.average(z, weights=w)
    ll0 = w @ (z * np.log(zb) + (1 - z) * np.log(1 - zb))
    return 1 + res.fun / ll0


class TestExpand:
    def _fit(self, ds, w1):
        fit = em_fit(ds, SensitivityParams(0.5, 0, 0))
        return FitResult(fit.params, np.asarray(w1, dtype=float), fit.loglik_trace, 1, True)

    def test_weights_layout(self):
        ds = MatchedDataset(np.array([[0.1], [0.4], [0.5]]), [1, 0, 1], [1.0, 2.0, 0.5],
                            ["a", "a", "a"], ["x"])
        ex = expand_weighted(ds, self._fit(ds, [0.2, 0.5, 1.0]))
        assert ex.n_rows == 6
        np.testing.assert_allclose(ex.weight, [0.2, 0.8, 0.5, 0.5, 1.0, 0.0])
        np.testing.assert_array_equal(ex.u, [1, 0, 1, 0, 1, 0])
        np.testing.assert_array_equal(ex.y, [1.0, 1.0, 2.0, 2.0, 0.5, 0.5])

    def test_null_fit_weights_equal_prior(self, small_ds):
        fit = em_fit(small_ds, SensitivityParams(0.3, 0.0, 0.0))
        ex = expand_weighted(small_ds, fit)
        np.testing.assert_allclose(ex.weight[ex.u == 1], 0.3, atol=1e-12)

    def test_collapse_round_trip(self, small_ds):
        fit = em_fit(small_ds, SensitivityParams(0.5, 1.0, 1.0))
        ex = expand_weighted(small_ds, fit)
        X, z, y, total = ex.collapse()
        np.testing.assert_array_equal(X, small_ds.X)
        np.testing.assert_array_equal(z, small_ds.z)
        np.testing.assert_array_equal(y, small_ds.y)
        np.testing.assert_allclose(total, 1.0, atol=1e-15)

    def test_rejects_unconverged_fit(self, small_ds):
        fit = em_fit(small_ds, SensitivityParams(0.5, 2, 2), tol=1e-14, max_iter=1)
        with pytest.raises(DataError):
            expand_weighted(small_ds, fit)

    def test_reserved_name(self):
        ds = random_dataset(1)
        ds = MatchedDataset(ds.X, ds.z, ds.y, [ds.set_labels[s] for s in ds.set_index],
                            ["U", "x2"])
        with pytest.raises(DataError):
            expand_weighted(ds, em_fit(ds, SensitivityParams(0.5, 0, 0)))

    def test_variable_lists(self, small_ds):
        ex = expand_weighted(small_ds, em_fit(small_ds, SensitivityParams(0.5, 1, 1)))
        assert ex.variables == ["x1", "x2", "U", "z"]
        assert ex.propensity_variables == ["x1", "x2", "U"]


class TestPratt:
    def test_matches_covariance_oracle(self):
        ex = _expanded(1)
        names = ["x1", "x2", "x3"]
        tab = pratt_importance(ex, names)
        w = ex.weight
        V = ex.design(names)
        cov = np.cov(np.column_stack([V, ex.y]).T, aweights=w)
        sd = np.sqrt(np.diag(cov))
        rho = cov[:-1, -1] / (sd[:-1] * sd[-1])
        r2, coef = _wls_r2(ex, names)
        b = coef * sd[:-1] / sd[-1]
        np.testing.assert_allclose(tab.contributions, b * rho, atol=1e-8)
        assert tab.contributions.sum() == pytest.approx(r2, abs=1e-8)
        assert tab.total == pytest.approx(r2, abs=1e-8)

    def test_default_variables_sum_to_r2(self):
        ex = _expanded(2)
        tab = pratt_importance(ex)
        assert list(tab.names) == ["x1", "x2", "x3", "U", "z"]
        r2, _ = _wls_r2(ex, tab.names)
        assert tab.contributions.sum() == pytest.approx(r2, abs=1e-8)

    def test_single_predictor(self):
        tab = pratt_importance(_expanded(3), ["x2"])
        assert tab.shares[0] == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_predictors(self):
        ex = _expanded(4, corr=0.3)
        w = ex.weight / ex.weight.sum()
        # Gram-Schmidt under the weighted inner product after centring
        V = ex.X - w @ ex.X
        for j in range(V.shape[1]):
            for i in range(j):
                V[:, j] -= (w @ (V[:, j] * V[:, i])) / (w @ V[:, i] ** 2) * V[:, i]
        ex = ExpandedDataset(V, ex.u, ex.z, ex.y, ex.set_index, ex.weight, ex.subject,
                             ex.covariate_names)
        names = list(ex.covariate_names)
        tab = pratt_importance(ex, names)
        cov = np.cov(np.column_stack([V, ex.y]).T, aweights=ex.weight)
        rho2 = cov[:-1, -1] ** 2 / (np.diag(cov)[:-1] * cov[-1, -1])
        np.testing.assert_allclose(tab.contributions, rho2, atol=1e-10)

    def test_rank_deficient(self):
        ex = _expanded(5)
        X = np.column_stack([ex.X, ex.X[:, 0] + ex.X[:, 1]])
        ex = ExpandedDataset(X, ex.u, ex.z, ex.y, ex.set_index, ex.weight, ex.subject,
                             ("x1", "x2", "x3", "x4"))
        with pytest.raises(RankDeficient):
            pratt_importance(ex, ["x1", "x2", "x3", "x4"])

    def test_unknown_variable(self):
        with pytest.raises(DataError):
            pratt_importance(_expanded(5), ["x1", "nope"])

    def test_csv_sorted(self):
        tab = pratt_importance(_expanded(6))
        buf = io.StringIO()
        tab.write_csv(buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "variable,contribution,share"
        vals = [float(line.split(",")[1]) for line in lines[1:]]
        assert vals == sorted(vals, reverse=True)
        assert len(vals) == 5


class TestDominance:
    def test_enumeration_oracle(self):
        ex = _expanded(7)
        names = ["x1", "x2", "U"]
        tab = dominance_analysis(ex, names)
        want = _general_dominance_oracle(
            names, lambda S: _wls_r2(ex, [names[i] for i in S])[0] if S else 0.0)
        np.testing.assert_allclose(tab.contributions, want, atol=1e-8)
        assert tab.contributions.sum() == pytest.approx(_wls_r2(ex, names)[0], abs=1e-8)

    def test_single_variable(self):
        ex = _expanded(8)
        tab = dominance_analysis(ex, ["x3"])
        assert tab.contributions[0] == pytest.approx(_wls_r2(ex, ["x3"])[0], abs=1e-10)

    def test_duplicates_split_evenly(self):
        ex = _expanded(9)
        X = np.column_stack([ex.X, ex.X[:, 0]])
        ex = ExpandedDataset(X, ex.u, ex.z, ex.y, ex.set_index, ex.weight, ex.subject,
                             ("x1", "x2", "x3", "x1b"))
        tab = dominance_analysis(ex, ["x1", "x1b"])
        r2 = _wls_r2(ex, ["x1"])[0]
        np.testing.assert_allclose(tab.contributions, [r2 / 2, r2 / 2], atol=1e-10)

    def test_permutation_invariant(self):
        ex = _expanded(10)
        names = ["x1", "x2", "x3", "U", "z"]
        a = dominance_analysis(ex, names)
        perm = ["z", "x3", "U", "x1", "x2"]
        b = dominance_analysis(ex, perm)
        for v in names:
            assert a.contribution(v) == pytest.approx(b.contribution(v), abs=1e-12)

    def test_noise_variable_changes_little(self):
        ex = _expanded(11, n=2000)
        rng = np.random.default_rng(0)
        X = np.column_stack([ex.X, rng.normal(size=ex.n_rows)])
        ex2 = ExpandedDataset(X, ex.u, ex.z, ex.y, ex.set_index, ex.weight, ex.subject,
                              ("x1", "x2", "x3", "noise"))
        names = ["x1", "x2", "x3", "U", "z"]
        a = dominance_analysis(ex, names)
        b = dominance_analysis(ex2, names + ["noise"])
        for v in names:
            assert abs(a.contribution(v) - b.contribution(v)) < 0.01

    def test_cap(self):
        ex = _expanded(12, k=21, corr=0.1)
        with pytest.raises(TooManyVariables):
            dominance_analysis(ex, list(ex.covariate_names))
        with pytest.raises(TooManyVariables):
            generalized_dominance_propensity(ex, list(ex.covariate_names))


class TestGeneralizedDominance:
    def test_single_variable_is_mcfadden(self):
        ex = _expanded(13)
        tab = generalized_dominance_propensity(ex, ["x1"])
        assert tab.contributions[0] == pytest.approx(_weighted_mcfadden(ex, ["x1"]), abs=1e-8)

    def test_sums_and_matches_enumeration(self):
        ex = _expanded(14)
        names = ["x1", "x2", "U"]
        tab = generalized_dominance_propensity(ex, names)
        full = _weighted_mcfadden(ex, names)
        assert tab.contributions.sum() == pytest.approx(full, abs=1e-8)
        want = _general_dominance_oracle(
            names, lambda S: _weighted_mcfadden(ex, [names[i] for i in S]) if S else 0.0)
        np.testing.assert_allclose(tab.contributions, want, atol=1e-7)

    def test_independent_variable_near_zero(self):
        ex = _expanded(15, n=4000, z_coef=np.array([0.6, 0.0, 0.5]), corr=0.0)
        tab = generalized_dominance_propensity(ex)
        assert abs(tab.contribution("x2")) < 0.005
        assert tab.contribution("x1") > 0.01

    def test_treatment_not_allowed(self):
        with pytest.raises(DataError):
            generalized_dominance_propensity(_expanded(16), ["x1", "z"])

    def test_failed_subset_is_excluded(self, monkeypatch):
        ex = _expanded(17)
        real = calibration._weighted_logistic

        def picky(V, z, w, **kw):
            if V.shape[1] == 1 and np.array_equal(V[:, 0], ex.column("x2")):
                raise Separation("test")
            return real(V, z, w, **kw)

        monkeypatch.setattr(calibration, "_weighted_logistic", picky)
        tab = generalized_dominance_propensity(ex, ["x1", "x2"])
        assert tab.excluded == (("x2",),)
        assert np.all(np.isfinite(tab.contributions))
        # with {x2} gone, x2 is credited only through its gain over {x1}
        full = _weighted_mcfadden(ex, ["x1", "x2"])
        r1 = _weighted_mcfadden(ex, ["x1"])
        assert tab.contribution("x2") == pytest.approx(full - r1, abs=1e-7)

    def test_full_model_separation_raises(self):
        ex = _expanded(18)
        X = np.column_stack([ex.X[:, :2], np.where(ex.z == 1, 1.0, -1.0) + 0.01 * ex.X[:, 2]])
        ex = ExpandedDataset(X, ex.u, ex.z, ex.y, ex.set_index, ex.weight, ex.subject,
                             ex.covariate_names)
        with pytest.raises(Separation):
            generalized_dominance_propensity(ex, ["x1", "x3"])

    def test_on_fitted_study(self):
        from matchsens.model import standardize
        from matchsens.sim import DgpConfig, full_match, simulate_dataset

        cfg = DgpConfig(n_strata=60, seed=3, lambda_true=2.0, delta_true=2.0)
        ds = standardize(full_match(simulate_dataset(cfg)))
        ex = expand_weighted(ds, em_fit(ds, SensitivityParams(0.5, 2.0, 2.0)))
        for tab in (pratt_importance(ex), dominance_analysis(ex)):
            assert tab.contributions.sum() == pytest.approx(tab.total, abs=1e-8)
            assert "U" in tab.names and "z" in tab.names
        g = generalized_dominance_propensity(ex)
        assert g.contributions.sum() == pytest.approx(g.total, abs=1e-8)
