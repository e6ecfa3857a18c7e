import numpy as np
import pytest

from conftest import SATURATED_CELLS
from mfd.glm_core import (
    DesignMatrix,
    GlmFit,
    build_design_initial,
    build_design_targeting,
    clever_covariates,
    fit_initial,
    fit_poisson_glm,
    fit_targeting,
    fitted_means,
    initial_design_labels,
    poisson_deviance,
    predict_cell,
    predict_mean,
    site_weights,
)
from mfd.trial_data import TrialDataset


def _newton_deviance(X: np.ndarray, y: np.ndarray) -> float:
    """Plain Newton-Raphson on the Poisson log-likelihood."""
    beta = np.zeros(X.shape[1])
    beta[0] = np.log(y.mean())
    for _ in range(100):
        mu = np.exp(X @ beta)
        step = np.linalg.solve((X * mu[:, None]).T @ X, X.T @ (y - mu))
        beta = beta + step
        if np.max(np.abs(step)) < 1e-13:
            break
    return poisson_deviance(y, np.exp(X @ beta), np.ones_like(y))


def test_initial_design_shape_and_labels(single_site_ds):
    dm = build_design_initial(single_site_ds)
    assert dm.p == 4 * (single_site_ds.d + 1)
    assert dm.labels == initial_design_labels(single_site_ds)
    assert dm.labels[0] == "(intercept)"
    assert "x1:g:z" in dm.labels


def test_saturated_fit_reproduces_cell_means(saturated_ds):
    fit = fit_initial(saturated_ds)
    assert fit.converged
    for (z, g), counts in SATURATED_CELLS.items():
        pred = predict_cell(fit, saturated_ds, z, g)
        np.testing.assert_allclose(pred, np.mean(counts), rtol=1e-10)


def test_irls_matches_independent_newton(single_site_ds):
    dm = build_design_initial(single_site_ds)
    fit = fit_poisson_glm(dm, single_site_ds.y)
    assert fit.converged
    reference = _newton_deviance(dm.matrix, single_site_ds.y.astype(float))
    assert fit.deviance == pytest.approx(reference, rel=1e-6)


def test_deviance_trace_is_non_increasing(single_site_ds):
    fit = fit_initial(single_site_ds)
    trace = np.asarray(fit.deviance_trace)
    assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]) + 1e-12)


def test_aliased_column_is_dropped_last_in():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(50)
    matrix = np.column_stack([np.ones(50), x, 2 * x])
    y = rng.poisson(np.exp(0.2 + 0.3 * x))
    fit = fit_poisson_glm(DesignMatrix.from_columns(matrix, ["1", "x", "x2"]), y)
    assert fit.converged
    assert fit.dropped == ("x2",)
    assert fit.coef["x2"] == 0.0


def test_design_matrix_rejects_bad_weights():
    with pytest.raises(ValueError):
        DesignMatrix.from_columns(np.ones((3, 1)), ["1"], weights=np.array([1.0, 0.0, 1.0]))


def test_zero_counts_flag_separation():
    matrix = np.column_stack([np.ones(6), [0, 0, 0, 1, 1, 1]])
    y = np.array([0, 0, 0, 2, 1, 3])
    fit = fit_poisson_glm(DesignMatrix.from_columns(matrix, ["1", "a"]), y)
    assert fit.separation


def test_site_weights_scale_by_site_size(multi_site_ds):
    w = site_weights(multi_site_ds)
    sizes = multi_site_ds.site_sizes[multi_site_ds.site]
    np.testing.assert_allclose(w, multi_site_ds.n / sizes)


def test_clever_covariates_single_nonzero_column(multi_site_ds):
    h = clever_covariates(multi_site_ds)
    assert np.all(np.count_nonzero(h, axis=1) == 1)


def test_targeting_solves_clever_covariate_scores(multi_site_ds):
    fit0 = fit_initial(multi_site_ds)
    fit1 = fit_targeting(multi_site_ds, fit0)
    assert fit1.converged
    assert fit1.base is fit0
    dm = build_design_targeting(multi_site_ds, fit0)
    resid = multi_site_ds.y - fitted_means(fit1, multi_site_ds)
    score = dm.matrix.T @ resid
    assert np.max(np.abs(score)) < 1e-6 * multi_site_ds.n


def test_targeting_predictions_cover_every_cell(multi_site_ds):
    fit0 = fit_initial(multi_site_ds)
    fit1 = fit_targeting(multi_site_ds, fit0)
    for z, g in ((1, 1), (1, 0), (0, 1), (0, 0)):
        pred = predict_cell(fit1, multi_site_ds, z, g)
        assert pred.shape == (multi_site_ds.n,)
        assert np.all(pred > 0)


def _unit_fit(beta) -> GlmFit:
    beta = np.asarray(beta, dtype=float)
    p = beta.size
    return GlmFit(
        beta=beta,
        labels=tuple(f"b{k}" for k in range(p)),
        deviance=0.0,
        converged=True,
        iterations=0,
        fisher_information=np.zeros((p, p)),
    )


def test_predict_mean_examples():
    assert predict_mean(_unit_fit([0.0, 0.0, 0.0]), np.array([0.3, -1.0, 2.0])) == pytest.approx(1.0)
    assert predict_mean(_unit_fit([np.log(2.0)]), np.array([1.0])) == pytest.approx(2.0)
    rows = np.array([[1.0], [1.0]])
    np.testing.assert_allclose(predict_mean(_unit_fit([np.log(2.0)]), rows, np.log([1.0, 3.0])), [2.0, 6.0])
    assert predict_mean(_unit_fit([100.0]), np.array([1.0])) == pytest.approx(np.exp(30.0))


def test_intercept_only_fit_recovers_log_mean():
    y = np.array([1.0, 2.0, 3.0])
    fit = fit_poisson_glm(DesignMatrix.from_columns(np.ones((3, 1)), ["(intercept)"]), y)
    assert fit.converged
    assert fit.beta[0] == pytest.approx(np.log(2.0), abs=1e-8)


def test_canonical_link_mean_prediction_matches_mean_outcome(single_site_ds):
    fit = fit_initial(single_site_ds)
    mu = predict_mean(fit, build_design_initial(single_site_ds).matrix)
    assert np.mean(mu) == pytest.approx(np.mean(single_site_ds.y), abs=1e-8)
    np.testing.assert_allclose(fitted_means(fit, single_site_ds), mu)


def test_fisher_information_matches_finite_difference_hessian():
    rng = np.random.default_rng(17)
    n = 300
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 4))])
    true = np.array([0.3, 0.2, -0.1, 0.15, 0.05])
    y = rng.poisson(np.exp(X @ true)).astype(float)
    fit = fit_poisson_glm(DesignMatrix.from_columns(X, ["1", "a", "b", "c", "d"]), y)
    assert fit.converged

    def score(beta):
        return X.T @ (y - np.exp(X @ beta))

    h = 1e-5
    hessian = np.empty((5, 5))
    for j in range(5):
        step = np.zeros(5)
        step[j] = h
        hessian[:, j] = (score(fit.beta + step) - score(fit.beta - step)) / (2 * h)
    info = fit.fisher_information
    np.testing.assert_allclose(-hessian, info, rtol=1e-4, atol=1e-4 * np.abs(info).max())
    np.testing.assert_allclose(info, info.T)


def test_targeting_design_clever_covariates_by_formula():
    # site A: 10 subjects, 2 carriers (p=0.2); site B: 8 subjects, 2 carriers (p=0.25)
    site = ["A"] * 10 + ["B"] * 8
    g = [1, 1] + [0] * 8 + [1, 1] + [0] * 6
    z = [(k + 1) % 2 for k in range(10)] + [(k + 1) % 2 for k in range(8)]
    y = [1, 2, 2, 3, 1, 2, 3, 4, 2, 3, 2, 1, 3, 2, 2, 3, 1, 4]
    ds = TrialDataset.from_arrays(site, z, g, y=y)
    fit0 = fit_initial(ds)
    dm = build_design_targeting(ds, fit0)
    assert dm.labels[-4:] == ("h_11", "h_10", "h_01", "h_00")

    row = 10  # first subject of site B: z=1, g=1
    assert (ds.z[row], ds.g[row]) == (1, 1)
    w = ds.n / 8
    np.testing.assert_allclose(dm.matrix[row, -4:], [w / 0.25, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(dm.matrix[row, :2], [0.0, 1.0])
    # z=0, g=0 subject in site A: w/(1 - 0.2) in the last column
    np.testing.assert_allclose(dm.matrix[3, -4:], [0.0, 0.0, 0.0, (ds.n / 10) / 0.8])
    np.testing.assert_allclose(np.exp(dm.offset), fitted_means(fit0, ds))
