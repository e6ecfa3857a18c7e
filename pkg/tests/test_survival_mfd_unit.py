import numpy as np
import pytest

from mfd.core.errors import DataValidationError, ParameterError
from mfd.estimators import Method
from mfd.survival_mfd import (
    CoxFit,
    SurvivalScenario,
    cox_mfd_estimate,
    cox_mfd_tau,
    cox_mfd_variance,
    cox_naive_tau,
    estimate_survival,
    fit_cox,
    hazard_reparameterize,
    simulate_survival_trial,
    tau_from_coefficients,
    tau_gradient,
)
from mfd.trial_data import TrialDataset


def _fit_with(omega: float, gamma: float, iota: float, info=None) -> CoxFit:
    return CoxFit(
        coef=np.array([omega, gamma, iota]),
        labels=("z", "g", "z:g"),
        info=np.eye(3) if info is None else info,
        loglik=0.0,
        converged=True,
        iterations=1,
        n_events=10,
    )


def _with_times(ds: TrialDataset, time: np.ndarray) -> TrialDataset:
    return TrialDataset.from_arrays(
        [ds.site_labels[j] for j in ds.site], ds.z, ds.g, ds.x, time=time, event=ds.event
    )


def test_no_vaccine_effect_gives_zero_tau():
    for gamma in (-1.2, -0.3, 0.4):
        assert tau_from_coefficients(0.0, gamma, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_no_interaction_gives_one_minus_exp_omega():
    assert tau_from_coefficients(np.log(0.6), -0.7, 0.0) == pytest.approx(0.4, abs=1e-12)


def test_naive_tau_examples():
    assert cox_naive_tau(_fit_with(0.0, -0.5, 0.0)) == 0.0
    assert cox_naive_tau(_fit_with(np.log(0.6), -0.5, 0.1)) == pytest.approx(0.4)


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(12)
    h = 1e-6
    for _ in range(25):
        point = np.array([rng.uniform(-1, 1), rng.uniform(-2.0, -0.2), rng.uniform(-0.5, 0.5)])
        analytic = tau_gradient(*point)
        numeric = np.empty(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            numeric[k] = (tau_from_coefficients(*(point + e)) - tau_from_coefficients(*(point - e))) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


def test_gradient_limit_for_strong_factor():
    grad = tau_gradient(0.3, 30.0, 0.0)
    assert grad[0] == pytest.approx(-np.exp(0.3), rel=1e-9)


def test_reparameterization_round_trip():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        kappa = rng.uniform(0.2, 3.0)
        phi = rng.uniform(0.0, 1.5)
        tau = rng.uniform(-0.5, 0.95)
        nu = rng.uniform(0.2, 0.9)
        eta = rng.uniform(-0.3, 0.5)
        _, omega, gamma, iota = hazard_reparameterize(kappa, phi, tau, nu, eta)
        assert abs(tau_from_coefficients(omega, gamma, iota) - tau) < 1e-12


def test_variance_is_gradient_quadratic_form():
    info = np.diag([4.0, 2.0, 1.0])
    fit = _fit_with(-0.5, -0.8, 0.1, info=info)
    grad = tau_gradient(fit.omega, fit.gamma, fit.iota)
    expected = grad @ np.linalg.inv(info) @ grad
    assert cox_mfd_variance(fit) == pytest.approx(expected)


def test_fit_cox_converges_with_small_score(survival_ds):
    fit = fit_cox(survival_ds)
    assert fit.converged
    assert not fit.monotone_likelihood
    assert np.max(np.abs(fit.score)) < 1e-8 * fit.n_events
    np.testing.assert_allclose(fit.info, fit.info.T, atol=1e-10)
    assert np.all(np.linalg.eigvalsh(fit.info) > 0)


def test_monotone_time_transform_leaves_coefficients_unchanged(survival_ds):
    a = fit_cox(survival_ds)
    b = fit_cox(_with_times(survival_ds, survival_ds.time**3))
    np.testing.assert_allclose(a.coef, b.coef, rtol=0, atol=1e-10)


def test_breslow_handles_tied_times():
    time = [1.0, 1.0, 2.0, 3.0, 1.5, 2.0, 2.5, 0.5]
    event = [1, 1, 1, 0, 1, 1, 0, 1]
    z = [1, 1, 0, 0, 1, 1, 0, 0]
    g = [1, 0, 1, 0, 1, 0, 1, 0]
    ds = TrialDataset.from_arrays(["1"] * 8, z, g, time=time, event=event)
    fit = fit_cox(ds)
    assert np.all(np.isfinite(fit.coef))


def test_cell_without_events_flags_monotone_likelihood():
    time = [1.0, 2.0, 3.0, 4.0, 1.5, 2.5, 3.5, 4.5]
    event = [0, 0, 1, 1, 1, 1, 1, 1]
    z = [1, 1, 1, 1, 0, 0, 0, 0]
    g = [1, 1, 0, 0, 1, 1, 0, 0]
    ds = TrialDataset.from_arrays(["1"] * 8, z, g, time=time, event=event)
    fit = fit_cox(ds)
    assert fit.monotone_likelihood


def test_no_events_is_rejected():
    ds = TrialDataset.from_arrays(["1"] * 4, [1, 1, 0, 0], [1, 0, 1, 0], time=[1.0] * 4, event=[0] * 4)
    with pytest.raises(DataValidationError):
        fit_cox(ds)


def test_null_scenario_coefficients_near_zero():
    scenario = SurvivalScenario(kappa=1.0, phi=0.5, tau=0.0, nu=0.0, eta=0.0, n=5000)
    fit = fit_cox(simulate_survival_trial(scenario, seed=9))
    se = np.sqrt(np.diag(fit.covariance()))
    assert np.all(np.abs(fit.coef[:3]) < 4 * se[:3])


def test_simulated_scenario_recovers_tau():
    scenario = SurvivalScenario(tau=0.5, nu=0.5, eta=0.0, n=10000)
    fit = fit_cox(simulate_survival_trial(scenario, seed=17))
    est = cox_mfd_estimate(fit)
    assert est.method == Method.COX_MFD
    assert abs(cox_mfd_tau(fit) - 0.5) < 4 * est.se


def test_simulation_is_deterministic_per_seed():
    scenario = SurvivalScenario(n=200)
    a = simulate_survival_trial(scenario, seed=1)
    b = simulate_survival_trial(scenario, seed=1)
    np.testing.assert_array_equal(a.time, b.time)
    np.testing.assert_array_equal(a.event, b.event)
    assert np.all(a.time <= scenario.horizon)


def test_estimate_survival_returns_cox_methods(survival_ds):
    out = estimate_survival(survival_ds)
    assert set(out) == {Method.COX_MFD, Method.COX_NAIVE, Method.COX_BOUNDED}
    assert np.isfinite(out[Method.COX_MFD].se)
    assert out[Method.COX_BOUNDED].tau_hat <= 1.0
    assert out[Method.COX_BOUNDED].ci_lower <= out[Method.COX_BOUNDED].ci_upper


def test_estimate_survival_rejects_s_corrected(survival_ds):
    with pytest.raises(ParameterError):
        estimate_survival(survival_ds, ["s_corrected"])


def test_scenario_rejects_invalid_efficacy():
    with pytest.raises(ValueError):
        SurvivalScenario(tau=1.0)
