import numpy as np
import pytest

from mfrbsde.backward_solver import DriverSpec, Problem, SolverConfig, TerminalSpec
from mfrbsde.diagnostics import (
    StudyTable,
    chaos_study,
    constraint_metrics,
    constraint_path,
    penalty_rate_study,
    reference_rate,
    reflection_path,
    stability_experiment,
    step_series,
)
from mfrbsde.errors import FeasibilityError, NumericalError, ValidationError
from mfrbsde.forward_sde import CoefficientSpec, gaussian_cloud, point_cloud
from mfrbsde.obstacle import make_affine

H_IDENTITY = make_affine([1.0], 0.0, [0.0], 0.0)
H_MEAN = make_affine([1.0], 1.0, [1.0], -5.0)

PUSHED_DOWN = Problem(
    coeff=CoefficientSpec.zero(),
    driver=DriverSpec.constant([-1.0]),
    terminal=TerminalSpec.constant([0.0]),
    obstacle=H_IDENTITY,
    initial=lambda N, seed: point_cloud([0.0], N),
    name="pushed-down",
)

MEAN_BOUND = PUSHED_DOWN.replace(terminal=TerminalSpec.constant([2.5]), obstacle=H_MEAN, name="mean-bound")

CALL = Problem(
    coeff=CoefficientSpec.constant([0.0], [[1.0]]),
    driver=DriverSpec.zero(),
    terminal=TerminalSpec.call(0.0),
    obstacle=H_IDENTITY,
    initial=lambda N, seed: gaussian_cloud([0.0], 0.2, N, seed),
    name="call",
)


def base(**overrides):
    cfg = dict(n_particles=10, steps=400, penalty=20.0, basis_degree=0, seed=7)
    cfg.update(overrides)
    return SolverConfig(**cfg)


def test_constraint_metrics_on_pushing_driver():
    cfg = base(steps=1000, penalty=50.0)
    sol = PUSHED_DOWN.solve(cfg)
    report = constraint_metrics(sol)
    m = cfg.penalty
    assert report.sup_H_minus_sq == pytest.approx(1.0 / m**2, rel=1e-3)
    # (1/m^2) (T - 2(1 - e^{-mT})/m + (1 - e^{-2mT})/(2m)) in the continuum
    assert report.int_H_minus_sq == pytest.approx((1.0 - 1.5 / m) / m**2, rel=0.05)
    assert report.K_T_mean == pytest.approx(1.0, rel=0.05)
    assert report.skorokhod_signed <= 0.0
    assert report.skorokhod_defect == pytest.approx(-report.skorokhod_signed)
    assert report.skorokhod_positive == 0.0
    assert report.moments["E_xi_sq"] == 0.0
    assert report.moments["y_hat_sq"] == 0.0
    assert set(report.to_dict()) >= {"sup_H_minus_sq", "int_H_minus_sq", "skorokhod_defect", "moments"}


def test_mean_bound_reflection_mass():
    cfg = base(steps=2000, penalty=200.0)
    sol = MEAN_BOUND.solve(cfg)
    report = constraint_metrics(sol)
    assert np.all(np.abs(sol.Y.mean(axis=(1, 2)) - 2.5) <= 3e-2)
    assert report.K_T_mean == pytest.approx(0.5, rel=0.05)
    assert report.skorokhod_defect <= 0.05


def test_step_series_columns_and_partial_defect():
    sol = PUSHED_DOWN.solve(base(steps=50, penalty=5.0))
    series = step_series(sol)
    assert list(series) == ["t", "mean_Y0", "std_Y0", "mean_K", "sup_H_minus", "skorokhod_partial"]
    assert all(len(v) == 51 for v in series.values())
    report = constraint_metrics(sol)
    assert series["skorokhod_partial"][-1] == pytest.approx(report.skorokhod_signed)
    assert constraint_path(sol).shape == (51, 10)
    np.testing.assert_allclose(reflection_path(sol), sol.R)


def test_penalty_study_passes_on_pushing_driver():
    table = penalty_rate_study(PUSHED_DOWN, [10.0, 20.0, 40.0], base(), workers=2)
    assert table.passed, table.notes
    assert table.columns[:3] == ["m", "m_sup_H_minus_sq", "m2_int_H_minus_sq"]
    m_sup = table.column("m_sup_H_minus_sq")
    np.testing.assert_allclose(m_sup, 1.0 / np.array([10.0, 20.0, 40.0]), rtol=1e-2)
    assert np.isnan(table.rows[0]["cauchy_gap"])
    assert table.rows[1]["cauchy_gap"] > table.rows[2]["cauchy_gap"]


def test_penalty_grid_is_validated():
    with pytest.raises(ValidationError):
        penalty_rate_study(PUSHED_DOWN, [10.0, 20.0], base())
    with pytest.raises(ValidationError):
        penalty_rate_study(PUSHED_DOWN, [10.0, 5.0, 20.0], base())


def test_skorokhod_defect_shrinks_with_the_penalty():
    table = penalty_rate_study(MEAN_BOUND, [50.0, 100.0, 200.0], base(steps=2000))
    defects = np.abs(table.column("skorokhod_signed"))
    assert np.all(np.diff(defects) < 0)
    assert defects[-1] <= 0.05
    # the defect is -1/(4m) at the steady state, so doubling m halves it
    np.testing.assert_allclose(defects[1:] / defects[:-1], 0.5, atol=0.05)
    np.testing.assert_allclose(defects, 1.0 / (4.0 * np.array([50.0, 100.0, 200.0])), rtol=0.05)


def test_penalty_rates_match_the_closed_form():
    grid = np.array([25.0, 50.0, 100.0, 200.0])
    table = penalty_rate_study(PUSHED_DOWN, list(grid), base(steps=2000))
    assert table.passed, table.notes
    # H^- = (1 - e^{-m(T-t)})/m for the pushing driver with T = 1
    sup_target = (1.0 - np.exp(-grid)) ** 2 / grid
    int_target = 1.0 - 2.0 * (1.0 - np.exp(-grid)) / grid + (1.0 - np.exp(-2.0 * grid)) / (2.0 * grid)
    np.testing.assert_allclose(table.column("m_sup_H_minus_sq"), sup_target, rtol=0.02)
    np.testing.assert_allclose(table.column("m2_int_H_minus_sq"), int_target, rtol=0.02)
    for column in ("m_sup_H_minus_sq", "m2_int_H_minus_sq"):
        values = table.column(column)
        assert np.all(values <= 4.0 * values[0])


def test_chaos_study_on_deterministic_system_is_machine_zero():
    table = chaos_study(PUSHED_DOWN, [2, 4, 8], 16, base(steps=50, penalty=5.0))
    assert table.passed
    assert np.all(table.column("coupled_error") <= 1e-20)
    assert any("machine zero" in note for note in table.notes)


def test_chaos_study_reports_rates_and_law_errors():
    cfg = SolverConfig(n_particles=50, steps=10, penalty=1.0, basis_degree=1, seed=5)
    table = chaos_study(CALL, [50, 200, 800], 3200, cfg, workers=2)
    assert table.columns == ["N", "coupled_error", "law_error", "reference_rate", "ratio"]
    np.testing.assert_allclose(table.column("reference_rate"), np.array([50, 200, 800]) ** (-1.0 / 8.0))
    assert np.all(np.isfinite(table.column("law_error")))
    coupled = table.column("coupled_error")
    assert np.all(coupled > 0.0)
    assert np.all(np.diff(coupled) < 0.0)
    assert coupled[0] / coupled[-1] >= 2.0
    assert table.passed, table.notes


def test_chaos_study_rejects_streams_that_do_not_reproduce():
    def unseeded(N, seed):
        return np.random.default_rng().normal(0.0, 0.2, size=(N, 1))

    cfg = SolverConfig(n_particles=8, steps=5, penalty=1.0, basis_degree=1, seed=5)
    with pytest.raises(NumericalError, match="coupling identity"):
        chaos_study(CALL.replace(initial=unseeded), [4, 8], 16, cfg)


def test_chaos_grid_is_validated():
    with pytest.raises(ValidationError):
        chaos_study(PUSHED_DOWN, [2, 4], 4, base(steps=10, penalty=1.0))


def test_reference_rate_regimes():
    assert reference_rate(16, 1) == pytest.approx(16 ** (-1.0 / 8.0))
    assert reference_rate(16, 4) == pytest.approx(16 ** (-1.0 / 8.0) * np.log(17.0))
    assert reference_rate(16, 8) == pytest.approx(16 ** (-1.0 / 16.0))


def test_terminal_stability_has_exact_zero_row_and_stable_ratio():
    table = stability_experiment(PUSHED_DOWN, [0.0, 0.01, 0.1], base(), perturb="terminal", workers=2)
    zero = table.rows[0]
    assert zero["sup_dY_sq"] == 0.0 and zero["int_dZ_sq"] == 0.0 and zero["sup_dR"] == 0.0
    assert table.rows[1]["I_delta_sq"] == pytest.approx(1e-4)
    assert table.passed
    ratios = table.column("C_ratio")[1:]
    assert ratios.max() / ratios.min() <= 2.0


def test_driver_stability_uses_the_driver_gap():
    table = stability_experiment(PUSHED_DOWN, [0.1, 0.01], base(), perturb="driver")
    assert table.rows[0]["I_delta_sq"] == pytest.approx(0.01, rel=1e-9)
    assert table.rows[0]["sup_dY_sq"] > 0.0


def test_unprojected_infeasible_shift_is_an_error():
    problem = PUSHED_DOWN.replace(terminal=TerminalSpec.constant([0.0], project_terminal=False))
    with pytest.raises(FeasibilityError):
        stability_experiment(problem, [-0.1], base(steps=20, penalty=5.0))


def test_stability_grid_must_be_monotone():
    with pytest.raises(ValidationError):
        stability_experiment(PUSHED_DOWN, [0.1, 0.0, 0.01], base())
    with pytest.raises(ValidationError):
        stability_experiment(PUSHED_DOWN, [0.1], base(), perturb="obstacle")


def test_study_table_serialization():
    table = StudyTable("penalty", "m", ["m", "x"], [{"m": 1.0, "x": 2.0}], passed=True)
    assert table.to_rows() == [[1.0, 2.0]]
    assert table.to_dict()["rows"] == [{"m": 1.0, "x": 2.0}]
