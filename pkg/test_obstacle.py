import dataclasses

import numpy as np
import pytest

from mfrbsde.errors import ValidationError
from mfrbsde.measure import EmpiricalMeasure
from mfrbsde.obstacle import (
    CONDITIONS,
    SampleDomain,
    check_assumptions,
    h_minus,
    lions_grad_fd,
    make_affine,
    make_separable,
    reflection_increment,
)

DOMAIN = SampleDomain.box(1, half_width=3.0)


def squared_mean_obstacle():
    """H(y, mu) = 0.5 |y|^2 + (E[v])^2 - 1 in one dimension."""
    return make_separable(
        G=lambda y: 0.5 * np.sum(y**2, axis=1) - 1.0,
        grad_G=lambda y: y.copy(),
        h=lambda s: s * s,
        dh=lambda s: 2.0 * s,
        phi=lambda v: v[:, 0],
        grad_phi=lambda v: np.ones_like(v),
        beta=0.1,
        bound_M=50.0,
    )


def test_zero_alpha_violates_lower_gradient_bound():
    with pytest.raises(ValidationError, match="lower gradient bound"):
        make_affine([0.0], 1.0, [1.0], 0.0)


def test_declared_constants_are_validated():
    H = make_affine([1.0], 0.0, [0.0], 0.0)
    with pytest.raises(ValidationError):
        dataclasses.replace(H, beta=2.0, bound_M=1.0)
    with pytest.raises(ValidationError):
        dataclasses.replace(H, delta0=0.0)
    with pytest.raises(ValidationError):
        dataclasses.replace(H, lip_L=-1.0)


def test_affine_values_and_derivatives():
    H = make_affine([2.0], 0.5, [1.0], -1.0)
    mu = EmpiricalMeasure(np.array([[1.0], [3.0]]))
    y = np.array([[0.0], [1.0]])
    np.testing.assert_allclose(H.evaluate(y, mu), [0.0, 2.0])
    np.testing.assert_allclose(H.gradient(y, mu), [[2.0], [2.0]])
    np.testing.assert_allclose(H.lions(y, mu, y), [[0.5], [0.5]])
    assert H.beta == 2.0
    assert H.delta0 == pytest.approx(0.75)


def test_counterexample_fails_sign_and_strictness_with_witnesses():
    H = make_affine([1.0], 1.0, [-1.0], 0.0)
    report = check_assumptions(H, DOMAIN, n_samples=64)
    assert not report.passed
    assert set(report.failed()) == {"sign_15", "strict_38"}
    for cond in ("sign_15", "strict_38"):
        result = report.results[cond]
        assert result.witness is not None
        assert result.margin <= 0.0
    assert report.results["sign_15"].margin == pytest.approx(-1.0)


def test_theta_mixture_passes_every_condition():
    H = make_affine([0.75], 0.25, [1.0], 0.0)
    report = check_assumptions(H, DOMAIN, n_samples=128)
    assert report.passed, report.failed()
    assert [c["condition"] for c in report.to_dict()["conditions"]] == list(CONDITIONS)


def test_law_free_obstacle_gets_a_note():
    H = make_affine([1.0], 0.0, [0.0], 0.0)
    report = check_assumptions(H, DOMAIN, n_samples=16)
    assert report.passed
    assert any("Lions derivative vanishes" in note for note in report.notes)


@pytest.mark.parametrize(
    "alpha, alpha_prime, passes",
    [(1.0, 1.0, True), (1.0, -1.0, False), (-1.0, -1.0, True), (-1.0, 1.0, False)],
)
def test_sign_condition_matches_analytic_criterion(alpha, alpha_prime, passes):
    H = make_affine([alpha], 0.5, [alpha_prime], 0.0)
    report = check_assumptions(H, DOMAIN, n_samples=32)
    assert (report.results["sign_15"].status == "pass") == passes


def test_lipschitz_condition_skipped_without_constant():
    report = check_assumptions(squared_mean_obstacle(), DOMAIN, n_samples=8)
    assert report.results["lipschitz_14"].status == "skipped"


def test_h_minus_scalar_and_cloud():
    H = make_affine([1.0], 0.0, [0.0], 0.0)
    mu = EmpiricalMeasure(np.array([[-2.0], [1.0]]))
    assert h_minus(H, [-2.0], mu) == 2.0
    np.testing.assert_array_equal(h_minus(H, np.array([[-2.0], [1.0]]), mu), [2.0, 0.0])


def test_reflection_increment_affine_closed_form():
    H = make_affine([1.0], 0.5, [1.0], 0.0)
    y = np.array([[-1.0], [0.0], [2.0]])
    mu = EmpiricalMeasure(y)
    k = np.array([3.0, 0.0, 0.0])
    # own term alpha k_i plus a alpha' mean(k)
    np.testing.assert_allclose(reflection_increment(H, y, mu, k), [[3.5], [0.5], [0.5]])


def test_reflection_increment_fast_path_matches_pairwise_sum():
    H = squared_mean_obstacle()
    slow = dataclasses.replace(H, lions_y_free=False)
    rng = np.random.default_rng(1)
    y = rng.normal(size=(12, 1))
    mu = EmpiricalMeasure(y)
    k = np.abs(rng.normal(size=12))
    np.testing.assert_allclose(reflection_increment(H, y, mu, k), reflection_increment(slow, y, mu, k), rtol=1e-12)


def test_reflection_increment_rejects_bad_densities():
    H = make_affine([1.0], 0.0, [0.0], 0.0)
    y = np.zeros((2, 1))
    mu = EmpiricalMeasure(y)
    with pytest.raises(ValidationError):
        reflection_increment(H, y, mu, [1.0, -1.0])
    with pytest.raises(ValidationError):
        reflection_increment(H, y, mu, [1.0])


def test_lions_derivative_matches_atom_perturbation():
    H = squared_mean_obstacle()
    mu = EmpiricalMeasure(np.array([[0.5], [1.5], [-0.25]]))
    exact = H.lions(np.array([[0.3]]), mu, mu.atoms[1:2])[0]
    estimate = lions_grad_fd(H, [0.3], mu, atom_index=1, eps=1e-6)
    np.testing.assert_allclose(estimate, exact, rtol=1e-4)


def test_finite_difference_second_derivatives():
    H = squared_mean_obstacle()
    mu = EmpiricalMeasure(np.array([[0.5], [1.5]]))
    y = np.array([[0.2], [-0.7]])
    np.testing.assert_allclose(H.hessian(y, mu), np.ones((2, 1, 1)), atol=1e-6)
    np.testing.assert_allclose(H.lions_jacobian(y, mu, y), np.zeros((2, 1, 1)), atol=1e-6)
    assert H.default_tol == pytest.approx(1e-4)


def test_sample_domain_rejects_bad_boxes():
    with pytest.raises(ValidationError):
        SampleDomain(np.array([1.0]), np.array([0.0]))
    with pytest.raises(ValidationError):
        SampleDomain.box(1, max_atoms=65)


def test_reflection_increment_two_particle_hand_case():
    H = make_affine([1.0], 1.0, [1.0], 0.0)
    y = np.zeros((2, 1))
    np.testing.assert_allclose(reflection_increment(H, y, EmpiricalMeasure(y), [2.0, 0.0]), [[3.0], [1.0]])
