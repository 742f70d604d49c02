import numpy as np
import pytest

from mfrbsde.errors import ValidationError
from mfrbsde.measure import (
    EXACT_W2_MAX_ATOMS,
    EmpiricalMeasure,
    as_point,
    empirical_from,
    mean,
    pushforward,
    quantile_subsample,
    w2_1d,
    w2_exact_small,
)

LINE_ATOMS = [[0.0], [1.0], [2.0], [3.0]]


def test_atoms_are_read_only_copies():
    source = np.array(LINE_ATOMS)
    mu = EmpiricalMeasure(source)
    source[0, 0] = 99.0
    assert mu.atoms[0, 0] == 0.0
    with pytest.raises(ValueError):
        mu.atoms[0, 0] = 5.0


def test_one_dimensional_input_becomes_a_column():
    mu = EmpiricalMeasure(np.array([1.0, 2.0, 3.0]))
    assert (mu.size, mu.dim) == (3, 1)
    assert len(mu) == 3
    assert [float(a[0]) for a in mu] == [1.0, 2.0, 3.0]


def test_rejects_empty_and_non_finite_atoms():
    with pytest.raises(ValidationError):
        EmpiricalMeasure(np.empty((0, 1)))
    with pytest.raises(ValidationError):
        EmpiricalMeasure(np.array([[0.0], [np.nan]]))
    with pytest.raises(ValidationError):
        as_point([1.0, np.inf])


def test_empirical_from_points_and_mixed_dimensions():
    mu = empirical_from([[0.0, 1.0], [2.0, 3.0]])
    assert mu.atoms.shape == (2, 2)
    np.testing.assert_allclose(mean(mu), [1.0, 2.0])
    with pytest.raises(ValidationError):
        empirical_from([[0.0], [1.0, 2.0]])
    with pytest.raises(ValidationError):
        empirical_from([])


def test_w2_1d_of_a_translation_is_the_shift():
    mu = EmpiricalMeasure(np.array(LINE_ATOMS))
    assert w2_1d(mu, mu.translate(0.5)) == pytest.approx(0.5, abs=1e-12)
    shuffled = EmpiricalMeasure(np.array(LINE_ATOMS)[::-1])
    assert w2_1d(mu, shuffled) == 0.0


def test_w2_1d_preconditions():
    mu = EmpiricalMeasure(np.array(LINE_ATOMS))
    with pytest.raises(ValidationError):
        w2_1d(mu, EmpiricalMeasure(np.array([[0.0]])))
    with pytest.raises(ValidationError):
        w2_1d(EmpiricalMeasure(np.zeros((2, 2))), EmpiricalMeasure(np.zeros((2, 2))))


def test_w2_exact_matches_sorted_coupling_in_one_dimension():
    rng = np.random.default_rng(3)
    a = EmpiricalMeasure(rng.normal(size=(20, 1)))
    b = EmpiricalMeasure(rng.normal(size=(20, 1)))
    assert w2_exact_small(a, b) == pytest.approx(w2_1d(a, b), rel=1e-12)


def test_w2_exact_two_dimensional_swap():
    a = EmpiricalMeasure(np.array([[0.0, 0.0], [1.0, 1.0]]))
    b = EmpiricalMeasure(np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert w2_exact_small(a, b) == 0.0
    shifted = a.translate([3.0, 4.0])
    assert w2_exact_small(a, shifted) == pytest.approx(5.0)


def test_w2_exact_atom_cap():
    big = EmpiricalMeasure(np.zeros((EXACT_W2_MAX_ATOMS + 1, 2)))
    with pytest.raises(ValidationError):
        w2_exact_small(big, big)


def test_pushforward_scalar_and_vectorized_agree():
    mu = EmpiricalMeasure(np.array(LINE_ATOMS))
    a = pushforward(mu, lambda x: 2.0 * x + 1.0)
    b = pushforward(mu, lambda X: 2.0 * X + 1.0, vectorized=True)
    np.testing.assert_array_equal(a.atoms, b.atoms)
    np.testing.assert_array_equal(a.atoms[:, 0], [1.0, 3.0, 5.0, 7.0])


def test_pushforward_wrong_length_is_rejected():
    mu = EmpiricalMeasure(np.array(LINE_ATOMS))
    with pytest.raises(ValidationError):
        pushforward(mu, lambda X: X[:2], vectorized=True)


def test_quantile_subsample_takes_mid_quantiles():
    mu = EmpiricalMeasure(np.arange(8.0)[::-1])
    sub = quantile_subsample(mu, 4)
    np.testing.assert_array_equal(sub.atoms[:, 0], [1.0, 3.0, 5.0, 7.0])
    assert quantile_subsample(mu, 8).atoms[:, 0].tolist() == list(np.arange(8.0))
    with pytest.raises(ValidationError):
        quantile_subsample(mu, 9)


def test_sorted_coupling_equals_optimal_assignment_on_small_pairs():
    rng = np.random.default_rng(12)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        a = EmpiricalMeasure(rng.normal(size=(n, 1)))
        b = EmpiricalMeasure(rng.normal(size=(n, 1)))
        assert abs(w2_1d(a, b) - w2_exact_small(a, b)) <= 1e-12
