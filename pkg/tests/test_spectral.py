import numpy as np
import pytest
from hypothesis import given, strategies as st

from hivoc import spectral
from hivoc.spectral import lgr_scheme


def test_legendre_values():
    for k in range(21):
        assert spectral.legendre_eval(k, 1.0)[0] == pytest.approx(1.0, abs=1e-13)
    t = np.linspace(-1, 1, 7)
    np.testing.assert_allclose(spectral.legendre_eval(0, t)[0], 1.0)
    np.testing.assert_allclose(spectral.legendre_eval(1, t)[0], t)
    assert spectral.legendre_eval(2, 0.5)[0] == pytest.approx(-0.125, abs=1e-15)


@given(st.integers(0, 12), st.floats(-1, 1))
def test_legendre_derivative_matches_numpy(k, t):
    from numpy.polynomial import legendre as L
    c = np.zeros(k + 1)
    c[k] = 1.0
    p, dp = spectral.legendre_eval(k, t)
    assert p == pytest.approx(L.legval(t, c), abs=1e-12)
    assert dp == pytest.approx(L.legval(t, L.legder(c)), abs=1e-10)


def test_one_point_scheme():
    s = lgr_scheme(1)
    np.testing.assert_allclose(s.points, [-1.0, 1.0 / 3.0], atol=1e-12)
    np.testing.assert_allclose(s.weights, [0.5, 1.5], atol=1e-12)
    np.testing.assert_allclose(s.diff_matrix, [[-0.75, 0.75]], atol=1e-12)


@pytest.mark.parametrize("n_cp", range(1, 21))
def test_points_are_radau_roots(n_cp):
    s = lgr_scheme(n_cp)
    assert s.points[0] == -1.0
    assert np.all(np.diff(s.points) > 0) and s.points[-1] < 1.0
    g = spectral.legendre_eval(n_cp + 1, s.points)[0] + spectral.legendre_eval(n_cp, s.points)[0]
    assert np.max(np.abs(g)) < 1e-12
    assert s.diff_matrix.shape == (n_cp, n_cp + 1)


@pytest.mark.parametrize("n_cp", range(1, 11))
def test_quadrature_exactness(n_cp):
    s = lgr_scheme(n_cp)
    assert s.weights.sum() == pytest.approx(2.0, abs=1e-13)
    assert np.all(s.weights > 0)
    for j in range(2 * n_cp + 1):
        exact = (1 - (-1) ** (j + 1)) / (j + 1)
        assert abs(s.weights @ s.points ** j - exact) <= 1e-12


@pytest.mark.parametrize("n_cp", range(1, 11))
def test_differentiation_exactness(n_cp):
    s = lgr_scheme(n_cp)
    D, t = s.diff_matrix, s.points
    np.testing.assert_allclose(D.sum(axis=1), 0.0, atol=1e-12)
    for j in range(n_cp + 1):
        exact = j * t[1:] ** (j - 1) if j else np.zeros(n_cp)
        assert np.max(np.abs(D @ t ** j - exact)) <= 1e-10 * max(1.0, np.abs(exact).max())


def test_weights_agree_with_moment_system():
    for n_cp in range(1, 16):
        pts = spectral.lgr_points(n_cp)
        np.testing.assert_allclose(spectral._weights_closed_form(pts), spectral._weights_moments(pts),
                                   atol=1e-11)


def test_closed_form_derivative_matrix_agrees():
    for n_cp in range(1, 16):
        pts = spectral.lgr_points(n_cp)
        np.testing.assert_allclose(spectral.radau_derivative_matrix(pts),
                                   spectral.barycentric_derivative_matrix(pts), atol=1e-8 * n_cp ** 2)


@given(st.integers(1, 10), st.lists(st.floats(-3, 3), min_size=11, max_size=11),
       st.lists(st.floats(-1, 1), min_size=100, max_size=100))
def test_interpolation_reproduces_polynomials(n_cp, coeffs, ts):
    s = lgr_scheme(n_cp)
    poly = np.polynomial.Polynomial(coeffs[:n_cp + 1])
    ts = np.array(ts)
    got = s.interpolate(poly(s.points), ts)
    scale = max(1.0, np.abs(poly(np.linspace(-1, 1, 201))).max())
    assert np.max(np.abs(got - poly(ts))) <= 1e-11 * scale


def test_interpolation_hits_nodes_exactly():
    s = lgr_scheme(5)
    v = np.cos(3 * s.points)
    np.testing.assert_array_equal(s.interpolate(v, s.points), v)


def test_five_points_reconstruct_smooth_trajectory():
    s = lgr_scheme(5)
    f = lambda t: np.exp(0.8 * t) * np.cos(t)
    t = np.linspace(-1, 1, 301)
    assert np.max(np.abs(s.interpolate(f(s.points), t) - f(t))) < 1e-3


def test_scheme_is_immutable():
    s = lgr_scheme(4)
    with pytest.raises(ValueError):
        s.points[0] = 0.0


def test_bad_degree():
    with pytest.raises(ValueError):
        spectral.lgr_points(0)
