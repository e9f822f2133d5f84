"""Spline geometry: interpolation, boundary conditions, sampling, lengths.

Oracles: a 3-knot natural cubic solved by hand from the moment equations
(uniform h = 1/2, natural ends force M0 = M2 = 0 and a single equation
for M1), plus analytic lengths of straight and circular shapes.
"""

import json

import numpy as np
import pytest

from slenderfit.errors import InvalidInputError
from slenderfit.geometry import (KnotChain, SplineCurve, arc_length,
                                 curvature_energy, eval_curve,
                                 fit_natural_cubic, natural_cubic_basis,
                                 resample_polyline, sample_uniform)

# hand-solved: knots y = (0, 2, 0) at s = (0, 1/2, 1), h = 1/2
#   moment equation: h*M0/6 + 2h/3*M1 + h*M2/6 = (0-2)/h - (2-0)/h
#   natural: M0 = M2 = 0  =>  M1 = -24
#   on [0, 1/2]: y(s) = -8 s^3 + 6 s, so y(1/4) = 1.375 and y'(0) = 6
HAND_KNOTS = KnotChain(np.array([0.0, 1.0, 2.0]),
                       np.array([0.0, 2.0, 0.0]),
                       np.ones(3))


def rand_chain(rng, k):
    return KnotChain(rng.uniform(-5, 5, k), rng.uniform(-5, 5, k),
                     rng.uniform(0.1, 0.9, k))


class TestEvaluation:
    def test_hand_solved_three_knots(self):
        cur = fit_natural_cubic(HAND_KNOTS)
        np.testing.assert_allclose(cur.eval(0.25), [0.5, 1.375, 1.0],
                                   atol=1e-12)
        np.testing.assert_allclose(cur.derivative(0.0)[:2], [2.0, 6.0],
                                   atol=1e-12)
        np.testing.assert_allclose(cur.second_derivative(0.0), 0.0, atol=1e-12)
        np.testing.assert_allclose(cur.second_derivative(1.0), 0.0, atol=1e-12)

    def test_collinear_knots_stay_linear(self):
        c = KnotChain(np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0, 2.0]),
                      np.ones(3))
        cur = fit_natural_cubic(c)
        for s in (0.1, 0.25, 0.4, 0.77):
            np.testing.assert_allclose(cur.eval(s), [2 * s, 2 * s, 1.0],
                                       atol=1e-9)

    def test_two_knots_linear(self):
        cur = fit_natural_cubic(KnotChain(np.array([0.0, 10.0]),
                                          np.array([0.0, 0.0]),
                                          np.array([0.3, 0.3])))
        for s in (0.0, 0.2, 0.5, 0.9, 1.0):
            np.testing.assert_allclose(cur.eval(s), [10 * s, 0.0, 0.3],
                                       atol=1e-12)

    def test_interpolates_knots_exactly(self):
        rng = np.random.default_rng(5)
        for k in range(2, 13):
            c = rand_chain(rng, k)
            cur = fit_natural_cubic(c)
            got = cur.eval(np.linspace(0.0, 1.0, k))
            np.testing.assert_allclose(got, c.points(), atol=1e-9)

    def test_clamps_outside_unit_interval(self):
        cur = fit_natural_cubic(HAND_KNOTS)
        np.testing.assert_array_equal(cur.eval(-0.5), cur.eval(0.0))
        np.testing.assert_array_equal(cur.eval(1.5), cur.eval(1.0))

    def test_c1_at_interior_knots(self):
        rng = np.random.default_rng(6)
        cur = fit_natural_cubic(rand_chain(rng, 7))
        for sk in np.linspace(0.0, 1.0, 7)[1:-1]:
            left = cur.derivative(sk, side="left")
            right = cur.derivative(sk, side="right")
            np.testing.assert_allclose(left, right, atol=1e-9)

    def test_natural_boundary_fd(self):
        # one-sided 4-point second-derivative stencil, exact for cubics,
        # evaluated at each end: must vanish for a natural spline
        rng = np.random.default_rng(7)
        cur = fit_natural_cubic(rand_chain(rng, 6))
        h = 1e-4
        f = cur.eval
        d2_start = (2 * f(0.0) - 5 * f(h) + 4 * f(2 * h) - f(3 * h)) / h ** 2
        d2_end = (2 * f(1.0) - 5 * f(1 - h) + 4 * f(1 - 2 * h) - f(1 - 3 * h)) / h ** 2
        assert np.abs(d2_start).max() < 1e-5
        assert np.abs(d2_end).max() < 1e-5

    def test_vector_eval_matches_scalar(self):
        cur = fit_natural_cubic(HAND_KNOTS)
        s = np.array([0.0, 0.3, 0.9])
        got = cur.eval(s)
        for i, si in enumerate(s):
            np.testing.assert_array_equal(got[i], cur.eval(si))
        assert eval_curve(cur, 0.3).shape == (3,)


class TestSampling:
    def test_m2_returns_endpoints(self):
        cur = fit_natural_cubic(HAND_KNOTS)
        got = sample_uniform(cur, 2)
        np.testing.assert_array_equal(got[0], cur.eval(0.0))
        np.testing.assert_array_equal(got[1], cur.eval(1.0))

    def test_straight_line_equally_spaced(self):
        cur = fit_natural_cubic(KnotChain(np.array([0.0, 4.0]),
                                          np.array([0.0, 0.0]), np.ones(2)))
        got = sample_uniform(cur, 5)
        np.testing.assert_allclose(got[:, 0], [0, 1, 2, 3, 4], atol=1e-12)

    def test_m101_hits_midpoint_knot(self):
        cur = fit_natural_cubic(HAND_KNOTS)
        got = sample_uniform(cur, 101)
        np.testing.assert_allclose(got[50], [1.0, 2.0, 1.0], atol=1e-12)

    def test_rejects_single_sample(self):
        cur = fit_natural_cubic(HAND_KNOTS)
        with pytest.raises(InvalidInputError):
            sample_uniform(cur, 1)


class TestArcLengthAndCurvature:
    def test_straight_345(self):
        cur = fit_natural_cubic(KnotChain(np.array([0.0, 3.0]),
                                          np.array([0.0, 4.0]), np.ones(2)))
        assert abs(arc_length(cur) - 5.0) < 1e-9

    def test_half_circle_radius_10(self):
        th = np.linspace(0.0, np.pi, 13)
        cur = fit_natural_cubic(KnotChain(10 * np.cos(th), 10 * np.sin(th),
                                          np.ones(13)))
        assert abs(arc_length(cur) - 10 * np.pi) / (10 * np.pi) < 1e-3

    def test_degenerate_zero_length(self):
        cur = fit_natural_cubic(KnotChain(np.full(4, 2.0), np.full(4, 3.0),
                                          np.ones(4)))
        assert arc_length(cur) < 1e-12

    def test_curvature_straight_zero_and_nonneg(self):
        straight = fit_natural_cubic(KnotChain(np.array([0.0, 5.0, 10.0]),
                                               np.array([0.0, 0.0, 0.0]),
                                               np.ones(3)))
        assert curvature_energy(straight) < 1e-20
        rng = np.random.default_rng(8)
        for _ in range(5):
            assert curvature_energy(fit_natural_cubic(rand_chain(rng, 6))) >= 0.0

    def test_semicircle_bends_more_than_chord(self):
        th = np.linspace(0.0, np.pi, 9)
        arc = fit_natural_cubic(KnotChain(10 * np.cos(th), 10 * np.sin(th),
                                          np.ones(9)))
        chord = fit_natural_cubic(KnotChain(np.array([10.0, -10.0]),
                                            np.array([0.0, 0.0]), np.ones(2)))
        assert curvature_energy(arc) > curvature_energy(chord)

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(9)
        c = rand_chain(rng, 8)
        th = 0.7
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        xy = np.stack([c.x, c.y], axis=1) @ rot.T + np.array([3.5, -1.25])
        c2 = KnotChain(xy[:, 0], xy[:, 1], c.w)
        a, b = fit_natural_cubic(c), fit_natural_cubic(c2)
        assert abs(arc_length(a) - arc_length(b)) < 1e-12 * max(arc_length(a), 1)
        assert abs(curvature_energy(a) - curvature_energy(b)) < 1e-12


class TestResample:
    def test_two_points_collinear_uniform(self):
        got = resample_polyline(np.array([[0.0, 0.0], [9.9, 0.0]]), 100)
        np.testing.assert_allclose(got[:, 0], np.linspace(0, 9.9, 100),
                                   atol=1e-12)
        np.testing.assert_allclose(got[:, 1], 0.0, atol=1e-12)

    def test_matches_direct_evaluation(self):
        pts = np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 0.0]])
        got = resample_polyline(pts, 100)
        cur = SplineCurve(pts)
        np.testing.assert_allclose(got[49], cur.eval(49.0 / 99.0), atol=1e-12)

    def test_preserves_input_at_knots(self):
        pts = np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 0.0]])
        np.testing.assert_allclose(resample_polyline(pts, 3), pts, atol=1e-9)

    def test_rejects_bad_shapes(self):
        with pytest.raises(InvalidInputError):
            resample_polyline(np.zeros((1, 2)), 10)
        with pytest.raises(InvalidInputError):
            resample_polyline(np.zeros((5, 2)), 1)


class TestKnotChain:
    def test_requires_two_knots(self):
        with pytest.raises(InvalidInputError):
            KnotChain(np.array([1.0]), np.array([1.0]), np.array([1.0]))
        with pytest.raises(InvalidInputError):
            KnotChain.from_dict({"knots": [[0.0, 0.0]]})

    def test_json_round_trip(self):
        c = KnotChain(np.array([0.0, 1.5]), np.array([2.0, -3.0]),
                      np.array([0.25, 0.75]))
        c2 = KnotChain.from_json(c.to_json())
        np.testing.assert_array_equal(c.points(), c2.points())

    def test_width_defaults_to_one(self):
        c = KnotChain.from_dict({"knots": [[0.0, 0.0], [1.0, 1.0]]})
        np.testing.assert_array_equal(c.w, [1.0, 1.0])

    def test_from_dict_rejects_malformed(self):
        for bad in ({}, {"knots": "x"}, {"knots": [[1.0], [2.0]]}, [1, 2]):
            with pytest.raises(InvalidInputError):
                KnotChain.from_dict(bad)

    def test_to_dict_is_json_safe(self):
        c = KnotChain.from_points(np.array([[0.0, 1.0], [2.0, 3.0]]))
        json.dumps(c.to_dict())


class TestBasisMatrix:
    def test_reproduces_spline_evaluation(self):
        rng = np.random.default_rng(10)
        for k in (2, 5, 9):
            vals = rng.normal(size=(k, 1))
            s = rng.uniform(0, 1, 40)
            a = natural_cubic_basis(k, s)
            direct = SplineCurve(vals).eval(s)[:, 0]
            np.testing.assert_allclose(a @ vals[:, 0], direct, atol=1e-12)

    def test_rows_sum_to_one(self):
        # constants are reproduced exactly
        a = natural_cubic_basis(7, np.linspace(0, 1, 33))
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)
