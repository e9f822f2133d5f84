"""Natural cubic splines over knot chains: fitting, evaluation, sampling,
arc length, curvature energy, and polyline resampling.

Knot parameters are uniform in index, s_k = k/(K-1), so fitting reduces to a
tridiagonal solve for the second derivatives with natural (zero) boundary
conditions. Because the solve is linear in the knot values, evaluation at a
fixed set of parameters is a fixed linear map, exposed as a design matrix for
the differentiable rendering path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

ARC_QUAD_POINTS = 256  # fixed quadrature count for length/curvature


def _solve_second_derivs(values: np.ndarray) -> np.ndarray:
    """Second derivatives of the natural cubic interpolant of ``values``.

    ``values`` has shape (K, C) with uniform parameter spacing h = 1/(K-1).
    Returns an array of the same shape; the first and last rows are zero
    (natural boundary). Thomas algorithm on the interior tridiagonal system.
    """
    k = values.shape[0]
    m = np.zeros_like(values)
    if k < 3:
        return m
    h = 1.0 / (k - 1)
    # Interior system: (h/6) m[i-1] + (2h/3) m[i] + (h/6) m[i+1] = d2[i]
    d2 = (values[2:] - 2.0 * values[1:-1] + values[:-2]) / h
    n = k - 2
    lower = np.full(n, h / 6.0)
    diag = np.full(n, 2.0 * h / 3.0)
    upper = np.full(n, h / 6.0)
    # Thomas forward sweep
    rhs = d2.copy()
    for i in range(1, n):
        w = lower[i] / diag[i - 1]
        diag[i] -= w * upper[i - 1]
        rhs[i] -= w * rhs[i - 1]
    sol = np.empty_like(rhs)
    sol[-1] = rhs[-1] / diag[-1]
    for i in range(n - 2, -1, -1):
        sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i]
    m[1:-1] = sol
    return m


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class KnotChain:
    """Ordered knots (x, y, w) defining one body's centerline and width profile.

    Coordinates are in pixels; w is a dimensionless width scale, projected
    into [0, 1] on construction.
    """

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=np.float64))
        y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))
        w = np.atleast_1d(np.asarray(self.w, dtype=np.float64))
        if x.ndim != 1 or x.shape != y.shape or x.shape != w.shape:
            raise InvalidInputError("knot arrays must be 1-D and equally sized")
        if x.size < 2:
            raise InvalidInputError("a knot chain needs at least 2 knots")
        if not (np.isfinite(x).all() and np.isfinite(y).all() and np.isfinite(w).all()):
            raise InvalidInputError("knot coordinates must be finite")
        w = np.clip(w, 0.0, 1.0)
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "w", _readonly(w))

    @property
    def n_knots(self) -> int:
        return self.x.size

    @classmethod
    def from_points(cls, points, w=1.0) -> "KnotChain":
        """Build a chain from an (K, 2) or (K, 3) point array."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] not in (2, 3):
            raise InvalidInputError("expected an (K>=2, 2|3) point array")
        if pts.shape[1] == 3:
            return cls(pts[:, 0], pts[:, 1], pts[:, 2])
        return cls(pts[:, 0], pts[:, 1], np.full(pts.shape[0], float(w)))

    def points(self) -> np.ndarray:
        """Knots as an (K, 3) array."""
        return np.stack([self.x, self.y, self.w], axis=1)

    def to_dict(self) -> dict:
        return {"knots": [[float(a), float(b), float(c)]
                          for a, b, c in zip(self.x, self.y, self.w)]}

    @classmethod
    def from_dict(cls, obj: dict) -> "KnotChain":
        if not isinstance(obj, dict) or "knots" not in obj:
            raise InvalidInputError('expected an object of the form {"knots": [[x,y,w], ...]}')
        knots = obj["knots"]
        if not isinstance(knots, (list, tuple)) or len(knots) < 2:
            raise InvalidInputError("knots must be a list of at least 2 entries")
        xs, ys, ws = [], [], []
        for entry in knots:
            if not isinstance(entry, (list, tuple)) or len(entry) not in (2, 3):
                raise InvalidInputError("each knot must be [x, y] or [x, y, w]")
            xs.append(float(entry[0]))
            ys.append(float(entry[1]))
            ws.append(float(entry[2]) if len(entry) == 3 else 1.0)
        return cls(np.array(xs), np.array(ys), np.array(ws))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "KnotChain":
        return cls.from_dict(json.loads(text))


class SplineCurve:
    """Three natural cubic splines (r_x, r_y, r_w) over s in [0, 1].

    Evaluation outside [0, 1] clamps s to the boundary instead of
    extrapolating.
    """

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 2:
            raise InvalidInputError("need an (K>=2, C) value array")
        self.values = values
        self.n_knots = values.shape[0]
        self.s_knots = np.linspace(0.0, 1.0, self.n_knots)
        self.h = 1.0 / (self.n_knots - 1)
        self.m = _solve_second_derivs(values)  # second derivatives at knots

    def _segment(self, s: np.ndarray):
        s = np.clip(s, 0.0, 1.0)
        seg = np.clip((s * (self.n_knots - 1)).astype(np.int64), 0, self.n_knots - 2)
        t = s / self.h - seg
        return seg, t

    def eval(self, s) -> np.ndarray:
        """Evaluate at parameter(s) s; returns (C,) for scalar s, else (Q, C)."""
        s_arr = np.atleast_1d(np.asarray(s, dtype=np.float64))
        seg, t = self._segment(s_arr)
        t = t[:, None]
        v0, v1 = self.values[seg], self.values[seg + 1]
        m0, m1 = self.m[seg], self.m[seg + 1]
        u = 1.0 - t
        out = (u * v0 + t * v1
               + (self.h ** 2 / 6.0) * ((u ** 3 - u) * m0 + (t ** 3 - t) * m1))
        return out[0] if np.isscalar(s) or np.ndim(s) == 0 else out

    def derivative(self, s, side: str = "right") -> np.ndarray:
        """First derivative d r / d s. At interior knots ``side`` selects the
        one-sided piece ('left' uses the segment ending at s)."""
        s_arr = np.atleast_1d(np.asarray(s, dtype=np.float64))
        seg, t = self._segment(s_arr)
        if side == "left":
            shift = (t == 0.0) & (seg > 0)
            seg = seg - shift.astype(np.int64)
            t = t + shift.astype(np.float64)
        t = t[:, None]
        v0, v1 = self.values[seg], self.values[seg + 1]
        m0, m1 = self.m[seg], self.m[seg + 1]
        u = 1.0 - t
        out = ((v1 - v0) / self.h
               + (self.h / 6.0) * ((3.0 * t ** 2 - 1.0) * m1 - (3.0 * u ** 2 - 1.0) * m0))
        return out[0] if np.isscalar(s) or np.ndim(s) == 0 else out

    def second_derivative(self, s) -> np.ndarray:
        s_arr = np.atleast_1d(np.asarray(s, dtype=np.float64))
        seg, t = self._segment(s_arr)
        t = t[:, None]
        out = (1.0 - t) * self.m[seg] + t * self.m[seg + 1]
        return out[0] if np.isscalar(s) or np.ndim(s) == 0 else out


def fit_natural_cubic(knots: KnotChain) -> SplineCurve:
    """Fit the three-component natural cubic spline through a knot chain."""
    return SplineCurve(knots.points())


def eval_curve(curve: SplineCurve, s) -> np.ndarray:
    """Evaluate a curve at parameter(s) s (clamped to [0, 1])."""
    return curve.eval(s)


def sample_uniform(curve: SplineCurve, m: int) -> np.ndarray:
    """Sample m points at parameters 0, 1/(m-1), ..., 1. Returns (m, C)."""
    if m < 2:
        raise InvalidInputError("need at least 2 samples")
    return curve.eval(np.linspace(0.0, 1.0, m))


def arc_length(curve: SplineCurve, quad_points: int = ARC_QUAD_POINTS) -> float:
    """Polyline arc length of the (x, y) trace over ``quad_points`` samples."""
    pts = sample_uniform(curve, quad_points)[:, :2]
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def curvature_energy(curve: SplineCurve, quad_points: int = ARC_QUAD_POINTS) -> float:
    """Discrete bending energy: mean squared second difference of the
    sampled (x, y) points, normalized by (quad_points - 2)."""
    pts = sample_uniform(curve, quad_points)[:, :2]
    d2 = pts[:-2] - 2.0 * pts[1:-1] + pts[2:]
    return float(np.sum(d2 ** 2) / (quad_points - 2))


def resample_polyline(points, n: int) -> np.ndarray:
    """Resample an (P, 2) polyline to n points via a natural cubic spline
    with uniform parameterization."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] < 2:
        raise InvalidInputError("need at least 2 points of dimension >= 2")
    if n < 2:
        raise InvalidInputError("need at least 2 output points")
    curve = SplineCurve(pts[:, :2])
    return curve.eval(np.linspace(0.0, 1.0, n))


def natural_cubic_basis(n_knots: int, s_query) -> np.ndarray:
    """Design matrix A of shape (Q, K): A @ values evaluates the natural
    cubic interpolant of ``values`` at the query parameters.

    The interpolant is linear in the knot values, so this matrix is exact and
    depends only on K and the query grid. Used by the differentiable
    rendering path, where spline evaluation must be a recorded linear op.
    """
    if n_knots < 2:
        raise InvalidInputError("need at least 2 knots")
    curve = SplineCurve(np.eye(n_knots))
    s_arr = np.atleast_1d(np.asarray(s_query, dtype=np.float64))
    return curve.eval(s_arr)
