"""Natural cubic splines with uniform knots, plus arc-length machinery.

Internal engine used by :mod:`fiberlab.geometry`. A spline through K points
has knots at i/(K-1) and zero second derivative at both ends. Arc lengths
are integrated with Gauss-Legendre quadrature; the arc-length map is
inverted with a table seed refined by Newton steps, so placement accuracy
does not depend on the table resolution.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

# Fixed quadrature rules. 5 nodes per subinterval for tables and local
# corrections, 15 nodes for the adaptive total-length integrator.
_GL5_NODES, _GL5_WEIGHTS = np.polynomial.legendre.leggauss(5)
_GL15_NODES, _GL15_WEIGHTS = np.polynomial.legendre.leggauss(15)


class UniformCubicSpline:
    """Interpolating natural cubic spline through an (K, 2) point array.

    Knots sit at t_i = i/(K-1); evaluation is defined on [0, 1]. For K = 2
    the curve degenerates to the straight segment between the points.
    Segment polynomials are stored in Horner form for cheap evaluation.
    """

    __slots__ = ("points", "second_derivs", "knot_count", "h",
                 "_c0", "_c1", "_c2", "_c3", "_d1", "_d2", "_d3")

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("spline needs an (K, 2) array with K >= 2")
        k = pts.shape[0]
        h = 1.0 / (k - 1)
        m = np.zeros_like(pts)
        if k > 2:
            rhs = 6.0 * (pts[:-2] - 2.0 * pts[1:-1] + pts[2:]) / (h * h)
            ab = np.empty((3, k - 2))
            ab[0] = 1.0
            ab[1] = 4.0
            ab[2] = 1.0
            m[1:-1] = solve_banded((1, 1), ab, rhs, check_finite=False)
        self.points = pts
        self.second_derivs = m
        self.knot_count = k
        self.h = h
        # Per-segment cubics in the local parameter u in [0, 1]:
        #   S(u) = c0 + u*(c1 + u*(c2 + u*c3))
        #   dS/dt = d1 + u*(d2 + u*d3)          (t is the knot parameter)
        m0, m1 = m[:-1], m[1:]
        h2_6 = h * h / 6.0
        self._c0 = pts[:-1]
        self._c1 = (pts[1:] - pts[:-1]) - h2_6 * (2.0 * m0 + m1)
        self._c2 = 3.0 * h2_6 * m0
        self._c3 = h2_6 * (m1 - m0)
        self._d1 = self._c1 / h
        self._d2 = 2.0 * self._c2 / h
        self._d3 = 3.0 * self._c3 / h

    def _locate(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        scaled = t * (self.knot_count - 1)
        idx = np.minimum(np.maximum(scaled.astype(np.int64), 0), self.knot_count - 2)
        return idx, (scaled - idx)[:, None]

    def point(self, t) -> np.ndarray:
        """Evaluate positions; scalar t gives (2,), array t gives (n, 2)."""
        t_arr = np.asarray(t, dtype=np.float64)
        scalar = t_arr.ndim == 0
        idx, u = self._locate(np.atleast_1d(t_arr))
        out = self._c0[idx] + u * (self._c1[idx] + u * (self._c2[idx] + u * self._c3[idx]))
        return out[0] if scalar else out

    def velocity(self, t) -> np.ndarray:
        """First derivative with respect to the knot parameter."""
        t_arr = np.asarray(t, dtype=np.float64)
        scalar = t_arr.ndim == 0
        idx, u = self._locate(np.atleast_1d(t_arr))
        out = self._d1[idx] + u * (self._d2[idx] + u * self._d3[idx])
        return out[0] if scalar else out

    def speed(self, t: np.ndarray) -> np.ndarray:
        idx, u = self._locate(np.asarray(t, dtype=np.float64).ravel())
        vel = self._d1[idx] + u * (self._d2[idx] + u * self._d3[idx])
        return np.hypot(vel[:, 0], vel[:, 1])


def adaptive_arc_length(spline: UniformCubicSpline, rtol: float = 1e-9) -> float:
    """Arc length by per-segment adaptive Gauss-Legendre refinement.

    Each knot interval is integrated with a 15-node rule and bisected until
    the whole-versus-halves estimate agrees to `rtol` relative.
    """

    def quad(a: float, b: float) -> float:
        half = 0.5 * (b - a)
        mid = 0.5 * (a + b)
        return half * float(np.dot(_GL15_WEIGHTS, spline.speed(mid + half * _GL15_NODES)))

    def refine(a: float, b: float, whole: float, depth: int) -> float:
        mid = 0.5 * (a + b)
        left = quad(a, mid)
        right = quad(mid, b)
        if depth >= 30 or abs(left + right - whole) <= rtol * max(abs(left + right), 1e-300):
            return left + right
        return refine(a, mid, left, depth + 1) + refine(mid, b, right, depth + 1)

    total = 0.0
    edges = np.linspace(0.0, 1.0, spline.knot_count)
    for a, b in zip(edges[:-1], edges[1:]):
        total += refine(a, b, quad(a, b), 0)
    return total


class ArcLengthMap:
    """Cumulative arc length s(t) and its inverse for one spline."""

    __slots__ = ("spline", "t_grid", "s_grid", "total")

    def __init__(self, spline: UniformCubicSpline, subdivisions: int = 8):
        self.spline = spline
        n = (spline.knot_count - 1) * subdivisions
        t_grid = np.linspace(0.0, 1.0, n + 1)
        half = 0.5 * (t_grid[1] - t_grid[0])
        mid = 0.5 * (t_grid[1:] + t_grid[:-1])
        # (n, 5) quadrature nodes evaluated in one call
        nodes = mid[:, None] + half * _GL5_NODES[None, :]
        speeds = spline.speed(nodes.ravel()).reshape(n, _GL5_NODES.size)
        s_grid = np.empty(n + 1)
        s_grid[0] = 0.0
        np.cumsum(half * (speeds @ _GL5_WEIGHTS), out=s_grid[1:])
        self.t_grid = t_grid
        self.s_grid = s_grid
        self.total = float(s_grid[-1])

    def s_at(self, t: np.ndarray) -> np.ndarray:
        """Arc length from 0 to each t (grid value plus a local correction)."""
        t = np.asarray(t, dtype=np.float64)
        j = np.minimum(np.maximum(np.searchsorted(self.t_grid, t, side="right") - 1, 0),
                       len(self.t_grid) - 2)
        a = self.t_grid[j]
        half = 0.5 * (t - a)
        mid = 0.5 * (t + a)
        nodes = mid[:, None] + half[:, None] * _GL5_NODES[None, :]
        speeds = self.spline.speed(nodes.ravel()).reshape(t.size, _GL5_NODES.size)
        return self.s_grid[j] + half * (speeds @ _GL5_WEIGHTS)

    def t_at_arc(self, s: np.ndarray, newton_steps: int = 3) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        t = np.interp(s, self.s_grid, self.t_grid)
        tol = 1e-12 * max(self.total, 1e-300)
        for _ in range(newton_steps):
            resid = self.s_at(t) - s
            if np.all(np.abs(resid) <= tol):
                break
            speed = np.maximum(self.spline.speed(t), 1e-30)
            t = np.minimum(np.maximum(t - resid / speed, 0.0), 1.0)
        return t

    def points_at_fractions(self, fractions: np.ndarray) -> np.ndarray:
        """Spline points at the given fractions of total arc length."""
        fractions = np.asarray(fractions, dtype=np.float64)
        t = self.t_at_arc(fractions * self.total)
        # Endpoint fractions map to the exact parameter bounds.
        t = np.where(fractions <= 0.0, 0.0, t)
        t = np.where(fractions >= 1.0, 1.0, t)
        return self.spline.point(t)
