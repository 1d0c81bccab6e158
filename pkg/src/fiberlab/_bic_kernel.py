"""Compiled sweep over candidate keypoint counts.

Scoring every knot count in a range against a reference chain dominates
the cost of keypoint-count selection, so the whole sweep (natural-spline
solve, arc-length table, equal-arc sampling, residual sum) runs inside a
single njit kernel. The numerics mirror the pure-NumPy spline engine:
same per-segment Horner coefficients, the same 5-node Gauss-Legendre
subinterval rule and the same Newton-refined arc inversion.
"""
from __future__ import annotations

import numpy as np
from numba import njit

_GL5_NODES, _GL5_WEIGHTS = np.polynomial.legendre.leggauss(5)


@njit(cache=True)
def _sweep(tsamp, kp_concat, k_values, k_offsets, n_samples, ssr_clamp, subdiv,
           gl_nodes, gl_weights):
    n_k = k_values.shape[0]
    bics = np.empty(n_k)
    for c in range(n_k):
        k = k_values[c]
        off = k_offsets[c]
        nseg = k - 1
        h = 1.0 / nseg

        # Natural-spline second derivatives: Thomas solve on the (1, 4, 1)
        # tridiagonal system, both coordinates at once.
        m = np.zeros((k, 2))
        if k > 2:
            nint = k - 2
            cp = np.empty(nint)
            dp = np.empty((nint, 2))
            for j in range(nint):
                r0 = 6.0 * (kp_concat[off + j, 0] - 2.0 * kp_concat[off + j + 1, 0]
                            + kp_concat[off + j + 2, 0]) / (h * h)
                r1 = 6.0 * (kp_concat[off + j, 1] - 2.0 * kp_concat[off + j + 1, 1]
                            + kp_concat[off + j + 2, 1]) / (h * h)
                if j == 0:
                    cp[0] = 0.25
                    dp[0, 0] = r0 * 0.25
                    dp[0, 1] = r1 * 0.25
                else:
                    denom = 4.0 - cp[j - 1]
                    cp[j] = 1.0 / denom
                    dp[j, 0] = (r0 - dp[j - 1, 0]) / denom
                    dp[j, 1] = (r1 - dp[j - 1, 1]) / denom
            m[nint, 0] = dp[nint - 1, 0]
            m[nint, 1] = dp[nint - 1, 1]
            for j in range(nint - 2, -1, -1):
                m[j + 1, 0] = dp[j, 0] - cp[j] * m[j + 2, 0]
                m[j + 1, 1] = dp[j, 1] - cp[j] * m[j + 2, 1]

        # Horner coefficients per segment: position c0..c3, velocity d1..d3.
        c0 = np.empty((nseg, 2))
        c1 = np.empty((nseg, 2))
        c2 = np.empty((nseg, 2))
        c3 = np.empty((nseg, 2))
        d1 = np.empty((nseg, 2))
        d2 = np.empty((nseg, 2))
        d3 = np.empty((nseg, 2))
        h26 = h * h / 6.0
        for s in range(nseg):
            for d in range(2):
                p0 = kp_concat[off + s, d]
                p1 = kp_concat[off + s + 1, d]
                m0 = m[s, d]
                m1 = m[s + 1, d]
                c0[s, d] = p0
                c1[s, d] = (p1 - p0) - h26 * (2.0 * m0 + m1)
                c2[s, d] = 3.0 * h26 * m0
                c3[s, d] = h26 * (m1 - m0)
                d1[s, d] = c1[s, d] / h
                d2[s, d] = 2.0 * c2[s, d] / h
                d3[s, d] = 3.0 * c3[s, d] / h

        # Cumulative arc-length table on a uniform parameter grid.
        nsub = nseg * subdiv
        dt = 1.0 / nsub
        s_grid = np.empty(nsub + 1)
        s_grid[0] = 0.0
        for i in range(nsub):
            half = 0.5 * dt
            mid = i * dt + half
            acc = 0.0
            for g in range(gl_nodes.shape[0]):
                t = mid + half * gl_nodes[g]
                seg = int(t * nseg)
                if seg > nseg - 1:
                    seg = nseg - 1
                u = t * nseg - seg
                vx = d1[seg, 0] + u * (d2[seg, 0] + u * d3[seg, 0])
                vy = d1[seg, 1] + u * (d2[seg, 1] + u * d3[seg, 1])
                acc += gl_weights[g] * np.sqrt(vx * vx + vy * vy)
            s_grid[i + 1] = s_grid[i] + half * acc
        total = s_grid[nsub]
        tol = 1e-12 * total if total > 0.0 else 1e-300

        # Equal-arc samples on this fit versus the reference samples.
        ssr = 0.0
        for j in range(n_samples):
            frac = j / (n_samples - 1.0)
            target = frac * total
            if frac <= 0.0:
                t = 0.0
            elif frac >= 1.0:
                t = 1.0
            else:
                lo = 0
                hi = nsub
                while hi - lo > 1:
                    midi = (lo + hi) // 2
                    if s_grid[midi] <= target:
                        lo = midi
                    else:
                        hi = midi
                ds = s_grid[lo + 1] - s_grid[lo]
                if ds > 0.0:
                    t = (lo + (target - s_grid[lo]) / ds) * dt
                else:
                    t = lo * dt
                for _ in range(3):
                    i0 = int(t / dt)
                    if i0 > nsub - 1:
                        i0 = nsub - 1
                    a = i0 * dt
                    half = 0.5 * (t - a)
                    midp = 0.5 * (t + a)
                    acc = 0.0
                    for g in range(gl_nodes.shape[0]):
                        tg = midp + half * gl_nodes[g]
                        seg = int(tg * nseg)
                        if seg > nseg - 1:
                            seg = nseg - 1
                        u = tg * nseg - seg
                        vx = d1[seg, 0] + u * (d2[seg, 0] + u * d3[seg, 0])
                        vy = d1[seg, 1] + u * (d2[seg, 1] + u * d3[seg, 1])
                        acc += gl_weights[g] * np.sqrt(vx * vx + vy * vy)
                    resid = s_grid[i0] + half * acc - target
                    if abs(resid) <= tol:
                        break
                    seg = int(t * nseg)
                    if seg > nseg - 1:
                        seg = nseg - 1
                    u = t * nseg - seg
                    vx = d1[seg, 0] + u * (d2[seg, 0] + u * d3[seg, 0])
                    vy = d1[seg, 1] + u * (d2[seg, 1] + u * d3[seg, 1])
                    spd = np.sqrt(vx * vx + vy * vy)
                    if spd < 1e-30:
                        spd = 1e-30
                    t = t - resid / spd
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
            seg = int(t * nseg)
            if seg > nseg - 1:
                seg = nseg - 1
            u = t * nseg - seg
            px = c0[seg, 0] + u * (c1[seg, 0] + u * (c2[seg, 0] + u * c3[seg, 0]))
            py = c0[seg, 1] + u * (c1[seg, 1] + u * (c2[seg, 1] + u * c3[seg, 1]))
            dx = px - tsamp[j, 0]
            dy = py - tsamp[j, 1]
            ssr += dx * dx + dy * dy

        value = ssr if ssr > ssr_clamp else ssr_clamp
        bics[c] = n_samples * np.log(value / n_samples) + k * np.log(n_samples)
    return bics


def bic_sweep(truth_samples: np.ndarray, resampled: np.ndarray, k_values: np.ndarray,
              k_offsets: np.ndarray, sample_count: int, ssr_clamp: float,
              subdivisions: int) -> np.ndarray:
    """Information-criterion scores for every candidate keypoint count.

    ``resampled`` concatenates, per candidate k, the reference chain
    resampled to k points; ``k_offsets`` gives the row offset of each
    block. Returns one score per k.
    """
    return _sweep(
        np.ascontiguousarray(truth_samples, dtype=np.float64),
        np.ascontiguousarray(resampled, dtype=np.float64),
        np.asarray(k_values, dtype=np.int64),
        np.asarray(k_offsets, dtype=np.int64),
        int(sample_count),
        float(ssr_clamp),
        int(subdivisions),
        _GL5_NODES,
        _GL5_WEIGHTS,
    )
