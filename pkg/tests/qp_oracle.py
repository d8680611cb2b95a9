"""Brute-force solver for the one-class dual, independent of the SMO code path.

Accelerated projected gradient over {0 <= a <= C, sum(a) = 1}; the projection
is found by bisection on the shift of a clipped vector.
"""

from __future__ import annotations

import numpy as np


def project_capped_simplex(v: np.ndarray, cap: float, iters: int = 200) -> np.ndarray:
    lo, hi = v.min() - cap, v.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.clip(v - mid, 0.0, cap).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi), 0.0, cap)


def solve_projected_gradient(q: np.ndarray, nu: float, max_iter: int = 200_000, tol: float = 1e-14):
    m = q.shape[0]
    cap = 1.0 / (nu * m)
    step = 1.0 / np.linalg.eigvalsh(q).max()
    a = np.full(m, 1.0 / m)
    y = a.copy()
    t = 1.0
    for _ in range(max_iter):
        a_next = project_capped_simplex(y - step * (q @ y), cap)
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = a_next + ((t - 1) / t_next) * (a_next - a)
        done = np.max(np.abs(a_next - a)) < tol
        a, t = a_next, t_next
        if done:
            break
    return a, 0.5 * float(a @ q @ a)
