"""One-class SVM (nu formulation) with an RBF kernel and a pairwise dual solver.

The dual problem over ``m`` training points is::

    minimise    0.5 * a^T Q a        Q_ij = exp(-gamma * |x_i - x_j|^2)
    subject to  0 <= a_i <= 1 / (nu * m),   sum(a) = 1

It is solved by repeatedly picking the maximal violating pair and moving mass
between the two coordinates analytically (SMO). The offset ``rho`` is the
common gradient value of the free coordinates.

Scores follow "higher is more anomalous": ``score(x) = rho - sum_i a_i k(x_i, x)``,
so points outside the learned boundary are positive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


def rbf_kernel(x: np.ndarray, y: np.ndarray, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch {x.shape} vs {y.shape}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    d = x - y
    return float(np.exp(-gamma * np.dot(d, d)))


def rbf_matrix(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """Kernel matrix between the rows of ``a`` and ``b`` (float64)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


def default_gamma(x: np.ndarray) -> float:
    """``1 / (d * mean per-feature variance)``."""
    x = np.asarray(x, dtype=np.float64)
    var = float(x.var(axis=0).mean())
    if var <= 0:
        return 1.0 / x.shape[1]
    return 1.0 / (x.shape[1] * var)


@dataclass
class DualSolution:
    alpha: np.ndarray
    grad: np.ndarray
    rho: float
    iterations: int
    max_violation: float


def _violation(alpha: np.ndarray, grad: np.ndarray, bound: float) -> float:
    up = alpha < bound
    low = alpha > 0
    if not up.any() or not low.any():
        return 0.0
    return max(0.0, float(grad[low].max() - grad[up].min()))


def _rho(alpha: np.ndarray, grad: np.ndarray, bound: float) -> float:
    free = (alpha > 0) & (alpha < bound)
    if free.any():
        return float(grad[free].mean())
    at_bound = grad[alpha >= bound]
    at_zero = grad[alpha <= 0]
    lo = at_bound.max() if at_bound.size else None
    hi = at_zero.min() if at_zero.size else None
    if lo is None:
        return float(hi)
    if hi is None:
        return float(lo)
    return 0.5 * float(lo + hi)


def _pick(values: np.ndarray, mask: np.ndarray, best: float, rng: np.random.Generator) -> int:
    ties = np.flatnonzero(mask & (values == best))
    return int(ties[0] if ties.size == 1 else rng.choice(ties))


def solve_dual(
    q: np.ndarray,
    nu: float,
    tol: float = 1e-6,
    max_iter: int | None = None,
    seed: int = 0,
) -> DualSolution:
    """SMO on a precomputed kernel matrix ``q`` (m x m)."""
    m = q.shape[0]
    if q.shape != (m, m):
        raise ValueError("kernel matrix must be square")
    if m < 2:
        raise ValueError("need at least two training points")
    if not 0 < nu <= 1:
        raise ValueError("nu must be in (0, 1]")
    if not np.all(np.isfinite(q)):
        raise SolverError("kernel matrix has non-finite entries")
    bound = 1.0 / (nu * m)
    max_iter = max_iter if max_iter is not None else max(100_000, 200 * m)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    alpha = np.full(m, 1.0 / m)
    grad = q @ alpha
    diag = np.diag(q).copy()
    it = 0
    while True:
        up = alpha < bound
        low = alpha > 0
        g_up = np.where(up, grad, np.inf)
        g_low = np.where(low, grad, -np.inf)
        gmin = g_up.min()
        gmax = g_low.max()
        if gmax - gmin <= tol:
            break
        if it >= max_iter:
            raise SolverError(
                f"SMO did not converge in {max_iter} iterations (violation {gmax - gmin:.3e})"
            )
        i = _pick(grad, up, gmin, rng)
        j = _pick(grad, low, gmax, rng)
        eta = diag[i] + diag[j] - 2.0 * q[i, j]
        step = (gmax - gmin) / max(eta, 1e-12)
        step = min(step, bound - alpha[i], alpha[j])
        alpha[i] += step
        alpha[j] -= step
        # snap to the box to keep bounds exact
        if bound - alpha[i] < 1e-15 * bound:
            alpha[i] = bound
        if alpha[j] < 1e-15 * bound:
            alpha[j] = 0.0
        grad += step * (q[i] - q[j])
        it += 1
    # pair updates preserve sum(alpha) exactly up to rounding; refresh the gradient
    grad = q @ alpha
    return DualSolution(alpha, grad, _rho(alpha, grad, bound), it, _violation(alpha, grad, bound))


def dual_objective(q: np.ndarray, alpha: np.ndarray) -> float:
    return 0.5 * float(alpha @ q @ alpha)


@dataclass
class OcSvmModel:
    support_vectors: np.ndarray
    alpha: np.ndarray
    rho: float
    gamma: float
    nu: float
    n_train: int
    support_indices: np.ndarray

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]

    @property
    def bound(self) -> float:
        return 1.0 / (self.nu * self.n_train)

    def score(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Anomaly scores ``rho - sum_i a_i k(sv_i, x)`` for each row of ``x``.

        Rows are scored in zero-padded chunks of a fixed size so that a row's
        score does not depend on how many other rows were scored with it.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"embedding has dimension {x.shape[1]}, model expects {self.dim}")
        out = np.empty(x.shape[0])
        block = np.zeros((chunk, self.dim))
        for i in range(0, x.shape[0], chunk):
            part = x[i : i + chunk]
            block[: len(part)] = part
            block[len(part) :] = 0.0
            k = rbf_matrix(block, self.support_vectors, self.gamma)
            out[i : i + len(part)] = self.rho - (k * self.alpha).sum(axis=1)[: len(part)]
        return out


def fit(
    x: np.ndarray,
    nu: float = 0.1,
    gamma: float | None = None,
    tol: float = 1e-6,
    max_iter: int | None = None,
    seed: int = 0,
) -> OcSvmModel:
    """Fit on no-leak embeddings ``x`` (m x d)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an (m, d) array with m >= 2")
    gamma = default_gamma(x) if gamma is None else float(gamma)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    q = rbf_matrix(x, x, gamma)
    sol = solve_dual(q, nu, tol=tol, max_iter=max_iter, seed=seed)
    idx = np.flatnonzero(sol.alpha > 0)
    logger.info(
        "one-class SVM: m=%d, %d support vectors, %d iterations, violation %.2e",
        x.shape[0], idx.size, sol.iterations, sol.max_violation,
    )
    return OcSvmModel(
        support_vectors=x[idx].copy(),
        alpha=sol.alpha[idx].copy(),
        rho=sol.rho,
        gamma=gamma,
        nu=nu,
        n_train=x.shape[0],
        support_indices=idx,
    )


def anomaly_score(f: np.ndarray, model: OcSvmModel) -> np.ndarray | float:
    scores = model.score(f)
    return float(scores[0]) if np.ndim(f) == 1 else scores


def full_alpha(model: OcSvmModel) -> np.ndarray:
    a = np.zeros(model.n_train)
    a[model.support_indices] = model.alpha
    return a


def kkt_report(model: OcSvmModel, x: np.ndarray) -> dict:
    """Max KKT violation, support-vector count and at-bound count on the training set."""
    x = np.asarray(x)
    if x.shape[0] != model.n_train:
        raise ValueError("training embeddings do not match the model")
    alpha = full_alpha(model)
    grad = rbf_matrix(x, model.support_vectors, model.gamma) @ model.alpha
    bound = model.bound
    at_bound = int(np.count_nonzero(alpha >= bound * (1 - 1e-12)))
    return {
        "max_violation": _violation(alpha, grad, bound),
        "n_support": int(np.count_nonzero(alpha > 0)),
        "n_bounded": at_bound,
        "alpha_sum": float(alpha.sum()),
        "outlier_fraction": float(np.mean(model.rho - grad > 0)),
    }
