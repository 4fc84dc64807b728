"""Gradient coordination in the shared output space.

Given per-objective gradients with respect to the shared output, the convex
combination weights minimizing the combined-gradient norm are the solution of
a quadratic program over the probability simplex,

    min_alpha  alpha^T H alpha,   H_ij = <g_i, g_j>,

solved here by projected gradient descent with the sort-and-threshold
Euclidean simplex projection. The two-objective case has a closed form that
doubles as a testing oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GramMatrix:
    """Symmetric PSD matrix of pairwise objective-gradient inner products."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ValueError(f"Gram matrix must be square, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ValueError("Gram matrix contains non-finite entries")
        object.__setattr__(self, "h", h)

    @property
    def k(self) -> int:
        return self.h.shape[0]


@dataclass(frozen=True)
class SimplexWeights:
    """Convex combination coefficients: entries >= 0 summing to 1."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 1 or a.size == 0:
            raise ValueError(f"alpha must be a nonempty vector, got shape {a.shape}")
        if (a < 0).any() or abs(a.sum() - 1.0) > 1e-9:
            raise ValueError(f"alpha is not on the simplex: {a}")
        object.__setattr__(self, "alpha", a)


@dataclass(frozen=True)
class QPOptions:
    """Projected-gradient settings for the simplex QP."""

    max_iters: int = 500
    step: float = 0.0  # 0 selects 1 / (2 ||H||_F + tiny)
    tol: float = 1e-10


def gram_matrix(grads) -> GramMatrix:
    """Gram matrix of a list of equal-length flat gradient vectors."""
    vecs = [np.asarray(g, dtype=np.float64).ravel() for g in grads]
    if len(vecs) == 0:
        raise ValueError("need at least one gradient")
    length = vecs[0].size
    if any(v.size != length for v in vecs):
        raise ValueError(f"gradient lengths differ: {[v.size for v in vecs]}")
    g = np.stack(vecs)
    return GramMatrix(g @ g.T)


def project_to_simplex(v) -> SimplexWeights:
    """Euclidean projection onto the probability simplex (sort-and-threshold)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a non-finite vector")
    s = np.sort(v)[::-1]
    css = np.cumsum(s) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(s - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    alpha = np.maximum(v - theta, 0.0)
    # one renormalization so the sum is 1.0 to the last ulp
    alpha /= alpha.sum()
    return SimplexWeights(alpha)


def solve_simplex_qp(h: GramMatrix, opts: QPOptions | None = None) -> SimplexWeights:
    """Minimize alpha^T H alpha over the simplex by projected gradient descent.

    Starts from the uniform point; the default step 1 / (2 ||H||_F) is below
    the 1/L bound of the quadratic, so the objective is non-increasing across
    iterates. Stops when the iterate moves less than ``tol``. A flat
    objective (identical gradients) keeps the uniform initialization.
    """
    opts = opts or QPOptions()
    hm = h.h
    k = h.k
    step = opts.step
    if step <= 0:
        step = 1.0 / (2.0 * np.linalg.norm(hm) + 1e-12)
    alpha = np.full(k, 1.0 / k)
    for _ in range(opts.max_iters):
        nxt = project_to_simplex(alpha - step * 2.0 * (hm @ alpha)).alpha
        moved = np.linalg.norm(nxt - alpha)
        alpha = nxt
        if moved < opts.tol:
            break
    return SimplexWeights(alpha)


def two_objective_closed_form(g1, g2) -> SimplexWeights:
    """Closed-form minimizer of the two-objective QP (testing oracle).

    alpha_1 = clip(((g2 - g1) . g2) / ||g1 - g2||^2, 0, 1); identical
    gradients return (0.5, 0.5) by convention.
    """
    g1 = np.asarray(g1, dtype=np.float64).ravel()
    g2 = np.asarray(g2, dtype=np.float64).ravel()
    if g1.size != g2.size:
        raise ValueError(f"gradient lengths differ: {g1.size} vs {g2.size}")
    if not (g1.any() or g2.any()):
        raise ValueError("both gradients are zero")
    diff = g2 - g1
    denom = float(diff @ diff)
    if denom == 0.0:
        return SimplexWeights(np.array([0.5, 0.5]))
    a1 = float(np.clip((diff @ g2) / denom, 0.0, 1.0))
    return SimplexWeights(np.array([a1, 1.0 - a1]))


def coordinate(
    grad_fid, grad_drift, lam: float, opts: QPOptions | None = None
) -> tuple[SimplexWeights, np.ndarray]:
    """Coordinate fidelity and drift gradients in the shared output space.

    The drift gradient is pre-scaled by ``lam``, the two-objective QP is
    solved, and the combined gradient alpha_1 * g_fid + alpha_2 * lam *
    g_drift is returned together with the weights.
    """
    g1 = np.asarray(grad_fid, dtype=np.float64).ravel()
    g2 = lam * np.asarray(grad_drift, dtype=np.float64).ravel()
    if g1.size != g2.size:
        raise ValueError(f"gradient lengths differ: {g1.size} vs {g2.size}")
    weights = solve_simplex_qp(gram_matrix([g1, g2]), opts)
    combined = weights.alpha[0] * g1 + weights.alpha[1] * g2
    return weights, combined
