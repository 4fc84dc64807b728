"""Empirical drift-field assembly and the stop-gradient drift loss.

The field pulls generated features toward paired target features and pushes
them away from the current generated references. One field is computed per
descriptor family; the trainer sums the resulting losses over families.

Pipeline per family (``compute_drift_field``):

  1. global distance matrices on the flattened [N*M, C] feature sets,
     with the negative diagonal masked by mu_mask;
  2. global scale S = mean(pooled distances) / sqrt(C), then tensors / S;
  3. for every temperature tau and location m: distance logits -D/(tau*sqrt(C))
     on the normalized slices, bidirectional softmax affinity, cross
     push-pull weights, local drift W_pos @ u_pos - W_neg @ u_neg;
  4. per-temperature fields are RMS-normalized (plus eps) and summed.

Gradients never flow through S, the affinity weights, or the drifted target;
the drift loss is a regression against a detached target, so its gradient is
exactly the negated field.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .affinity import (
    DriftConfig,
    FeatureTriplet,
    global_scale,
    joint_affinity,
    mask_self_matches,
    normalize_triplet,
    pairwise_distances,
    push_pull_weights,
)


@dataclass(frozen=True)
class DriftField:
    """Per-family drift vectors over the scale-normalized generated features.

    ``scale`` is the global distance scale the features were divided by, and
    ``temperature_norms`` the raw Frobenius norms of each per-temperature
    field before RMS normalization (diagnostics; also needed to pull the
    field's gradient back into unnormalized feature space).
    """

    family_id: str
    v: np.ndarray
    scale: float
    temperature_norms: tuple

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"field must have shape [N, M, C], got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite entries")
        object.__setattr__(self, "v", v)
        object.__setattr__(
            self, "temperature_norms", tuple(float(x) for x in self.temperature_norms)
        )


@dataclass(frozen=True)
class DriftLossResult:
    """Drift regression loss and its exact feature-space gradient."""

    loss: float
    grad_h: np.ndarray


def local_drift(w_pos, w_neg, u_pos, u_neg) -> np.ndarray:
    """Local drift estimate V = w_pos @ u_pos - w_neg @ u_neg."""
    w_pos = np.asarray(w_pos, dtype=np.float64)
    w_neg = np.asarray(w_neg, dtype=np.float64)
    u_pos = np.asarray(u_pos, dtype=np.float64)
    u_neg = np.asarray(u_neg, dtype=np.float64)
    if w_pos.shape != w_neg.shape or w_pos.ndim != 2:
        raise ValueError(f"weight shapes differ: {w_pos.shape} vs {w_neg.shape}")
    if u_pos.shape != u_neg.shape or u_pos.ndim != 2:
        raise ValueError(f"feature shapes differ: {u_pos.shape} vs {u_neg.shape}")
    if w_pos.shape[1] != u_pos.shape[0]:
        raise ValueError(
            f"weights {w_pos.shape} do not align with features {u_pos.shape}"
        )
    if (w_pos < 0).any() or (w_neg < 0).any():
        raise ValueError("weight matrices must be nonnegative")
    return w_pos @ u_pos - w_neg @ u_neg


def aggregate_temperatures(fields, n: int, m_d: int, c_d: int, eps: float) -> np.ndarray:
    """Sum per-temperature fields, each divided by its RMS plus eps.

    The divisor for a field V_tau is ||V_tau||_F / sqrt(N*M*C) + eps, so a
    strong field contributes with roughly unit RMS while a field whose RMS is
    far below eps keeps its (small) magnitude.
    """
    fields = [np.asarray(f, dtype=np.float64) for f in fields]
    if len(fields) == 0:
        raise ValueError("need at least one temperature field")
    shape = (n, m_d, c_d)
    for f in fields:
        if f.shape != shape:
            raise ValueError(f"field shape {f.shape} does not match {shape}")
    root = np.sqrt(float(n * m_d * c_d))
    out = np.zeros(shape, dtype=np.float64)
    for f in fields:
        out += f / (np.linalg.norm(f) / root + eps)
    return out


def compute_drift_field(triplet: FeatureTriplet, cfg: DriftConfig) -> DriftField:
    """Compute the empirical drift field of one descriptor family.

    Returns the field over the normalized features together with the global
    scale and per-temperature norms. With N = 1 the masked negative set is
    effectively empty and the field is attraction-dominated; a warning is
    emitted rather than an error.
    """
    n, m_d, c_d = triplet.n, triplet.m, triplet.c
    if n == 1:
        warnings.warn(
            "drift field with N=1: masked negatives leave no usable candidate, "
            "the field degenerates to pure attraction",
            stacklevel=2,
        )

    h_flat = triplet.h.reshape(-1, c_d)
    d_pos = pairwise_distances(h_flat, triplet.u_pos.reshape(-1, c_d))
    d_neg = mask_self_matches(
        pairwise_distances(h_flat, triplet.u_neg.reshape(-1, c_d)), cfg.mu_mask
    )
    s = global_scale(
        d_pos, d_neg, c_d, cfg.include_mask_in_scale, cfg.mu_mask, eps=cfg.eps
    )
    nt = normalize_triplet(triplet, s)

    sqrt_c = np.sqrt(float(c_d))
    temp_fields = []
    for tau in cfg.temperatures:
        t = tau * sqrt_c
        per_loc = []
        for m in range(m_d):
            h_m = nt.h[:, m, :]
            up_m = nt.u_pos[:, m, :]
            un_m = nt.u_neg[:, m, :]
            dp = pairwise_distances(h_m, up_m)
            dn = mask_self_matches(pairwise_distances(h_m, un_m), cfg.mu_mask)
            a = joint_affinity(-dp / t, -dn / t)
            w_pos, w_neg = push_pull_weights(a[:, :n], a[:, n:])
            per_loc.append(local_drift(w_pos, w_neg, up_m, un_m))
        temp_fields.append(np.stack(per_loc, axis=1))

    v = aggregate_temperatures(temp_fields, n, m_d, c_d, cfg.eps)
    return DriftField(
        family_id=triplet.family_id,
        v=v,
        scale=s,
        temperature_norms=tuple(np.linalg.norm(f) for f in temp_fields),
    )


def continuous_drift_oracle(h, positives, negatives, eps_kernel: float) -> np.ndarray:
    """Continuous-field evaluation at a single point.

    Attraction and repulsion are each a kernel-weighted mean displacement,
    k(x, y) = exp(-||x - y|| / eps_kernel), normalized by the total kernel
    mass of their sample set; the field is attraction minus repulsion. Used
    as a directional sanity reference for the discrete estimator, not as a
    numerical equivalent.
    """
    if eps_kernel <= 0:
        raise ValueError(f"eps_kernel must be positive, got {eps_kernel}")
    h = np.asarray(h, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    if h.ndim != 1 or positives.ndim != 2 or negatives.ndim != 2:
        raise ValueError("h must be a vector, positives/negatives matrices")
    if positives.shape[0] < 1 or negatives.shape[0] < 1:
        raise ValueError("need at least one positive and one negative sample")

    def mean_displacement(samples: np.ndarray) -> np.ndarray:
        disp = samples - h[None, :]
        k = np.exp(-np.sqrt((disp**2).sum(axis=1)) / eps_kernel)
        return (k[:, None] * disp).sum(axis=0) / k.sum()

    return mean_displacement(positives) - mean_displacement(negatives)


def drift_loss(h_norm, v: DriftField) -> DriftLossResult:
    """Stop-gradient regression of the normalized features onto h + V.

    The target detach(h_norm + v) is excluded from differentiation, so the
    loss collapses to 0.5 * ||v||^2 and the gradient with respect to h_norm
    is exactly -v; both are computed by that substitution rather than by
    forming the target, keeping the identities exact in floating point.
    """
    h_norm = np.asarray(h_norm, dtype=np.float64)
    if h_norm.shape != v.v.shape:
        raise ValueError(f"shape mismatch: h {h_norm.shape} vs field {v.v.shape}")
    return DriftLossResult(loss=0.5 * float(np.sum(v.v * v.v)), grad_h=-v.v)
