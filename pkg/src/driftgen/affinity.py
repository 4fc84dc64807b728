"""Distance, scale, and affinity computations behind the empirical drift field.

All functions are pure: identical inputs produce bit-identical outputs, and
nothing here touches global state, so everything is safe to evaluate in
parallel across descriptor families, locations, and temperatures.

Shape conventions
-----------------
Feature tensors are ``[N, M, C]``:
  - N: batch samples (queries)
  - M: locations per sample (sub-volumes, spatial sites, pooled windows)
  - C: channels of the descriptor family
Distance and affinity matrices are query-by-candidate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Rows per chunk are capped so the [chunk, m, C] difference tensor stays
# below ~64 MB regardless of the channel count.
_CHUNK_BUDGET = 8_000_000


def _as_float_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class FeatureTriplet:
    """Generated / positive-target / negative-reference features of one family.

    ``h`` holds features of the current generated samples, ``u_pos`` features
    of the paired targets, and ``u_neg`` features of generated reference
    samples drawn from the current model. All three share shape [N, M, C].
    """

    family_id: str
    h: np.ndarray
    u_pos: np.ndarray
    u_neg: np.ndarray

    def __post_init__(self):
        for name in ("h", "u_pos", "u_neg"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 3:
                raise ValueError(f"{name} must have shape [N, M, C], got {a.shape}")
            if min(a.shape) < 1:
                raise ValueError(f"{name} has an empty axis: {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, a)
        if not (self.h.shape == self.u_pos.shape == self.u_neg.shape):
            raise ValueError(
                "triplet tensors must share one shape, got "
                f"{self.h.shape}, {self.u_pos.shape}, {self.u_neg.shape}"
            )

    @property
    def n(self) -> int:
        return self.h.shape[0]

    @property
    def m(self) -> int:
        return self.h.shape[1]

    @property
    def c(self) -> int:
        return self.h.shape[2]


@dataclass(frozen=True)
class DriftConfig:
    """Knobs of the drift-field computation.

    ``temperatures`` are the affinity temperatures (each is multiplied by
    sqrt(C) before scaling distance logits). ``mu_mask`` is added to the
    diagonal of the negative distance matrix to suppress trivial self-matches.
    ``eps`` regularizes the per-temperature RMS normalization: temperature
    fields with RMS well below ``eps`` keep their small magnitude instead of
    being renormalized to unit RMS, which is what lets the aggregate field
    vanish at distribution equilibrium. ``lambda_drift`` is the drift-loss
    weight applied before gradient coordination.
    """

    temperatures: tuple = (0.004, 0.01, 0.04)
    mu_mask: float = 1.0e4
    eps: float = 0.05
    include_mask_in_scale: bool = True
    lambda_drift: float = 3.0e-4

    def __post_init__(self):
        temps = tuple(float(t) for t in self.temperatures)
        if len(temps) == 0:
            raise ValueError("temperatures must be nonempty")
        if any(t <= 0 for t in temps):
            raise ValueError(f"temperatures must be strictly positive, got {temps}")
        object.__setattr__(self, "temperatures", temps)
        if self.mu_mask < 0:
            raise ValueError(f"mu_mask must be nonnegative, got {self.mu_mask}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.lambda_drift < 0:
            raise ValueError(f"lambda_drift must be nonnegative, got {self.lambda_drift}")


def pairwise_distances(a, b) -> np.ndarray:
    """Euclidean distance matrix between the rows of ``a`` and ``b``.

    Computed from explicit row differences (chunked to bound memory), not the
    expanded-square identity, so identical rows give exactly 0.0.
    """
    a = _as_float_matrix(a, "a")
    b = _as_float_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"channel dimensions differ: a has {a.shape[1]}, b has {b.shape[1]}"
        )
    n, c = a.shape
    m = b.shape[0]
    out = np.empty((n, m), dtype=np.float64)
    rows = max(1, _CHUNK_BUDGET // max(1, m * c))
    for i0 in range(0, n, rows):
        i1 = min(n, i0 + rows)
        diff = a[i0:i1, None, :] - b[None, :, :]
        out[i0:i1] = np.sqrt(np.einsum("imc,imc->im", diff, diff))
    return out


def mask_self_matches(d, mu_mask: float) -> np.ndarray:
    """Add ``mu_mask`` to the diagonal of a square distance matrix."""
    d = _as_float_matrix(d, "d")
    if d.shape[0] != d.shape[1]:
        raise ValueError(f"d must be square, got {d.shape}")
    if mu_mask < 0:
        raise ValueError(f"mu_mask must be nonnegative, got {mu_mask}")
    out = d.copy()
    idx = np.arange(d.shape[0])
    out[idx, idx] += mu_mask
    return out


def global_scale(
    d_pos,
    d_neg_masked,
    c_d: int,
    include_mask: bool,
    mu_mask: float,
    eps: float = 1e-12,
) -> float:
    """Global distance scale: mean of all pooled distances over sqrt(C).

    ``d_neg_masked`` is expected to carry the mu_mask diagonal already. With
    ``include_mask=False`` that diagonal contribution is removed before
    averaging; keeping it inflates the scale, which flattens the normalized
    distance range and yields flatter affinities downstream. A batch of
    all-zero distances clamps the scale to ``eps``.
    """
    d_pos = _as_float_matrix(d_pos, "d_pos")
    d_neg = _as_float_matrix(d_neg_masked, "d_neg_masked")
    if c_d < 1:
        raise ValueError(f"c_d must be >= 1, got {c_d}")
    total = d_pos.sum() + d_neg.sum()
    if not include_mask:
        if d_neg.shape[0] != d_neg.shape[1]:
            raise ValueError("mask removal requires a square d_neg_masked")
        total -= mu_mask * d_neg.shape[0]
    mean = total / (d_pos.size + d_neg.size)
    s = mean / np.sqrt(float(c_d))
    if not s > 0.0:
        s = float(eps)
    return float(s)


def normalize_triplet(t: FeatureTriplet, s: float) -> FeatureTriplet:
    """Divide every feature tensor of the triplet by the scale ``s``."""
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    return FeatureTriplet(t.family_id, t.h / s, t.u_pos / s, t.u_neg / s)


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=axis, keepdims=True)


def joint_affinity(z_pos, z_neg) -> np.ndarray:
    """Bidirectional softmax affinity over concatenated candidate logits.

    ``z_pos`` and ``z_neg`` are the temperature-scaled negative distance
    logits (-D/T) of the positive and negative candidate sets, each [N, N].
    The [N, 2N] concatenation is softmaxed along rows (over the 2N
    candidates) and along columns (over the N queries); the affinity is the
    elementwise geometric mean of the two. Both softmaxes subtract the
    per-row / per-column max before exponentiating.
    """
    z_pos = _as_float_matrix(z_pos, "z_pos")
    z_neg = _as_float_matrix(z_neg, "z_neg")
    if z_pos.shape != z_neg.shape:
        raise ValueError(f"logit shapes differ: {z_pos.shape} vs {z_neg.shape}")
    z = np.concatenate([z_pos, z_neg], axis=1)
    return np.sqrt(_softmax(z, axis=1) * _softmax(z, axis=0))


def push_pull_weights(a_pos, a_neg) -> tuple[np.ndarray, np.ndarray]:
    """Cross push-pull weights from the split halves of a joint affinity.

    Per query row i, the pull weights are the positive affinities scaled by
    that row's total negative response, and vice versa:

        w_pos[i, j] = a_pos[i, j] * sum_k a_neg[i, k]
        w_neg[i, j] = a_neg[i, j] * sum_k a_pos[i, k]
    """
    a_pos = _as_float_matrix(a_pos, "a_pos")
    a_neg = _as_float_matrix(a_neg, "a_neg")
    if a_pos.shape != a_neg.shape:
        raise ValueError(f"affinity shapes differ: {a_pos.shape} vs {a_neg.shape}")
    if (a_pos < 0).any() or (a_neg < 0).any():
        raise ValueError("affinity entries must be nonnegative")
    s_pos = a_pos.sum(axis=1)
    s_neg = a_neg.sum(axis=1)
    return a_pos * s_neg[:, None], a_neg * s_pos[:, None]
