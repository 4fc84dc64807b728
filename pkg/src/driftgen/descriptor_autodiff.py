"""Hand-written vector-Jacobian products for the descriptor pipeline.

Only the fixed pipeline (encoder stages plus the five descriptor families)
is differentiated; this is not a general autodiff tape. Nondifferentiable
points use bounded deterministic subgradients: zero at RMS = 0 and std = 0,
the negative-side slope at the rectifier kink.

Every vjp is linear in its cotangent argument, and the family pullbacks are
additive, so cotangents from several families can be accumulated per stage
and swept through the encoder adjoint once.
"""

from __future__ import annotations

import numpy as np

from .drift_field import DriftField
from .feature_bank import (
    BankConfig,
    EncoderConfig,
    SubVolumeBatch,
    encode_with_preactivations,
)


def vjp_energy(b: SubVolumeBatch, g, blocks_per_axis: int = 4) -> np.ndarray:
    """Adjoint of per-block RMS: d rms / d x_i = x_i / (K * rms).

    ``g`` has shape [N, blocks^3, 1]; an all-zero block propagates a zero
    cotangent (subgradient at the kink of the root).
    """
    g = np.asarray(g, dtype=np.float64)
    n = b.n
    d, h, w = b.patch_shape
    bb = blocks_per_axis
    if d % bb or h % bb or w % bb:
        raise ValueError(f"patch shape {(d, h, w)} not divisible into {bb} blocks per axis")
    if g.shape != (n, bb**3, 1):
        raise ValueError(f"cotangent shape {g.shape} does not match ({n}, {bb ** 3}, 1)")
    x = b.patches.reshape(n, bb, d // bb, bb, h // bb, bb, w // bb)
    xb = x.transpose(0, 1, 3, 5, 2, 4, 6).reshape(n, bb**3, -1)
    k = xb.shape[2]
    rms = np.sqrt(np.mean(xb**2, axis=2, keepdims=True))
    safe = np.where(rms > 0, rms, 1.0)
    cot = np.where(rms > 0, g * xb / (k * safe), 0.0)
    cot = cot.reshape(n, bb, bb, bb, d // bb, h // bb, w // bb)
    return cot.transpose(0, 1, 4, 2, 5, 3, 6).reshape(n, d, h, w)


def vjp_pooling_and_stats(stage, g, kind: str, window: int | None = None) -> np.ndarray:
    """Adjoint of the stage-level aggregations.

    kind="stats": ``g`` is [N, 2C] (mean cotangents then std cotangents) for
    one stage; the mean adjoint spreads g/K uniformly and the std adjoint is
    g * (x - mean) / (K * std), zero where std = 0.

    kind="pool": ``g`` is [N, M, C] for non-overlapping ``window`` means; the
    adjoint scatters g / window^3 back over each window.
    """
    x = np.asarray(stage, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.ndim != 5:
        raise ValueError(f"stage must be [N, C, D, H, W], got shape {x.shape}")
    n, c, d, h, w = x.shape
    if kind == "stats":
        if g.shape != (n, 2 * c):
            raise ValueError(f"stats cotangent shape {g.shape} does not match ({n}, {2 * c})")
        k = d * h * w
        g_mean = g[:, :c, None, None, None]
        g_std = g[:, c:, None, None, None]
        mean = x.mean(axis=(2, 3, 4), keepdims=True)
        std = x.std(axis=(2, 3, 4), keepdims=True)
        safe = np.where(std > 0, std, 1.0)
        return g_mean / k + np.where(std > 0, g_std * (x - mean) / (k * safe), 0.0)
    if kind == "pool":
        if window is None or window < 1:
            raise ValueError(f"pool adjoint needs a positive window, got {window}")
        if d % window or h % window or w % window:
            raise ValueError(f"stage dims {(d, h, w)} not divisible by window {window}")
        m = (d // window) * (h // window) * (w // window)
        if g.shape != (n, m, c):
            raise ValueError(f"pool cotangent shape {g.shape} does not match ({n}, {m}, {c})")
        gmap = g.transpose(0, 2, 1).reshape(n, c, d // window, h // window, w // window)
        gmap = gmap / float(window**3)
        out = np.broadcast_to(
            gmap[:, :, :, None, :, None, :, None],
            (n, c, d // window, window, h // window, window, w // window, window),
        )
        return out.reshape(n, c, d, h, w).copy()
    raise ValueError(f"unknown kind {kind!r}, expected 'stats' or 'pool'")


def _conv3d_strided_adjoint(
    g_out: np.ndarray, kernels: np.ndarray, stride: int, in_spatial
) -> np.ndarray:
    # adjoint of the padded strided cross-correlation in feature_bank
    n = g_out.shape[0]
    c_in = kernels.shape[1]
    k = kernels.shape[-1]
    p = (k - 1) // 2
    d, h, w = in_spatial
    pp, qq, rr = g_out.shape[2:]
    gxp = np.zeros((n, c_in, d + 2 * p, h + 2 * p, w + 2 * p), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                t = np.einsum("nopqr,oc->ncpqr", g_out, kernels[:, :, i, j, l], optimize=True)
                gxp[
                    :,
                    :,
                    i : i + stride * pp : stride,
                    j : j + stride * qq : stride,
                    l : l + stride * rr : stride,
                ] += t
    return gxp[:, :, p : p + d, p : p + h, p : p + w]


def _encoder_backward(
    pre: list[np.ndarray], stage_cotangents, cfg: EncoderConfig, patch_shape
) -> np.ndarray:
    kernels = cfg.kernels()
    n_stages = len(kernels)
    spatials = [pre[s].shape[2:] for s in range(n_stages)]
    g = None
    for s in range(n_stages - 1, -1, -1):
        if stage_cotangents[s] is not None:
            cot = np.asarray(stage_cotangents[s], dtype=np.float64)
            if cot.shape != pre[s].shape:
                raise ValueError(
                    f"stage {s} cotangent shape {cot.shape} does not match {pre[s].shape}"
                )
            g = cot if g is None else g + cot
        if g is None:
            continue
        g = g * np.where(pre[s] > 0, 1.0, cfg.leaky_slope)
        in_spatial = patch_shape if s == 0 else spatials[s - 1]
        g = _conv3d_strided_adjoint(g, kernels[s], cfg.stride, in_spatial)
    if g is None:
        raise ValueError("no stage cotangent provided")
    return g[:, 0]


def vjp_encoder(b: SubVolumeBatch, stage_cotangents, cfg: EncoderConfig) -> np.ndarray:
    """Pull per-stage cotangents back to voxel space.

    ``stage_cotangents`` is a sequence with one entry per encoder stage
    (``None`` for stages without a cotangent); entries are cotangents of the
    post-activation stage outputs. Returns the [N, d, h, w] voxel cotangent.
    """
    if len(stage_cotangents) != len(cfg.channels):
        raise ValueError(
            f"expected {len(cfg.channels)} stage cotangents, got {len(stage_cotangents)}"
        )
    _, pre = encode_with_preactivations(b, cfg)
    return _encoder_backward(pre, list(stage_cotangents), cfg, b.patch_shape)


class DifferentiablePipeline:
    """Patch batch -> per-family features, with the matching vjp.

    The vjp is linear in the cotangents and additive over families: all
    family cotangents are accumulated into per-stage cotangents first, then
    one encoder backward sweep produces the voxel-space cotangent.
    """

    def __init__(self, cfg: BankConfig):
        self.cfg = cfg

    def forward(self, patches: SubVolumeBatch) -> dict:
        from .feature_bank import _family_features, _needs_encoder, encode

        stages = encode(patches, self.cfg.encoder) if _needs_encoder(self.cfg) else None
        return _family_features(patches, stages, self.cfg)

    def vjp(self, patches: SubVolumeBatch, cotangents: dict) -> np.ndarray:
        cfg = self.cfg
        unknown = [f for f in cotangents if f not in cfg.families]
        if unknown:
            raise ValueError(f"cotangents for families {unknown} not enabled in config")
        patch_cot = np.zeros_like(patches.patches)
        needs_encoder = any(f != "energy" for f in cotangents)
        if "energy" in cotangents:
            patch_cot += vjp_energy(patches, cotangents["energy"], cfg.energy_blocks)
        if not needs_encoder:
            return patch_cot
        stages, pre = encode_with_preactivations(patches, cfg.encoder)
        stage_cot: list[np.ndarray | None] = [None] * len(cfg.encoder.channels)

        def add(s, val):
            stage_cot[s] = val if stage_cot[s] is None else stage_cot[s] + val

        for fam, g in cotangents.items():
            g = np.asarray(g, dtype=np.float64)
            if fam == "energy":
                continue
            if fam == "global":
                off = 0
                for s in cfg.global_stages:
                    c_s = stages.stages[s].shape[1]
                    gs = g[:, 0, off : off + 2 * c_s]
                    add(s, vjp_pooling_and_stats(stages.stages[s], gs, kind="stats"))
                    off += 2 * c_s
                if off != g.shape[2]:
                    raise ValueError(
                        f"global cotangent has {g.shape[2]} channels, expected {off}"
                    )
            elif fam == "local":
                deep = stages.stages[-1]
                n, c = deep.shape[:2]
                if g.shape != (n, int(np.prod(deep.shape[2:])), c):
                    raise ValueError(f"local cotangent shape {g.shape} mismatched")
                add(len(stage_cot) - 1, g.transpose(0, 2, 1).reshape(deep.shape))
            elif fam in ("spatial_2", "spatial_4"):
                win = 2 if fam == "spatial_2" else 4
                s = cfg.spatial_stage
                add(s, vjp_pooling_and_stats(stages.stages[s], g, kind="pool", window=win))
        if any(c is not None for c in stage_cot):
            patch_cot += _encoder_backward(pre, stage_cot, cfg.encoder, patches.patch_shape)
        return patch_cot


def pullback_drift_gradient(
    patches: SubVolumeBatch, fields: list[DriftField], cfg: BankConfig
) -> np.ndarray:
    """Voxel-space gradient of the summed drift losses.

    Each family contributes the pullback of -V / S (the drift-loss gradient
    on the normalized features, carried to raw features with the scale
    treated as a constant). Fields must come from the same bank config.
    """
    for f in fields:
        if f.family_id not in cfg.families:
            raise ValueError(f"field family {f.family_id!r} not enabled in config")
    pipeline = DifferentiablePipeline(cfg)
    cotangents = {f.family_id: -f.v / f.scale for f in fields}
    if not cotangents:
        return np.zeros_like(patches.patches)
    return pipeline.vjp(patches, cotangents)
