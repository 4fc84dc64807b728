"""Multi-level feature bank over randomly sampled 3-D sub-volumes.

A fixed-seed surrogate encoder (strided 3-D cross-correlations with frozen
random kernels and leaky rectification) stands in for a pretrained feature
extractor: the drift machinery only needs a deterministic, Lipschitz,
differentiable multi-stage feature map. Five descriptor families are drawn
from it:

  energy     per-block RMS intensity of the encoder input     [N, blocks^3, 1]
  global     per-stage channel mean and std                   [N, 1, 2*sum(C_s)]
  local      channel vectors at every deepest-stage site      [N, sites, C_last]
  spatial_2  2x2x2 mean-pooled mid-stage features             [N, windows, C_mid]
  spatial_4  4x4x4 mean-pooled mid-stage features             [N, windows, C_mid]

Everything is pure after construction; encoder kernels are immutable shared
state safe for concurrent reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .affinity import FeatureTriplet

FAMILY_ORDER = ("energy", "global", "local", "spatial_2", "spatial_4")


@dataclass(frozen=True)
class Volume:
    """A 3-D intensity volume, conventionally normalized to [0, 1]."""

    data: np.ndarray
    voxel_size: tuple | None = None

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3 or min(a.shape) < 1:
            raise ValueError(f"volume must be 3-D and nonempty, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("volume contains non-finite entries")
        object.__setattr__(self, "data", a)


@dataclass(frozen=True)
class SubVolumeBatch:
    """Patches cut from a parent volume plus their corner coordinates."""

    patches: np.ndarray  # [N, d, h, w]
    origins: tuple
    seed: int

    def __post_init__(self):
        a = np.asarray(self.patches, dtype=np.float64)
        if a.ndim != 4:
            raise ValueError(f"patches must be [N, d, h, w], got shape {a.shape}")
        object.__setattr__(self, "patches", a)
        object.__setattr__(self, "origins", tuple(tuple(int(v) for v in o) for o in self.origins))

    @property
    def n(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_shape(self) -> tuple:
        return self.patches.shape[1:]


@dataclass(frozen=True)
class EncoderStages:
    """Post-activation feature maps of every encoder stage, shallow to deep."""

    stages: tuple
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))


@dataclass(frozen=True)
class DescriptorFamily:
    """Static shape description of one descriptor family."""

    family_id: str
    m_d: int
    c_d: int


@dataclass(frozen=True)
class EncoderConfig:
    """Fixed-seed surrogate encoder: strided stages with frozen kernels."""

    channels: tuple = (8, 16, 32)
    kernel_size: int = 3
    stride: int = 2
    leaky_slope: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) == 0:
            raise ValueError("encoder needs at least one stage")

    @property
    def total_stride(self) -> int:
        return self.stride ** len(self.channels)

    def kernels(self) -> list[np.ndarray]:
        """Stage kernels, drawn once from the seed and fan-in scaled."""
        rng = np.random.default_rng(self.seed)
        k = self.kernel_size
        out = []
        c_in = 1
        for c_out in self.channels:
            fan_in = c_in * k**3
            out.append(rng.standard_normal((c_out, c_in, k, k, k)) / np.sqrt(fan_in))
            c_in = c_out
        return out


@dataclass(frozen=True)
class BankConfig:
    """Which descriptor families to build and from which encoder stages."""

    families: tuple = FAMILY_ORDER
    energy_blocks: int = 4
    global_stages: tuple = (0, 1, 2)
    spatial_stage: int = 1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        fams = tuple(self.families)
        unknown = [f for f in fams if f not in FAMILY_ORDER]
        if unknown:
            raise ValueError(f"unknown families {unknown}; valid: {FAMILY_ORDER}")
        # keep canonical order regardless of how the caller listed them
        object.__setattr__(self, "families", tuple(f for f in FAMILY_ORDER if f in fams))
        object.__setattr__(self, "global_stages", tuple(int(s) for s in self.global_stages))
        if self.energy_blocks < 1:
            raise ValueError(f"energy_blocks must be >= 1, got {self.energy_blocks}")


def sample_subvolumes(v: Volume, count: int, shape, seed: int) -> SubVolumeBatch:
    """Cut ``count`` patches of ``shape`` at seeded uniform origins.

    The origins depend only on (seed, count, shape, volume dims), so paired
    source/target volumes sampled with the same seed land on identical
    locations.
    """
    shape = tuple(int(s) for s in shape)
    dims = v.data.shape
    if len(shape) != 3:
        raise ValueError(f"patch shape must be a triple, got {shape}")
    if any(s > d for s, d in zip(shape, dims)):
        raise ValueError(f"patch shape {shape} does not fit inside volume {dims}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    origins = np.stack(
        [rng.integers(0, d - s + 1, size=count) for d, s in zip(dims, shape)], axis=1
    )
    patches = np.stack(
        [
            v.data[o[0] : o[0] + shape[0], o[1] : o[1] + shape[1], o[2] : o[2] + shape[2]]
            for o in origins
        ]
    )
    return SubVolumeBatch(patches=patches, origins=tuple(map(tuple, origins)), seed=seed)


def negative_shift(b: SubVolumeBatch) -> SubVolumeBatch:
    """Negative reference batch: patch i is replaced by patch (i+1) mod N."""
    rolled = np.roll(b.patches, -1, axis=0)
    origins = tuple(b.origins[(i + 1) % b.n] for i in range(b.n))
    return SubVolumeBatch(patches=rolled, origins=origins, seed=b.seed)


def _conv3d_strided(x: np.ndarray, kernels: np.ndarray, stride: int) -> np.ndarray:
    # x: [N, C_in, D, H, W], kernels: [C_out, C_in, k, k, k]; zero pad of
    # (k-1)//2 keeps out = in / stride for even inputs.
    k = kernels.shape[-1]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    return np.einsum("ncdhwijk,ocijk->nodhw", win, kernels, optimize=True)


def leaky_rectify(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def encode_with_preactivations(
    b: SubVolumeBatch, cfg: EncoderConfig
) -> tuple[EncoderStages, list[np.ndarray]]:
    """Run the encoder and keep per-stage pre-activations for the adjoint."""
    shape = b.patch_shape
    if any(s % cfg.total_stride != 0 for s in shape):
        raise ValueError(
            f"patch shape {shape} not divisible by cumulative stride {cfg.total_stride}"
        )
    x = b.patches[:, None, :, :, :]
    pre = []
    stages = []
    for kern in cfg.kernels():
        z = _conv3d_strided(x, kern, cfg.stride)
        pre.append(z)
        x = leaky_rectify(z, cfg.leaky_slope)
        stages.append(x)
    return EncoderStages(stages=tuple(stages), seed=cfg.seed), pre


def encode(b: SubVolumeBatch, cfg: EncoderConfig) -> EncoderStages:
    """Deterministic multi-stage feature maps of a patch batch."""
    stages, _ = encode_with_preactivations(b, cfg)
    return stages


def energy_descriptors(b: SubVolumeBatch, blocks_per_axis: int = 4) -> np.ndarray:
    """Per-block RMS intensity of the raw patches, C = 1."""
    n = b.n
    d, h, w = b.patch_shape
    bb = blocks_per_axis
    if d % bb or h % bb or w % bb:
        raise ValueError(f"patch shape {(d, h, w)} not divisible into {bb} blocks per axis")
    x = b.patches.reshape(n, bb, d // bb, bb, h // bb, bb, w // bb)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6).reshape(n, bb**3, -1)
    return np.sqrt(np.mean(x**2, axis=2))[:, :, None]


def global_descriptors(e: EncoderStages, stages=(0, 1, 2)) -> np.ndarray:
    """Spatial mean and population std per channel of the selected stages, M = 1."""
    if len(e.stages) == 0:
        raise ValueError("encoder produced no stages")
    parts = []
    for s in stages:
        fmap = e.stages[s]
        parts.append(fmap.mean(axis=(2, 3, 4)))
        parts.append(fmap.std(axis=(2, 3, 4)))
    return np.concatenate(parts, axis=1)[:, None, :]


def local_descriptors(e: EncoderStages) -> np.ndarray:
    """Channel vector at every spatial site of the deepest stage."""
    if len(e.stages) == 0:
        raise ValueError("encoder produced no stages")
    deepest = e.stages[-1]
    n, c = deepest.shape[:2]
    return deepest.reshape(n, c, -1).transpose(0, 2, 1)


def spatial_descriptors(e: EncoderStages, window: int, stage: int = 1) -> np.ndarray:
    """Non-overlapping window means of one mid-level stage, one location per window."""
    fmap = e.stages[stage]
    n, c, d, h, w = fmap.shape
    if d % window or h % window or w % window:
        raise ValueError(f"stage dims {(d, h, w)} not divisible by window {window}")
    x = fmap.reshape(n, c, d // window, window, h // window, window, w // window, window)
    pooled = x.mean(axis=(3, 5, 7))
    return pooled.reshape(n, c, -1).transpose(0, 2, 1)


def _family_features(patches: SubVolumeBatch, stages: EncoderStages | None, cfg: BankConfig):
    feats = {}
    for fam in cfg.families:
        if fam == "energy":
            feats[fam] = energy_descriptors(patches, cfg.energy_blocks)
        elif fam == "global":
            feats[fam] = global_descriptors(stages, cfg.global_stages)
        elif fam == "local":
            feats[fam] = local_descriptors(stages)
        elif fam == "spatial_2":
            feats[fam] = spatial_descriptors(stages, 2, cfg.spatial_stage)
        elif fam == "spatial_4":
            feats[fam] = spatial_descriptors(stages, 4, cfg.spatial_stage)
    return feats


def _needs_encoder(cfg: BankConfig) -> bool:
    return any(f != "energy" for f in cfg.families)


def build_feature_bank(
    gen: SubVolumeBatch, pos: SubVolumeBatch, neg: SubVolumeBatch, cfg: BankConfig
) -> list[FeatureTriplet]:
    """One FeatureTriplet per enabled family, in canonical family order.

    ``gen`` and ``pos`` must be sampled at identical origins (paired);
    ``neg`` is conventionally the generated batch at shifted indices, see
    ``negative_shift``.
    """
    if not (gen.patch_shape == pos.patch_shape == neg.patch_shape):
        raise ValueError(
            "patch shapes differ across batches: "
            f"{gen.patch_shape}, {pos.patch_shape}, {neg.patch_shape}"
        )
    if not (gen.n == pos.n == neg.n):
        raise ValueError(f"batch sizes differ: {gen.n}, {pos.n}, {neg.n}")
    stages = {}
    if _needs_encoder(cfg):
        for name, batch in (("gen", gen), ("pos", pos), ("neg", neg)):
            stages[name] = encode(batch, cfg.encoder)
    f_gen = _family_features(gen, stages.get("gen"), cfg)
    f_pos = _family_features(pos, stages.get("pos"), cfg)
    f_neg = _family_features(neg, stages.get("neg"), cfg)
    return [
        FeatureTriplet(fam, f_gen[fam], f_pos[fam], f_neg[fam]) for fam in cfg.families
    ]


def bank_families(cfg: BankConfig, patch_shape) -> list[DescriptorFamily]:
    """Shape description of every enabled family for a given patch shape."""
    d, h, w = (int(s) for s in patch_shape)
    stride = cfg.encoder.stride
    dims = []
    cur = (d, h, w)
    for _ in cfg.encoder.channels:
        cur = tuple(s // stride for s in cur)
        dims.append(cur)
    chans = cfg.encoder.channels
    out = []
    for fam in cfg.families:
        if fam == "energy":
            out.append(DescriptorFamily(fam, cfg.energy_blocks**3, 1))
        elif fam == "global":
            out.append(DescriptorFamily(fam, 1, 2 * sum(chans[s] for s in cfg.global_stages)))
        elif fam == "local":
            out.append(DescriptorFamily(fam, int(np.prod(dims[-1])), chans[-1]))
        else:
            win = 2 if fam == "spatial_2" else 4
            sd = dims[cfg.spatial_stage]
            out.append(
                DescriptorFamily(fam, int(np.prod([s // win for s in sd])), chans[cfg.spatial_stage])
            )
    return out
