"""Model and training configuration.

Channel schedules follow one rule everywhere: channel counts double on every
downsampling step and halve on every upsampling step, clamped to the
[ch_min, ch_max] range of the owning network. The first convolution of each
block is the one that changes the channel count.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

from .errors import ConfigError

# Inference-generator channel bounds per capacity tier. The texture
# generator, embedder and discriminator keep the full-capacity bounds.
CAPACITY_TIERS = {
    "small": (16, 128),
    "medium": (32, 256),
    "large": (64, 512),
}


def upsample_schedule(n_blocks: int, ch_min: int, ch_max: int) -> list[tuple[int, int]]:
    """(in_ch, out_ch) per upsampling block, from 4x4 up to full resolution."""
    def clamp(c):
        return max(ch_min, min(ch_max, c))

    return [
        (clamp(ch_min * 2 ** (n_blocks - k)), clamp(ch_min * 2 ** (n_blocks - 1 - k)))
        for k in range(n_blocks)
    ]


def downsample_schedule(n_blocks: int, ch_min: int, ch_max: int) -> list[tuple[int, int]]:
    """(in_ch, out_ch) per downsampling block, from full resolution down."""
    def clamp(c):
        return max(ch_min, min(ch_max, c))

    return [
        (clamp(ch_min * 2 ** k), clamp(ch_min * 2 ** (k + 1)))
        for k in range(n_blocks)
    ]


@dataclass(frozen=True)
class ModelConfig:
    """Static architecture description shared by all networks.

    image_size and texture_size are both 4 * 2**n_blocks; a single block
    count fixes both resolutions.
    """

    image_size: int = 256
    n_blocks: int = 6
    n_keypoints: int = 68
    capacity: str = "medium"
    tex_ch: tuple[int, int] = (64, 512)
    inf_ch: tuple[int, int] | None = None
    dis_ch: tuple[int, int] = (64, 512)
    upd_ch: tuple[int, int] = (64, 128)
    mlp_width: int = 256
    adaptive_hidden: int = 256

    def __post_init__(self):
        if self.capacity not in CAPACITY_TIERS:
            raise ConfigError(f"unknown capacity tier {self.capacity!r}")
        if self.inf_ch is None:
            object.__setattr__(self, "inf_ch", CAPACITY_TIERS[self.capacity])
        if self.image_size != 4 * 2 ** self.n_blocks:
            raise ConfigError(
                f"image_size {self.image_size} must equal 4*2^n_blocks "
                f"= {4 * 2 ** self.n_blocks}"
            )
        for name in ("tex_ch", "inf_ch", "dis_ch", "upd_ch"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi <= 0 or lo > hi:
                raise ConfigError(f"{name} bounds must be positive with min <= max")
        if self.n_keypoints < 2:
            raise ConfigError("need at least two keypoints")

    @property
    def texture_size(self) -> int:
        return self.image_size

    @property
    def pose_dim(self) -> int:
        return 2 * self.n_keypoints

    def texture_blocks(self) -> list[tuple[int, int]]:
        return upsample_schedule(self.n_blocks, *self.tex_ch)

    def inference_blocks(self) -> list[tuple[int, int]]:
        return upsample_schedule(self.n_blocks, *self.inf_ch)

    def embedding_channels(self) -> list[int]:
        """Channel count of each embedding tensor: the input channel count
        of the matching texture-generator block."""
        return [c_in for c_in, _ in self.texture_blocks()]

    def discriminator_blocks(self) -> list[tuple[int, int]]:
        n_down = (self.image_size // 8).bit_length() - 1
        return downsample_schedule(n_down, *self.dis_ch)

    def embedder_blocks(self) -> list[tuple[int, int]]:
        n_down = (self.image_size // 8).bit_length() - 1
        return downsample_schedule(n_down, *self.tex_ch)

    @classmethod
    def desk(cls, image_size: int = 64, n_keypoints: int = 68, **overrides) -> "ModelConfig":
        """Small configuration for CPU-scale runs and tests."""
        n_blocks = (image_size // 4).bit_length() - 1
        kwargs = dict(
            image_size=image_size,
            n_blocks=n_blocks,
            n_keypoints=n_keypoints,
            capacity="medium",
            tex_ch=(16, 64),
            inf_ch=(8, 32),
            dis_ch=(16, 64),
            upd_ch=(8, 32),
            mlp_width=64,
            adaptive_hidden=64,
        )
        kwargs.update(overrides)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("tex_ch", "inf_ch", "dis_ch", "upd_ch"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LossWeights:
    """Weights of the generator-side objective terms."""

    adv: float = 0.5
    pix: float = 10.0
    perc_in: float = 10.0
    perc_face: float = 0.01
    fm: float = 10.0
    seg: float = 10.0
    reg_init: float = 10.0
    reg_decay: float = 0.9
    reg_every: int = 50

    def __post_init__(self):
        for name in ("adv", "pix", "perc_in", "perc_face", "fm", "seg", "reg_init"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size_stage1: int = 48
    batch_size_stage2: int = 32
    iterations_stage1: int = 200
    iterations_stage2: int = 100
    seed: int = 0
    standing_batches: int = 500
    unroll_depth: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    masks_enabled: bool = False
    g_hinge_mode: str = "relativistic"
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size_stage1 < 1 or self.batch_size_stage2 < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.g_hinge_mode not in ("relativistic", "nonsaturating"):
            raise ConfigError(f"unknown g_hinge_mode {self.g_hinge_mode!r}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        kwargs = dict(batch_size_stage1=8, batch_size_stage2=8, standing_batches=50)
        kwargs.update(overrides)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d
