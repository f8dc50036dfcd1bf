"""Hierarchical windowed-attention image encoder/decoder.

The encoder splits an RGB image into 4x4 patches, runs four stages of
non-overlapping window self-attention with patch merging between stages,
and compresses a chosen stage's features into a latent through a trainable
patch-expanding layer.  The decoder mirrors the encoder.  Window shifting
is deliberately omitted; windows are plain and disjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ConstraintError, ShapeError
from .nn import Linear, ParameterRegistry, TransformerBlock

__all__ = [
    "StageConfig",
    "FeatureMap",
    "Backbone",
    "partition_patches",
    "unpartition_patches",
    "merge_neighborhoods",
    "split_neighborhoods",
    "expand_tokens",
    "collapse_tokens",
    "window_partition",
    "window_unpartition",
    "stage_grid",
    "SOURCE_STAGE_BY_FACTOR",
]

# Downsampling factor f selects which stage's features feed the latent.
SOURCE_STAGE_BY_FACTOR = {2: 2, 4: 3, 8: 4}

PATCH = 4  # pixels per patch side


@dataclass(frozen=True)
class StageConfig:
    """Depth, window size, head counts, and widths for the four stages."""

    layers: tuple[int, int, int, int] = (2, 2, 6, 2)
    window: int = 7
    heads: tuple[int, int, int, int] = (3, 6, 12, 24)
    channels: tuple[int, int, int, int] = (96, 192, 384, 768)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for i in range(3):
            if self.channels[i + 1] != 2 * self.channels[i]:
                raise ConfigError(f"stage channels must double, got {self.channels}")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ConfigError(f"heads {h} do not divide channels {c}")

    @staticmethod
    def desk() -> "StageConfig":
        """Small widths for quick experiments and tests."""
        return StageConfig(layers=(1, 1, 1, 1), window=4, heads=(2, 4, 4, 8),
                           channels=(32, 64, 128, 256), mlp_ratio=2.0)


@dataclass
class FeatureMap:
    """One stage's output on its grid."""

    stage: int
    data: Tensor  # [H_i, W_i, C_i]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def stage_grid(height: int, width: int, stage: int) -> tuple[int, int]:
    """Grid of stage ``stage`` for an input of the given pixel size."""
    d = PATCH * 2 ** (stage - 1)
    return height // d, width // d


# ---------------------------------------------------------------------------
# pure rearranges (no parameters)


def partition_patches(img: Tensor, patch: int = PATCH) -> Tensor:
    """[H, W, 3] -> [H/p, W/p, p*p*3] raster-ordered patch vectors."""
    img = ad.as_tensor(img)
    h, w, c = img.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    x = ad.reshape(img, (h // patch, patch, w // patch, patch, c))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (h // patch, w // patch, patch * patch * c))


def unpartition_patches(tokens: Tensor, patch: int = PATCH, channels: int = 3) -> Tensor:
    """Inverse of partition_patches: [h, w, p*p*c] -> [h*p, w*p, c]."""
    tokens = ad.as_tensor(tokens)
    h, w, d = tokens.shape
    if d != patch * patch * channels:
        raise ShapeError(f"token dim {d} is not {patch}x{patch}x{channels}")
    x = ad.reshape(tokens, (h, w, patch, patch, channels))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (h * patch, w * patch, channels))


def merge_neighborhoods(x: Tensor) -> Tensor:
    """Concatenate each 2x2 neighborhood: [H, W, C] -> [H/2, W/2, 4C]."""
    x = ad.as_tensor(x)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"feature grid {h}x{w} must be even to merge")
    y = ad.reshape(x, (h // 2, 2, w // 2, 2, c))
    y = ad.transpose(y, (0, 2, 1, 3, 4))
    return ad.reshape(y, (h // 2, w // 2, 4 * c))


def split_neighborhoods(x: Tensor) -> Tensor:
    """Inverse of merge_neighborhoods: [h, w, 4C] -> [2h, 2w, C]."""
    x = ad.as_tensor(x)
    h, w, d = x.shape
    if d % 4:
        raise ShapeError(f"channel count {d} is not 4x anything")
    y = ad.reshape(x, (h, w, 2, 2, d // 4))
    y = ad.transpose(y, (0, 2, 1, 3, 4))
    return ad.reshape(y, (2 * h, 2 * w, d // 4))


def expand_tokens(x: Tensor, target_channels: int) -> Tensor:
    """Rearrange each 16*C_t token vector into a 4x4 block: [h, w, 16C_t] -> [4h, 4w, C_t]."""
    x = ad.as_tensor(x)
    h, w, d = x.shape
    if d != 16 * target_channels:
        raise ShapeError(f"token dim {d} is not 16x target channels {target_channels}")
    y = ad.reshape(x, (h, w, 4, 4, target_channels))
    y = ad.transpose(y, (0, 2, 1, 3, 4))
    return ad.reshape(y, (4 * h, 4 * w, target_channels))


def collapse_tokens(x: Tensor) -> Tensor:
    """Inverse of expand_tokens: [4h, 4w, C_t] -> [h, w, 16C_t]."""
    x = ad.as_tensor(x)
    h, w, c = x.shape
    if h % 4 or w % 4:
        raise ShapeError(f"latent grid {h}x{w} not divisible by 4")
    y = ad.reshape(x, (h // 4, 4, w // 4, 4, c))
    y = ad.transpose(y, (0, 2, 1, 3, 4))
    return ad.reshape(y, (h // 4, w // 4, 16 * c))


def window_partition(x: Tensor, window: int) -> tuple[Tensor, tuple[int, int]]:
    """[H, W, C] -> ([num_windows, window*window, C], padded grid).

    Grids not divisible by the window size are zero-padded on the
    bottom/right; the caller crops after unpartitioning.
    """
    x = ad.as_tensor(x)
    h, w, c = x.shape
    ph = (window - h % window) % window
    pw = (window - w % window) % window
    if ph or pw:
        x = ad.pad(x, ((0, ph), (0, pw), (0, 0)))
    hh, ww = h + ph, w + pw
    y = ad.reshape(x, (hh // window, window, ww // window, window, c))
    y = ad.transpose(y, (0, 2, 1, 3, 4))
    y = ad.reshape(y, ((hh // window) * (ww // window), window * window, c))
    return y, (hh, ww)


def window_unpartition(windows: Tensor, window: int, padded: tuple[int, int],
                       crop: tuple[int, int]) -> Tensor:
    """Inverse of window_partition, cropping any padding back off."""
    hh, ww = padded
    c = windows.shape[-1]
    y = ad.reshape(windows, (hh // window, ww // window, window, window, c))
    y = ad.transpose(y, (0, 2, 1, 3, 4))
    y = ad.reshape(y, (hh, ww, c))
    h, w = crop
    if (h, w) != (hh, ww):
        y = y[:h, :w, :]
    return y


# ---------------------------------------------------------------------------
# stages


class WindowStage:
    """A stack of window-local transformer blocks at one grid resolution."""

    def __init__(self, reg: ParameterRegistry, name: str, dim: int, heads: int,
                 depth: int, window: int, rng: np.random.Generator, mlp_ratio: float = 4.0):
        self.window = window
        self.blocks = [
            TransformerBlock(reg, f"{name}.block{k}", dim, heads, rng, mlp_ratio)
            for k in range(depth)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        h, w, _ = x.shape
        tokens, padded = window_partition(x, self.window)
        for block in self.blocks:
            tokens = block(tokens)
        return window_unpartition(tokens, self.window, padded, (h, w))


class Backbone:
    """Four-stage encoder with a patch-expanding latent head and a mirror decoder.

    ``factor`` in {2, 4, 8} picks stage 2, 3, or 4 as the latent source;
    the source stage's width must satisfy C_i >= 16 * target_channels so the
    expanding layer does not invent information.
    """

    def __init__(self, reg: ParameterRegistry, cfg: StageConfig, factor: int,
                 target_channels: int, rng: np.random.Generator,
                 decoder_depth: int = 1, name: str = "backbone"):
        if factor not in SOURCE_STAGE_BY_FACTOR:
            raise ConfigError(f"downsampling factor must be one of {sorted(SOURCE_STAGE_BY_FACTOR)}, got {factor}")
        self.cfg = cfg
        self.factor = factor
        self.target_channels = target_channels
        self.source_stage = SOURCE_STAGE_BY_FACTOR[factor]
        src_c = cfg.channels[self.source_stage - 1]
        if src_c < 16 * target_channels:
            raise ConstraintError(
                f"stage {self.source_stage} width {src_c} is below 16 x target channels "
                f"(= {16 * target_channels}); the expanding layer needs C_i >= 16*C_t"
            )

        self.patch_embed = Linear(reg, f"{name}.embed", PATCH * PATCH * 3, cfg.channels[0], rng)
        self.stages = [
            WindowStage(reg, f"{name}.stage{i + 1}", cfg.channels[i], cfg.heads[i],
                        cfg.layers[i], cfg.window, rng, cfg.mlp_ratio)
            for i in range(4)
        ]
        self.merges = [
            Linear(reg, f"{name}.merge{i + 1}", 4 * cfg.channels[i], cfg.channels[i + 1], rng)
            for i in range(3)
        ]
        self.expand = Linear(reg, f"{name}.expand", src_c, 16 * target_channels, rng)

        # Decoder: undo the expansion, then climb back up the stages.
        self.unexpand = Linear(reg, f"{name}.dec.unexpand", 16 * target_channels, src_c, rng)
        self.dec_stages = {
            i: WindowStage(reg, f"{name}.dec.stage{i}", cfg.channels[i - 1], cfg.heads[i - 1],
                           decoder_depth, cfg.window, rng, cfg.mlp_ratio)
            for i in range(1, self.source_stage + 1)
        }
        self.unmerges = {
            i: Linear(reg, f"{name}.dec.unmerge{i}", cfg.channels[i - 1], 4 * cfg.channels[i - 2], rng)
            for i in range(2, self.source_stage + 1)
        }
        self.unembed = Linear(reg, f"{name}.dec.unembed", cfg.channels[0], PATCH * PATCH * 3, rng)

    # -- encoder ---------------------------------------------------------

    def encode_image(self, img: Tensor) -> tuple[Tensor, dict[int, FeatureMap]]:
        """Run all four stages; return (latent, {stage: features}).

        The latent comes from patch-expanding the source stage, so its grid
        is (H/factor) x (W/factor) with ``target_channels`` channels.
        """
        img = ad.as_tensor(img)
        h, w, c = img.shape
        if c != 3:
            raise ShapeError(f"expected a 3-channel image, got {img.shape}")
        if h % 32 or w % 32:
            raise ShapeError(f"image sides must be divisible by 32, got {h}x{w}")
        x = self.patch_embed(partition_patches(img))
        features: dict[int, FeatureMap] = {}
        for i in range(4):
            x = self.stages[i](x)
            features[i + 1] = FeatureMap(stage=i + 1, data=x)
            if i < 3:
                x = self.merges[i](merge_neighborhoods(x))
        src = features[self.source_stage].data
        latent = expand_tokens(self.expand(src), self.target_channels)
        return latent, features

    # -- decoder ---------------------------------------------------------

    def decode_raw(self, latent: Tensor) -> Tensor:
        """Mirror pass without the output clamp; used by training."""
        latent = ad.as_tensor(latent)
        if latent.ndim != 3 or latent.shape[2] != self.target_channels:
            raise ShapeError(f"latent shape {latent.shape} does not carry {self.target_channels} channels")
        x = self.unexpand(collapse_tokens(latent))
        for i in range(self.source_stage, 0, -1):
            x = self.dec_stages[i](x)
            if i > 1:
                x = split_neighborhoods(self.unmerges[i](x))
        return unpartition_patches(self.unembed(x))

    def decode_latent(self, latent: Tensor) -> Tensor:
        """Latent back to an RGB image with values clamped to [0, 1]."""
        raw = self.decode_raw(latent)
        return Tensor(np.clip(raw.data, 0.0, 1.0))
