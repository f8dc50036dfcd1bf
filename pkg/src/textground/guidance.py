"""Toy latent diffusion with training-free spatial steering.

A small U-shaped denoiser exposes the attention matrix of its first
up-block cross-attention over the appearance text.  During the early
sampling steps the latent is nudged down the gradient of an energy that
measures how much of that attention falls outside a mask derived from
the guidance map.  Denoiser weights are never touched by the guidance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, GuidanceEmptyError, NumericError, ShapeError
from .fusion import resize_bilinear
from .nn import (LayerNorm, Linear, ParameterRegistry, TransformerBlock,
                 merge_heads, sinusoidal_positional_encoding, split_heads)

__all__ = [
    "NoiseSchedule",
    "build_noise_schedule",
    "ToyDenoiser",
    "GuidanceConfig",
    "resize_guidance",
    "activate_and_dilate",
    "energy",
    "in_mask_fraction",
    "guided_latent_update",
    "sample_with_guidance",
    "SampleTrace",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels: beta_t and the cumulative signal alpha_bar_t.

    Index 0 corresponds to t=1; alpha_bar is strictly decreasing.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)


def build_noise_schedule(t_steps: int) -> NoiseSchedule:
    """Linear beta ramp 1e-4 .. 0.02 with cumulative products."""
    if t_steps < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got {t_steps}")
    betas = np.linspace(1e-4, 0.02, t_steps)
    alpha_bars = np.cumprod(1.0 - betas)
    if not np.all(np.diff(alpha_bars) < 0):
        raise ConfigError("noise schedule must make alpha_bar strictly decreasing")
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class GuidanceConfig:
    """Strength and scheduling of the backward guidance."""

    eta: float = 35.0
    guided_steps: int = 10
    repeats: int = 3
    beta_frac: float = 0.5
    retry_beta_frac: float = 0.25
    dilation: str = "bbox"  # or "morph-k"
    morph_k: int = 3
    use_activation: bool = True  # off: raw resized map as a soft mask
    use_dilation: bool = True  # off: threshold only
    enabled: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError(f"guidance strength must be nonnegative, got {self.eta}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be at least 1, got {self.repeats}")
        if self.dilation not in ("bbox", "morph-k"):
            raise ConfigError(f"unknown dilation mode: {self.dilation}")
        if not (0.0 < self.beta_frac):
            raise ConfigError(f"threshold fraction must be positive, got {self.beta_frac}")


# ---------------------------------------------------------------------------
# denoiser


class ToyDenoiser:
    """Minimal U-shaped noise predictor with one text cross-attention.

    Tokens are embedded per latent cell, pooled 2x2 for a coarse
    self-attention block, unpooled, and fused with the appearance tokens
    through cross-attention whose queries project the *input latent*
    directly; that block's attention matrix is the returned S_t.
    """

    def __init__(self, reg: ParameterRegistry, latent_channels: int, text_dim: int,
                 rng: np.random.Generator, width: int = 32, heads: int = 2,
                 name: str = "denoiser"):
        if width % heads:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.channels = latent_channels
        self.width = width
        self.heads = heads
        self.embed = Linear(reg, f"{name}.embed", latent_channels, width, rng)
        self.t_proj = Linear(reg, f"{name}.t_proj", width, width, rng)
        self.down = Linear(reg, f"{name}.down", 4 * width, width, rng)
        self.down_block = TransformerBlock(reg, f"{name}.down_block", width, heads, rng, mlp_ratio=2.0)
        self.mid_block = TransformerBlock(reg, f"{name}.mid_block", width, heads, rng, mlp_ratio=2.0)
        self.up = Linear(reg, f"{name}.up", width, 4 * width, rng)
        self.wq = Linear(reg, f"{name}.xattn.wq", latent_channels, width, rng)
        self.wk = Linear(reg, f"{name}.xattn.wk", text_dim, width, rng)
        self.wv = Linear(reg, f"{name}.xattn.wv", text_dim, width, rng)
        self.wo = Linear(reg, f"{name}.xattn.wo", width, width, rng)
        self.out_norm = LayerNorm(reg, f"{name}.out_norm", width)
        self.head = Linear(reg, f"{name}.head", width, latent_channels, rng)

    def forward(self, z: Tensor, t: int, text_appearance: Tensor,
                schedule: NoiseSchedule) -> tuple[Tensor, Tensor]:
        """(latent [h,w,c], step, L_a [Ta,C_L]) -> (noise prediction, S_t [hw, Ta]).

        S_t is the up-block cross-attention averaged over heads; its rows
        are a softmax over the appearance tokens.
        """
        z = ad.as_tensor(z)
        h, w, c = z.shape
        if c != self.channels:
            raise ShapeError(f"latent carries {c} channels, denoiser expects {self.channels}")
        if h % 2 or w % 2:
            raise ShapeError(f"latent grid {h}x{w} must be even for the down block")
        ta = text_appearance.shape[0]
        if ta == 0:
            raise DataError("no appearance tokens: nothing to denoise toward")

        z_flat = ad.reshape(z, (h * w, c))
        pos = sinusoidal_positional_encoding(h * w, self.width)
        t_row = sinusoidal_positional_encoding(schedule.steps + 1, self.width)[t : t + 1, :]
        x = ad.add(ad.add(self.embed(z_flat), pos), self.t_proj(t_row))

        # down: 2x2 token pooling via channel concat
        grid = ad.reshape(x, (h, w, self.width))
        pooled = ad.reshape(
            ad.transpose(ad.reshape(grid, (h // 2, 2, w // 2, 2, self.width)), (0, 2, 1, 3, 4)),
            ((h // 2) * (w // 2), 4 * self.width),
        )
        d = self.down_block(self.down(pooled))
        d = self.mid_block(d)

        # up: unpool back to the full grid and add the skip
        u = ad.reshape(self.up(d), ((h // 2) * (w // 2), 4, self.width))
        u = ad.reshape(
            ad.transpose(ad.reshape(u, (h // 2, w // 2, 2, 2, self.width)), (0, 2, 1, 3, 4)),
            (h * w, self.width),
        )
        u = ad.add(u, x)

        # cross-attention over appearance tokens; queries from the raw latent
        q = split_heads(self.wq(z_flat), self.heads)
        k = split_heads(self.wk(text_appearance), self.heads)
        v = split_heads(self.wv(text_appearance), self.heads)
        scale = 1.0 / math.sqrt(self.width // self.heads)
        s_heads = ad.softmax(ad.mul(ad.matmul_any(q, ad.swapaxes(k, -1, -2)), scale), axis=-1)
        u = ad.add(u, self.wo(merge_heads(ad.matmul_any(s_heads, v))))

        eps = ad.reshape(self.head(self.out_norm(u)), (h, w, c))
        s_t = ad.tmean(s_heads, axis=0)
        return eps, s_t


# ---------------------------------------------------------------------------
# guidance math


def resize_guidance(g: Tensor, target_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of the guidance map, renormalized back to max 1."""
    g = ad.as_tensor(g)
    if g.shape == tuple(target_hw):
        return g
    resized = resize_bilinear(g, target_hw)
    return ad.div(resized, ad.tmax(resized))


def activate_and_dilate(g_hat: np.ndarray, beta_frac: float = 0.5, mode: str = "bbox",
                        morph_k: int = 3, use_dilation: bool = True) -> np.ndarray:
    """Binary mask from a normalized map: threshold, then widen.

    Thresholding keeps cells strictly above beta_frac * max.  Widening
    either fills the bounding rectangle of the kept cells (default) or
    applies a k x k square morphological dilation.
    """
    g = np.asarray(g_hat, dtype=np.float64)
    thresh = beta_frac * g.max()
    mask = (g > thresh).astype(np.float64)
    if mask.sum() == 0:
        raise GuidanceEmptyError(f"no cell above threshold {thresh:.6g}; lower the threshold fraction")
    if not use_dilation:
        return mask
    if mode == "bbox":
        rows, cols = np.nonzero(mask)
        out = np.zeros_like(mask)
        out[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1] = 1.0
        return out
    if mode == "morph-k":
        h, w = mask.shape
        out = np.zeros_like(mask)
        r = morph_k // 2
        for i, j in zip(*np.nonzero(mask)):
            out[max(0, i - r) : min(h, i + r + 1), max(0, j - r) : min(w, j + r + 1)] = 1.0
        return out
    raise ConfigError(f"unknown dilation mode: {mode}")


def energy(s_t: Tensor, mask: np.ndarray) -> Tensor:
    """Placement energy: mean over tokens of (1 - in-mask column mass)^2.

    The mask weights spatial cells; each text token's attention column is
    measured separately because the rows of s_t are key-normalized, which
    makes the pooled row ratio a constant |mask|/N independent of the
    latent.  Column ratios keep the spatial concentration visible, vanish
    exactly when all mass sits inside the mask, and are invariant to
    rescaling s_t because numerator and denominator scale together.
    """
    s_t = ad.as_tensor(s_t)
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    if s_t.ndim != 2 or s_t.shape[0] != m.size:
        raise ShapeError(f"attention {s_t.shape} does not cover {m.size} spatial cells")
    num = ad.tsum(ad.mul(s_t, Tensor(m[:, None])), axis=0)  # [T]
    den = ad.tsum(s_t, axis=0)
    miss = ad.sub(1.0, ad.div(num, den))
    return ad.tmean(ad.mul(miss, miss))


def in_mask_fraction(s_t: np.ndarray, mask: np.ndarray) -> float:
    """Mean over tokens of each attention column's in-mask mass share."""
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    s = np.asarray(s_t, dtype=np.float64)
    return float(((s * m[:, None]).sum(axis=0) / s.sum(axis=0)).mean())


def build_mask(g: Tensor, target_hw: tuple[int, int], cfg: GuidanceConfig) -> np.ndarray:
    """Guidance map -> spatial mask at the attention resolution.

    Follows the configured activation policy, retrying once with the
    fallback threshold when nothing survives; without activation the
    resized map itself acts as a soft mask.
    """
    g_hat = resize_guidance(g, target_hw)
    if not cfg.use_activation:
        return np.array(g_hat.data, copy=True)
    try:
        return activate_and_dilate(g_hat.data, cfg.beta_frac, cfg.dilation, cfg.morph_k, cfg.use_dilation)
    except GuidanceEmptyError:
        return activate_and_dilate(g_hat.data, cfg.retry_beta_frac, cfg.dilation, cfg.morph_k, cfg.use_dilation)


def guided_latent_update(z: np.ndarray, t: int, mask: np.ndarray, denoiser: ToyDenoiser,
                         text_appearance: Tensor, schedule: NoiseSchedule,
                         cfg: GuidanceConfig) -> np.ndarray:
    """Push the latent toward in-mask attention: repeated gradient steps.

    Each repeat differentiates the energy through the denoiser's attention
    chain at the current latent and applies
    z <- z - eta * sqrt((1 - alpha_bar_t) / alpha_bar_t) * grad.
    """
    a_bar = schedule.alpha_bars[t - 1]
    coeff = cfg.eta * math.sqrt((1.0 - a_bar) / a_bar)
    out = np.array(z, copy=True)
    for _ in range(cfg.repeats):
        def objective(leaf: Tensor) -> Tensor:
            _, s_t = denoiser.forward(leaf, t, text_appearance, schedule)
            return energy(s_t, mask)

        grad = ad.gradient(objective, Tensor(out))
        out = out - coeff * grad.data
    return out


@dataclass
class SampleTrace:
    """Per-step record of the guidance's effect during sampling."""

    rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    guided_steps: int = 0
    empty_retries: int = 0

    def lines(self) -> str:
        return "".join(
            f"{step}\t{e_before:.12g}\t{e_after:.12g}\t{frac:.12g}\n"
            for step, e_before, e_after, frac in self.rows
        )


def sample_with_guidance(z_init: np.ndarray, g: Tensor, text_appearance: Tensor,
                         schedule: NoiseSchedule, cfg: GuidanceConfig,
                         denoiser: ToyDenoiser, seed: int) -> tuple[np.ndarray, SampleTrace]:
    """Ancestral denoising from z_init with early-step backward guidance.

    The first ``guided_steps`` steps (largest t) apply guided_latent_update
    before each denoise step.  Deterministic given the seed.  Returns the
    final latent and the per-step trace.
    """
    t_total = schedule.steps
    if cfg.guided_steps > t_total:
        raise ConfigError(f"guided steps {cfg.guided_steps} exceed the schedule length {t_total}")
    h, w, c = z_init.shape
    mask = build_mask(g, (h, w), cfg)
    z = np.array(z_init, dtype=np.float64, copy=True)
    trace = SampleTrace()

    for t in range(t_total, 0, -1):
        step_index = t_total - t  # 0-based from the start of sampling
        guided = cfg.enabled and cfg.eta > 0 and step_index < cfg.guided_steps

        if guided:
            _, s0 = denoiser.forward(Tensor(z), t, text_appearance, schedule)
            e_before = energy(s0, mask).item()
            z = guided_latent_update(z, t, mask, denoiser, text_appearance, schedule, cfg)
            trace.guided_steps += 1
            eps_t, s_t = denoiser.forward(Tensor(z), t, text_appearance, schedule)
            e_after = energy(s_t, mask).item()
        else:
            eps_t, s_t = denoiser.forward(Tensor(z), t, text_appearance, schedule)
            e_before = e_after = energy(s_t, mask).item()
        frac = in_mask_fraction(s_t.data, mask)
        trace.rows.append((step_index, e_before, e_after, frac))

        beta = schedule.betas[t - 1]
        a_bar = schedule.alpha_bars[t - 1]
        z = (z - beta / math.sqrt(1.0 - a_bar) * eps_t.data) / math.sqrt(1.0 - beta)
        if t > 1:
            a_bar_prev = schedule.alpha_bars[t - 2]
            sigma = math.sqrt((1.0 - a_bar_prev) / (1.0 - a_bar) * beta)
            noise = np.random.default_rng([seed, t]).standard_normal(z.shape)
            z = z + sigma * noise
        if not np.all(np.isfinite(z)):
            raise NumericError(f"latent became non-finite at step {step_index}")
    return z, trace
