"""Model assembly from a RunConfig plus the three training loops.

The fusion loop supervises the guidance map with a binary cross-entropy
loss against the rasterized ground-truth box, keeping the visual backbone
frozen so its features can be computed once per scene.  The autoencoder
loop trains reconstruction; the denoiser loop trains noise prediction on
frozen-backbone latents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, FeatureMap, StageConfig, stage_grid
from .checkpoint import registry_state, restore_registry
from .config import RunConfig
from .errors import DataError
from .fusion import FusionBranch, FusionConfig, TextEmbedding, resize_bilinear
from .guidance import ToyDenoiser, build_noise_schedule
from .nn import ParameterRegistry
from .optim import adamw_step
from .synth import BBox, box_coverage, embed_text_stub

__all__ = [
    "Models",
    "TrainScene",
    "build_models",
    "bce_loss",
    "frozen_features",
    "guidance_for_scene",
    "train_fusion",
    "train_autoencoder",
    "train_denoiser",
    "meta_from_config",
]

_BACKBONE_STREAM = 11
_FUSION_STREAM = 12
_DENOISER_STREAM = 13
_ORDER_STREAM = 7001
_NOISE_STREAM = 7002


@dataclass
class Models:
    registry: ParameterRegistry
    backbone: Backbone
    fusion: FusionBranch
    denoiser: ToyDenoiser


@dataclass
class TrainScene:
    image: np.ndarray  # [side, side, 3]
    caption: str
    gt_box: BBox


def build_models(cfg: RunConfig) -> Models:
    """All components with independently seeded initializers."""
    reg = ParameterRegistry()
    stage_cfg = StageConfig(channels=tuple(cfg.channels), layers=tuple(cfg.layers),
                            heads=tuple(cfg.heads), window=cfg.window, mlp_ratio=cfg.mlp_ratio)
    backbone = Backbone(reg, stage_cfg, cfg.factor, cfg.latent_channels,
                        np.random.default_rng([cfg.seed, _BACKBONE_STREAM]),
                        decoder_depth=cfg.decoder_depth, name="backbone")
    fusion_cfg = FusionConfig(dfa_stages=tuple(cfg.dfa_stages), drop_offsets=cfg.drop_offsets,
                              drop_scalar=cfg.drop_scalar, drop_card=cfg.drop_card,
                              epsilon=cfg.fusion_epsilon, mix_dim=cfg.mix_dim,
                              mix_heads=cfg.mix_heads, guidance_average=cfg.guidance_average)
    fusion = FusionBranch(reg, tuple(cfg.channels), tuple(cfg.heads), cfg.text_dim,
                          fusion_cfg, np.random.default_rng([cfg.seed, _FUSION_STREAM]), name="fusion")
    denoiser = ToyDenoiser(reg, cfg.latent_channels, cfg.text_dim,
                           np.random.default_rng([cfg.seed, _DENOISER_STREAM]),
                           width=cfg.denoiser_width, heads=cfg.denoiser_heads, name="denoiser")
    return Models(registry=reg, backbone=backbone, fusion=fusion, denoiser=denoiser)


def meta_from_config(cfg: RunConfig, extra: dict[str, str] | None = None) -> dict[str, str]:
    """Checkpoint metadata recording the architecture and ablation flags."""
    meta = {
        "channels": ",".join(str(c) for c in cfg.channels),
        "heads": ",".join(str(h) for h in cfg.heads),
        "dfa_stages": ",".join(str(s) for s in cfg.dfa_stages),
        "drop_offsets": str(cfg.drop_offsets).lower(),
        "drop_scalar": str(cfg.drop_scalar).lower(),
        "drop_card": str(cfg.drop_card).lower(),
        "factor": str(cfg.factor),
        "latent_channels": str(cfg.latent_channels),
        "text_dim": str(cfg.text_dim),
    }
    meta.update(extra or {})
    return meta


def bce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; predictions squeezed into (0,1) to keep log finite."""
    p = ad.add(ad.mul(pred, 1.0 - 2e-7), 1e-7)
    y = Tensor(np.asarray(target, dtype=np.float64))
    one_m_y = Tensor(1.0 - np.asarray(target, dtype=np.float64))
    term = ad.add(ad.mul(y, ad.log(p)), ad.mul(one_m_y, ad.log(ad.sub(1.0, p))))
    return ad.neg(ad.tmean(term))


def frozen_features(backbone: Backbone, image: np.ndarray) -> dict[int, FeatureMap]:
    """Encoder features detached from the tape, for training with a frozen backbone."""
    _, feats = backbone.encode_image(Tensor(np.asarray(image, dtype=np.float64)))
    return {s: FeatureMap(stage=s, data=Tensor(f.data.data.copy())) for s, f in feats.items()}


def guidance_for_scene(models: Models, image: np.ndarray, caption: str,
                       features: dict[int, FeatureMap] | None = None):
    """Full pipeline front half: image + caption -> (guidance map, diagnostics)."""
    feats = features if features is not None else frozen_features(models.backbone, image)
    text = embed_text_stub(caption)
    return models.fusion.forward(feats, text)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, _ORDER_STREAM, epoch]).permutation(n)


_CLIP_NORM = 5.0


def _step_params(params, cfg: RunConfig) -> None:
    # global-norm clip: the map loss has steep cliffs near saturated cells
    sq = 0.0
    for p in params:
        if p.tensor.grad is not None:
            sq += float((p.tensor.grad ** 2).sum())
    scale = _CLIP_NORM / max(np.sqrt(sq), _CLIP_NORM)
    for p in params:
        if p.tensor.grad is not None and scale < 1.0:
            p.tensor.grad = p.tensor.grad * scale
        adamw_step(p, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                   weight_decay=cfg.weight_decay)
        p.zero_grad()


def train_fusion(models: Models, scenes: list[TrainScene], cfg: RunConfig,
                 epochs: int, start_epoch: int = 0, log=None) -> list[float]:
    """Supervise the guidance map against each scene's true box.

    Targets are per-cell box coverage at the stage-2 grid; the stage-4 map
    is upsampled to meet them, so the loss rewards maps that peak inside
    the box.  Only fusion parameters step; the backbone stays frozen.
    """
    if not scenes:
        raise DataError("fusion training needs at least one scene")
    side = scenes[0].image.shape[0]
    target_hw = stage_grid(side, side, 2)
    feats = [frozen_features(models.backbone, sc.image) for sc in scenes]
    texts = [embed_text_stub(sc.caption) for sc in scenes]
    masks = [box_coverage(sc.gt_box, target_hw) for sc in scenes]
    params = models.registry.subset("fusion")

    losses: list[float] = []
    for epoch in range(start_epoch, start_epoch + epochs):
        total = 0.0
        for idx in _epoch_order(cfg.seed, epoch, len(scenes)):
            g, _ = models.fusion.forward(feats[idx], texts[idx])
            loss = bce_loss(resize_bilinear(g, target_hw), masks[idx])
            loss.backward()
            _step_params(params, cfg)
            total += loss.item()
        losses.append(total / len(scenes))
        if log is not None:
            log(epoch + 1, losses[-1])
    return losses


def train_autoencoder(models: Models, scenes: list[TrainScene], cfg: RunConfig,
                      epochs: int, start_epoch: int = 0, log=None) -> list[float]:
    """Reconstruction loss through encode -> decode, with a small latent
    norm penalty standing in for the usual latent regularizer."""
    if not scenes:
        raise DataError("autoencoder training needs at least one scene")
    params = models.registry.subset("backbone")
    losses: list[float] = []
    for epoch in range(start_epoch, start_epoch + epochs):
        total = 0.0
        for idx in _epoch_order(cfg.seed, epoch, len(scenes)):
            img = Tensor(scenes[idx].image)
            latent, _ = models.backbone.encode_image(img)
            recon = models.backbone.decode_raw(latent)
            err = ad.sub(recon, img)
            loss = ad.add(ad.tmean(ad.mul(err, err)),
                          ad.mul(ad.tmean(ad.mul(latent, latent)), 1e-6))
            loss.backward()
            _step_params(params, cfg)
            total += loss.item()
        losses.append(total / len(scenes))
        if log is not None:
            log(epoch + 1, losses[-1])
    return losses


def train_denoiser(models: Models, scenes: list[TrainScene], cfg: RunConfig,
                   epochs: int, start_epoch: int = 0, log=None) -> list[float]:
    """Noise-prediction MSE on frozen-backbone latents at random timesteps."""
    if not scenes:
        raise DataError("denoiser training needs at least one scene")
    schedule = build_noise_schedule(cfg.diffusion_steps)
    latents = []
    texts = []
    for sc in scenes:
        latent, _ = models.backbone.encode_image(Tensor(sc.image))
        latents.append(latent.data.copy())
        texts.append(embed_text_stub(sc.caption))
    params = models.registry.subset("denoiser")

    losses: list[float] = []
    for epoch in range(start_epoch, start_epoch + epochs):
        total = 0.0
        noise_rng = np.random.default_rng([cfg.seed, _NOISE_STREAM, epoch])
        for idx in _epoch_order(cfg.seed, epoch, len(scenes)):
            t = int(noise_rng.integers(1, schedule.steps + 1))
            eps = noise_rng.standard_normal(latents[idx].shape)
            abar = schedule.alpha_bars[t - 1]
            z_t = np.sqrt(abar) * latents[idx] + np.sqrt(1.0 - abar) * eps
            pred, _ = models.denoiser.forward(Tensor(z_t), t, texts[idx].appearance_tokens(), schedule)
            err = ad.sub(pred, Tensor(eps))
            loss = ad.tmean(ad.mul(err, err))
            loss.backward()
            _step_params(params, cfg)
            total += loss.item()
        losses.append(total / len(scenes))
        if log is not None:
            log(epoch + 1, losses[-1])
    return losses
