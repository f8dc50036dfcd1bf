"""Run configuration: a flat dataclass, a dotted-key table mapping config
text to fields, and a line-oriented ``key = value`` parser.

Files are UTF-8, one assignment per line, ``#`` starts a comment, and keys
use dots (``guidance.eta = 35``).  Unknown keys and unparsable values are
usage errors so typos never silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError

__all__ = ["RunConfig", "CONFIG_KEYS", "parse_config_text", "parse_config_file", "apply_overrides", "load_run_config"]


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    image_size: int = 64
    scene_objects: int = 2
    data_count: int = 50
    channels: tuple[int, ...] = (32, 64, 128, 256)
    layers: tuple[int, ...] = (1, 1, 1, 1)
    heads: tuple[int, ...] = (2, 4, 4, 8)
    window: int = 4
    mlp_ratio: float = 2.0
    decoder_depth: int = 1
    factor: int = 4
    latent_channels: int = 3
    text_dim: int = 64
    dfa_stages: tuple[int, ...] = (2, 3, 4)
    drop_offsets: bool = False
    drop_scalar: bool = False
    drop_card: bool = False
    fusion_epsilon: float = 1.0
    mix_dim: int = 64
    mix_heads: int = 2
    guidance_average: str = "heads_keys"
    eta: float = 35.0
    guided_steps: int = 10
    repeats: int = 3
    beta_frac: float = 0.5
    retry_beta_frac: float = 0.25
    dilation: str = "bbox"
    morph_k: int = 3
    use_activation: bool = True
    use_dilation: bool = True
    guidance_enabled: bool = True
    diffusion_steps: int = 50
    denoiser_width: int = 32
    denoiser_heads: int = 2
    lr: float = 0.00024
    beta1: float = 0.85
    beta2: float = 0.91
    weight_decay: float = 0.003
    epochs: int = 20
    train_target: str = "fusion"
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError(f"guidance.eta must be >= 0, got {self.eta}")
        if self.factor not in (2, 4, 8):
            raise ConfigError(f"latent.factor must be one of 2, 4, 8, got {self.factor}")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError(f"train.holdout must lie in [0, 1), got {self.holdout_fraction}")
        if len(self.channels) != 4 or len(self.layers) != 4 or len(self.heads) != 4:
            raise ConfigError("backbone.channels / layers / heads each need exactly 4 entries")
        if any(s not in (2, 3, 4) for s in self.dfa_stages):
            raise ConfigError(f"fusion.dfa_stages entries must come from 2,3,4, got {self.dfa_stages}")
        if self.train_target not in ("fusion", "autoencoder", "denoiser"):
            raise ConfigError(f"train.target must be fusion, autoencoder, or denoiser, got {self.train_target!r}")


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    return float(text)


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    stripped = text.strip()
    if not stripped:
        return ()
    return tuple(int(part) for part in stripped.split(","))


def _str(text: str) -> str:
    return text.strip()


# dotted key -> (dataclass field, parser)
CONFIG_KEYS: dict[str, tuple[str, object]] = {
    "seed": ("seed", _int),
    "image.size": ("image_size", _int),
    "scene.objects": ("scene_objects", _int),
    "data.count": ("data_count", _int),
    "backbone.channels": ("channels", _ints),
    "backbone.layers": ("layers", _ints),
    "backbone.heads": ("heads", _ints),
    "backbone.window": ("window", _int),
    "backbone.mlp_ratio": ("mlp_ratio", _float),
    "backbone.decoder_depth": ("decoder_depth", _int),
    "latent.factor": ("factor", _int),
    "latent.channels": ("latent_channels", _int),
    "text.dim": ("text_dim", _int),
    "fusion.dfa_stages": ("dfa_stages", _ints),
    "fusion.drop_offsets": ("drop_offsets", _bool),
    "fusion.drop_scalar": ("drop_scalar", _bool),
    "fusion.drop_card": ("drop_card", _bool),
    "fusion.epsilon": ("fusion_epsilon", _float),
    "fusion.mix_dim": ("mix_dim", _int),
    "fusion.mix_heads": ("mix_heads", _int),
    "fusion.guidance_average": ("guidance_average", _str),
    "guidance.eta": ("eta", _float),
    "guidance.steps": ("guided_steps", _int),
    "guidance.repeats": ("repeats", _int),
    "guidance.beta_frac": ("beta_frac", _float),
    "guidance.retry_beta_frac": ("retry_beta_frac", _float),
    "guidance.dilation": ("dilation", _str),
    "guidance.morph_k": ("morph_k", _int),
    "guidance.use_activation": ("use_activation", _bool),
    "guidance.use_dilation": ("use_dilation", _bool),
    "guidance.enabled": ("guidance_enabled", _bool),
    "diffusion.steps": ("diffusion_steps", _int),
    "denoiser.width": ("denoiser_width", _int),
    "denoiser.heads": ("denoiser_heads", _int),
    "optim.lr": ("lr", _float),
    "optim.beta1": ("beta1", _float),
    "optim.beta2": ("beta2", _float),
    "optim.weight_decay": ("weight_decay", _float),
    "train.epochs": ("epochs", _int),
    "train.target": ("train_target", _str),
    "train.holdout": ("holdout_fraction", _float),
}

_FIELD_NAMES = {f.name for f in fields(RunConfig)}
assert all(field in _FIELD_NAMES for field, _ in CONFIG_KEYS.values())


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key -> value strings; duplicate keys keep the last assignment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config_file(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), source=path)


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Apply dotted-key assignments; unknown key or bad value is a usage error."""
    updates = {}
    for key, value in pairs.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r} (known keys: {', '.join(sorted(CONFIG_KEYS))})")
        field, parse = CONFIG_KEYS[key]
        try:
            updates[field] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
    return replace(cfg, **updates)


def load_run_config(path: str | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides (e.g. CLI flags)."""
    cfg = RunConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_file(path))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg
