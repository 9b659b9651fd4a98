"""Configuration dataclasses and the layered ``section.key = value`` loader."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class EncoderConfig:
    p: int = 64
    k: int = 6
    n_max: int = 26
    visual_backbone: str = "vector-passthrough"
    obs_dim: int = 32
    image_channels: int = 3
    text_hidden: int = 0  # 0 -> p // 2 per direction
    embed_dim: int = 0  # 0 -> p
    vocab_size: int = 1
    norm_groups: int = 8

    @property
    def hidden(self):
        return self.text_hidden or self.p // 2

    @property
    def embed(self):
        return self.embed_dim or self.p

    def validate(self):
        if self.p <= 0 or self.k < 1 or self.n_max < 1:
            raise ConfigError("encoder: need p > 0, k >= 1, n_max >= 1")
        if self.p % self.norm_groups:
            raise ConfigError(f"encoder: p={self.p} not divisible by norm_groups={self.norm_groups}")
        if self.visual_backbone not in ("tiny-conv", "vector-passthrough"):
            raise ConfigError(f"encoder: unknown visual_backbone {self.visual_backbone!r}")
        if self.visual_backbone == "vector-passthrough" and self.obs_dim < self.k:
            raise ConfigError(f"encoder: obs_dim={self.obs_dim} smaller than k={self.k}")
        if 2 * self.hidden != self.p:
            raise ConfigError("encoder: bi-directional text_hidden must concatenate to p")
        if self.vocab_size < 1:
            raise ConfigError("encoder: vocab_size must be >= 1")


@dataclass
class SdmConfig:
    r: float = 0.5
    enc_width: int = 0  # 0 -> p // 2
    train_mode_zeroing: bool = True

    def validate(self):
        if not 0.0 <= self.r < 1.0:
            raise ConfigError(f"sdm: zeroing ratio r={self.r} outside [0, 1)")
        if self.enc_width < 0:
            raise ConfigError("sdm: enc_width must be >= 1")


@dataclass
class FusionConfig:
    combine: str = "addition"

    def validate(self):
        if self.combine not in ("addition", "concatenation"):
            raise ConfigError(f"fusion: combine must be addition or concatenation, got {self.combine!r}")


@dataclass
class LossConfig:
    margin: float = 0.2
    exclude_same_identity_negatives: bool = True
    id_class_count: int = 2
    mec_squared: bool = False
    # ablation switches; a disabled term is dropped from the stage-2 total
    align1: bool = True
    align2: bool = True
    align3: bool = True
    align4: bool = True
    align5: bool = True
    mec: bool = True
    sdm_loss: bool = True
    # per-term weights (all 1.0 unless ablating)
    w_id: float = 1.0
    w_align: float = 1.0
    w_mec: float = 1.0
    w_sdm: float = 1.0

    def validate(self):
        if self.margin <= 0:
            raise ConfigError("loss: margin must be > 0")
        if self.id_class_count < 2:
            raise ConfigError("loss: id_class_count must be >= 2")


@dataclass
class ModelConfig:
    """Structural switches for the ablations."""

    use_spsm: bool = True  # SPSM + SPFM (off: V_P = V_G, no V_S / V_R)
    use_sam: bool = True
    use_sdm: bool = True


@dataclass
class TrainConfig:
    batch_size: int = 32
    stage1_epochs: int = 10
    stage2_epochs: int = 30
    stage1_lr: float = 1e-3
    stage2_lr: float = 2e-4
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 5.0
    passes_per_epoch: int = 1
    epoch_mode: str = "identities"  # identities | images
    num_threads: int = 1
    dtype: str = "float32"

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("train: batch_size must be >= 2")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("train: epochs must be non-negative")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ConfigError("train: learning rates must be positive")
        if self.lr_decay_every < 1:
            raise ConfigError("train: lr_decay_every must be >= 1")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError("train: lr_decay_factor must lie in (0, 1]")
        if self.passes_per_epoch < 1:
            raise ConfigError("train: passes_per_epoch must be >= 1")
        if self.epoch_mode not in ("images", "identities"):
            raise ConfigError("train: epoch_mode must be images or identities")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train: dtype must be float32 or float64")


@dataclass
class EvalConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    rr_enabled: bool = False
    rr_gamma: float = 0.3
    rr_K: int = 10
    k_list: tuple = (1, 5, 10)

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("eval: lambda weights must be >= 0")
        if not 0.0 <= self.rr_gamma <= 1.0:
            raise ConfigError("eval: rr_gamma must lie in [0, 1]")
        if self.rr_K < 1:
            raise ConfigError("eval: rr_K must be >= 1")
        ks = list(self.k_list)
        if not ks or any(k < 1 for k in ks) or ks != sorted(ks):
            raise ConfigError("eval: k_list must be ascending positive integers")


@dataclass
class SyntheticConfig:
    num_identities: int = 200
    images_per_identity: int = 10
    test_per_identity: int = 2
    captions_per_image: int = 2
    d_p: int = 8
    d_s: int = 8
    obs_dim: int = 32
    bins: int = 8
    noise_token_ratio: float = 0.2
    noise_vocab: int = 32
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        for name in ("num_identities", "images_per_identity", "captions_per_image",
                     "d_p", "d_s", "obs_dim", "bins", "noise_vocab"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"synth: {name} must be positive")
        if not 0 <= self.test_per_identity < self.images_per_identity:
            raise ConfigError("synth: test_per_identity must be in [0, images_per_identity)")
        if not 0.0 <= self.noise_token_ratio < 1.0:
            raise ConfigError("synth: noise_token_ratio must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("synth: noise_sigma must be >= 0")
        if self.obs_dim < self.d_p + self.d_s:
            raise ConfigError(
                f"synth: obs_dim={self.obs_dim} < d_p + d_s={self.d_p + self.d_s}; "
                "the mixing matrix needs obs_dim >= d_p + d_s for orthonormal columns"
            )


@dataclass
class DataConfig:
    min_count: int = 2
    stopwords: str = ""  # empty -> packaged list


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sdm: SdmConfig = field(default_factory=SdmConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def validate(self):
        for section in ("encoder", "sdm", "fusion", "loss", "train", "eval", "synth"):
            getattr(self, section).validate()
        return self

    # --- flat key/value view -------------------------------------------------

    def items(self):
        """Yield ``(dotted_key, value)`` for every leaf setting."""
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    yield f"{f.name}.{sub.name}", getattr(value, sub.name)
            else:
                yield f.name, value

    def set(self, key, raw):
        """Set a dotted key from a string (or already-typed) value."""
        section, _, name = key.partition(".")
        if not any(f.name == section for f in dataclasses.fields(self)):
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(self, section)
        if dataclasses.is_dataclass(target):
            if not name:
                raise ConfigError(f"config key {key!r} names a section, not a setting")
            hints = typing.get_type_hints(type(target))
            if name not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(target, name, _coerce(raw, hints[name], key))
        else:
            if name:
                raise ConfigError(f"unknown config key {key!r}")
            hints = typing.get_type_hints(type(self))
            setattr(self, section, _coerce(raw, hints[section], key))

    def dumps(self):
        return "".join(f"{key} = {_render(value)}\n" for key, value in self.items())


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(raw, typ, key):
    if not isinstance(raw, str):
        if typ is tuple:
            return tuple(raw)
        return raw
    text = raw.strip()
    try:
        if typ is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def parse_config_text(text):
    """Parse a flat ``section.key = value`` block into ordered pairs."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        pairs.append((key.strip(), value.strip()))
    return pairs


def resolve_config(path=None, overrides=()):
    """Merge defaults <- config file <- overrides, then validate.

    ``overrides`` is an iterable of ``(key, value)`` pairs applied last.
    """
    cfg = RunConfig()
    if path is not None:
        for key, value in parse_config_text(Path(path).read_text(encoding="utf-8")):
            cfg.set(key, value)
    for key, value in overrides:
        cfg.set(key, value)
    return cfg.validate()


def config_from_pairs(pairs):
    cfg = RunConfig()
    for key, value in pairs:
        cfg.set(key, value)
    return cfg.validate()
