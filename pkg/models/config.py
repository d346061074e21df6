"""Run configuration: model hyperparameters, losses, attacks, training and evaluation.

All configs are pydantic models so a run-config JSON file is validated in
full before any work starts; every failing field is reported together.
"""
from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator

from services.errors import ConfigError, StorageError

ATTACK_NAMES = ("identity", "rsp", "noise", "sd", "ar", "ea", "lp", "resplice")
AttackKind = Literal["identity", "rsp", "noise", "sd", "ar", "ea", "lp", "resplice"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class MelConfig(_Strict):
    fft_size: int = 256
    hop: int = Field(64, validate_default=True)
    n_mels: int = 40
    fmin: float = 0.0
    fmax: Optional[float] = None  # None means Nyquist
    log_floor: float = 1e-5

    @field_validator("fft_size")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value < 2 or value & (value - 1):
            raise ValueError(f"fft_size must be a power of two, got {value}")
        return value

    @field_validator("hop", "n_mels")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("log_floor")
    @classmethod
    def _floor_positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("log_floor must be positive")
        return value

    @field_validator("hop")
    @classmethod
    def _hop_fits(cls, value: int, info: ValidationInfo) -> int:
        fft_size = info.data.get("fft_size")
        if fft_size is not None and value > fft_size:
            raise ValueError(f"hop {value} exceeds fft_size {fft_size}")
        return value

    @field_validator("fmax")
    @classmethod
    def _fmax_above_fmin(cls, value: float | None, info: ValidationInfo) -> float | None:
        fmin = info.data.get("fmin")
        if value is not None and fmin is not None and value <= fmin:
            raise ValueError("fmax must exceed fmin")
        return value

    def resolved_fmax(self, sample_rate: int) -> float:
        return self.fmax if self.fmax is not None else sample_rate / 2


class LossWeights(_Strict):
    mel: float = Field(45.0, ge=0)
    watermark_ce: float = Field(1.0, ge=0)
    commitment: float = Field(0.25, ge=0)
    adversarial: float = Field(1.0, ge=0)
    feature_match: float = Field(2.0, ge=0)


class AttackSpec(_Strict):
    """One attack and its parameters; unused parameters are ignored by the kind."""

    kind: AttackKind = "identity"
    seed: int = 0
    resample_ratio: float = Field(2 / 3, gt=0)
    target_rate: Optional[int] = Field(None, gt=0)
    snr_db: float = 20.0
    p: float = 0.001
    factor: float = Field(0.9, gt=0)
    delay_ms: float = Field(100.0, gt=0)
    decay: float = Field(0.3, ge=0)
    cutoff_ratio: float = 0.3
    segments: int = Field(1, ge=1)

    @field_validator("p")
    @classmethod
    def _probability(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"dropout fraction p must lie in [0, 1], got {value}")
        return value

    @field_validator("cutoff_ratio")
    @classmethod
    def _below_nyquist(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError(f"cutoff_ratio is a fraction of Nyquist and must lie in (0, 1), got {value}")
        return value

    @classmethod
    def parse(cls, kind: str, params: dict | None = None, seed: int = 0) -> AttackSpec:
        """Build a spec from CLI-style values, converting validation failures to ConfigError."""
        try:
            return cls(kind=kind, seed=seed, **(params or {}))
        except ValidationError as e:
            raise config_error_from(e, f"attack '{kind}'") from None


def default_attack_pool() -> list[AttackSpec]:
    return [AttackSpec(kind=kind) for kind in ATTACK_NAMES if kind != "identity"]


class ModelConfig(_Strict):
    sample_rate: int = Field(8000, gt=0)
    encoder_strides: list[int] = Field(default_factory=lambda: [2, 4, 4, 5])
    channels: int = Field(16, ge=1)
    d_s: int = Field(64, ge=1)
    d_w: int = Field(64, ge=1)
    n_heads: int = Field(4, ge=1, validate_default=True)
    aiu_iters: int = Field(2, ge=1)
    share_aiu_weights: bool = False
    fusion: Literal["aiu", "concat"] = "aiu"
    m: int = Field(4, ge=1, validate_default=True)
    b: int = Field(16, ge=2, le=36)
    n_codebooks: int = Field(2, ge=1)
    codebook_size: int = Field(64, ge=2)
    ema_decay: float = 0.99
    dead_code_patience: int = Field(50, ge=1)
    extractor_channels: int = Field(16, ge=1)
    discriminator: bool = False
    discriminator_channels: int = Field(16, ge=1)
    mel: MelConfig = Field(default_factory=MelConfig, validate_default=True)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    seed: int = 0

    @field_validator("encoder_strides")
    @classmethod
    def _strides(cls, value: list[int]) -> list[int]:
        if not value or any(s < 1 for s in value):
            raise ValueError("encoder_strides must be a non-empty list of integers >= 1")
        return value

    @field_validator("ema_decay")
    @classmethod
    def _decay(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {value}")
        return value

    # cross-field checks read earlier fields from info.data
    @field_validator("n_heads")
    @classmethod
    def _heads_divide_d_s(cls, value: int, info: ValidationInfo) -> int:
        d_s = info.data.get("d_s")
        if d_s is not None and d_s % value:
            raise ValueError(f"d_s={d_s} is not divisible by n_heads={value}")
        return value

    @field_validator("m")
    @classmethod
    def _digits_divide_d_w(cls, value: int, info: ValidationInfo) -> int:
        d_w = info.data.get("d_w")
        if d_w is not None and d_w % value:
            raise ValueError(f"d_w={d_w} is not divisible by m={value}")
        return value

    @field_validator("mel")
    @classmethod
    def _mel_below_nyquist(cls, value: MelConfig, info: ValidationInfo) -> MelConfig:
        sample_rate = info.data.get("sample_rate")
        if sample_rate is not None and value.resolved_fmax(sample_rate) > sample_rate / 2:
            raise ValueError(f"mel fmax {value.resolved_fmax(sample_rate)} exceeds Nyquist {sample_rate / 2}")
        return value

    @property
    def hop_length(self) -> int:
        return math.prod(self.encoder_strides)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    @property
    def bits_per_index(self) -> int:
        return max(1, math.ceil(math.log2(self.codebook_size)))

    @property
    def bandwidth_bps(self) -> float:
        return self.n_codebooks * math.log2(self.codebook_size) * self.frame_rate

    @property
    def capacity_bits(self) -> float:
        return self.m * math.log2(self.b)

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> ModelConfig:
        """Full-scale hyperparameters: 24 kHz audio at 75 frames per second."""
        values = dict(
            sample_rate=24000,
            encoder_strides=[2, 4, 5, 8],
            channels=32,
            d_s=512,
            d_w=512,
            n_heads=8,
            aiu_iters=2,
            n_codebooks=8,
            codebook_size=1024,
            extractor_channels=32,
            discriminator=True,
            mel=MelConfig(fft_size=1024, hop=256, n_mels=80),
        )
        values.update(overrides)
        return cls(**values)


class TrainingConfig(_Strict):
    steps: int = Field(5000, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(1e-3, gt=0)
    discriminator_lr: float = Field(1e-4, gt=0)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    precision: Literal["float32", "float64"] = "float32"
    log_interval: int = Field(10, ge=1)
    checkpoint_interval: int = Field(500, ge=1)
    attack_pool: list[AttackSpec] = Field(default_factory=default_attack_pool)


class EvalConfig(_Strict):
    trials: int = Field(10, ge=1)
    attacks: list[AttackSpec] = Field(default_factory=default_attack_pool)
    label: str = "wmcodec"


class RunConfig(_Strict):
    dataset_dir: Path = Path("corpus")
    checkpoint_dir: Path = Path("checkpoints")
    report_dir: Path = Path("reports")
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> RunConfig:
        return cls(**overrides)

    @classmethod
    def from_json(cls, text: str, source: str = "run config") -> RunConfig:
        try:
            return cls.model_validate_json(text)
        except ValidationError as e:
            raise config_error_from(e, source) from None

    @classmethod
    def load(cls, path: Path | str | None = None) -> RunConfig:
        """Load from `path`, else from WMCODEC_CONFIG, else the desk defaults."""
        if path is None:
            path = os.environ.get("WMCODEC_CONFIG")
            if not path:
                return cls.desk()
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError as e:
            raise StorageError("Run config not found", path) from e
        except OSError as e:
            raise StorageError(f"Cannot read run config ({e.strerror})", path) from e
        return cls.from_json(text, str(path))

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2)


def config_error_from(error: ValidationError, source: str) -> ConfigError:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "(root)"
        lines.append(f"  {location}: {item['msg']}")
    return ConfigError(f"Invalid {source} ({error.error_count()} problem(s)):\n" + "\n".join(lines))
