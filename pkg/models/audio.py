import logging
import math
import string

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from services.errors import DimensionError, MessageError

logger = logging.getLogger(__name__)

DIGIT_ALPHABET = string.digits + string.ascii_uppercase


class AudioClip(BaseModel):
    """Mono waveform in [-1, 1]. Out-of-range samples are clipped and counted."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    samples: np.ndarray
    sample_rate: int
    clipped: int = 0

    def __init__(self, **data):
        try:
            super().__init__(**data)
        except ValidationError as e:
            raise DimensionError(f"Invalid audio clip: {e.errors()[0]['msg']}") from None

    @field_validator("samples", mode="before")
    @classmethod
    def _as_float_array(cls, value) -> np.ndarray:
        array = np.asarray(value, dtype=np.float64)
        if array.ndim != 1:
            raise DimensionError(f"AudioClip needs a 1-D sample array, got shape {array.shape}")
        if array.size == 0:
            raise DimensionError("AudioClip needs at least one sample")
        if not np.all(np.isfinite(array)):
            raise DimensionError("AudioClip samples must be finite")
        return array

    @field_validator("sample_rate")
    @classmethod
    def _positive_rate(cls, value: int) -> int:
        if value <= 0:
            raise ValueError(f"sample_rate must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _clip(self):
        over = int(np.count_nonzero(np.abs(self.samples) > 1.0))
        if over:
            logger.warning(f"Clipping {over} sample(s) outside [-1, 1]")
            object.__setattr__(self, "samples", np.clip(self.samples, -1.0, 1.0))
            object.__setattr__(self, "clipped", self.clipped + over)
        return self

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


class MelSpec(BaseModel):
    """Log-magnitude mel spectrogram, frames x n_mels."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    frames: np.ndarray
    fft_size: int
    hop: int
    n_mels: int
    fmin: float
    fmax: float
    log_floor: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


class WatermarkMessage(BaseModel):
    """m digits in base b."""

    model_config = ConfigDict(frozen=True)

    digits: tuple[int, ...]
    base: int

    @model_validator(mode="after")
    def _check_digits(self):
        if self.base < 2 or self.base > len(DIGIT_ALPHABET):
            raise MessageError(f"Message base must lie in [2, {len(DIGIT_ALPHABET)}], got {self.base}")
        if not self.digits:
            raise MessageError("A watermark message needs at least one digit")
        bad = [d for d in self.digits if not 0 <= d < self.base]
        if bad:
            raise MessageError(f"Digits {bad} are not valid in base {self.base}")
        return self

    @property
    def m(self) -> int:
        return len(self.digits)

    @property
    def capacity_bits(self) -> float:
        return self.m * math.log2(self.base)

    @classmethod
    def from_text(cls, text: str, m: int, base: int) -> "WatermarkMessage":
        """Parse the CLI form: uppercase hex for base 16, decimal for base 10."""
        text = text.strip().upper()
        if len(text) != m:
            raise MessageError(f"Message '{text}' has {len(text)} digit(s), the model embeds exactly {m}")
        digits = []
        for char in text:
            value = DIGIT_ALPHABET.find(char)
            if value < 0 or value >= base:
                raise MessageError(f"Character '{char}' is not a base-{base} digit")
            digits.append(value)
        return cls(digits=tuple(digits), base=base)

    @classmethod
    def random(cls, rng: np.random.Generator, m: int, base: int) -> "WatermarkMessage":
        return cls(digits=tuple(int(d) for d in rng.integers(0, base, size=m)), base=base)

    def to_text(self) -> str:
        return "".join(DIGIT_ALPHABET[d] for d in self.digits)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.digits, dtype=np.int64)
