"""Waveform I/O and spectral transforms.

STFT frames are centered: the signal is reflect-padded by fft_size // 2 on
both sides, so a clip of L samples yields floor(L / hop) + 1 frames and
frame k is centered on sample k * hop.
"""
from __future__ import annotations

import logging
import wave
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

from models.audio import AudioClip, MelSpec
from models.config import MelConfig
from services.errors import ConfigError, DimensionError, FormatError, StorageError
from services.nn import Module
from services.storage import atomic_output
from services.tensor import Tensor, clamp_min, log, matmul, mul, sqrt, take

logger = logging.getLogger(__name__)

PCM_SCALE = 32768.0


# -- WAV I/O ---------------------------------------------------------------
def load_wav(path: Path | str) -> AudioClip:
    """Read 16-bit PCM WAV; multichannel files are averaged down to mono."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except FileNotFoundError as e:
        raise StorageError("WAV file not found", path) from e
    except (wave.Error, EOFError) as e:
        raise FormatError(f"Malformed WAV file {path}: {e}") from e
    if width != 2:
        raise FormatError(f"Unsupported WAV sample width {width * 8} bits in {path}; only 16-bit PCM is read")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    if channels > 1:
        samples = samples[: len(samples) // channels * channels].reshape(-1, channels).mean(axis=1)
    if samples.size == 0:
        raise FormatError(f"WAV file {path} holds no samples")
    return AudioClip(samples=samples, sample_rate=rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * PCM_SCALE), -32768, 32767).astype("<i2")


def save_wav(clip: AudioClip, path: Path | str) -> None:
    with atomic_output(Path(path), "wb") as handle:
        with wave.open(handle, "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(clip.sample_rate)
            wf.writeframes(to_pcm16(clip.samples).tobytes())


# -- STFT / mel ------------------------------------------------------------
def _check_frame_params(fft_size: int, hop: int) -> None:
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ConfigError(f"fft_size must be a power of two, got {fft_size}")
    if not 1 <= hop <= fft_size:
        raise ConfigError(f"hop must lie in [1, fft_size], got {hop}")


def frame_count(length: int, hop: int) -> int:
    return length // hop + 1


def frame_indices(length: int, fft_size: int, hop: int) -> np.ndarray:
    """Sample index of every frame position after centered reflect padding, shape (frames, fft_size)."""
    if length < fft_size:
        raise DimensionError(f"Clip of {length} samples is shorter than one {fft_size}-sample frame")
    half = fft_size // 2
    starts = np.arange(frame_count(length, hop)) * hop
    positions = starts[:, None] + np.arange(fft_size)[None, :] - half
    # reflect without repeating the edge sample, as numpy's 'reflect' mode
    positions = np.abs(positions)
    over = positions > length - 1
    positions[over] = 2 * (length - 1) - positions[over]
    return positions


def window_array(name: str, fft_size: int) -> np.ndarray:
    try:
        return signal.get_window(name, fft_size, fftbins=True)
    except ValueError as e:
        raise ConfigError(f"Unknown window '{name}': {e}") from e


def stft(samples, fft_size: int, hop: int, window: str = "hann") -> np.ndarray:
    """Complex spectrogram of shape (frames, fft_size // 2 + 1)."""
    if isinstance(samples, AudioClip):
        samples = samples.samples
    samples = np.asarray(samples, dtype=np.float64)
    _check_frame_params(fft_size, hop)
    frames = samples[frame_indices(len(samples), fft_size, hop)] * window_array(window, fft_size)
    return np.fft.rfft(frames, axis=-1)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_mels, fft_size // 2 + 1).

    Each row is normalized to sum to 1. A filter that covers no FFT bin means
    n_mels exceeds what the resolution can support.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    if fmax > sample_rate / 2:
        raise ConfigError(f"Mel fmax {fmax} exceeds Nyquist {sample_rate / 2}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.fft.rfftfreq(fft_size, d=1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    sums = bank.sum(axis=1)
    empty = np.flatnonzero(sums <= 0)
    if empty.size:
        raise ConfigError(
            f"{n_mels} mel bands need more than {fft_size // 2 + 1} FFT bins: band(s) {empty.tolist()} are empty"
        )
    return bank / sums[:, None]


def mel_spectrogram(clip: AudioClip | np.ndarray, params: MelConfig, sample_rate: int | None = None,
                    window: str = "hann") -> MelSpec:
    """Log mel spectrogram: log(max(filterbank @ |STFT|, log_floor))."""
    if isinstance(clip, AudioClip):
        sample_rate, samples = clip.sample_rate, clip.samples
    else:
        samples = np.asarray(clip, dtype=np.float64)
        if sample_rate is None:
            raise ConfigError("mel_spectrogram needs a sample rate for raw sample arrays")
    fmax = params.resolved_fmax(sample_rate)
    bank = mel_filterbank(sample_rate, params.fft_size, params.n_mels, params.fmin, fmax)
    magnitude = np.abs(stft(samples, params.fft_size, params.hop, window))
    frames = np.log(np.maximum(magnitude @ bank.T, params.log_floor))
    return MelSpec(
        frames=frames,
        fft_size=params.fft_size,
        hop=params.hop,
        n_mels=params.n_mels,
        fmin=params.fmin,
        fmax=fmax,
        log_floor=params.log_floor,
    )


class LogMel(Module):
    """Differentiable log-mel front end matching `mel_spectrogram`.

    Framing is an index gather, the DFT is a pair of cosine/sine matmuls,
    and magnitudes use sqrt(re^2 + im^2 + 1e-20) to keep the gradient finite
    at zero. Input (B, L) -> output (B, frames, n_mels).
    """

    def __init__(self, params: MelConfig, sample_rate: int, window: str = "hann"):
        _check_frame_params(params.fft_size, params.hop)
        self.params = params
        self.sample_rate = sample_rate
        n = params.fft_size
        k = np.arange(n // 2 + 1)
        angle = 2.0 * np.pi * np.outer(np.arange(n), k) / n
        win = window_array(window, n)[:, None]
        self._cos = win * np.cos(angle)
        self._sin = -win * np.sin(angle)
        self._bank_t = mel_filterbank(
            sample_rate, n, params.n_mels, params.fmin, params.resolved_fmax(sample_rate)
        ).T

    def n_frames(self, length: int) -> int:
        return frame_count(length, self.params.hop)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2:
            raise DimensionError(f"LogMel expects (B, L) input, got {x.shape}")
        dtype = x.dtype
        frames = take(x, frame_indices(x.shape[1], self.params.fft_size, self.params.hop), axis=1)
        real = matmul(frames, Tensor(self._cos, dtype=dtype))
        imag = matmul(frames, Tensor(self._sin, dtype=dtype))
        magnitude = sqrt(mul(real, real) + mul(imag, imag) + 1e-20)
        mel = matmul(magnitude, Tensor(self._bank_t, dtype=dtype))
        return log(clamp_min(mel, self.params.log_floor))


# -- resampling and filtering ----------------------------------------------
def _samples_and_rate(clip: AudioClip | np.ndarray, sample_rate: int | None) -> tuple[np.ndarray, int]:
    if isinstance(clip, AudioClip):
        return clip.samples, clip.sample_rate
    if sample_rate is None:
        raise ConfigError("A sample rate is required for raw sample arrays")
    return np.asarray(clip, dtype=np.float64), sample_rate


def resample_array(samples: np.ndarray, sample_rate: int, target_rate: int) -> np.ndarray:
    if target_rate <= 0:
        raise ConfigError(f"target_rate must be positive, got {target_rate}")
    return resample_by_ratio(samples, Fraction(int(target_rate), int(sample_rate)))


def resample_by_ratio(samples: np.ndarray, ratio: Fraction) -> np.ndarray:
    """Polyphase resampling by a rational factor; output length is ceil(L * ratio)."""
    if ratio <= 0:
        raise ConfigError(f"Resampling ratio must be positive, got {ratio}")
    out_length = -(-len(samples) * ratio.numerator // ratio.denominator)
    if out_length < 1:
        raise DimensionError(f"Resampling {len(samples)} samples by {ratio} leaves no output")
    if ratio == 1:
        return np.array(samples, dtype=np.float64)
    return signal.resample_poly(samples, ratio.numerator, ratio.denominator, padtype="line")


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase resampling to `target_rate`."""
    return AudioClip(samples=resample_array(clip.samples, clip.sample_rate, target_rate), sample_rate=int(target_rate))


def lowpass_taps(cutoff_hz: float, sample_rate: int, attenuation_db: float = 60.0, width: float = 0.05) -> np.ndarray:
    """Kaiser-window FIR design; `width` is the transition band as a fraction of Nyquist."""
    nyquist = sample_rate / 2
    if not 0 < cutoff_hz < nyquist:
        raise ConfigError(f"Low-pass cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz")
    numtaps, beta = signal.kaiserord(attenuation_db, width)
    numtaps |= 1
    return signal.firwin(numtaps, cutoff_hz / nyquist, window=("kaiser", beta))


def low_pass_array(samples: np.ndarray, sample_rate: int, cutoff_hz: float) -> np.ndarray:
    """Zero-phase (symmetric FIR) low-pass; edges are extended by repetition."""
    taps = lowpass_taps(cutoff_hz, sample_rate)
    half = len(taps) // 2
    padded = np.pad(np.asarray(samples, dtype=np.float64), half, mode="edge")
    return np.convolve(padded, taps, mode="valid")


def low_pass(clip: AudioClip, cutoff: float) -> AudioClip:
    return AudioClip(samples=low_pass_array(clip.samples, clip.sample_rate, cutoff), sample_rate=clip.sample_rate)
