#!/usr/bin/env python3
"""
Tests for WAV I/O, framing, the mel front end, resampling and low-pass filtering.
"""

import wave
from pathlib import Path

import numpy as np
import pytest

from models.audio import AudioClip
from models.config import MelConfig
from services.dsp import (
    LogMel,
    frame_count,
    frame_indices,
    load_wav,
    low_pass,
    mel_band_centers,
    mel_filterbank,
    mel_spectrogram,
    resample,
    save_wav,
    stft,
)
from services.errors import ConfigError, DimensionError, FormatError, StorageError
from services.tensor import Tensor

SR = 8000


def _write_pcm(path: Path, values, width: int = 2, rate: int = SR, channels: int = 1):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(values, dtype="<i2" if width == 2 else np.uint8).tobytes())


def _sine(freq, seconds=1.0, amplitude=0.5, rate=SR):
    t = np.arange(int(seconds * rate)) / rate
    return amplitude * np.sin(2 * np.pi * freq * t)


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


# -- WAV -------------------------------------------------------------------
def test_pcm_scaling(tmp_path):
    path = tmp_path / "half.wav"
    _write_pcm(path, [16384, 0, -16384])
    clip = load_wav(path)
    np.testing.assert_array_equal(clip.samples, [0.5, 0.0, -0.5])
    assert clip.sample_rate == SR


def test_all_zero_file(tmp_path):
    path = tmp_path / "zeros.wav"
    _write_pcm(path, np.zeros(100))
    assert not np.any(load_wav(path).samples)


def test_stereo_is_downmixed(tmp_path):
    path = tmp_path / "stereo.wav"
    _write_pcm(path, [16384, 0, 8192, 8192], channels=2)
    np.testing.assert_allclose(load_wav(path).samples, [0.25, 0.25])


def test_wav_round_trip(tmp_path):
    samples = np.random.default_rng(0).uniform(-0.99, 0.99, 4000)
    path = tmp_path / "clip.wav"
    save_wav(AudioClip(samples=samples, sample_rate=SR), path)
    loaded = load_wav(path)
    assert np.max(np.abs(loaded.samples - samples)) < 1 / 32768
    assert not list(tmp_path.glob(".*.tmp"))


def test_wav_errors(tmp_path):
    with pytest.raises(StorageError):
        load_wav(tmp_path / "missing.wav")
    garbage = tmp_path / "garbage.wav"
    garbage.write_bytes(b"not a wav file at all")
    with pytest.raises(FormatError):
        load_wav(garbage)
    eight_bit = tmp_path / "u8.wav"
    _write_pcm(eight_bit, [128, 130, 126], width=1)
    with pytest.raises(FormatError):
        load_wav(eight_bit)


def test_audio_clip_clipping_is_counted():
    clip = AudioClip(samples=[2.0, 0.5, -3.0], sample_rate=SR)
    assert clip.clipped == 2
    np.testing.assert_array_equal(clip.samples, [1.0, 0.5, -1.0])
    with pytest.raises(DimensionError):
        AudioClip(samples=[], sample_rate=SR)
    with pytest.raises(DimensionError):
        AudioClip(samples=[0.1], sample_rate=0)


# -- STFT ------------------------------------------------------------------
def test_frame_count_policy():
    assert frame_count(8000, 64) == 126
    assert stft(np.zeros(1000), 256, 64).shape == (1000 // 64 + 1, 129)
    with pytest.raises(DimensionError):
        stft(np.zeros(100), 256, 64)
    with pytest.raises(ConfigError):
        stft(np.zeros(1000), 250, 64)


def test_zero_signal_spectrogram():
    assert not np.any(stft(np.zeros(512), 128, 32))


def test_stft_matches_naive_dft():
    rng = np.random.default_rng(1)
    samples = rng.standard_normal(32)
    n = 8
    spec = stft(samples, n, 4, window="boxcar")
    frames = samples[frame_indices(len(samples), n, 4)]
    k = np.arange(n // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(np.arange(n), k) / n)
    np.testing.assert_allclose(spec, frames @ basis, rtol=1e-9, atol=1e-12)


def test_bin_centered_sine_concentrates_energy():
    fft_size, hop, k = 64, 16, 8
    length = 1024
    samples = np.sin(2 * np.pi * k * np.arange(length) / fft_size)
    energy = np.abs(stft(samples, fft_size, hop, window="boxcar")) ** 2
    half = fft_size // 2
    interior = [i for i in range(energy.shape[0]) if i * hop - half >= 0 and i * hop + half <= length]
    for i in interior:
        assert energy[i, k] > 0.99 * energy[i].sum()


# -- mel -------------------------------------------------------------------
def test_filterbank_rows_sum_to_one():
    bank = mel_filterbank(SR, 256, 40)
    assert bank.shape == (40, 129)
    np.testing.assert_allclose(bank.sum(axis=1), 1.0, rtol=1e-12)
    assert np.all(bank >= 0)


def test_too_many_mel_bands():
    with pytest.raises(ConfigError):
        mel_filterbank(SR, 64, 80)
    with pytest.raises(ConfigError):
        mel_filterbank(SR, 256, 40, fmax=5000)


def test_zero_signal_hits_log_floor():
    params = MelConfig()
    spec = mel_spectrogram(np.zeros(2000), params, SR)
    np.testing.assert_array_equal(spec.frames, np.log(params.log_floor))
    assert spec.n_frames == frame_count(2000, params.hop)


def test_sine_peaks_in_nearest_band():
    params = MelConfig()
    spec = mel_spectrogram(_sine(1000.0), params, SR)
    centers = mel_band_centers(params.n_mels, params.fmin, params.resolved_fmax(SR))
    assert int(np.argmax(spec.frames.mean(axis=0))) == int(np.argmin(np.abs(centers - 1000.0)))


def test_amplitude_doubling_shifts_by_log2():
    params = MelConfig()
    x = _sine(700.0, amplitude=0.2) + _sine(1900.0, amplitude=0.1)
    a = mel_spectrogram(x, params, SR).frames
    b = mel_spectrogram(2 * x, params, SR).frames
    above = a > np.log(params.log_floor) + 1.0
    assert above.any()
    np.testing.assert_allclose((b - a)[above], np.log(2.0), atol=1e-9)


def test_trailing_silence_keeps_leading_frames():
    params = MelConfig()
    x = np.random.default_rng(2).uniform(-0.5, 0.5, 1600)
    a = mel_spectrogram(x, params, SR).frames
    b = mel_spectrogram(np.concatenate([x, np.zeros(800)]), params, SR).frames
    shared = (len(x) - 1 - params.fft_size // 2) // params.hop + 1
    np.testing.assert_allclose(a[:shared], b[:shared], rtol=1e-12, atol=1e-12)


def test_logmel_module_matches_mel_spectrogram():
    params = MelConfig()
    x = np.random.default_rng(3).uniform(-0.8, 0.8, (2, 1200))
    out = LogMel(params, SR)(Tensor(x)).data
    for row in range(2):
        np.testing.assert_allclose(out[row], mel_spectrogram(x[row], params, SR).frames, atol=1e-6)


# -- resampling / filtering ------------------------------------------------
def test_resample_preserves_dc():
    clip = AudioClip(samples=np.full(4000, 0.25), sample_rate=SR)
    down = resample(clip, 6000)
    assert down.sample_rate == 6000
    assert len(down) == 3000
    back = resample(down, SR)
    assert len(back) == 4000
    np.testing.assert_allclose(back.samples[100:-100], 0.25, atol=1e-3)
    with pytest.raises(ConfigError):
        resample(clip, 0)


def test_low_pass_keeps_dc_and_blocks_high_tones():
    dc = AudioClip(samples=np.full(2000, -0.4), sample_rate=SR)
    np.testing.assert_allclose(low_pass(dc, 1200.0).samples, -0.4, atol=1e-3)
    tone = AudioClip(samples=_sine(2500.0), sample_rate=SR)
    filtered = low_pass(tone, 1200.0).samples
    attenuation = 20 * np.log10(_rms(tone.samples[500:-500]) / _rms(filtered[500:-500]))
    assert attenuation >= 40.0
    with pytest.raises(ConfigError):
        low_pass(tone, 4000.0)


if __name__ == "__main__":
    import tempfile

    for name, test in list(globals().items()):
        if name.startswith("test_") and callable(test):
            print(f"🔍 {name}")
            if "tmp_path" in test.__code__.co_varnames[: test.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as tmp:
                    test(Path(tmp))
            else:
                test()
    print("✅ All dsp tests passed")
