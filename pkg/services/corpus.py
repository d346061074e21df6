"""Synthetic speech-like corpus: enveloped tone mixtures over band-limited noise."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from models.audio import AudioClip
from services.dsp import load_wav, low_pass_array, resample, save_wav
from services.errors import ConfigError, FormatError, StorageError
from services.log import Colors
from services.storage import read_bytes, write_text_atomic

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PEAK = 0.8
TONE_AMPLITUDES = (0.5, 0.25, 0.15)


@dataclass(frozen=True)
class SynthClip:
    clip: AudioClip
    seed: int
    tones: tuple[int, ...]


def synth_clip(seed: int, duration: float, sample_rate: int) -> SynthClip:
    """One clip: three integer-Hz tones (the first loudest) under a slow envelope, plus low-passed noise."""
    rng = np.random.default_rng(seed)
    length = int(round(duration * sample_rate))
    if length < 1:
        raise ConfigError(f"Clip duration {duration}s is shorter than one sample at {sample_rate} Hz")
    t = np.arange(length) / sample_rate
    high = max(int(0.3 * sample_rate), 200)
    tones = tuple(int(f) for f in rng.choice(np.arange(100, high), size=len(TONE_AMPLITUDES), replace=False))
    phases = rng.uniform(0, 2 * np.pi, size=len(tones))
    mix = sum(a * np.sin(2 * np.pi * f * t + p) for a, f, p in zip(TONE_AMPLITUDES, tones, phases))
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * int(rng.integers(1, 5)) * t + rng.uniform(0, 2 * np.pi))
    noise = low_pass_array(0.05 * rng.standard_normal(length), sample_rate, 0.25 * sample_rate)
    samples = mix * envelope + noise
    samples = PEAK * samples / max(float(np.max(np.abs(samples))), 1e-12)
    return SynthClip(clip=AudioClip(samples=samples, sample_rate=sample_rate), seed=seed, tones=tones)


def synth_corpus(out_dir: Path, n_clips: int, duration: float, sample_rate: int, seed: int) -> Path:
    """Write `n_clips` WAV files plus a manifest; returns the manifest path."""
    if n_clips < 1:
        raise ConfigError(f"n_clips must be >= 1, got {n_clips}")
    out_dir = Path(out_dir)
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n_clips)
    entries = []
    for i, clip_seed in enumerate(seeds):
        synth = synth_clip(int(clip_seed), duration, sample_rate)
        name = f"clip_{i:04d}.wav"
        save_wav(synth.clip, out_dir / name)
        entries.append({"path": name, "seed": synth.seed, "tones": list(synth.tones), "samples": len(synth.clip)})
    manifest = {
        "seed": seed,
        "sample_rate": sample_rate,
        "duration": duration,
        "clips": entries,
    }
    manifest_path = out_dir / MANIFEST_NAME
    write_text_atomic(manifest_path, json.dumps(manifest, indent=2))
    logger.info(f"Synthesized {Colors.BOLD}{n_clips}{Colors.RESET} clips into {Colors.CYAN}{out_dir}{Colors.RESET}")
    return manifest_path


def corpus_paths(directory: Path) -> list[Path]:
    """Clip paths from the manifest when present, else every WAV in name order."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if manifest_path.exists():
        try:
            manifest = json.loads(read_bytes(manifest_path).decode("utf-8"))
            return [directory / entry["path"] for entry in manifest["clips"]]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"Corpus manifest {manifest_path} is malformed: {e}") from e
    if not directory.is_dir():
        raise StorageError("Dataset directory not found", directory)
    return sorted(directory.glob("*.wav"))


def load_dataset(directory: Path, sample_rate: int) -> np.ndarray:
    """All corpus clips at `sample_rate`, cropped to the shortest one, as a (clips, samples) array."""
    paths = corpus_paths(directory)
    if not paths:
        raise StorageError("Dataset directory holds no WAV files", Path(directory))
    clips = []
    for path in paths:
        clip = load_wav(path)
        if clip.sample_rate != sample_rate:
            logger.info(f"Resampling {path.name} from {clip.sample_rate} Hz to {sample_rate} Hz")
            clip = resample(clip, sample_rate)
        clips.append(clip.samples)
    length = min(len(c) for c in clips)
    if any(len(c) != length for c in clips):
        logger.warning(f"Cropping {len(clips)} clips to the shortest length of {length} samples")
    return np.stack([c[:length] for c in clips])
