"""Versioned checkpoints: one .npz archive per save, written atomically.

Arrays are stored under prefixed keys (model/, disc/, adam_g/, adam_d/,
rvq/). A JSON metadata blob under `__meta__` carries the format version,
the full run config, the step counter and the RNG state, so a resumed run
continues bitwise where the saved one stopped.
"""
from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from models.config import RunConfig
from services.codec import WMCodec
from services.errors import FormatError
from services.log import Colors
from services.losses import WaveDiscriminator
from services.optim import AdamState
from services.storage import atomic_output, read_bytes
from services.tensor import default_dtype

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_META_KEY = "__meta__"


@dataclass
class TrainState:
    rng: np.random.Generator
    step: int = 0
    generator: AdamState = field(default_factory=AdamState)
    discriminator: AdamState | None = None
    best_accuracy: float = 0.0
    checkpoint_paths: list[str] = field(default_factory=list)


@dataclass
class Checkpoint:
    config: RunConfig
    model: WMCodec
    discriminator: WaveDiscriminator | None
    state: TrainState


def _prefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}{key}": value for key, value in arrays.items()}


def _strip(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {key[len(prefix):]: value for key, value in arrays.items() if key.startswith(prefix)}


def save_checkpoint(path: Path, config: RunConfig, model: WMCodec, state: TrainState,
                    discriminator: WaveDiscriminator | None = None) -> Path:
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "best_accuracy": state.best_accuracy,
        "checkpoint_paths": state.checkpoint_paths,
        "rng": state.rng.bit_generator.state,
        "config": config.model_dump(mode="json"),
        "has_discriminator": discriminator is not None,
    }
    arrays = {_META_KEY: np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    arrays.update(_prefixed("model/", model.state_dict()))
    arrays.update(_prefixed("rvq/", model.quantizer.state_dict()))
    arrays.update(state.generator.state_dict("adam_g/"))
    if discriminator is not None:
        arrays.update(_prefixed("disc/", discriminator.state_dict()))
        arrays.update((state.discriminator or AdamState()).state_dict("adam_d/"))
    with atomic_output(path, "wb") as handle:
        np.savez(handle, **arrays)
    logger.info(f"{Colors.CYAN}Saved checkpoint at step {state.step}: {path}{Colors.RESET}")
    return path


def _read_archive(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    payload = read_bytes(path)
    try:
        with np.load(io.BytesIO(payload), allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (zipfile.BadZipFile, ValueError, OSError) as e:
        raise FormatError(f"Checkpoint {path} is not a readable archive: {e}") from e
    if _META_KEY not in arrays:
        raise FormatError(f"Checkpoint {path} has no metadata block")
    try:
        meta = json.loads(arrays.pop(_META_KEY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Checkpoint {path} metadata is corrupt: {e}") from e
    version = meta.get("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Checkpoint {path} has format version {version}, this build reads {CHECKPOINT_VERSION}")
    return meta, arrays


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    meta, arrays = _read_archive(path)
    config = RunConfig.model_validate(meta["config"])
    with default_dtype(config.training.precision):
        model = WMCodec(config.model)
        model.load_state_dict(_strip("model/", arrays))
        model.quantizer.load_state_dict(_strip("rvq/", arrays))
        discriminator = None
        if meta.get("has_discriminator"):
            discriminator = WaveDiscriminator(config.model.discriminator_channels, np.random.default_rng(config.model.seed + 1))
            discriminator.load_state_dict(_strip("disc/", arrays))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(
        rng=rng,
        step=int(meta["step"]),
        generator=AdamState.from_state_dict(arrays, "adam_g/"),
        discriminator=AdamState.from_state_dict(arrays, "adam_d/") if discriminator is not None else None,
        best_accuracy=float(meta.get("best_accuracy", 0.0)),
        checkpoint_paths=list(meta.get("checkpoint_paths", [])),
    )
    logger.info(f"Loaded checkpoint {path} at step {state.step}")
    return Checkpoint(config=config, model=model, discriminator=discriminator, state=state)


def load_model(path: Path) -> tuple[RunConfig, WMCodec]:
    checkpoint = load_checkpoint(path)
    return checkpoint.config, checkpoint.model
