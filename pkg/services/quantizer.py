"""Residual vector quantization with EMA codebooks.

Stage k picks the codeword nearest (Euclidean, lowest index on ties) to the
residual left by stages 0..k-1; the restored feature is the sum of the
selected codewords. The forward value replaces the input while gradients
pass straight through.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from services.errors import ConfigError, DimensionError, FormatError, LookupIndexError
from services.tensor import Tensor, get_default_dtype, mean, mul, straight_through, sub

logger = logging.getLogger(__name__)

_CHUNK = 256


def nearest_codewords(points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Index of the closest codeword for every row of `points`."""
    if points.shape[-1] != vectors.shape[-1]:
        raise DimensionError(f"Feature dim {points.shape[-1]} does not match codebook dim {vectors.shape[-1]}")
    out = np.empty(points.shape[0], dtype=np.int64)
    for start in range(0, points.shape[0], _CHUNK):
        block = points[start:start + _CHUNK]
        diff = block[:, None, :] - vectors[None, :, :]
        out[start:start + _CHUNK] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out


@dataclass
class Codebook:
    vectors: np.ndarray
    ema_counts: np.ndarray = field(default=None)
    ema_sums: np.ndarray = field(default=None)
    idle_steps: np.ndarray = field(default=None)

    def __post_init__(self):
        size = self.vectors.shape[0]
        if self.ema_counts is None:
            self.ema_counts = np.ones(size, dtype=self.vectors.dtype)
        if self.ema_sums is None:
            self.ema_sums = self.vectors.copy()
        if self.idle_steps is None:
            self.idle_steps = np.zeros(size, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def reseed(self, entry: int, value: np.ndarray) -> None:
        self.vectors[entry] = value
        self.ema_sums[entry] = value
        self.ema_counts[entry] = 1.0
        self.idle_steps[entry] = 0


@dataclass
class QuantizerOutput:
    indices: np.ndarray            # (B, T, N_C)
    quantized: Tensor              # (B, T, d), straight-through
    commitment: Tensor             # scalar, mean over stages
    residuals: list[np.ndarray]    # per stage, (B*T, d)


def codebook_update(codebooks: list[Codebook], residuals: list[np.ndarray], assignments: list[np.ndarray],
                    decay: float, patience: int | None = None, rng: np.random.Generator | None = None) -> list[int]:
    """EMA update of every stage; returns the number of refreshed entries per stage.

    Entries idle for `patience` consecutive updates are re-seeded from random
    rows of that stage's residuals.
    """
    if not 0.0 < decay < 1.0:
        raise ConfigError(f"EMA decay must lie in (0, 1), got {decay}")
    refreshed = []
    for stage, (book, points, idx) in enumerate(zip(codebooks, residuals, assignments)):
        points = np.asarray(points, dtype=book.vectors.dtype).reshape(-1, book.dim)
        idx = np.asarray(idx).reshape(-1)
        counts = np.bincount(idx, minlength=book.size).astype(book.vectors.dtype)
        sums = np.zeros_like(book.ema_sums)
        np.add.at(sums, idx, points)
        book.ema_counts = decay * book.ema_counts + (1.0 - decay) * counts
        book.ema_sums = decay * book.ema_sums + (1.0 - decay) * sums
        book.vectors = book.ema_sums / np.maximum(book.ema_counts, 1e-12)[:, None]
        used = counts > 0
        book.idle_steps = np.where(used, 0, book.idle_steps + 1)
        dead = np.flatnonzero(book.idle_steps >= patience) if patience else np.empty(0, dtype=np.int64)
        if dead.size and rng is not None and len(points):
            picks = rng.integers(0, len(points), size=dead.size)
            for entry, row in zip(dead, picks):
                book.reseed(int(entry), points[row])
            logger.info(f"Refreshed {dead.size} dead code(s) in codebook {stage}")
        refreshed.append(int(dead.size) if rng is not None else 0)
    return refreshed


class ResidualVectorQuantizer:
    def __init__(self, n_codebooks: int, codebook_size: int, dim: int, rng: np.random.Generator,
                 decay: float = 0.99, patience: int = 50):
        if n_codebooks < 1:
            raise ConfigError("At least one codebook is required")
        dtype = get_default_dtype()
        self.codebooks = [
            Codebook(vectors=rng.standard_normal((codebook_size, dim)).astype(dtype))
            for _ in range(n_codebooks)
        ]
        self.decay = decay
        self.patience = patience
        self.initialized = False

    @property
    def n_codebooks(self) -> int:
        return len(self.codebooks)

    @property
    def codebook_size(self) -> int:
        return self.codebooks[0].size

    @property
    def dim(self) -> int:
        return self.codebooks[0].dim

    def _data_init(self, stage: int, points: np.ndarray, rng: np.random.Generator) -> None:
        book = self.codebooks[stage]
        rows = rng.choice(len(points), size=book.size, replace=len(points) < book.size)
        book.vectors = points[rows].astype(book.vectors.dtype)
        book.ema_sums = book.vectors.copy()
        book.ema_counts = np.ones(book.size, dtype=book.vectors.dtype)

    def quantize(self, z: Tensor, rng: np.random.Generator | None = None) -> QuantizerOutput:
        """Quantize (B, T, d) features.

        With `rng` given on the first call, each codebook is initialized from
        random residual rows before its stage runs.
        """
        if z.ndim != 3 or z.shape[-1] != self.dim:
            raise DimensionError(f"Quantizer expects (B, T, {self.dim}) features, got {z.shape}")
        batch, frames, dim = z.shape
        flat = z.data.reshape(-1, dim)
        init = rng is not None and not self.initialized
        residual = flat.copy()
        restored = np.zeros_like(flat)
        stage_indices, residuals, commitments = [], [], []
        for stage, book in enumerate(self.codebooks):
            if init:
                self._data_init(stage, residual, rng)
            idx = nearest_codewords(residual, book.vectors)
            chosen = book.vectors[idx]
            residuals.append(residual.copy())
            # commitment pulls the running residual of z toward its codeword
            target = (restored + chosen).reshape(batch, frames, dim)
            err = sub(z, target)
            commitments.append(mean(mul(err, err)))
            restored = restored + chosen
            residual = residual - chosen
            stage_indices.append(idx)
        if init:
            self.initialized = True
        commitment = commitments[0]
        for term in commitments[1:]:
            commitment = commitment + term
        commitment = commitment * (1.0 / len(commitments))
        quantized = straight_through(z, restored.reshape(z.shape))
        indices = np.stack(stage_indices, axis=-1).reshape(batch, frames, self.n_codebooks)
        return QuantizerOutput(indices=indices, quantized=quantized, commitment=commitment, residuals=residuals)

    def decode(self, indices: np.ndarray) -> np.ndarray:
        """Sum of codewords for (..., N_C) indices."""
        indices = np.asarray(indices)
        if indices.shape[-1] != self.n_codebooks:
            raise DimensionError(f"Expected {self.n_codebooks} indices per frame, got {indices.shape[-1]}")
        if indices.size and (indices.min() < 0 or indices.max() >= self.codebook_size):
            raise LookupIndexError(f"Code index out of range [0, {self.codebook_size})")
        out = np.zeros(indices.shape[:-1] + (self.dim,), dtype=self.codebooks[0].vectors.dtype)
        for stage, book in enumerate(self.codebooks):
            out = out + book.vectors[indices[..., stage]]
        return out

    def update(self, output: QuantizerOutput, rng: np.random.Generator | None = None) -> list[int]:
        assignments = [output.indices[..., k].reshape(-1) for k in range(self.n_codebooks)]
        return codebook_update(self.codebooks, output.residuals, assignments, self.decay, self.patience, rng)

    def perplexity(self, indices: np.ndarray) -> list[float]:
        """Per-stage codebook usage perplexity, exp(entropy of the index histogram)."""
        values = []
        for stage in range(self.n_codebooks):
            counts = np.bincount(np.asarray(indices)[..., stage].reshape(-1), minlength=self.codebook_size)
            probs = counts / max(counts.sum(), 1)
            nonzero = probs[probs > 0]
            values.append(float(np.exp(-np.sum(nonzero * np.log(nonzero)))))
        return values

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"initialized": np.asarray(self.initialized)}
        for k, book in enumerate(self.codebooks):
            state[f"{k}.vectors"] = book.vectors.copy()
            state[f"{k}.ema_counts"] = book.ema_counts.copy()
            state[f"{k}.ema_sums"] = book.ema_sums.copy()
            state[f"{k}.idle_steps"] = book.idle_steps.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, book in enumerate(self.codebooks):
            try:
                vectors = np.array(state[f"{k}.vectors"])
                if vectors.shape != book.vectors.shape:
                    raise FormatError(f"Codebook {k} has shape {vectors.shape}, expected {book.vectors.shape}")
                book.vectors = vectors
                book.ema_counts = np.array(state[f"{k}.ema_counts"])
                book.ema_sums = np.array(state[f"{k}.ema_sums"])
                book.idle_steps = np.array(state[f"{k}.idle_steps"])
            except KeyError as e:
                raise FormatError(f"Checkpoint is missing codebook entry {e}") from None
        self.initialized = bool(state.get("initialized", True))
