"""Signal attacks used as the training disturbance layer and for robustness evaluation.

Every attack is a pure function of (input, spec, spec.seed). The random
draws are collected in an AttackPlan first, so the numpy path
(`apply_attack`) and the differentiable path (`DisturbanceLayer`) produce
the same samples.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from models.audio import AudioClip
from models.config import AttackSpec
from services.dsp import low_pass_array, lowpass_taps, resample_by_ratio
from services.errors import ConfigError, DimensionError
from services.nn_ops import conv1d
from services.tensor import Tensor, add, getitem, mul, pad, reshape, straight_through, take

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackPlan:
    spec: AttackSpec
    length: int
    sample_rate: int
    unit_noise: np.ndarray | None = None
    drop_positions: np.ndarray | None = None
    keep_indices: np.ndarray | None = None
    delay: int = 0
    taps: np.ndarray | None = None
    ratio: Fraction | None = None

    @property
    def kind(self) -> str:
        return self.spec.kind


def resample_fraction(spec: AttackSpec, sample_rate: int) -> Fraction:
    if spec.target_rate is not None:
        return Fraction(int(spec.target_rate), int(sample_rate))
    return Fraction(spec.resample_ratio).limit_denominator(100)


def resplice_keep_indices(length: int, segments: int, rng: np.random.Generator) -> np.ndarray:
    """Indices kept after removing floor(length / 3) samples in `segments` pieces.

    Piece lengths are a random composition of the removed total; the kept
    samples are split into gaps around the pieces, so pieces never overlap
    and the kept samples stay in their original order.
    """
    removed = length // 3
    kept = length - removed
    if removed == 0:
        return np.arange(length)
    segments = min(segments, removed)
    if segments == 1:
        pieces = np.array([removed])
    else:
        cuts = np.sort(rng.choice(np.arange(1, removed), size=segments - 1, replace=False))
        pieces = np.diff(np.concatenate(([0], cuts, [removed])))
    anchors = np.sort(rng.integers(0, kept + 1, size=segments))
    gaps = np.diff(np.concatenate(([0], anchors, [kept])))
    mask = np.ones(length, dtype=bool)
    cursor = 0
    for gap, piece in zip(gaps[:-1], pieces):
        cursor += int(gap)
        mask[cursor:cursor + int(piece)] = False
        cursor += int(piece)
    return np.flatnonzero(mask)


def plan_attack(length: int, sample_rate: int, spec: AttackSpec) -> AttackPlan:
    """Validate the parameters against the clip and draw every random quantity."""
    if length < 1:
        raise DimensionError("Cannot attack an empty clip")
    rng = np.random.default_rng(spec.seed)
    kind = spec.kind
    if kind == "noise":
        z = rng.standard_normal(length)
        return AttackPlan(spec, length, sample_rate, unit_noise=z / np.sqrt(np.mean(z * z)))
    if kind == "sd":
        count = int(round(spec.p * length))
        positions = np.sort(rng.choice(length, size=count, replace=False))
        return AttackPlan(spec, length, sample_rate, drop_positions=positions)
    if kind == "ea":
        delay = int(round(spec.delay_ms * sample_rate / 1000.0))
        if delay < 1 or delay >= length:
            raise ConfigError(f"Echo delay of {delay} samples must lie in [1, {length}) for a {length}-sample clip")
        return AttackPlan(spec, length, sample_rate, delay=delay)
    if kind == "lp":
        taps = lowpass_taps(spec.cutoff_ratio * sample_rate / 2, sample_rate)
        return AttackPlan(spec, length, sample_rate, taps=taps)
    if kind == "rsp":
        return AttackPlan(spec, length, sample_rate, ratio=resample_fraction(spec, sample_rate))
    if kind == "resplice":
        return AttackPlan(spec, length, sample_rate, keep_indices=resplice_keep_indices(length, spec.segments, rng))
    return AttackPlan(spec, length, sample_rate)


def _renormalize(y: np.ndarray) -> np.ndarray:
    """Scale the whole clip down so its peak is 1; quieter clips pass through."""
    peak = float(np.max(np.abs(y))) if y.size else 0.0
    return y / peak if peak > 1.0 else y


def _add_noise(x: np.ndarray, snr_db: float, unit_noise: np.ndarray, iterations: int = 8) -> np.ndarray:
    """x plus white noise at `snr_db` against x, clipped to [-1, 1].

    Clipping only touches overshooting samples and shrinks the residual, so
    the noise scale is re-fitted until the clipped residual has the target
    power again.
    """
    target = float(np.mean(x * x)) / 10.0 ** (snr_db / 10.0)
    if target <= 0.0:
        return np.clip(x, -1.0, 1.0)
    scale = np.sqrt(target)
    y = np.clip(x + scale * unit_noise, -1.0, 1.0)
    for _ in range(iterations):
        power = float(np.mean((y - x) ** 2))
        if power <= 0.0 or abs(power / target - 1.0) < 1e-9:
            break
        scale *= np.sqrt(target / power)
        y = np.clip(x + scale * unit_noise, -1.0, 1.0)
    return y


def _resample_round_trip(x: np.ndarray, ratio: Fraction) -> np.ndarray:
    back = resample_by_ratio(resample_by_ratio(x, ratio), 1 / ratio)
    length = len(x)
    if len(back) >= length:
        return back[:length]
    return np.pad(back, (0, length - len(back)), mode="edge")


def run_plan(x: np.ndarray, plan: AttackPlan) -> np.ndarray:
    spec = plan.spec
    x = np.asarray(x, dtype=np.float64)
    if len(x) != plan.length:
        raise DimensionError(f"Attack plan was drawn for {plan.length} samples, got {len(x)}")
    kind = plan.kind
    if kind == "identity":
        return x.copy()
    if kind == "rsp":
        return _renormalize(_resample_round_trip(x, plan.ratio))
    if kind == "noise":
        return _add_noise(x, spec.snr_db, plan.unit_noise)
    if kind == "sd":
        y = x.copy()
        y[plan.drop_positions] = 0.0
        return y
    if kind == "ar":
        return _renormalize(x * spec.factor)
    if kind == "ea":
        y = x.copy()
        y[plan.delay:] += spec.decay * x[:-plan.delay]
        return _renormalize(y)
    if kind == "lp":
        return _renormalize(low_pass_array(x, plan.sample_rate, spec.cutoff_ratio * plan.sample_rate / 2))
    if kind == "resplice":
        return x[plan.keep_indices]
    raise ConfigError(f"Unknown attack '{kind}'")


def apply_attack(clip: AudioClip, spec: AttackSpec) -> AudioClip:
    plan = plan_attack(len(clip), clip.sample_rate, spec)
    return AudioClip(samples=run_plan(clip.samples, plan), sample_rate=clip.sample_rate)


class DisturbanceLayer:
    """Differentiable attacks for training; one attack per batch item.

    Identity is always part of the pool. Resampling passes gradients
    straight through; every other attack is built from differentiable ops
    whose forward values equal `run_plan`.
    """

    def __init__(self, pool: Sequence[AttackSpec], sample_rate: int):
        self.sample_rate = sample_rate
        self.pool = [AttackSpec(kind="identity")] + [s for s in pool if s.kind != "identity"]

    def sample(self, rng: np.random.Generator, batch: int) -> list[AttackSpec]:
        choices = rng.integers(0, len(self.pool), size=batch)
        seeds = rng.integers(0, 2**31 - 1, size=batch)
        return [self.pool[int(c)].model_copy(update={"seed": int(s)}) for c, s in zip(choices, seeds)]

    def __call__(self, x: Tensor, specs: Sequence[AttackSpec]) -> list[Tensor]:
        """x is (B, L); returns one (1, L_i) tensor per item."""
        if x.ndim != 2 or x.shape[0] != len(specs):
            raise DimensionError(f"DisturbanceLayer needs (B, L) input with one spec per item, got {x.shape}")
        return [self.attack(getitem(x, (slice(i, i + 1),)), spec) for i, spec in enumerate(specs)]

    def attack(self, x: Tensor, spec: AttackSpec) -> Tensor:
        length = x.shape[-1]
        plan = plan_attack(length, self.sample_rate, spec)
        data = x.data.reshape(-1)
        kind = plan.kind
        if kind == "identity":
            return x
        if kind == "rsp":
            return self._renormalize(straight_through(x, _resample_round_trip(data, plan.ratio).reshape(x.shape)))
        if kind == "noise":
            return straight_through(x, _add_noise(data, spec.snr_db, plan.unit_noise).reshape(x.shape))
        if kind == "sd":
            mask = np.ones(length)
            mask[plan.drop_positions] = 0.0
            return mul(x, mask.reshape(x.shape))
        if kind == "ar":
            return self._renormalize(mul(x, spec.factor))
        if kind == "ea":
            delayed = pad(getitem(x, (slice(None), slice(0, length - plan.delay))), ((0, 0), (plan.delay, 0)))
            return self._renormalize(add(x, mul(delayed, spec.decay)))
        if kind == "lp":
            half = len(plan.taps) // 2
            edge = np.clip(np.arange(-half, length + half), 0, length - 1)
            padded = reshape(take(x, edge, axis=-1), (1, 1, length + 2 * half))
            kernel = Tensor(plan.taps.reshape(1, 1, -1), dtype=x.dtype)
            return self._renormalize(reshape(conv1d(padded, kernel), (1, length)))
        if kind == "resplice":
            return take(x, plan.keep_indices, axis=-1)
        raise ConfigError(f"Unknown attack '{kind}'")

    @staticmethod
    def _renormalize(y: Tensor) -> Tensor:
        peak = float(np.max(np.abs(y.data)))
        return mul(y, 1.0 / peak) if peak > 1.0 else y
