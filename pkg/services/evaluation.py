"""Quality and robustness metrics, and the CSV/JSON report writers."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from models.audio import AudioClip, WatermarkMessage
from models.config import AttackSpec
from models.reports import ATTACK_COLUMNS, QUALITY_COLUMNS, ROBUSTNESS_COLUMNS, QualityRow, RobustnessMatrix
from services.attacks import plan_attack, run_plan
from services.codec import WMCodec
from services.dsp import stft
from services.errors import DimensionError, MetricError
from services.log import Colors
from services.storage import write_text_atomic

logger = logging.getLogger(__name__)

SI_SNR_CAP_DB = 60.0
_COLUMN_FOR_KIND = {kind: column for column, kind in ATTACK_COLUMNS.items()}


def _samples(value: AudioClip | np.ndarray) -> np.ndarray:
    return value.samples if isinstance(value, AudioClip) else np.asarray(value, dtype=np.float64)


def digit_accuracy(expected: WatermarkMessage, decoded: WatermarkMessage) -> float:
    """Fraction of positions where the decoded digit matches."""
    if expected.m != decoded.m or expected.base != decoded.base:
        raise MetricError(
            f"Cannot compare {expected.m} base-{expected.base} digits with {decoded.m} base-{decoded.base} digits"
        )
    matches = sum(a == b for a, b in zip(expected.digits, decoded.digits))
    return matches / expected.m


def si_snr(reference: AudioClip | np.ndarray, estimate: AudioClip | np.ndarray, cap_db: float = SI_SNR_CAP_DB) -> float:
    """Scale-invariant SNR in dB over zero-mean signals, capped at `cap_db`."""
    ref = _samples(reference)
    est = _samples(estimate)
    if ref.shape != est.shape:
        raise DimensionError(f"SI-SNR needs equal lengths, got {ref.shape} and {est.shape}")
    ref = ref - ref.mean()
    est = est - est.mean()
    ref_power = float(np.dot(ref, ref))
    if ref_power <= 0.0:
        raise MetricError("SI-SNR reference has zero power")
    target = (float(np.dot(est, ref)) / ref_power) * ref
    noise = est - target
    noise_power = float(np.dot(noise, noise))
    target_power = float(np.dot(target, target))
    if noise_power <= target_power * 10.0 ** (-cap_db / 10.0):
        return cap_db
    return min(cap_db, 10.0 * math.log10(target_power / noise_power))


def log_spectral_distance(x: AudioClip | np.ndarray, x_w: AudioClip | np.ndarray, fft_size: int = 256,
                          hop: int = 64, floor: float = 1e-8) -> float:
    """Mean over frames of the RMS difference of natural-log magnitude spectra."""
    a = _samples(x)
    b = _samples(x_w)
    if a.shape != b.shape:
        raise DimensionError(f"Log-spectral distance needs equal lengths, got {a.shape} and {b.shape}")
    log_a = np.log(np.maximum(np.abs(stft(a, fft_size, hop)), floor))
    log_b = np.log(np.maximum(np.abs(stft(b, fft_size, hop)), floor))
    return float(np.mean(np.sqrt(np.mean((log_a - log_b) ** 2, axis=-1))))


def attack_columns(attacks: Sequence[AttackSpec]) -> list[str]:
    """Report columns evaluated for a pool; the normal column is always present."""
    kinds = {spec.kind for spec in attacks} | {"identity"}
    return [column for column, kind in ATTACK_COLUMNS.items() if kind in kinds]


def robustness_eval(model: WMCodec, clips: Sequence[AudioClip | np.ndarray], attacks: Sequence[AttackSpec],
                    trials: int, seed: int = 0, label: str = "wmcodec",
                    matrix: RobustnessMatrix | None = None) -> RobustnessMatrix:
    """Embed `trials` random messages per clip, attack each watermarked clip, extract and score.

    Every cell is the unweighted mean of per-trial digit accuracies. All
    random draws come from `seed` in a fixed order.
    """
    if trials < 1:
        raise MetricError(f"trials must be >= 1, got {trials}")
    if not clips:
        raise MetricError("Robustness evaluation needs at least one clip")
    config = model.config
    rng = np.random.default_rng(seed)
    pool = [AttackSpec(kind="identity")] + [spec for spec in attacks if spec.kind != "identity"]
    scores: dict[str, list[float]] = {column: [] for column in attack_columns(attacks)}

    for index, clip in enumerate(clips):
        samples = _samples(clip)
        for _ in range(trials):
            message = WatermarkMessage.random(rng, config.m, config.b)
            watermarked = model.watermark_clip(samples, message)
            for spec in pool:
                seeded = spec.model_copy(update={"seed": int(rng.integers(0, 2**31 - 1))})
                attacked = run_plan(watermarked, plan_attack(len(watermarked), config.sample_rate, seeded))
                digits, _ = model.extract_clip(attacked)
                decoded = WatermarkMessage(digits=tuple(int(d) for d in digits), base=config.b)
                scores[_COLUMN_FOR_KIND[spec.kind]].append(digit_accuracy(message, decoded))
        logger.debug(f"Evaluated clip {index + 1}/{len(clips)}")

    accuracies = {column: math.fsum(values) / len(values) for column, values in scores.items()}
    matrix = matrix if matrix is not None else RobustnessMatrix()
    row = matrix.add_row(label, config.n_codebooks, config.bandwidth_bps, config.capacity_bits, accuracies)
    logger.info(f"Robustness of {Colors.BOLD}{label}{Colors.RESET}: average {Colors.GREEN}{row['average']:.4f}{Colors.RESET}")
    return matrix


def quality_eval(model: WMCodec, clips: Sequence[AudioClip | np.ndarray], seed: int = 0,
                 label: str = "wmcodec") -> QualityRow:
    """Mean SI-SNR and log-spectral distance of watermarked reconstructions."""
    if not clips:
        raise MetricError("Quality evaluation needs at least one clip")
    config = model.config
    rng = np.random.default_rng(seed)
    snrs, distances = [], []
    for clip in clips:
        samples = _samples(clip)
        message = WatermarkMessage.random(rng, config.m, config.b)
        watermarked = model.watermark_clip(samples, message)
        snrs.append(si_snr(samples, watermarked))
        distances.append(log_spectral_distance(samples, watermarked, config.mel.fft_size, config.mel.hop))
    return QualityRow(
        model=label,
        n_codebooks=config.n_codebooks,
        bandwidth_bps=config.bandwidth_bps,
        capacity_bps=config.capacity_bits,
        si_snr_db=math.fsum(snrs) / len(snrs),
        lsd=math.fsum(distances) / len(distances),
    )


def _csv_text(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({column: "" if row.get(column) is None else row[column] for column in columns})
    return buffer.getvalue()


def write_robustness_report(matrix: RobustnessMatrix, report_dir: Path, config: dict | None = None,
                            stem: str = "robustness") -> tuple[Path, Path]:
    report_dir = Path(report_dir)
    csv_path = report_dir / f"{stem}.csv"
    json_path = report_dir / f"{stem}.json"
    write_text_atomic(csv_path, _csv_text(ROBUSTNESS_COLUMNS, matrix.rows))
    payload = {"columns": list(ROBUSTNESS_COLUMNS), "rows": matrix.rows, "config": config}
    write_text_atomic(json_path, json.dumps(payload, indent=2))
    logger.info(f"Wrote robustness report to {Colors.CYAN}{csv_path}{Colors.RESET}")
    return csv_path, json_path


def write_quality_report(rows: Sequence[QualityRow], report_dir: Path, config: dict | None = None,
                         stem: str = "quality") -> tuple[Path, Path]:
    report_dir = Path(report_dir)
    csv_path = report_dir / f"{stem}.csv"
    json_path = report_dir / f"{stem}.json"
    dumped = [row.model_dump() for row in rows]
    write_text_atomic(csv_path, _csv_text(QUALITY_COLUMNS, dumped))
    payload = {"columns": list(QUALITY_COLUMNS), "rows": dumped, "config": config}
    write_text_atomic(json_path, json.dumps(payload, indent=2))
    logger.info(f"Wrote quality report to {Colors.CYAN}{csv_path}{Colors.RESET}")
    return csv_path, json_path
