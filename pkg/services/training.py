"""Joint training of the codec and the watermark extractor.

Each step: embed -> quantize -> decode, one sampled attack per item, extract,
backward through the weighted objective, Adam, then the EMA codebook update.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from models.config import RunConfig
from models.reports import METRICS_COLUMNS, LossReport
from services.attacks import DisturbanceLayer
from services.checkpoint import TrainState, load_checkpoint, save_checkpoint
from services.codec import WMCodec
from services.errors import ConfigError, DimensionError, TrainingError
from services.log import Colors
from services.losses import WaveDiscriminator, adversarial_losses, mel_recon_loss, watermark_ce_loss
from services.nn_ops import softmax
from services.optim import Adam, AdamState
from services.storage import read_bytes, write_bytes_atomic, write_text_atomic
from services.tensor import Tensor, concat, default_dtype, no_grad

logger = logging.getLogger(__name__)

__all__ = ["MetricsLog", "TrainResult", "TrainState", "Trainer", "train_loop"]


class MetricsLog:
    """CSV log with a fixed column order, rewritten atomically on every append."""

    def __init__(self, path: Path, rows: list[dict] | None = None):
        self.path = Path(path)
        self.rows: list[dict] = rows or []

    @classmethod
    def resume(cls, path: Path, up_to_step: int) -> MetricsLog:
        path = Path(path)
        if not path.exists():
            return cls(path)
        text = read_bytes(path).decode("utf-8")
        rows = [row for row in csv.DictReader(io.StringIO(text)) if int(row["step"]) <= up_to_step]
        return cls(path, rows)

    def append(self, step: int, report: LossReport) -> None:
        self.rows.append(report.csv_row(step))
        self.write()

    def write(self) -> None:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        write_text_atomic(self.path, buffer.getvalue())


class Trainer:
    def __init__(self, config: RunConfig, model: WMCodec | None = None,
                 discriminator: WaveDiscriminator | None = None, state: TrainState | None = None):
        self.config = config
        self.dtype = config.training.precision
        with default_dtype(self.dtype):
            self.model = model if model is not None else WMCodec(config.model)
            if config.model.discriminator and discriminator is None:
                discriminator = WaveDiscriminator(
                    config.model.discriminator_channels, np.random.default_rng(config.model.seed + 1)
                )
        self.discriminator = discriminator if config.model.discriminator else None
        self.state = state if state is not None else TrainState(rng=np.random.default_rng(config.seed))

        training = config.training
        self.generator_opt = Adam(self.model.parameters(), lr=training.lr, grad_clip=training.grad_clip)
        self.generator_opt.state = self.state.generator
        self.discriminator_opt = None
        if self.discriminator is not None:
            if self.state.discriminator is None:
                self.state.discriminator = AdamState()
            self.discriminator_opt = Adam(
                self.discriminator.parameters(), lr=training.discriminator_lr, grad_clip=training.grad_clip
            )
            self.discriminator_opt.state = self.state.discriminator
        self.disturbance = DisturbanceLayer(training.attack_pool, config.model.sample_rate)

    def _extraction_loss(self, attacked: list[Tensor], digits: np.ndarray) -> tuple[Tensor, int]:
        """CE over items grouped by post-attack length, weighted by group size."""
        groups: dict[int, list[int]] = {}
        for i, item in enumerate(attacked):
            groups.setdefault(item.shape[-1], []).append(i)
        batch = len(attacked)
        loss, clamped = None, 0
        for members in groups.values():
            x = concat([attacked[i] for i in members], axis=0)
            probs = softmax(self.model.extract(x), axis=-1)
            group_loss, group_clamped = watermark_ce_loss(probs, digits[members])
            clamped += group_clamped
            weighted = group_loss * (len(members) / batch)
            loss = weighted if loss is None else loss + weighted
        return loss, clamped

    def _probe_accuracy(self, x_w: Tensor, digits: np.ndarray) -> float:
        with no_grad():
            logits = self.model.extract(x_w.detach()).data
        return float(np.mean(logits.argmax(axis=-1) == digits))

    def train_step(self, batch: np.ndarray, digits: np.ndarray, probe: bool = False) -> LossReport:
        """One optimization step on a (B, L) batch with (B, m) message digits."""
        batch = np.asarray(batch)
        digits = np.asarray(digits, dtype=np.int64)
        if batch.ndim != 2 or digits.shape != (batch.shape[0], self.config.model.m):
            raise DimensionError(
                f"train_step needs (B, L) audio and (B, {self.config.model.m}) digits, got {batch.shape} and {digits.shape}"
            )
        weights = self.config.model.loss_weights
        rng = self.state.rng
        with default_dtype(self.dtype):
            x = Tensor(batch)
            output = self.model(x, digits, rng=rng)
            mel = mel_recon_loss(self.model.watermark_decoder.logmel, x, output.x_w)
            specs = self.disturbance.sample(rng, batch.shape[0])
            ce, clamped = self._extraction_loss(self.disturbance(output.x_w, specs), digits)
            commitment = output.quantized.commitment

            total = mel * weights.mel + commitment * weights.commitment + ce * weights.watermark_ce
            g_loss = d_loss = fm = None
            if self.discriminator is not None:
                g_loss, d_loss, fm = adversarial_losses(self.discriminator, x, output.x_w)
                total = total + g_loss * weights.adversarial + fm * weights.feature_match

            values = {
                "mel_recon": mel.item(),
                "quantizer": commitment.item(),
                "watermark_ce": ce.item(),
                "adversarial_g": g_loss.item() if g_loss is not None else None,
                "adversarial_d": d_loss.item() if d_loss is not None else None,
                "feature_match": fm.item() if fm is not None else None,
            }
            for name, value in values.items():
                if value is not None and not math.isfinite(value):
                    raise TrainingError(f"non-finite {name} loss ({value}) at step {self.state.step + 1}")

            self.generator_opt.zero_grad()
            total.backward()
            self.generator_opt.step()
            if self.discriminator_opt is not None:
                # generator backward also reached the discriminator
                self.discriminator_opt.zero_grad()
                d_loss.backward()
                self.discriminator_opt.step()
            self.model.quantizer.update(output.quantized, rng)

            probe_accuracy = self._probe_accuracy(output.x_w, digits) if probe else None

        self.state.step += 1
        if probe_accuracy is not None:
            self.state.best_accuracy = max(self.state.best_accuracy, probe_accuracy)
        report = LossReport(
            **values,
            total=LossReport.weighted_total(
                weights, values["mel_recon"], values["quantizer"], values["watermark_ce"],
                values["adversarial_g"], values["feature_match"],
            ),
            probe_accuracy=probe_accuracy,
            ce_clamped=clamped,
        )
        if probe:
            perplexity = ", ".join(f"{p:.1f}" for p in self.model.quantizer.perplexity(output.quantized.indices))
            logger.debug(f"Step {self.state.step} codebook perplexity: [{perplexity}]")
        return report


@dataclass
class TrainResult:
    state: TrainState
    metrics_path: Path
    checkpoints: list[Path] = field(default_factory=list)
    last_report: LossReport | None = None


def _save(trainer: Trainer, checkpoint_dir: Path) -> Path:
    path = checkpoint_dir / f"step_{trainer.state.step:06d}.npz"
    trainer.state.checkpoint_paths.append(str(path))
    save_checkpoint(path, trainer.config, trainer.model, trainer.state, trainer.discriminator)
    write_bytes_atomic(checkpoint_dir / "latest.npz", read_bytes(path))
    return path


def train_loop(config: RunConfig, dataset: np.ndarray, resume: Path | None = None) -> TrainResult:
    """Train for `config.training.steps` total steps with periodic checkpoints.

    With `resume`, model, optimizer, codebook and RNG state come from the
    checkpoint and the loop continues at its step counter; the metrics log
    is truncated to that step so reruns line up.
    """
    dataset = np.asarray(dataset)
    if dataset.ndim != 2 or dataset.shape[0] == 0 or dataset.shape[1] == 0:
        raise ConfigError(f"Training needs a non-empty (clips, samples) dataset, got shape {dataset.shape}")
    training = config.training
    checkpoint_dir = Path(config.checkpoint_dir)
    metrics_path = checkpoint_dir / "metrics.csv"

    if resume is not None:
        checkpoint = load_checkpoint(resume)
        if checkpoint.config.model != config.model:
            raise ConfigError(f"Checkpoint {resume} was trained with a different model config")
        trainer = Trainer(config, checkpoint.model, checkpoint.discriminator, checkpoint.state)
        metrics = MetricsLog.resume(metrics_path, trainer.state.step)
        logger.info(f"Resuming from {Colors.CYAN}{resume}{Colors.RESET} at step {trainer.state.step}")
    else:
        trainer = Trainer(config)
        metrics = MetricsLog(metrics_path)

    result = TrainResult(state=trainer.state, metrics_path=metrics_path)
    rng = trainer.state.rng
    clips, m, b = dataset.shape[0], config.model.m, config.model.b
    logger.info(
        f"Training {trainer.model.num_parameters()} parameters on {clips} clips "
        f"for {training.steps} steps (batch {training.batch_size}, {training.precision})"
    )
    while trainer.state.step < training.steps:
        rows = rng.choice(clips, size=training.batch_size, replace=clips < training.batch_size)
        digits = rng.integers(0, b, size=(training.batch_size, m))
        step = trainer.state.step + 1
        logged = step % training.log_interval == 0
        report = trainer.train_step(dataset[rows], digits, probe=logged)
        result.last_report = report
        if logged:
            metrics.append(step, report)
            logger.info(
                f"Step {Colors.BOLD}{step}{Colors.RESET}: total={report.total:.4f} "
                f"mel={report.mel_recon:.4f} ce={report.watermark_ce:.4f} "
                f"probe={Colors.GREEN}{report.probe_accuracy:.3f}{Colors.RESET}"
            )
        if step % training.checkpoint_interval == 0 or step == training.steps:
            result.checkpoints.append(_save(trainer, checkpoint_dir))
    if not metrics.rows:
        metrics.write()
    logger.info(f"{Colors.GREEN}Training finished at step {trainer.state.step}{Colors.RESET}, metrics: {metrics_path}")
    return result
