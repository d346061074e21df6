"""Training objectives: watermark cross-entropy, mel reconstruction and least-squares GAN terms."""
from __future__ import annotations

import logging

import numpy as np

from services.dsp import LogMel
from services.errors import DimensionError, MessageError
from services.nn import Conv1d, Module
from services.nn_ops import activation
from services.tensor import Tensor, absolute, clamp_min, log, mean, mul, reshape, sub, take

logger = logging.getLogger(__name__)

CE_EPSILON = 1e-7


def watermark_ce_loss(probs: Tensor, digits, eps: float = CE_EPSILON) -> tuple[Tensor, int]:
    """Mean over digits of -log p(true digit).

    `probs` is (m, b) or (B, m, b). Probabilities below `eps` are clamped;
    the number of clamped digits is returned alongside the loss.
    """
    digits = np.asarray(digits, dtype=np.int64)
    if probs.ndim == 2:
        probs = reshape(probs, (1,) + probs.shape)
        digits = digits.reshape(1, -1)
    batch, m, b = probs.shape
    digits = digits.reshape(batch, m) if digits.size == batch * m else digits
    if digits.shape != (batch, m):
        raise DimensionError(f"Digits of shape {digits.shape} do not match predictions {probs.shape}")
    if digits.min() < 0 or digits.max() >= b:
        raise MessageError(f"Digits must lie in [0, {b})")
    flat = reshape(probs, (batch * m * b,))
    true_probs = take(flat, (np.arange(batch * m) * b + digits.reshape(-1)), axis=0)
    clamped = int(np.count_nonzero(true_probs.data <= eps))
    if clamped:
        logger.warning(f"Cross-entropy clamped {clamped} true-digit probabilities at {eps}")
    return mean(log(clamp_min(true_probs, eps))) * -1.0, clamped


def mel_recon_loss(logmel: LogMel, x: Tensor, x_w: Tensor) -> Tensor:
    """L1 distance between the log-mel spectrograms of x and x_w."""
    if x.shape != x_w.shape:
        raise DimensionError(f"Reconstruction needs equal lengths, got {x.shape} and {x_w.shape}")
    return mean(absolute(sub(logmel(x), logmel(x_w))))


class WaveDiscriminator(Module):
    """Strided 1-D conv stack on raw waveforms; returns the score map and intermediate features."""

    def __init__(self, channels: int, rng: np.random.Generator):
        c = channels
        self.convs = [
            Conv1d(1, c, 15, rng, padding=7),
            Conv1d(c, 2 * c, 15, rng, stride=4, padding=7),
            Conv1d(2 * c, 4 * c, 15, rng, stride=4, padding=7),
            Conv1d(4 * c, 4 * c, 5, rng, padding=2),
        ]
        self.score = Conv1d(4 * c, 1, 3, rng, padding=1)

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        h = reshape(x, (x.shape[0], 1, x.shape[-1]))
        features = []
        for conv in self.convs:
            h = activation(conv(h), "leaky_relu", slope=0.2)
            features.append(h)
        return self.score(h), features


def lsgan_generator_loss(fake_scores: Tensor) -> Tensor:
    return mean(mul(fake_scores - 1.0, fake_scores - 1.0))


def lsgan_discriminator_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    return mean(mul(real_scores - 1.0, real_scores - 1.0)) + mean(mul(fake_scores, fake_scores))


def feature_matching_loss(real_features: list[Tensor], fake_features: list[Tensor]) -> Tensor:
    terms = [mean(absolute(sub(fake, real.detach()))) for real, fake in zip(real_features, fake_features)]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def adversarial_losses(disc: WaveDiscriminator, x: Tensor, x_w: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """(g_loss, d_loss, feature_match).

    d_loss is built from a second pass over detached inputs, so its backward
    reaches the discriminator only.
    """
    _, real_features = disc(x)
    fake_scores, fake_features = disc(x_w)
    g_loss = lsgan_generator_loss(fake_scores)
    fm = feature_matching_loss(real_features, fake_features)
    real_scores, _ = disc(x.detach())
    detached_fake, _ = disc(x_w.detach())
    d_loss = lsgan_discriminator_loss(real_scores, detached_fake)
    return g_loss, d_loss, fm
