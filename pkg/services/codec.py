"""The watermarking codec network.

    x --SpeechEncoder--> z_s --+
                               +--imprint (AIU x iters)--> z --RVQ--> z' --SpeechDecoder--> x_w
    w --WatermarkEncoder--> z_w+
    x_w --LogMel--> WatermarkDecoder --> per-digit probabilities

Features are (B, T, D) with T = ceil(L / hop), hop = product(encoder_strides).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from models.audio import WatermarkMessage
from models.config import ModelConfig
from services.bitstream import CodeStream
from services.dsp import LogMel
from services.errors import DimensionError, MessageError
from services.nn import Conv1d, Conv2d, ConvTranspose1d, Embedding, LayerNorm, Linear, Module
from services.nn_ops import activation, softmax
from services.quantizer import QuantizerOutput, ResidualVectorQuantizer
from services.tensor import (
    Tensor,
    broadcast_to,
    concat,
    getitem,
    matmul,
    mean,
    no_grad,
    pad,
    reshape,
    tanh,
    transpose,
)

logger = logging.getLogger(__name__)


class ResidualUnit(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv1d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv1d(channels, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(activation(self.conv1(activation(x, "elu")), "elu"))


class SpeechEncoder(Module):
    """Strided conv stack: (B, L) waveform -> (B, T, d_s) features."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.strides = list(config.encoder_strides)
        channels = config.channels
        self.stem = Conv1d(1, channels, 7, rng, padding=3)
        self.units = []
        self.downsamples = []
        for stride in self.strides:
            self.units.append(ResidualUnit(channels, rng))
            self.downsamples.append(Conv1d(channels, 2 * channels, 2 * stride, rng, stride=stride))
            channels *= 2
        self.head = Conv1d(channels, config.d_s, 3, rng, padding=1)
        self.hop = math.prod(self.strides)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
            raise DimensionError(f"Speech encoder expects a non-empty (B, L) batch, got {x.shape}")
        remainder = x.shape[1] % self.hop
        if remainder:
            x = pad(x, ((0, 0), (0, self.hop - remainder)))
        h = self.stem(reshape(x, (x.shape[0], 1, x.shape[1])))
        for unit, down, stride in zip(self.units, self.downsamples, self.strides):
            h = activation(unit(h), "elu")
            h = down(pad(h, ((0, 0), (0, 0), (stride - stride // 2, stride // 2))))
        h = self.head(activation(h, "elu"))
        return transpose(h, (0, 2, 1))


class SpeechDecoder(Module):
    """Transposed-conv mirror of the encoder: (B, T, d_s) -> (B, T * hop) in (-1, 1)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.d_s = config.d_s
        channels = config.channels * 2 ** len(config.encoder_strides)
        self.head = Conv1d(config.d_s, channels, 3, rng, padding=1)
        self.upsamples = []
        self.units = []
        for stride in reversed(config.encoder_strides):
            self.upsamples.append(ConvTranspose1d(
                channels, channels // 2, 2 * stride, rng,
                stride=stride, padding=math.ceil(stride / 2), output_padding=stride % 2,
            ))
            channels //= 2
            self.units.append(ResidualUnit(channels, rng))
        self.out = Conv1d(channels, 1, 7, rng, padding=3)

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 3 or z.shape[-1] != self.d_s:
            raise DimensionError(f"Speech decoder expects (B, T, {self.d_s}) features, got {z.shape}")
        h = self.head(transpose(z, (0, 2, 1)))
        for up, unit in zip(self.upsamples, self.units):
            h = unit(up(activation(h, "elu")))
        y = tanh(self.out(activation(h, "elu")))
        return reshape(y, (y.shape[0], y.shape[2]))


class WatermarkEncoder(Module):
    """Per-position digit embeddings, concatenated, then Linear-ReLU-Linear.

    Produces the single-frame feature z_o (B, d_w); `forward` repeats it over T frames.
    """

    def __init__(self, m: int, b: int, d_w: int, rng: np.random.Generator):
        if d_w % m:
            raise DimensionError(f"d_w={d_w} must be divisible by m={m}")
        self.m, self.b = m, b
        self.tables = [Embedding(b, d_w // m, rng) for _ in range(m)]
        self.fc1 = Linear(d_w, d_w, rng)
        self.fc2 = Linear(d_w, d_w, rng)

    def frame_feature(self, digits) -> Tensor:
        digits = np.atleast_2d(np.asarray(digits))
        if digits.shape[1] != self.m:
            raise MessageError(f"Expected {self.m} digits per message, got {digits.shape[1]}")
        if not np.issubdtype(digits.dtype, np.integer) or digits.min() < 0 or digits.max() >= self.b:
            raise MessageError(f"Message digits must be integers in [0, {self.b})")
        parts = [table(digits[:, i]) for i, table in enumerate(self.tables)]
        return self.fc2(activation(self.fc1(concat(parts, axis=-1)), "relu"))

    def forward(self, digits, frames: int) -> Tensor:
        z_o = self.frame_feature(digits)
        batch, dim = z_o.shape
        return broadcast_to(reshape(z_o, (batch, 1, dim)), (batch, frames, dim))


class AttentionImprintUnit(Module):
    """Pre-norm cross-attention (queries from speech, keys/values from watermark) and FFN, both residual."""

    def __init__(self, d_s: int, d_w: int, n_heads: int, rng: np.random.Generator):
        if d_s % n_heads:
            raise DimensionError(f"d_s={d_s} must be divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.norm_s = LayerNorm(d_s)
        self.norm_w = LayerNorm(d_w)
        self.query = Linear(d_s, d_s, rng)
        self.key = Linear(d_w, d_s, rng)
        self.value = Linear(d_w, d_s, rng)
        self.proj = Linear(d_s, d_s, rng)
        self.norm_ffn = LayerNorm(d_s)
        self.ffn1 = Linear(d_s, 4 * d_s, rng)
        self.ffn2 = Linear(4 * d_s, d_s, rng)
        self.last_attention: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        batch, frames, dim = x.shape
        return transpose(reshape(x, (batch, frames, self.n_heads, dim // self.n_heads)), (0, 2, 1, 3))

    def forward(self, h_s: Tensor, h_w: Tensor) -> Tensor:
        if h_s.ndim != 3 or h_w.ndim != 3 or h_s.shape[:2] != h_w.shape[:2]:
            raise DimensionError(f"AIU inputs must share (B, T): got {h_s.shape} and {h_w.shape}")
        batch, frames, dim = h_s.shape
        head_dim = dim // self.n_heads
        q = self._heads(self.query(self.norm_s(h_s)))
        normed_w = self.norm_w(h_w)
        k = self._heads(self.key(normed_w))
        v = self._heads(self.value(normed_w))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
        weights = softmax(scores, axis=-1)
        self.last_attention = weights.data
        context = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (batch, frames, dim))
        fused = h_s + self.proj(context)
        return fused + self.ffn2(activation(self.ffn1(self.norm_ffn(fused)), "gelu"))


class ConcatFusion(Module):
    """Baseline fusion: Linear over [z_s ; z_w] back to d_s."""

    def __init__(self, d_s: int, d_w: int, rng: np.random.Generator):
        self.proj = Linear(d_s + d_w, d_s, rng)

    def forward(self, z_s: Tensor, z_w: Tensor) -> Tensor:
        if z_s.shape[:2] != z_w.shape[:2]:
            raise DimensionError(f"Fusion inputs must share (B, T): got {z_s.shape} and {z_w.shape}")
        return self.proj(concat([z_s, z_w], axis=-1))


class WatermarkEmbedder(Module):
    """Applies `iters` imprint units, each re-attending to the same z_w."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.iters = config.aiu_iters
        count = 1 if config.share_aiu_weights else config.aiu_iters
        self.units = [AttentionImprintUnit(config.d_s, config.d_w, config.n_heads, rng) for _ in range(count)]

    def forward(self, z_s: Tensor, z_w: Tensor) -> Tensor:
        z = z_s
        for i in range(self.iters):
            z = self.units[i % len(self.units)](z, z_w)
        return z


class BasicBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, padding=1)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, rng, stride=stride)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(activation(self.conv1(x), "relu"))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return activation(y + skip, "relu")


class WatermarkDecoder(Module):
    """Residual 2-D CNN over the log-mel map, mean pooling, then one linear head per digit."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.m, self.b = config.m, config.b
        self.logmel = LogMel(config.mel, config.sample_rate)
        self.log_floor = math.log(config.mel.log_floor)
        c = config.extractor_channels
        self.stem = Conv2d(1, c, 3, rng, padding=1)
        self.blocks = [BasicBlock(c, c, 1, rng), BasicBlock(c, 2 * c, 2, rng), BasicBlock(2 * c, 4 * c, 2, rng)]
        self.heads = [Linear(4 * c, config.b, rng) for _ in range(config.m)]

    def forward_mel(self, mel: Tensor) -> Tensor:
        """(B, frames, n_mels) log-mel -> (B, m, b) logits."""
        if mel.ndim != 3 or mel.shape[1] == 0:
            raise DimensionError(f"Watermark decoder needs (B, frames >= 1, n_mels) input, got {mel.shape}")
        batch, frames, n_mels = mel.shape
        scaled = (mel - self.log_floor) * (1.0 / -self.log_floor)
        h = reshape(transpose(scaled, (0, 2, 1)), (batch, 1, n_mels, frames))
        h = activation(self.stem(h), "relu")
        for block in self.blocks:
            h = block(h)
        pooled = mean(h, axis=(2, 3))
        logits = [reshape(head(pooled), (batch, 1, self.b)) for head in self.heads]
        return concat(logits, axis=1)

    def forward(self, x_w: Tensor) -> Tensor:
        return self.forward_mel(self.logmel(x_w))

    def probabilities(self, x_w: Tensor) -> Tensor:
        return softmax(self(x_w), axis=-1)


@dataclass
class CodecOutput:
    z_s: Tensor
    z_w: Tensor
    z: Tensor
    quantized: QuantizerOutput
    x_w: Tensor


class WMCodec(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.config = config
        self.speech_encoder = SpeechEncoder(config, rng)
        self.watermark_encoder = WatermarkEncoder(config.m, config.b, config.d_w, rng)
        if config.fusion == "aiu":
            self.embedder = WatermarkEmbedder(config, rng)
        else:
            self.embedder = ConcatFusion(config.d_s, config.d_w, rng)
        self.speech_decoder = SpeechDecoder(config, rng)
        self.watermark_decoder = WatermarkDecoder(config, rng)
        self.quantizer = ResidualVectorQuantizer(
            config.n_codebooks, config.codebook_size, config.d_s, rng,
            decay=config.ema_decay, patience=config.dead_code_patience,
        )

    @property
    def hop(self) -> int:
        return self.speech_encoder.hop

    def frames_for(self, length: int) -> int:
        return -(-length // self.hop)

    def encode(self, x: Tensor) -> Tensor:
        return self.speech_encoder(x)

    def embed(self, z_s: Tensor, digits) -> tuple[Tensor, Tensor]:
        z_w = self.watermark_encoder(digits, z_s.shape[1])
        if z_w.shape[0] == 1 and z_s.shape[0] > 1:
            z_w = broadcast_to(z_w, (z_s.shape[0],) + z_w.shape[1:])
        return self.embedder(z_s, z_w), z_w

    def forward(self, x: Tensor, digits, rng: np.random.Generator | None = None) -> CodecOutput:
        """Full embed -> quantize -> decode pass; x_w is trimmed to the input length."""
        length = x.shape[1]
        z_s = self.encode(x)
        z, z_w = self.embed(z_s, digits)
        quantized = self.quantizer.quantize(z, rng)
        x_w = self.speech_decoder(quantized.quantized)
        if x_w.shape[1] != length:
            x_w = getitem(x_w, (slice(None), slice(0, length)))
        return CodecOutput(z_s=z_s, z_w=z_w, z=z, quantized=quantized, x_w=x_w)

    def extract(self, x_w: Tensor) -> Tensor:
        return self.watermark_decoder(x_w)

    # -- inference helpers on numpy arrays ------------------------------
    def embed_clip(self, samples: np.ndarray, message: WatermarkMessage) -> CodeStream:
        self._check_message(message)
        with no_grad():
            x = Tensor(np.asarray(samples).reshape(1, -1))
            z, _ = self.embed(self.encode(x), message.as_array()[None, :])
            indices = self.quantizer.quantize(z).indices[0]
        return CodeStream(
            sample_rate=self.config.sample_rate,
            frame_rate=self.config.frame_rate,
            n_codebooks=self.config.n_codebooks,
            codebook_size=self.config.codebook_size,
            indices=indices,
        )

    def decode_stream(self, stream: CodeStream) -> np.ndarray:
        if (stream.n_codebooks, stream.codebook_size) != (self.config.n_codebooks, self.config.codebook_size):
            raise DimensionError(
                f"Stream uses {stream.n_codebooks}x{stream.codebook_size} codes, "
                f"model has {self.config.n_codebooks}x{self.config.codebook_size}"
            )
        with no_grad():
            z_q = Tensor(self.quantizer.decode(stream.indices)[None])
            return self.speech_decoder(z_q).data[0].astype(np.float64)

    def watermark_clip(self, samples: np.ndarray, message: WatermarkMessage) -> np.ndarray:
        """Embed, quantize and decode one clip; the output has the input's length."""
        samples = np.asarray(samples)
        return self.decode_stream(self.embed_clip(samples, message))[: len(samples)]

    def extract_clip(self, samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Decoded digits and the probability of each decoded digit."""
        with no_grad():
            probs = self.watermark_decoder.probabilities(Tensor(np.asarray(samples).reshape(1, -1))).data[0]
        digits = probs.argmax(axis=-1)
        return digits, probs[np.arange(len(digits)), digits]

    def _check_message(self, message: WatermarkMessage) -> None:
        if message.m != self.config.m or message.base != self.config.b:
            raise MessageError(
                f"Model embeds {self.config.m} base-{self.config.b} digits, "
                f"got {message.m} base-{message.base} digits"
            )
