"""Compressed code stream container.

Layout (little-endian):

    offset  size  field
    0       4     magic b"WMCS"
    4       1     version
    5       4     sample_rate (u32)
    9       8     frame_rate (f64)
    17      2     n_codebooks (u16)
    19      4     codebook_size (u32)
    23      4     n_frames (u32)
    27      ...   payload

The payload holds n_frames * n_codebooks indices, frame-major then codebook
order, each written with exactly ceil(log2(codebook_size)) bits, least
significant bit first, packed into bytes least significant bit first. The
final byte is zero-padded.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from services.errors import DimensionError, FormatError

MAGIC = b"WMCS"
VERSION = 1
_HEADER = struct.Struct("<4sBIdHII")
HEADER_SIZE = _HEADER.size


def bits_per_index(codebook_size: int) -> int:
    return max(1, math.ceil(math.log2(codebook_size)))


@dataclass(frozen=True)
class CodeStream:
    sample_rate: int
    frame_rate: float
    n_codebooks: int
    codebook_size: int
    indices: np.ndarray  # (n_frames, n_codebooks)

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        if indices.ndim != 2 or indices.shape[1] != self.n_codebooks:
            raise DimensionError(f"CodeStream indices must be (n_frames, {self.n_codebooks}), got {indices.shape}")
        object.__setattr__(self, "indices", indices)

    @property
    def n_frames(self) -> int:
        return self.indices.shape[0]

    @property
    def bits_per_index(self) -> int:
        return bits_per_index(self.codebook_size)

    @property
    def bits_per_frame(self) -> int:
        return self.n_codebooks * self.bits_per_index

    @property
    def bandwidth_bps(self) -> float:
        return self.n_codebooks * math.log2(self.codebook_size) * self.frame_rate

    @property
    def duration(self) -> float:
        return self.n_frames / self.frame_rate


def _payload_size(n_frames: int, n_codebooks: int, codebook_size: int) -> int:
    return -(-n_frames * n_codebooks * bits_per_index(codebook_size) // 8)


def pack_bitstream(stream: CodeStream) -> bytes:
    if stream.codebook_size < 2 or stream.codebook_size >= 2**32:
        raise FormatError(f"codebook_size {stream.codebook_size} cannot be encoded", offset=19)
    if not 1 <= stream.n_codebooks < 2**16:
        raise FormatError(f"n_codebooks {stream.n_codebooks} cannot be encoded", offset=17)
    if stream.n_frames >= 2**32:
        raise FormatError(f"{stream.n_frames} frames cannot be encoded", offset=23)
    flat = stream.indices.reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= stream.codebook_size):
        position = int(np.flatnonzero((flat < 0) | (flat >= stream.codebook_size))[0])
        raise FormatError(
            f"index {flat[position]} overflows codebook of size {stream.codebook_size}",
            offset=HEADER_SIZE + position * stream.bits_per_index // 8,
        )
    header = _HEADER.pack(
        MAGIC, VERSION, stream.sample_rate, stream.frame_rate,
        stream.n_codebooks, stream.codebook_size, stream.n_frames,
    )
    width = stream.bits_per_index
    bits = ((flat[:, None] >> np.arange(width)) & 1).astype(np.uint8)
    return header + np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_bitstream(data: bytes) -> CodeStream:
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise FormatError(f"stream of {len(data)} bytes is shorter than the {HEADER_SIZE}-byte header", offset=len(data))
    magic, version, sample_rate, frame_rate, n_codebooks, codebook_size, n_frames = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported stream version {version}, expected {VERSION}", offset=4)
    if sample_rate == 0:
        raise FormatError("sample_rate must be positive", offset=5)
    if not math.isfinite(frame_rate) or frame_rate <= 0:
        raise FormatError(f"invalid frame_rate {frame_rate}", offset=9)
    if n_codebooks == 0:
        raise FormatError("n_codebooks must be positive", offset=17)
    if codebook_size < 2:
        raise FormatError(f"codebook_size {codebook_size} is too small", offset=19)

    expected = _payload_size(n_frames, n_codebooks, codebook_size)
    payload = data[HEADER_SIZE:]
    if len(payload) != expected:
        raise FormatError(
            f"header declares {n_frames} frames ({expected} payload bytes) but {len(payload)} bytes follow",
            offset=HEADER_SIZE + min(len(payload), expected),
        )
    width = bits_per_index(codebook_size)
    count = n_frames * n_codebooks
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=count * width, bitorder="little")
    values = bits.reshape(count, width).astype(np.int64) @ (1 << np.arange(width, dtype=np.int64))
    if values.size and values.max() >= codebook_size:
        position = int(np.argmax(values >= codebook_size))
        raise FormatError(
            f"index {values[position]} overflows codebook of size {codebook_size}",
            offset=HEADER_SIZE + position * width // 8,
        )
    return CodeStream(
        sample_rate=sample_rate,
        frame_rate=frame_rate,
        n_codebooks=n_codebooks,
        codebook_size=codebook_size,
        indices=values.reshape(n_frames, n_codebooks),
    )
