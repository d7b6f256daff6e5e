"""On-disk container for compressed images.

Layout (little-endian)::

    magic "FFAB" | version u8 | flags u8 | width u32 | height u32 |
    down_factor u8 | M u16 | model_hash u64 | z_len u32 | z bytes |
    10 x (slice_len u32 | slice bytes)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import FormatError

MAGIC = b"FFAB"
VERSION = 1
NUM_SLICES = 10

_HEADER = struct.Struct("<4sBBIIBHQ")
_LEN = struct.Struct("<I")
HEADER_BYTES = _HEADER.size

# flags
FLAG_REPLICATE_PAD = 0x01


@dataclass(frozen=True)
class Header:
    width: int
    height: int
    down_factor: int
    latent_channels: int
    model_hash: int
    flags: int = FLAG_REPLICATE_PAD
    version: int = VERSION


@dataclass
class Bitstream:
    header: Header
    z_segment: bytes
    y_segments: list[bytes] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        h = self.header
        if len(self.y_segments) != NUM_SLICES:
            raise FormatError(f"expected {NUM_SLICES} slice segments, got {len(self.y_segments)}")
        if h.width <= 0 or h.height <= 0:
            raise FormatError("header dimensions must be positive")
        parts = [
            _HEADER.pack(MAGIC, h.version, h.flags, h.width, h.height, h.down_factor,
                         h.latent_channels, h.model_hash),
            _LEN.pack(len(self.z_segment)),
            self.z_segment,
        ]
        for seg in self.y_segments:
            parts += [_LEN.pack(len(seg)), seg]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_BYTES:
            raise FormatError(f"truncated header: {len(data)} of {HEADER_BYTES} bytes")
        magic, version, flags, width, height, df, M, mhash = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        if width == 0 or height == 0 or df == 0 or M == 0:
            raise FormatError("header fields must be positive")
        pos = HEADER_BYTES

        def segment(what: str) -> bytes:
            nonlocal pos
            if pos + _LEN.size > len(data):
                raise FormatError(f"truncated {what} length at byte {pos}")
            (n,) = _LEN.unpack_from(data, pos)
            pos += _LEN.size
            if pos + n > len(data):
                raise FormatError(f"truncated {what}: need {n} bytes at byte {pos}, have {len(data) - pos}")
            seg = bytes(data[pos:pos + n])
            pos += n
            return seg

        z = segment("z segment")
        ys = [segment(f"slice {i}") for i in range(NUM_SLICES)]
        if pos != len(data):
            raise FormatError(f"{len(data) - pos} trailing bytes after last slice")
        return cls(Header(width, height, df, M, mhash, flags, version), z, ys)

    def num_bytes(self) -> int:
        return HEADER_BYTES + _LEN.size * (1 + NUM_SLICES) + len(self.z_segment) + sum(map(len, self.y_segments))
