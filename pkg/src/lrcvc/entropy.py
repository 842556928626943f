"""Discretized Gaussian entropy model, CDF table construction and bitstream container.

Latent symbols are mean-centered integers k = round((y - mu) / omega), so all
likelihoods here are evaluated for a zero-mean Gaussian with effective scale
sigma_tilde = sigma / omega. Probabilities are floored at 2**-16, matching the
one-count-per-bin floor of the quantized tables, which keeps estimated and
actually coded bit counts aligned.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import ndtr as _np_ndtr

from .rangecoder import FREQ_TOTAL, CdfTable

SIGMA_MIN = 0.05
OMEGA_MIN = 1e-3
PMF_FLOOR = 2.0 ** -16
SCALE_MAX = 1024.0  # cap on sigma/omega when sizing table supports
SUPPORT_SIGMAS = 8.0

MAGIC = b"LRCV"
FORMAT_VERSION = 1
FLAG_QMAP = 0x01
_HEADER = struct.Struct(">4sBBHHHBB")
HEADER_SIZE = _HEADER.size  # 14 bytes


# ---------------------------------------------------------------------------
# Likelihoods and rate estimation
# ---------------------------------------------------------------------------

def gaussian_pmf(k: torch.Tensor, sigma: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Probability of mean-centered symbols under the discretized Gaussian.

    Accepts integer or continuous `k` (the train-mode noisy relaxation uses
    the same bin integral evaluated at non-integer positions). Returns
    probabilities floored at 2**-16.
    """
    scale = (sigma / omega).clamp_min(1e-9)
    k = k.to(scale.dtype)
    upper = (k + 0.5) / scale
    lower = (k - 0.5) / scale
    # Evaluate on the side where ndtr is small to avoid cancellation.
    pos = k >= 0
    p = torch.where(
        pos,
        torch.special.ndtr(-lower) - torch.special.ndtr(-upper),
        torch.special.ndtr(upper) - torch.special.ndtr(lower),
    )
    return p.clamp_min(PMF_FLOOR)


def symbol_bits(k: torch.Tensor, sigma: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Per-element information content -log2 p(k)."""
    return -torch.log2(gaussian_pmf(k, sigma, omega))


def symbol_support(sigma, omega) -> torch.Tensor:
    """Symbol support radius r; tables cover [-r, r] with tail-absorbing ends."""
    scale = torch.clamp(torch.as_tensor(sigma) / torch.as_tensor(omega), max=SCALE_MAX)
    return (1 + torch.ceil(SUPPORT_SIGMAS * scale)).long()


@dataclass
class RateEstimate:
    """Estimated bits for one coded frame.

    `bits_per_level` and `total_bits` are torch scalars in train mode (kept
    differentiable) and plain floats after `.detach()`ing in eval paths.
    """

    bits_per_level: list
    total_bits: object
    bpp: object


def estimate_rate(symbols, sigmas, omegas, pixels: int) -> RateEstimate:
    """Sum -log2 p over all levels of a frame.

    Args:
        symbols: Per-level symbol tensors (integer in code mode, continuous
            noisy values in train mode).
        sigmas / omegas: Matching per-level prior tensors.
        pixels: Pixel count of the source frame, for bits-per-pixel.
    """
    per_level = [
        symbol_bits(k, s, o).sum() for k, s, o in zip(symbols, sigmas, omegas)
    ]
    total = sum(per_level)
    return RateEstimate(per_level, total, total / pixels)


# ---------------------------------------------------------------------------
# Quantized CDF tables
# ---------------------------------------------------------------------------

def pmf_to_quantized_cdf(pmf: np.ndarray) -> np.ndarray:
    """Quantize a pmf to a strictly increasing uint32 CDF summing to 2**16.

    Every bin keeps at least one count so no coded symbol has zero
    probability. Deterministic, so encoder and decoder rebuild identical
    tables from identical priors.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size == 0:
        raise ValueError("pmf must be a non-empty 1-D array")
    freq = np.rint(pmf * FREQ_TOTAL).astype(np.int64)
    np.clip(freq, 1, None, out=freq)
    freq = _fix_total(freq)
    cdf = np.zeros(freq.size + 1, dtype=np.uint32)
    cdf[1:] = np.cumsum(freq)
    return cdf


def _fix_total(freq: np.ndarray) -> np.ndarray:
    diff = FREQ_TOTAL - int(freq.sum())
    if diff == 0:
        return freq
    a = int(np.argmax(freq))
    if diff > 0 or freq[a] + diff >= 1:
        freq[a] += diff
        return freq
    # Rare: shrink bins largest-first while keeping every bin >= 1.
    order = np.argsort(freq)[::-1]
    deficit = -diff
    for i in order:
        take = min(deficit, int(freq[i]) - 1)
        freq[i] -= take
        deficit -= take
        if deficit == 0:
            return freq
    raise ValueError("cannot renormalize pmf: too many bins for 16-bit mass")


def _tail_absorbed_pmf(scales: np.ndarray, radius: int) -> np.ndarray:
    """Rows of discretized-Gaussian pmfs over [-radius, radius].

    The two end bins absorb the full tails so each row sums to 1 before
    quantization.
    """
    ks = np.arange(-radius, radius + 1, dtype=np.float64)
    upper = (ks + 0.5)[None, :] / scales[:, None]
    rows = _np_ndtr(upper)
    pmf = np.empty_like(rows)
    pmf[:, 0] = rows[:, 0]
    pmf[:, 1:] = np.diff(rows, axis=1)
    pmf[:, -1] = 1.0 - rows[:, -2]
    return pmf


def build_cdf_tables(sigma, omega) -> list[CdfTable]:
    """Per-element quantized CDF tables for a prior field, in C order.

    Depends only on sigma/omega (symbols are mean-centered), so the decoder
    rebuilds byte-identical tables from its own decoded priors.
    """
    sig = np.asarray(
        sigma.detach().cpu().numpy() if isinstance(sigma, torch.Tensor) else sigma,
        dtype=np.float64,
    ).ravel()
    ome = np.asarray(
        omega.detach().cpu().numpy() if isinstance(omega, torch.Tensor) else omega,
        dtype=np.float64,
    ).ravel()
    scales = np.clip(sig / ome, 1e-9, SCALE_MAX)
    radii = 1 + np.ceil(SUPPORT_SIGMAS * scales).astype(np.int64)
    tables: list[CdfTable | None] = [None] * scales.size
    for radius in np.unique(radii):
        rows = np.nonzero(radii == radius)[0]
        pmf = _tail_absorbed_pmf(scales[rows], int(radius))
        freq = np.rint(pmf * FREQ_TOTAL).astype(np.int64)
        np.clip(freq, 1, None, out=freq)
        diffs = FREQ_TOTAL - freq.sum(axis=1)
        rows_idx = np.arange(freq.shape[0])
        amax = np.argmax(freq, axis=1)
        adjusted = freq[rows_idx, amax] + diffs
        ok = adjusted >= 1
        freq[rows_idx, amax] = np.where(ok, adjusted, freq[rows_idx, amax])
        cdf = np.zeros((freq.shape[0], freq.shape[1] + 1), dtype=np.uint32)
        cdf[:, 1:] = np.cumsum(freq, axis=1)
        k_min = -int(radius)
        for j, row in enumerate(rows):
            if ok[j]:
                tables[row] = CdfTable(k_min, cdf[j])
            else:
                tables[row] = CdfTable(k_min, _slow_cdf(pmf[j]))
    return tables  # type: ignore[return-value]


def _slow_cdf(pmf_row: np.ndarray) -> np.ndarray:
    freq = np.rint(pmf_row * FREQ_TOTAL).astype(np.int64)
    np.clip(freq, 1, None, out=freq)
    freq = _fix_total(freq)
    cdf = np.zeros(freq.size + 1, dtype=np.uint32)
    cdf[1:] = np.cumsum(freq)
    return cdf


@dataclass
class SymbolPlane:
    """One level's integer symbols plus their per-symbol table assignment."""

    symbols: np.ndarray            # int64, flattened in C order
    tables: list                   # CdfTable per symbol (entries may repeat)

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64).ravel()
        if self.symbols.size != len(self.tables):
            raise ValueError("symbol/table count mismatch")


# ---------------------------------------------------------------------------
# Bitstream container
# ---------------------------------------------------------------------------

class BitstreamError(ValueError):
    """Malformed bitstream. `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class BadMagicError(BitstreamError):
    pass


class VersionError(BitstreamError):
    pass


class HeaderChecksumError(BitstreamError):
    pass


class TruncatedError(BitstreamError):
    pass


class TrailingDataError(BitstreamError):
    pass


def _crc8(data: bytes) -> int:
    crc = 0
    for b in data:
        crc ^= b
        for _ in range(8):
            crc = ((crc << 1) ^ 0x07) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
    return crc


@dataclass
class FramePayload:
    qmap: bytes
    levels: list  # list[bytes], one coded payload per pyramid level


@dataclass
class Bitstream:
    width: int
    height: int
    level_count: int
    frames: list  # list[FramePayload]
    qmap_signaled: bool = True
    version: int = FORMAT_VERSION


def pack_bitstream(stream: Bitstream) -> bytes:
    """Serialize a Bitstream to the big-endian container format.

    Layout: 14-byte header (magic, version, flags, width, height, frame
    count, level count, CRC-8 over the preceding 13 bytes), then per frame a
    u32-length-prefixed quality-map payload followed by one u32-length-
    prefixed coded payload per level.
    """
    if not (0 < stream.width <= 0xFFFF and 0 < stream.height <= 0xFFFF):
        raise ValueError("width/height must fit in u16 and be positive")
    if len(stream.frames) > 0xFFFF:
        raise ValueError("too many frames for u16 frame count")
    flags = FLAG_QMAP if stream.qmap_signaled else 0
    head = _HEADER.pack(
        MAGIC, stream.version, flags, stream.width, stream.height,
        len(stream.frames), stream.level_count, 0,
    )
    head = head[:-1] + bytes([_crc8(head[:-1])])
    parts = [head]
    for frame in stream.frames:
        if len(frame.levels) != stream.level_count:
            raise ValueError("frame level payload count does not match header")
        parts.append(struct.pack(">I", len(frame.qmap)))
        parts.append(frame.qmap)
        for payload in frame.levels:
            parts.append(struct.pack(">I", len(payload)))
            parts.append(payload)
    return b"".join(parts)


def unpack_bitstream(data: bytes) -> Bitstream:
    """Parse the container, validating header integrity and payload lengths.

    Raises distinct BitstreamError subclasses for bad magic, version
    mismatch, header corruption, truncation and trailing garbage; all carry
    the byte offset of the failure.
    """
    if len(data) < HEADER_SIZE:
        raise TruncatedError("header truncated", offset=len(data))
    magic, version, flags, width, height, n_frames, n_levels, crc = _HEADER.unpack(
        data[:HEADER_SIZE]
    )
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported version {version}", offset=4)
    if crc != _crc8(data[: HEADER_SIZE - 1]):
        raise HeaderChecksumError("header checksum mismatch", offset=HEADER_SIZE - 1)
    if flags & ~FLAG_QMAP:
        raise HeaderChecksumError(f"reserved flag bits set: {flags:#x}", offset=5)
    pos = HEADER_SIZE
    frames = []
    for _ in range(n_frames):
        qmap, pos = _read_chunk(data, pos)
        levels = []
        for _ in range(n_levels):
            payload, pos = _read_chunk(data, pos)
            levels.append(payload)
        frames.append(FramePayload(qmap=qmap, levels=levels))
    if pos != len(data):
        raise TrailingDataError(
            f"{len(data) - pos} unexpected trailing bytes", offset=pos
        )
    return Bitstream(
        width=width, height=height, level_count=n_levels, frames=frames,
        qmap_signaled=bool(flags & FLAG_QMAP), version=version,
    )


def _read_chunk(data: bytes, pos: int):
    if pos + 4 > len(data):
        raise TruncatedError("length field truncated", offset=pos)
    (length,) = struct.unpack_from(">I", data, pos)
    pos += 4
    if pos + length > len(data):
        raise TruncatedError(
            f"payload of {length} bytes exceeds stream end", offset=pos
        )
    return data[pos : pos + length], pos + length
