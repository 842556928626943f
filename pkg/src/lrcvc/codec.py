"""End-to-end video coding pipeline producing real, decodable bitstreams.

The encoder signals the quality map first, then conditions the network on
the decoder's (lossily decoded) version of it, so both sides compute
identical priors and entropy tables from decoded information only. Each
level's symbol plane is range-coded against per-element tables rebuilt from
the prior branch on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import entropy, qmap as qmap_mod, rangecoder
from .model import LocalRateCodec, TemporalState


@dataclass
class FrameCodingStats:
    """Everything needed to account bits and draw heatmaps for one frame."""

    qmap_bytes: int
    level_bytes: list            # coded payload size per level
    symbols: list                # np.int64 arrays, shape (C, h, w) per level
    sigma: list                  # np.float32 arrays, matching shapes
    omega: list

    @property
    def latent_bits(self) -> int:
        return 8 * sum(self.level_bytes)

    @property
    def qmap_bits(self) -> int:
        return 8 * self.qmap_bytes


@dataclass
class CodedVideo:
    data: bytes
    reconstructions: np.ndarray      # (T, H, W, 3) float32
    maps_signaled: np.ndarray        # (T, H, W) float64, decoder-visible maps
    frame_stats: list
    final_state: TemporalState

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)


def _to_tensor_frame(frame: np.ndarray, dtype) -> torch.Tensor:
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) frame, got {frame.shape}")
    return torch.from_numpy(np.ascontiguousarray(frame)).to(dtype).permute(2, 0, 1).unsqueeze(0)


def _frame_to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.squeeze(0).permute(1, 2, 0).contiguous().numpy().astype(np.float32)


def encode_video(model: LocalRateCodec, frames: np.ndarray, maps: np.ndarray,
                 *, backend: str | None = None) -> CodedVideo:
    """Encode frames (T, H, W, 3) with per-frame maps (T, H, W) to a bitstream.

    Returns the coded bytes together with the encoder-side reconstructions,
    which are bit-identical to what decode_video reproduces on the same
    platform.
    """
    frames = np.asarray(frames, dtype=np.float32)
    maps = np.asarray(maps, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ValueError(f"expected frames of shape (T, H, W, 3), got {frames.shape}")
    if maps.shape != frames.shape[:3]:
        raise ValueError("need one full-resolution map per frame")
    n_frames, height, width = frames.shape[:3]
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    state = model.init_state(height, width)
    payloads = []
    stats = []
    recons = np.empty_like(frames)
    signaled = np.empty((n_frames, height, width), dtype=np.float64)
    with torch.no_grad():
        for t in range(n_frames):
            qmap_payload = qmap_mod.encode_qmap(maps[t])
            m_dec = qmap_mod.decode_qmap(qmap_payload, height, width)
            signaled[t] = m_dec
            m_t = torch.from_numpy(m_dec).to(dtype).reshape(1, 1, height, width)
            x_t = _to_tensor_frame(frames[t], dtype)
            out = model(x_t, m_t, state, mode="code")
            level_payloads = []
            level_bytes = []
            symbols_np = []
            sigma_np = []
            omega_np = []
            for level in range(model.config.levels):
                prior = out.priors[level]
                sym = out.latents.symbols[level]
                plane = entropy.SymbolPlane(
                    sym.numpy().ravel(),
                    entropy.build_cdf_tables(prior.sigma, prior.omega),
                )
                payload = rangecoder.rc_encode(
                    plane.symbols, plane.tables, backend=backend
                )
                level_payloads.append(payload)
                level_bytes.append(len(payload))
                symbols_np.append(sym.squeeze(0).numpy())
                sigma_np.append(prior.sigma.squeeze(0).to(torch.float32).numpy())
                omega_np.append(prior.omega.squeeze(0).to(torch.float32).numpy())
            payloads.append(entropy.FramePayload(qmap=qmap_payload, levels=level_payloads))
            stats.append(FrameCodingStats(
                qmap_bytes=len(qmap_payload), level_bytes=level_bytes,
                symbols=symbols_np, sigma=sigma_np, omega=omega_np,
            ))
            recons[t] = _frame_to_numpy(out.reconstruction)
            state = out.state
    if was_training:
        model.train()
    data = entropy.pack_bitstream(entropy.Bitstream(
        width=width, height=height, level_count=model.config.levels,
        frames=payloads,
    ))
    return CodedVideo(
        data=data, reconstructions=recons, maps_signaled=signaled,
        frame_stats=stats, final_state=state,
    )


@dataclass
class DecodedVideo:
    frames: np.ndarray            # (T, H, W, 3) float32
    maps: np.ndarray              # (T, H, W) float64
    final_state: TemporalState


def decode_video(model: LocalRateCodec, data: bytes,
                 *, backend: str | None = None) -> DecodedVideo:
    """Decode a bitstream produced by encode_video with a matching checkpoint."""
    stream = entropy.unpack_bitstream(data)
    if stream.level_count != model.config.levels:
        raise entropy.BitstreamError(
            f"stream has {stream.level_count} levels, model expects "
            f"{model.config.levels}", offset=12,
        )
    height, width = stream.height, stream.width
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    state = model.init_state(height, width)
    frames_out = np.empty((len(stream.frames), height, width, 3), dtype=np.float32)
    maps_out = np.empty((len(stream.frames), height, width), dtype=np.float64)
    with torch.no_grad():
        for t, frame in enumerate(stream.frames):
            m_dec = qmap_mod.decode_qmap(frame.qmap, height, width)
            maps_out[t] = m_dec
            m_t = torch.from_numpy(m_dec).to(dtype).reshape(1, 1, height, width)

            def read_level(level, prior, shape, _frame=frame):
                tables = entropy.build_cdf_tables(prior.sigma, prior.omega)
                decoded = rangecoder.rc_decode(
                    _frame.levels[level], tables, backend=backend
                )
                return torch.from_numpy(decoded.reshape(shape))

            try:
                recon, state, _, _ = model.decode(read_level, m_t, state, height, width)
            except rangecoder.RangeDecodeError as e:
                raise entropy.TruncatedError(
                    f"latent payload exhausted in frame {t}", offset=e.position
                ) from e
            frames_out[t] = _frame_to_numpy(recon)
    if was_training:
        model.train()
    return DecodedVideo(frames=frames_out, maps=maps_out, final_state=state)


def encode_frame_payloads(model: LocalRateCodec, x: torch.Tensor,
                          m_decoded: torch.Tensor, state: TemporalState,
                          *, backend: str | None = None):
    """Code a single frame against an existing state (no container).

    Used by map optimization to price candidate maps exactly. Returns the
    frame output, the coded level payload lengths and the advanced state.
    """
    with torch.no_grad():
        out = model(x, m_decoded, state, mode="code")
        level_bytes = []
        for level in range(model.config.levels):
            prior = out.priors[level]
            tables = entropy.build_cdf_tables(prior.sigma, prior.omega)
            payload = rangecoder.rc_encode(
                out.latents.symbols[level].numpy().ravel(), tables, backend=backend
            )
            level_bytes.append(len(payload))
    return out, level_bytes
