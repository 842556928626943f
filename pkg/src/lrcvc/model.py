"""Hierarchical conditional video codec with quality-map conditioning.

The network codes each frame as a pyramid of latents at increasingly coarse
scales; the coarsest level plays the role of the hyper-latent and is coded
against temporal context only. Each level's prior branch consumes decoded
information exclusively (per-level temporal feature buffers, the decoded
features of coarser levels, and the pooled quality map), so the decoder can
rebuild identical prior parameters (mu, sigma, omega). Latents are divided
by omega before quantization and multiplied by it after entropy
decoding, making omega the locally adaptive quantizer step.

Temporal feature buffers start from learned biases, which makes the first
frame codable without a separate intra codec, and are overwritten by each
frame's decoded features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .entropy import OMEGA_MIN, SIGMA_MIN, symbol_support

CHECKPOINT_VERSION = 1
MIN_FRAME_SIZE = 32


class CheckpointError(RuntimeError):
    """Checkpoint file unusable (bad format version or malformed content)."""


@dataclass(frozen=True)
class CodecConfig:
    """Structural hyperparameters of the codec network."""

    levels: int = 3
    channels: tuple = (32, 64, 96)
    base_downsample: int = 4
    level_downsample: int = 2
    cond_encoder: bool = True   # concatenate the map to the input frame
    cond_prior: bool = True     # feed the pooled map to every prior branch

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.levels < 2:
            raise ValueError("need at least two pyramid levels")
        if len(self.channels) != self.levels:
            raise ValueError("channels list length must equal levels")
        if self.base_downsample not in (2, 4, 8):
            raise ValueError("base_downsample must be 2, 4 or 8")
        if self.level_downsample != 2:
            raise ValueError("only level_downsample=2 is supported")

    def downsample(self, level: int) -> int:
        return self.base_downsample * self.level_downsample ** level

    @property
    def pad_multiple(self) -> int:
        return max(MIN_FRAME_SIZE, self.downsample(self.levels - 1))


@dataclass
class TemporalState:
    """Per-level decoded-feature buffers carried between frames."""

    features: list
    frame_index: int = 0

    def detached(self) -> "TemporalState":
        return TemporalState([f.detach() for f in self.features], self.frame_index)


@dataclass
class PriorParams:
    mu: torch.Tensor
    sigma: torch.Tensor
    omega: torch.Tensor


@dataclass
class LatentPyramid:
    """Per-level symbols (integer grids in code mode) and dequantized latents."""

    symbols: list
    dequantized: list


@dataclass
class FrameOutput:
    reconstruction: torch.Tensor
    state: TemporalState
    latents: LatentPyramid
    priors: list
    padded_size: tuple
    rate_symbols: list = field(default_factory=list)  # train mode: noisy symbols


def scale_quantize(y: torch.Tensor, omega: torch.Tensor, mu: torch.Tensor,
                   mode: str = "code", noise: torch.Tensor | None = None):
    """Quantize latents with a per-element step omega around the mean mu.

    code mode: k = round((y - mu) / omega), y_hat = k * omega + mu; the
    integer symbols k are what gets entropy coded.

    train mode: the returned symbols are (y - mu) / omega + u with
    u ~ U(-0.5, 0.5) for the rate term, while y_hat uses rounding with a
    straight-through gradient for the distortion term.

    relaxed mode: like train mode but y_hat is also built from the noisy
    symbols, which keeps the whole loss smooth for derivative checks.
    """
    if y.shape != omega.shape or y.shape != mu.shape:
        raise ValueError("y, omega and mu must have identical shapes")
    z = (y - mu) / omega
    if mode == "code":
        k = torch.round(z)
        return k * omega + mu, k.to(torch.int64)
    if noise is None:
        noise = torch.rand_like(z) - 0.5
    symbols = z + noise
    if mode == "train":
        k_ste = z + (torch.round(z) - z).detach()
        return k_ste * omega + mu, symbols
    if mode == "relaxed":
        return symbols * omega + mu, symbols
    raise ValueError(f"unknown quantization mode {mode!r}")


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = _conv(channels, channels)
        self.conv2 = _conv(channels, channels)
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.conv2(self.act(self.conv1(x)))
        return x + h


class LocalRateCodec(nn.Module):
    """The full codec network; one instance serves every rate point."""

    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config or CodecConfig()
        cfg = self.config
        chans = cfg.channels
        in_ch = 3 + (1 if cfg.cond_encoder else 0)

        stem = []
        c_prev = in_ch
        n_stem = cfg.base_downsample.bit_length() - 1
        for i in range(n_stem):
            cout = chans[0] if i == n_stem - 1 else max(chans[0] // 2, 8)
            stem += [_conv(c_prev, cout, stride=2), nn.SiLU()]
            c_prev = cout
        stem.append(ResidualBlock(chans[0]))
        self.stem = nn.Sequential(*stem)

        self.enc_stages = nn.ModuleList()
        for l in range(1, cfg.levels):
            self.enc_stages.append(nn.Sequential(
                _conv(chans[l - 1], chans[l], stride=2), nn.SiLU(),
                ResidualBlock(chans[l]),
            ))

        self.latent_heads = nn.ModuleList(_conv(c, c) for c in chans)

        m_ch = 1 if cfg.cond_prior else 0
        self.prior_nets = nn.ModuleList()
        for l, c in enumerate(chans):
            ctx_ch = c if l == cfg.levels - 1 else 2 * c
            net = nn.Sequential(
                _conv(ctx_ch + m_ch, c), nn.SiLU(),
                _conv(c, c), nn.SiLU(),
                _conv(c, 3 * c),
            )
            nn.init.zeros_(net[-1].weight)
            nn.init.zeros_(net[-1].bias)
            self.prior_nets.append(net)

        self.ctx_upsamplers = nn.ModuleList(
            nn.ConvTranspose2d(chans[l + 1], chans[l], 4, stride=2, padding=1)
            for l in range(cfg.levels - 1)
        )

        self.dec_blocks = nn.ModuleList()
        for l, c in enumerate(chans):
            ctx_ch = c if l == cfg.levels - 1 else 2 * c
            self.dec_blocks.append(nn.Sequential(
                _conv(c + ctx_ch, c), nn.SiLU(), ResidualBlock(c),
            ))

        recon = []
        c_prev = chans[0]
        for _ in range(n_stem):
            cout = max(chans[0] // 2, 8)
            recon += [nn.ConvTranspose2d(c_prev, cout, 4, stride=2, padding=1), nn.SiLU()]
            c_prev = cout
        recon.append(_conv(c_prev, 3))
        self.recon_head = nn.Sequential(*recon)

        self.temporal_biases = nn.ParameterList(
            nn.Parameter(torch.zeros(c)) for c in chans
        )

    # -- state ------------------------------------------------------------

    def _padded(self, height: int, width: int) -> tuple:
        mult = self.config.pad_multiple
        return -(-height // mult) * mult, -(-width // mult) * mult

    def init_state(self, height: int, width: int, batch: int = 1) -> TemporalState:
        """Fresh temporal buffers from the learned biases; frame index 0."""
        if height < MIN_FRAME_SIZE or width < MIN_FRAME_SIZE:
            raise ValueError(f"frames must be at least {MIN_FRAME_SIZE} px per side")
        ph, pw = self._padded(height, width)
        features = []
        for l, bias in enumerate(self.temporal_biases):
            ds = self.config.downsample(l)
            features.append(
                bias.reshape(1, -1, 1, 1).expand(batch, bias.numel(), ph // ds, pw // ds)
            )
        return TemporalState(features, frame_index=0)

    # -- shared pieces ------------------------------------------------------

    def _check_inputs(self, x, m, state):
        if x.dim() != 4 or x.size(1) != 3:
            raise ValueError(f"expected frames of shape (B, 3, H, W), got {tuple(x.shape)}")
        if m.dim() != 4 or m.size(1) != 1 or m.shape[2:] != x.shape[2:] \
                or m.size(0) != x.size(0):
            raise ValueError("quality map shape does not match the frame")
        ph, pw = self._padded(x.size(2), x.size(3))
        for l, feat in enumerate(state.features):
            ds = self.config.downsample(l)
            want = (x.size(0), self.config.channels[l], ph // ds, pw // ds)
            if tuple(feat.shape) != want:
                raise ValueError(
                    f"temporal state level {l} has shape {tuple(feat.shape)}, expected {want}"
                )

    def _pad(self, t: torch.Tensor, ph: int, pw: int) -> torch.Tensor:
        dh, dw = ph - t.size(2), pw - t.size(3)
        if dh == 0 and dw == 0:
            return t
        return F.pad(t, (0, dw, 0, dh), mode="reflect")

    def _priors_for_level(self, level: int, ctx: torch.Tensor,
                          m_pad: torch.Tensor | None) -> PriorParams:
        if self.config.cond_prior:
            ds = self.config.downsample(level)
            m_l = F.avg_pool2d(m_pad, ds)
            ctx = torch.cat([ctx, m_l], dim=1)
        raw = self.prior_nets[level](ctx)
        mu, s_raw, w_raw = torch.chunk(raw, 3, dim=1)
        sigma = SIGMA_MIN + F.softplus(s_raw)
        omega = OMEGA_MIN + F.softplus(w_raw)
        return PriorParams(mu=mu, sigma=sigma, omega=omega)

    def prior_branch(self, level: int, ctx: torch.Tensor,
                     m_pad: torch.Tensor | None = None) -> PriorParams:
        """Prior parameters for one level from decoded-side context only."""
        return self._priors_for_level(level, ctx, m_pad)

    def _level_context(self, level: int, state: TemporalState, dec_above):
        if dec_above is None:
            return state.features[level]
        up = self.ctx_upsamplers[level](dec_above)
        return torch.cat([state.features[level], up], dim=1)

    # -- encode -------------------------------------------------------------

    def forward(self, x: torch.Tensor, m: torch.Tensor, state: TemporalState,
                mode: str = "train", noise: list | None = None) -> FrameOutput:
        """Encode one frame (and run the embedded decoder path).

        In code mode the symbols are integers clamped to the entropy table
        support, and the reconstruction/state are exactly what decode()
        produces from those symbols.
        """
        self._check_inputs(x, m, state)
        cfg = self.config
        height, width = x.size(2), x.size(3)
        ph, pw = self._padded(height, width)
        x_pad = self._pad(x, ph, pw) - 0.5
        m_pad = self._pad(m, ph, pw) - 0.5

        enc_in = torch.cat([x_pad, m_pad], dim=1) if cfg.cond_encoder else x_pad
        feats = [self.stem(enc_in)]
        for stage in self.enc_stages:
            feats.append(stage(feats[-1]))

        dec_above = None
        new_features = [None] * cfg.levels
        symbols = [None] * cfg.levels
        dequant = [None] * cfg.levels
        rate_symbols = [None] * cfg.levels
        priors = [None] * cfg.levels
        for level in range(cfg.levels - 1, -1, -1):
            ctx = self._level_context(level, state, dec_above)
            prior = self._priors_for_level(level, ctx, m_pad)
            y = self.latent_heads[level](feats[level])
            y_hat, sym = scale_quantize(
                y, prior.omega, prior.mu, mode,
                noise=None if noise is None else noise[level],
            )
            if mode == "code":
                support = symbol_support(prior.sigma, prior.omega)
                sym = torch.clamp(sym, -support, support)
                y_hat = sym.to(y.dtype) * prior.omega + prior.mu
                rate_symbols[level] = sym
            else:
                rate_symbols[level] = sym
            d = self.dec_blocks[level](torch.cat([y_hat, ctx], dim=1))
            new_features[level] = d
            dec_above = d
            symbols[level] = sym
            dequant[level] = y_hat
            priors[level] = prior

        recon = self.recon_head(dec_above)[..., :height, :width] + 0.5
        if mode == "code":
            recon = recon.clamp(0.0, 1.0)
        new_state = TemporalState(new_features, state.frame_index + 1)
        return FrameOutput(
            reconstruction=recon, state=new_state,
            latents=LatentPyramid(symbols=symbols, dequantized=dequant),
            priors=priors, padded_size=(ph, pw), rate_symbols=rate_symbols,
        )

    # -- decode -------------------------------------------------------------

    def decode(self, symbols, m: torch.Tensor, state: TemporalState,
               height: int, width: int):
        """Reconstruct a frame from integer symbols and the signaled map.

        `symbols` is either a per-level list of integer tensors or a
        callable (level, prior, shape) -> tensor, which lets a bitstream
        decoder entropy-decode each level exactly when its prior becomes
        available. Uses only (symbols, m, state, parameters); runs the
        identical decoder-side op sequence as forward() in code mode.
        """
        cfg = self.config
        ph, pw = self._padded(height, width)
        if m.shape[2:] != (height, width):
            raise ValueError("quality map shape does not match the frame")
        m_pad = self._pad(m, ph, pw) - 0.5
        dec_above = None
        new_features = [None] * cfg.levels
        priors = [None] * cfg.levels
        dequant = [None] * cfg.levels
        for level in range(cfg.levels - 1, -1, -1):
            ctx = self._level_context(level, state, dec_above)
            prior = self._priors_for_level(level, ctx, m_pad)
            ds = cfg.downsample(level)
            want = (m.size(0), cfg.channels[level], ph // ds, pw // ds)
            if callable(symbols):
                sym = symbols(level, prior, want)
            else:
                sym = symbols[level]
            if tuple(sym.shape) != want:
                raise ValueError(
                    f"level {level} symbols have shape {tuple(sym.shape)}, expected {want}"
                )
            y_hat = sym.to(prior.mu.dtype) * prior.omega + prior.mu
            d = self.dec_blocks[level](torch.cat([y_hat, ctx], dim=1))
            new_features[level] = d
            dec_above = d
            priors[level] = prior
            dequant[level] = y_hat
        recon = self.recon_head(dec_above)[..., :height, :width] + 0.5
        recon = recon.clamp(0.0, 1.0)
        new_state = TemporalState(new_features, state.frame_index + 1)
        return recon, new_state, priors, dequant


# ---------------------------------------------------------------------------
# Module-level operation wrappers
# ---------------------------------------------------------------------------

def init_temporal_state(model: LocalRateCodec, height: int, width: int,
                        batch: int = 1) -> TemporalState:
    return model.init_state(height, width, batch=batch)


def encode_frame(model: LocalRateCodec, x, m, state, mode="code", noise=None):
    out = model(x, m, state, mode=mode, noise=noise)
    return out.latents, out.priors, out.reconstruction, out.state


def decode_frame(model: LocalRateCodec, latents: LatentPyramid, m, state,
                 height: int, width: int):
    recon, new_state, _, _ = model.decode(latents.symbols, m, state, height, width)
    return recon, new_state


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: LocalRateCodec, path, extra: dict | None = None):
    """Single-archive checkpoint embedding the CodecConfig and format version."""
    cfg = asdict(model.config)
    cfg["channels"] = list(cfg["channels"])
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": cfg,
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path, strict_version: bool = True):
    """Load a checkpoint; rejects format-version mismatches.

    Returns (model, extra) with the model in eval mode.
    """
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises several unpickling error types
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or "format_version" not in blob:
        raise CheckpointError(f"{path} is not a codec checkpoint")
    if strict_version and blob["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {blob['format_version']} "
            f"!= supported {CHECKPOINT_VERSION}"
        )
    cfg_dict = dict(blob["config"])
    cfg_dict["channels"] = tuple(cfg_dict["channels"])
    model = LocalRateCodec(CodecConfig(**cfg_dict))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("extra", {})
