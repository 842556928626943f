"""Evaluation: PSNR and rate metrics, BD-rate, bit heatmaps, RD sweeps and
inference-time quality-map optimization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtr as _ndtr

from . import codec, entropy, qmap as qmap_mod
from .model import LocalRateCodec
from .train import DEFAULT_DISTORTION_SCALE

PSNR_CAP = 100.0
UNIFORM_LEVELS_21 = tuple(round(0.05 * i, 2) for i in range(21))


# ---------------------------------------------------------------------------
# Pixel metrics
# ---------------------------------------------------------------------------

def masked_mse(x: np.ndarray, x_hat: np.ndarray,
               mask: np.ndarray | None = None) -> float:
    """Mean squared error on the 255 scale, optionally over a pixel mask."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shapes differ: {x.shape} vs {x_hat.shape}")
    se = ((x - x_hat) * 255.0) ** 2
    if mask is None:
        return float(se.mean())
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match frame {x.shape[:2]}")
    if not mask.any():
        raise ValueError("region mask is empty")
    return float(se[mask].mean())


def psnr(x: np.ndarray, x_hat: np.ndarray,
         mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB on the 8-bit scale, capped at 100."""
    mse = masked_mse(x, x_hat, mask)
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(255.0 ** 2 / mse), PSNR_CAP)


def bpp(bits: float, height: int, width: int) -> float:
    if height * width <= 0:
        raise ValueError("frame must have a positive pixel count")
    return bits / (height * width)


# ---------------------------------------------------------------------------
# Rate-distortion curves and BD-rate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RdPoint:
    bpp: float
    psnr: float
    label: str = ""


@dataclass(frozen=True)
class RdCurve:
    points: tuple
    label: str = ""

    def __post_init__(self):
        pts = tuple(sorted(self.points, key=lambda p: p.bpp))
        object.__setattr__(self, "points", pts)
        rates = [p.bpp for p in pts]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("curve bpp values must be strictly increasing")

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr for p in self.points])


def _log_rate_spline(curve: RdCurve) -> PchipInterpolator:
    q = curve.psnrs
    if np.any(np.diff(q) <= 0):
        raise ValueError("curve PSNR must be strictly increasing with bpp")
    return PchipInterpolator(q, np.log10(curve.rates))


def bd_rate(reference: RdCurve, test: RdCurve) -> float:
    """Bjontegaard delta rate of `test` against `reference`, in percent.

    Piecewise-cubic (PCHIP) interpolation of log10(rate) over PSNR,
    integrated across the overlapping PSNR interval.
    """
    if len(reference.points) < 4 or len(test.points) < 4:
        raise ValueError("BD-rate needs at least four points per curve")
    f_ref = _log_rate_spline(reference)
    f_test = _log_rate_spline(test)
    lo = max(reference.psnrs.min(), test.psnrs.min())
    hi = min(reference.psnrs.max(), test.psnrs.max())
    if hi <= lo:
        raise ValueError("curves have no overlapping PSNR range")
    avg_diff = (f_test.integrate(lo, hi) - f_ref.integrate(lo, hi)) / (hi - lo)
    return float((10.0 ** avg_diff - 1.0) * 100.0)


# ---------------------------------------------------------------------------
# Bit-distribution heatmaps
# ---------------------------------------------------------------------------

def _pmf_np(k: np.ndarray, sigma: np.ndarray, omega: np.ndarray) -> np.ndarray:
    scale = np.clip(sigma.astype(np.float64) / omega.astype(np.float64), 1e-9, None)
    k = k.astype(np.float64)
    upper = (k + 0.5) / scale
    lower = (k - 0.5) / scale
    p = np.where(k >= 0, _ndtr(-lower) - _ndtr(-upper), _ndtr(upper) - _ndtr(lower))
    return np.clip(p, entropy.PMF_FLOOR, None)


def bit_heatmap(symbols: list, sigmas: list, omegas: list, downsamples: list,
                height: int, width: int) -> np.ndarray:
    """Mass-preserving per-pixel map of estimated latent bits.

    Each latent element's -log2 p(k) is summed over channels and spread
    uniformly over the pixels it covers (nearest-neighbor replication
    divided by the replication factor), then levels are accumulated. On
    frames whose sides are multiples of the total downsample the pixel sum
    equals the estimated latent bits exactly.
    """
    heat = np.zeros((height, width), dtype=np.float64)
    for sym, sigma, omega, ds in zip(symbols, sigmas, omegas, downsamples):
        bits = -np.log2(_pmf_np(np.asarray(sym), np.asarray(sigma), np.asarray(omega)))
        plane = bits.sum(axis=0)  # channel sum -> (h, w)
        up = np.kron(plane, np.ones((ds, ds))) / float(ds * ds)
        heat += up[:height, :width]
    return heat


def heatmap_from_stats(stats: codec.FrameCodingStats, config,
                       height: int, width: int) -> np.ndarray:
    downs = [config.downsample(l) for l in range(config.levels)]
    return bit_heatmap(stats.symbols, stats.sigma, stats.omega, downs, height, width)


# ---------------------------------------------------------------------------
# Uniform-map sweeps
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    clip: str
    frame: int
    level: str
    bpp_total: float
    bpp_latent: float
    bpp_qmap: float
    psnr: float
    psnr_in_region: float | None = None
    psnr_out_region: float | None = None


@dataclass
class SweepResult:
    points: list
    rows: list = field(default_factory=list)

    def curve(self, label: str = "uniform") -> RdCurve:
        return RdCurve(tuple(self.points), label=label)


def sweep_uniform(model: LocalRateCodec, clips: list, levels=None,
                  *, backend: str | None = None) -> SweepResult:
    """Code every clip with homogeneous maps at each level; average RD.

    One checkpoint serves all rate points; `levels` defaults to the 21-point
    grid {0, 0.05, ..., 1.0}.
    """
    levels = UNIFORM_LEVELS_21 if levels is None else tuple(levels)
    points = []
    rows = []
    for level in levels:
        total_bits = 0
        total_pixels = 0
        frame_psnrs = []
        for ci, clip in enumerate(clips):
            clip = np.asarray(clip, dtype=np.float32)
            n_frames, height, width = clip.shape[:3]
            maps = np.broadcast_to(
                qmap_mod.uniform_map(height, width, level), clip.shape[:3]
            )
            coded = codec.encode_video(model, clip, maps, backend=backend)
            total_bits += coded.total_bits
            total_pixels += n_frames * height * width
            for t in range(n_frames):
                stats = coded.frame_stats[t]
                value = psnr(clip[t], coded.reconstructions[t])
                frame_psnrs.append(value)
                rows.append(MetricsRow(
                    clip=f"clip{ci:03d}", frame=t, level=f"{level:g}",
                    bpp_total=bpp(stats.latent_bits + stats.qmap_bits, height, width),
                    bpp_latent=bpp(stats.latent_bits, height, width),
                    bpp_qmap=bpp(stats.qmap_bits, height, width),
                    psnr=value,
                ))
        points.append(RdPoint(
            bpp=total_bits / total_pixels,
            psnr=float(np.mean(frame_psnrs)),
            label=f"m={level:g}",
        ))
    return SweepResult(points=points, rows=rows)


# ---------------------------------------------------------------------------
# Inference-time quality-map optimization
# ---------------------------------------------------------------------------

@dataclass
class QmapOptimization:
    maps: np.ndarray                  # (T, H, W) optimized maps (pre-signaling)
    objective: float                  # code-mode objective of the returned maps
    uniform_objectives: dict          # grid level -> code-mode clip objective
    init_level: float
    used_uniform_fallback: bool = False


def _clip_objective(model, clip, maps, lam_scaled, *, backend):
    coded = codec.encode_video(model, clip, maps, backend=backend)
    bits = sum(s.latent_bits + s.qmap_bits for s in coded.frame_stats)
    n, height, width = clip.shape[:3]
    mse = float(np.mean((clip - coded.reconstructions) ** 2))
    return bits / (n * height * width) + lam_scaled * mse, coded


def _frame_objective(model, x_t, m_raw, state, lam_scaled, height, width,
                     *, backend):
    payload = qmap_mod.encode_qmap(m_raw)
    m_dec = qmap_mod.decode_qmap(payload, height, width)
    m_t = torch.from_numpy(m_dec).to(x_t.dtype).reshape(1, 1, height, width)
    out, level_bytes = codec.encode_frame_payloads(model, x_t, m_t, state, backend=backend)
    bits = 8 * (sum(level_bytes) + len(payload))
    mse = float(((x_t - out.reconstruction) ** 2).mean())
    return bits / (height * width) + lam_scaled * mse, out


def optimize_qmap(model: LocalRateCodec, clip: np.ndarray, lambda_target: float,
                  steps: int = 100, step_size: float = 0.02, *,
                  alpha: float = qmap_mod.DEFAULT_ALPHA,
                  beta: float = qmap_mod.DEFAULT_BETA,
                  distortion_scale: float = DEFAULT_DISTORTION_SCALE,
                  grid=UNIFORM_LEVELS_21, snapshot_every: int = 10,
                  seed: int = 0, backend: str | None = None) -> QmapOptimization:
    """Optimize per-frame quality maps for the objective R + lambda * MSE.

    Projected gradient descent on the maps with the model frozen, using the
    train-mode relaxations for differentiability; frames are handled
    greedily in coding order, each initialized from the previous frame's
    solution (frame 0 starts at the uniform level whose lambda mapping is
    nearest lambda_target). Candidate maps (GD snapshots plus the uniform
    grid, coded clip-wide) are priced by their true code-mode objective, so
    the returned maps never lose to a homogeneous map from the grid.
    """
    if lambda_target <= 0:
        raise ValueError("lambda_target must be positive")
    clip = np.asarray(clip, dtype=np.float32)
    n_frames, height, width = clip.shape[:3]
    # lambda_target lives on the scale the scaled distortion induces: invert
    # alpha * exp(beta * c) * distortion_scale = lambda_target for the init.
    c0 = math.log(lambda_target / (alpha * distortion_scale)) / beta
    c0 = min(max(c0, 0.0), 1.0)
    lam_mse = lambda_target * distortion_scale  # weight for MSE on [0,1] scale

    if steps == 0:
        maps = np.broadcast_to(
            qmap_mod.uniform_map(height, width, c0), (n_frames, height, width)
        ).copy()
        obj, _ = _clip_objective(model, clip, maps, lam_mse, backend=backend)
        return QmapOptimization(maps=maps, objective=obj,
                                uniform_objectives={}, init_level=c0)

    uniform_objs = {}
    for level in grid:
        maps = np.broadcast_to(
            qmap_mod.uniform_map(height, width, level), (n_frames, height, width)
        )
        uniform_objs[level], _ = _clip_objective(model, clip, maps, lam_mse,
                                                 backend=backend)

    dtype = next(model.parameters()).dtype
    model.eval()
    state = model.init_state(height, width)
    chosen_maps = np.empty((n_frames, height, width), dtype=np.float64)
    frame_objs = []
    prev_map = qmap_mod.uniform_map(height, width, c0)
    for t in range(n_frames):
        x_t = codec._to_tensor_frame(clip[t], dtype)
        m_var = torch.from_numpy(prev_map.copy()).to(dtype).reshape(1, 1, height, width)
        m_var.requires_grad_(True)
        snapshots = [m_var.detach().squeeze().numpy().copy()]
        for k in range(steps):
            torch.manual_seed((seed * 1000003 + t) * 1000003 + k)
            out = model(x_t, m_var, state, mode="train")
            rate = entropy.estimate_rate(
                out.rate_symbols,
                [p.sigma for p in out.priors],
                [p.omega for p in out.priors],
                height * width,
            )
            mse = ((x_t - out.reconstruction) ** 2).mean()
            objective = rate.bpp + lam_mse * mse
            if not torch.isfinite(objective):
                raise RuntimeError(
                    f"map optimization diverged at frame {t}, step {k}"
                )
            (grad,) = torch.autograd.grad(objective, m_var)
            with torch.no_grad():
                m_var -= step_size * grad
                m_var.clamp_(0.0, 1.0)
            if (k + 1) % snapshot_every == 0 or k == steps - 1:
                snapshots.append(m_var.detach().squeeze().numpy().copy())
        best_obj, best_out, best_map = None, None, None
        for cand in snapshots:
            obj, out = _frame_objective(
                model, x_t, cand, state, lam_mse, height, width, backend=backend
            )
            if best_obj is None or obj < best_obj:
                best_obj, best_out, best_map = obj, out, cand
        chosen_maps[t] = best_map
        frame_objs.append(best_obj)
        state = best_out.state
        prev_map = best_map
    greedy_obj = float(np.mean(frame_objs))

    best_uniform_level = min(uniform_objs, key=uniform_objs.get)
    if uniform_objs[best_uniform_level] < greedy_obj:
        maps = np.broadcast_to(
            qmap_mod.uniform_map(height, width, best_uniform_level),
            (n_frames, height, width),
        ).copy()
        return QmapOptimization(
            maps=maps, objective=uniform_objs[best_uniform_level],
            uniform_objectives=uniform_objs, init_level=c0,
            used_uniform_fallback=True,
        )
    return QmapOptimization(
        maps=chosen_maps, objective=greedy_obj,
        uniform_objectives=uniform_objs, init_level=c0,
    )


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("clip", "frame", "level", "bpp_total", "bpp_latent", "bpp_qmap",
               "psnr", "psnr_in_region", "psnr_out_region")


def write_metrics_csv(rows: list, path: str):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([
                r.clip, r.frame, r.level,
                f"{r.bpp_total:.6f}", f"{r.bpp_latent:.6f}", f"{r.bpp_qmap:.6f}",
                f"{r.psnr:.4f}",
                "" if r.psnr_in_region is None else f"{r.psnr_in_region:.4f}",
                "" if r.psnr_out_region is None else f"{r.psnr_out_region:.4f}",
            ])


def write_rd_csv(curves: list, path: str):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["curve", "label", "bpp", "psnr"])
        for curve in curves:
            for p in curve.points:
                writer.writerow([curve.label, p.label, f"{p.bpp:.6f}", f"{p.psnr:.4f}"])


def plot_rd_curves(curves: list, path: str, title: str = "Rate-distortion"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for curve in curves:
        ax.plot(curve.rates, curve.psnrs, marker="o", label=curve.label or None)
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR [dB]")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if any(c.label for c in curves):
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_heatmap(heat: np.ndarray, path: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5 * heat.shape[0] / max(heat.shape[1], 1)))
    im = ax.imshow(heat, cmap="magma")
    fig.colorbar(im, ax=ax, label="bits/pixel")
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
