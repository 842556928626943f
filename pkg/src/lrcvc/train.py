"""Weighted rate-distortion training: losses, schedule, datasets, checkpoints.

The loss is the estimated bit rate in bits per pixel plus the spatially
weighted squared error. Pixelwise weights come from the quality map through
the exponential lambda mapping; the squared error is additionally scaled so
the weights are commensurate with rate measured in bits per pixel (see
TrainConfig.distortion_scale). Multi-frame clips are trained with the
temporal state carried (not detached) across frames, and the schedule grows
the clip length in stages.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import yaml

from . import qmap as qmap_mod
from .entropy import estimate_rate
from .model import CodecConfig, LocalRateCodec, save_checkpoint

DEFAULT_DISTORTION_SCALE = 255.0 ** 2


class ConfigError(ValueError):
    """Invalid or inconsistent training configuration."""


class TrainingAbort(RuntimeError):
    """Non-finite loss; carries diagnostics for the failing step."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    rate_bpp: float
    weighted_mse: float
    total: float


def lambda_weights(m: torch.Tensor, alpha: float, beta: float) -> torch.Tensor:
    """Tensor version of the quality-to-lambda mapping (keeps gradients to m)."""
    return alpha * torch.exp(beta * m)


def wmse_loss(x: torch.Tensor, x_hat: torch.Tensor,
              lam: torch.Tensor) -> torch.Tensor:
    """Per-pixel weighted squared error, averaged over the frame.

    `lam` broadcasts over the channel axis; the squared error is averaged
    over channels first, so a uniform weight c yields exactly c * MSE.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"frame shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.dim() == 4:
        se = ((x - x_hat) ** 2).mean(dim=1)
        lam = lam[:, 0] if lam.dim() == 4 else lam
    elif x.dim() == 3:
        se = ((x - x_hat) ** 2).mean(dim=0)
    else:
        se = (x - x_hat) ** 2
    if lam.shape != se.shape:
        raise ValueError(f"weight shape {tuple(lam.shape)} does not match error shape {tuple(se.shape)}")
    return (lam * se).mean()


def total_loss(rate_bpp, weighted_mse) -> LossBreakdown:
    """Training objective: estimated bits per pixel plus weighted distortion."""
    return LossBreakdown(rate_bpp, weighted_mse, rate_bpp + weighted_mse)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClipDatasetSpec:
    source: str = "synthetic"          # "synthetic" or "frames"
    clip_length: int = 16
    crop: int = 64
    count: int = 64
    seed: int = 0
    path: str | None = None
    max_speed: float = 2.0

    def __post_init__(self):
        if self.source not in ("synthetic", "frames"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.clip_length < 1:
            raise ConfigError("clip_length must be at least 1")
        if self.crop % 32 != 0:
            raise ConfigError("crop size must be divisible by 32")
        if self.source == "frames" and not self.path:
            raise ConfigError("frame datasets need a path")


def _coarse_texture(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    grid = rng.uniform(0.0, 1.0, (max(2, h // cells + 1), max(2, w // cells + 1), 3))
    out = np.stack(
        [qmap_mod._bilinear_resize(grid[..., c], h, w) for c in range(3)], axis=-1
    )
    return out


def _sample_texture(tex: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a texture at fractional coordinates (clamped)."""
    h, w = tex.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    return (
        tex[y0, x0] * (1 - fy) * (1 - fx)
        + tex[y0, x1] * (1 - fy) * fx
        + tex[y1, x0] * fy * (1 - fx)
        + tex[y1, x1] * fy * fx
    )


def synth_clip(spec: ClipDatasetSpec, index: int) -> np.ndarray:
    """Deterministic moving-shape clip: (T, H, W, 3) float32 in [0, 1].

    A textured background plus 2-6 rigidly translating textured shapes with
    sub-pixel motion.
    """
    rng = np.random.default_rng([spec.seed, index])
    size = spec.crop
    background = _coarse_texture(rng, size, size, 16)
    # band-limited detail (2 px scale) so the texture is codable, not iid noise
    half = rng.uniform(-0.06, 0.06, (size // 2, size // 2))
    detail = qmap_mod._bilinear_resize(half, size, size)[..., None]
    background = np.clip(background + detail, 0.0, 1.0)
    n_shapes = int(rng.integers(2, 7))
    shapes = []
    for _ in range(n_shapes):
        sw = float(rng.uniform(0.15, 0.4) * size)
        sh = float(rng.uniform(0.15, 0.4) * size)
        shapes.append({
            "kind": "rect" if rng.random() < 0.5 else "ellipse",
            "w": sw,
            "h": sh,
            "tex": _coarse_texture(rng, int(sh) + 2, int(sw) + 2, 6),
            "x0": float(rng.uniform(0, size - sw)),
            "y0": float(rng.uniform(0, size - sh)),
            "vx": float(rng.uniform(-spec.max_speed, spec.max_speed)),
            "vy": float(rng.uniform(-spec.max_speed, spec.max_speed)),
        })
    ys = np.arange(size, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(size, dtype=np.float64)[None, :] + 0.5
    frames = np.empty((spec.clip_length, size, size, 3), dtype=np.float32)
    for t in range(spec.clip_length):
        frame = background.copy()
        for s in shapes:
            ox = s["x0"] + t * s["vx"]
            oy = s["y0"] + t * s["vy"]
            lx = np.broadcast_to(xs - ox, (size, size))
            ly = np.broadcast_to(ys - oy, (size, size))
            if s["kind"] == "rect":
                mask = (lx >= 0) & (lx < s["w"]) & (ly >= 0) & (ly < s["h"])
            else:
                mask = ((lx / s["w"] - 0.5) * 2) ** 2 + ((ly / s["h"] - 0.5) * 2) ** 2 <= 1.0
            if not mask.any():
                continue
            tex = _sample_texture(s["tex"], ly[mask], lx[mask])
            frame[mask] = tex
        frames[t] = np.clip(frame, 0.0, 1.0)
    return frames


class SyntheticClips:
    """Indexable synthetic clip dataset."""

    def __init__(self, spec: ClipDatasetSpec):
        self.spec = spec

    def __len__(self):
        return self.spec.count

    def clip(self, index: int, frames: int) -> np.ndarray:
        if frames > self.spec.clip_length:
            raise ConfigError(
                f"dataset clips have {self.spec.clip_length} frames, "
                f"stage needs {frames}"
            )
        return synth_clip(self.spec, index % self.spec.count)[:frames]


class FrameDirClips:
    """Clips stored as numbered image files inside per-clip directories."""

    def __init__(self, spec: ClipDatasetSpec):
        from PIL import Image  # local import keeps torch-only paths light

        self.spec = spec
        self._image = Image
        root = spec.path
        if not os.path.isdir(root):
            raise ConfigError(f"dataset path {root!r} is not a directory")
        self.clips = sorted(
            os.path.join(root, d) for d in os.listdir(root)
            if os.path.isdir(os.path.join(root, d))
        )
        if not self.clips:
            self.clips = [root]  # a single flat directory of frames

    def __len__(self):
        return len(self.clips)

    def clip(self, index: int, frames: int) -> np.ndarray:
        directory = self.clips[index % len(self.clips)]
        files = sorted(
            f for f in os.listdir(directory)
            if f.lower().endswith((".png", ".jpg", ".jpeg", ".bmp"))
        )
        if len(files) < frames:
            raise ConfigError(
                f"clip {directory} has {len(files)} frames, stage needs {frames}"
            )
        out = []
        for name in files[:frames]:
            img = self._image.open(os.path.join(directory, name)).convert("RGB")
            out.append(np.asarray(img, dtype=np.float32) / 255.0)
        clip = np.stack(out)
        size = self.spec.crop
        if clip.shape[1] < size or clip.shape[2] < size:
            raise ConfigError(f"clip {directory} smaller than crop {size}")
        return clip[:, :size, :size]


def open_dataset(spec: ClipDatasetSpec):
    return SyntheticClips(spec) if spec.source == "synthetic" else FrameDirClips(spec)


# ---------------------------------------------------------------------------
# Schedule and configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleStage:
    end_epoch: int
    frames: int
    dataset: str


@dataclass
class TrainConfig:
    stages: list = field(default_factory=lambda: [
        ScheduleStage(4, 3, "train"),
        ScheduleStage(7, 7, "train"),
        ScheduleStage(8, 16, "train"),
    ])
    datasets: dict = field(default_factory=lambda: {
        "train": ClipDatasetSpec(source="synthetic", clip_length=16, crop=64,
                                 count=96, seed=11)
    })
    lr: float = 1e-4
    batch: int = 4
    crop: int = 128
    seed: int = 0
    steps_per_epoch: int = 50
    alpha: float = qmap_mod.DEFAULT_ALPHA
    beta: float = qmap_mod.DEFAULT_BETA
    distortion_scale: float = DEFAULT_DISTORTION_SCALE
    grad_clip: float = 1.0
    map_cfg: qmap_mod.MapGenConfig = field(default_factory=qmap_mod.MapGenConfig)
    model: CodecConfig = field(default_factory=CodecConfig)

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("schedule needs at least one stage")
        if self.stages[0].end_epoch < 0:
            raise ConfigError("stage end epochs must be non-negative")
        prev_frames = 0
        for i, st in enumerate(self.stages):
            if i > 0 and st.end_epoch <= self.stages[i - 1].end_epoch:
                raise ConfigError("stage end epochs must be strictly increasing")
            if st.frames < prev_frames:
                raise ConfigError("stage frame counts must be non-decreasing")
            if st.dataset not in self.datasets:
                raise ConfigError(f"stage references unknown dataset {st.dataset!r}")
            prev_frames = st.frames


def load_train_config(path: str) -> TrainConfig:
    """Parse the key/value YAML training configuration file."""
    try:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("training config must be a mapping")
    kwargs = {}
    simple = ("lr", "batch", "crop", "seed", "steps_per_epoch", "alpha", "beta",
              "distortion_scale", "grad_clip")
    for key in simple:
        if key in raw:
            kwargs[key] = raw[key]
    if "stages" in raw:
        kwargs["stages"] = [
            ScheduleStage(int(s["end_epoch"]), int(s["frames"]), str(s["dataset"]))
            for s in raw["stages"]
        ]
    if "datasets" in raw:
        kwargs["datasets"] = {
            name: ClipDatasetSpec(**spec) for name, spec in raw["datasets"].items()
        }
    if "map" in raw:
        mix = raw["map"].pop("mix", None)
        if mix is not None:
            raw["map"]["mix"] = tuple(mix)
        kwargs["map_cfg"] = qmap_mod.MapGenConfig(**raw["map"])
    if "model" in raw:
        model_raw = dict(raw["model"])
        if "channels" in model_raw:
            model_raw["channels"] = tuple(model_raw["channels"])
        kwargs["model"] = CodecConfig(**model_raw)
    unknown = set(raw) - set(simple) - {"stages", "datasets", "map", "model"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def _step_seed(seed: int, stage: int, step: int) -> int:
    return (seed * 1000003 + stage) * 1000003 + step


def training_step(model: LocalRateCodec, optimizer, clip: torch.Tensor,
                  maps: torch.Tensor, cfg: TrainConfig,
                  step_info: tuple = (0, 0)) -> LossBreakdown:
    """One optimizer update on a clip batch.

    clip: (B, T, 3, H, W); maps: (B, T, 1, H, W). The temporal state is
    carried across the clip's frames without detaching, so gradients reach
    every frame and the learned temporal biases.
    """
    stage_idx, step = step_info
    torch.manual_seed(_step_seed(cfg.seed, stage_idx, step))
    batch, frames = clip.shape[0], clip.shape[1]
    state = model.init_state(clip.shape[3], clip.shape[4], batch=batch)
    pixels = batch * clip.shape[3] * clip.shape[4]
    rate_sum = 0.0
    wmse_sum = 0.0
    per_level_bits = None
    for t in range(frames):
        x = clip[:, t]
        m = maps[:, t]
        out = model(x, m, state, mode="train")
        rate = estimate_rate(
            out.rate_symbols,
            [p.sigma for p in out.priors],
            [p.omega for p in out.priors],
            pixels,
        )
        lam = lambda_weights(m, cfg.alpha, cfg.beta) * cfg.distortion_scale
        wmse = wmse_loss(x, out.reconstruction, lam)
        rate_sum = rate_sum + rate.bpp
        wmse_sum = wmse_sum + wmse
        per_level_bits = [float(b.detach()) for b in rate.bits_per_level]
        state = out.state
    rate_mean = rate_sum / frames
    wmse_mean = wmse_sum / frames
    loss = rate_mean + wmse_mean
    if not torch.isfinite(loss):
        raise TrainingAbort(
            f"non-finite loss at stage {stage_idx} step {step}",
            diagnostics={
                "stage": stage_idx, "step": step,
                "rate_bpp": float(rate_mean.detach()),
                "weighted_mse": float(wmse_mean.detach()),
                "bits_per_level": per_level_bits,
            },
        )
    optimizer.zero_grad()
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return LossBreakdown(
        float(rate_mean.detach()), float(wmse_mean.detach()), float(loss.detach())
    )


def _batch_for_step(cfg: TrainConfig, datasets: dict, stage: ScheduleStage,
                    stage_idx: int, step: int):
    """Deterministic clip batch plus temporally coherent quality maps."""
    rng = np.random.default_rng([cfg.seed, stage_idx, step])
    data = datasets[stage.dataset]
    clips = []
    maps = []
    for b in range(cfg.batch):
        idx = int(rng.integers(0, len(data)))
        clip = data.clip(idx, stage.frames)
        seq = qmap_mod.MapSequence(
            clip.shape[1], clip.shape[2], cfg.map_cfg,
            seed=int(rng.integers(0, 2 ** 31)),
        )
        clip_maps = np.stack(seq.maps(stage.frames))
        clips.append(clip)
        maps.append(clip_maps.astype(np.float32))
    clip_t = torch.from_numpy(np.stack(clips)).permute(0, 1, 4, 2, 3).contiguous()
    maps_t = torch.from_numpy(np.stack(maps)).unsqueeze(2)
    return clip_t, maps_t


def run_schedule(model: LocalRateCodec, cfg: TrainConfig, out_dir: str,
                 resume_from: str | None = None, log_name: str = "train_log.csv",
                 progress: bool = False) -> list:
    """Execute the staged schedule; saves a checkpoint at each stage end.

    Returns the list of written checkpoint paths. The training log CSV has
    one row per step: step, stage, bpp, wmse, total.
    """
    os.makedirs(out_dir, exist_ok=True)
    datasets = {name: open_dataset(spec) for name, spec in cfg.datasets.items()}
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    start_stage = 0
    global_step = 0
    if resume_from:
        from .model import load_checkpoint

        model_loaded, extra = load_checkpoint(resume_from)
        model.load_state_dict(model_loaded.state_dict())
        if "optimizer" in extra:
            optimizer.load_state_dict(extra["optimizer"])
        start_stage = int(extra.get("stages_completed", 0))
        global_step = int(extra.get("global_step", 0))
    paths = []
    log_path = os.path.join(out_dir, log_name)
    mode = "a" if resume_from else "w"
    with open(log_path, mode, newline="") as logf:
        writer = csv.writer(logf)
        if mode == "w":
            writer.writerow(["step", "stage", "bpp", "wmse", "total"])
        prev_end = cfg.stages[start_stage - 1].end_epoch if start_stage else 0
        for stage_idx in range(start_stage, len(cfg.stages)):
            stage = cfg.stages[stage_idx]
            model.train()
            for epoch in range(prev_end, stage.end_epoch):
                for step_in_epoch in range(cfg.steps_per_epoch):
                    clip_t, maps_t = _batch_for_step(
                        cfg, datasets, stage, stage_idx, global_step
                    )
                    breakdown = training_step(
                        model, optimizer, clip_t, maps_t, cfg,
                        step_info=(stage_idx, global_step),
                    )
                    writer.writerow([
                        global_step, stage_idx,
                        f"{breakdown.rate_bpp:.6f}",
                        f"{breakdown.weighted_mse:.6f}",
                        f"{breakdown.total:.6f}",
                    ])
                    global_step += 1
                    if progress and global_step % 20 == 0:
                        print(
                            f"stage {stage_idx} step {global_step}: "
                            f"bpp {breakdown.rate_bpp:.4f} "
                            f"wmse {breakdown.weighted_mse:.4f}",
                            flush=True,
                        )
                logf.flush()
            prev_end = stage.end_epoch
            path = os.path.join(out_dir, f"checkpoint_stage{stage_idx}.pt")
            model.eval()
            save_checkpoint(model, path, extra={
                "optimizer": optimizer.state_dict(),
                "stages_completed": stage_idx + 1,
                "global_step": global_step,
                "stages": [
                    {"end_epoch": s.end_epoch, "frames": s.frames, "dataset": s.dataset}
                    for s in cfg.stages
                ],
                "seed": cfg.seed,
            })
            paths.append(path)
    return paths
