"""Quality maps: per-pixel rate-distortion control surfaces.

A quality map is an H x W float array with values in [0, 1]; 0 requests the
lowest rate/quality and 1 the highest. This module covers the map data type
and validation, the exponential mapping into per-pixel Lagrangian weights,
constrained-random map generation with temporally coherent updates, region
composition helpers, the lossy signaling codec that ships maps to the
decoder, and file I/O.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from . import entropy
from .rangecoder import RangeDecodeError, rc_decode, rc_encode

DEFAULT_ALPHA = 1e-3
DEFAULT_BETA = 6.0

QMAP_DOWNSAMPLE = 16
QMAP_BITS = 6
_QMAP_LEVELS = 1 << QMAP_BITS
_MODE_RAW = 0
_MODE_CODED = 1

QMAP_MAGIC = b"QMAP"
_QMAP_HEADER = struct.Struct(">4sHHII")  # magic, H, W, 8 reserved bytes


def validate_qmap(m: np.ndarray) -> np.ndarray:
    """Check map invariants and return the array as float64."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"quality map must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("quality map contains non-finite values")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("quality map values must lie in [0, 1]")
    return m


def lambda_map(m: np.ndarray, alpha: float = DEFAULT_ALPHA,
               beta: float = DEFAULT_BETA) -> np.ndarray:
    """Map quality values into the Lagrangian domain: alpha * exp(beta * m)."""
    if not (alpha > 0.0 and beta > 0.0):
        raise ValueError("alpha and beta must be positive")
    m = validate_qmap(m)
    return alpha * np.exp(beta * m)


def uniform_map(height: int, width: int, level: float) -> np.ndarray:
    """Homogeneous map at a single quality level."""
    if not (0.0 <= level <= 1.0):
        raise ValueError(f"level {level} outside [0, 1]")
    return np.full((height, width), float(level), dtype=np.float64)


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in pixel units (x, y = top-left corner)."""

    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class Ellipse:
    """Axis-aligned ellipse with center (cx, cy) and radii (rx, ry)."""

    cx: float
    cy: float
    rx: float
    ry: float


def region_mask(region, height: int, width: int) -> np.ndarray:
    if isinstance(region, Rect):
        if region.w <= 0 or region.h <= 0:
            raise ValueError("rectangle must have positive size")
        if region.x < 0 or region.y < 0 or region.x + region.w > width \
                or region.y + region.h > height:
            raise ValueError(f"rectangle {region} outside {width}x{height} frame")
        mask = np.zeros((height, width), dtype=bool)
        mask[region.y : region.y + region.h, region.x : region.x + region.w] = True
        return mask
    if isinstance(region, Ellipse):
        if region.rx <= 0 or region.ry <= 0:
            raise ValueError("ellipse must have positive radii")
        if region.cx - region.rx < 0 or region.cx + region.rx > width \
                or region.cy - region.ry < 0 or region.cy + region.ry > height:
            raise ValueError(f"ellipse {region} outside {width}x{height} frame")
        ys = np.arange(height, dtype=np.float64)[:, None] + 0.5
        xs = np.arange(width, dtype=np.float64)[None, :] + 0.5
        return ((xs - region.cx) / region.rx) ** 2 \
            + ((ys - region.cy) / region.ry) ** 2 <= 1.0
    raise TypeError(f"unsupported region type {type(region).__name__}")


def compose_region_map(height: int, width: int, background: float,
                       regions) -> np.ndarray:
    """Background level everywhere, overwritten by each region in turn."""
    out = uniform_map(height, width, background)
    for region, level in regions:
        if not (0.0 <= level <= 1.0):
            raise ValueError(f"region level {level} outside [0, 1]")
        out[region_mask(region, height, width)] = level
    return out


# ---------------------------------------------------------------------------
# Constrained-random generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MapGenConfig:
    """Knobs for the constrained-random map generator.

    mix weighs the three feature classes (smooth fading fields, sharp
    shapes, near-constant backgrounds). The base layer is a smooth field or
    a constant, chosen with the renormalized field/constant weights; shape
    candidates (count drawn from `shape_count`) are each kept with
    probability mix[1]. `delta` bounds the per-frame value drift of every
    feature, so successive maps differ by at most `delta` per pixel away
    from moved shape boundaries.
    """

    mix: tuple = (0.4, 0.3, 0.3)
    shape_count: tuple = (1, 4)
    delta: float = 0.1
    kernel: int = 32
    max_shape_speed: float = 2.0

    def __post_init__(self):
        if len(self.mix) != 3 or any(w < 0 for w in self.mix):
            raise ValueError("mix must be three non-negative weights")
        if abs(sum(self.mix) - 1.0) > 1e-9:
            raise ValueError("mix weights must sum to 1")
        lo, hi = self.shape_count
        if lo < 0 or hi < lo:
            raise ValueError("invalid shape_count range")
        if not (0.0 <= self.delta <= 1.0):
            raise ValueError("delta must lie in [0, 1]")
        if self.kernel < 1:
            raise ValueError("kernel must be at least one pixel")
        if self.max_shape_speed < 0:
            raise ValueError("max_shape_speed must be non-negative")


@dataclass
class _Shape:
    kind: str
    cx: float
    cy: float
    half_w: float
    half_h: float
    level: float
    vx: float
    vy: float

    def mask(self, height: int, width: int) -> np.ndarray:
        ys = np.arange(height, dtype=np.float64)[:, None] + 0.5
        xs = np.arange(width, dtype=np.float64)[None, :] + 0.5
        if self.kind == "rect":
            return (np.abs(xs - self.cx) <= self.half_w) \
                & (np.abs(ys - self.cy) <= self.half_h)
        return ((xs - self.cx) / self.half_w) ** 2 \
            + ((ys - self.cy) / self.half_h) ** 2 <= 1.0


@dataclass
class MapState:
    """Generator state carried across frames of a map sequence."""

    base_kind: str                 # "field" or "const"
    grid: np.ndarray | None
    level: float | None
    shapes: list


def _grid_shape(height: int, width: int, kernel: int):
    return max(2, height // kernel + 1), max(2, width // kernel + 1)


def _sample_shape(rng: np.random.Generator, height: int, width: int,
                  cfg: MapGenConfig, avoid_level: float | None = None) -> _Shape:
    kind = "rect" if rng.random() < 0.5 else "ellipse"
    level = float(rng.uniform(0.0, 1.0))
    if avoid_level is not None:
        for _ in range(100):
            if abs(level - avoid_level) >= 0.1:
                break
            level = float(rng.uniform(0.0, 1.0))
    speed = cfg.max_shape_speed
    return _Shape(
        kind=kind,
        cx=float(rng.uniform(0.2, 0.8) * width),
        cy=float(rng.uniform(0.2, 0.8) * height),
        half_w=float(rng.uniform(0.08, 0.25) * width),
        half_h=float(rng.uniform(0.08, 0.25) * height),
        level=level,
        vx=float(rng.uniform(-speed, speed)),
        vy=float(rng.uniform(-speed, speed)),
    )


def _initial_state(rng: np.random.Generator, height: int, width: int,
                   cfg: MapGenConfig) -> MapState:
    w_field, w_shapes, w_const = cfg.mix
    base_total = w_field + w_const
    if base_total > 0 and rng.random() < w_field / base_total:
        grid = rng.uniform(0.0, 1.0, _grid_shape(height, width, cfg.kernel))
        state = MapState("field", grid, None, [])
        avoid = None
    else:
        level = float(rng.uniform(0.0, 1.0))
        state = MapState("const", None, level, [])
        avoid = level
    if w_shapes > 0:
        lo, hi = cfg.shape_count
        for _ in range(int(rng.integers(lo, hi + 1))):
            if rng.random() < w_shapes:
                state.shapes.append(_sample_shape(rng, height, width, cfg, avoid))
    return state


def _render(state: MapState, height: int, width: int) -> np.ndarray:
    if state.base_kind == "field":
        out = _bilinear_resize(state.grid, height, width)
    else:
        out = np.full((height, width), state.level, dtype=np.float64)
    for shape in state.shapes:
        out[shape.mask(height, width)] = shape.level
    return np.clip(out, 0.0, 1.0)


def _advance_state(state: MapState, rng: np.random.Generator, height: int,
                   width: int, cfg: MapGenConfig) -> tuple[MapState, np.ndarray]:
    """One temporal step; returns the new state and the moved-boundary mask."""
    delta = cfg.delta
    if state.base_kind == "field":
        grid = np.clip(state.grid + rng.uniform(-delta, delta, state.grid.shape), 0, 1)
        new = MapState("field", grid, None, [])
    else:
        level = float(np.clip(state.level + rng.uniform(-delta, delta), 0, 1))
        new = MapState("const", None, level, [])
    moved = np.zeros((height, width), dtype=bool)
    speed = cfg.max_shape_speed
    for shape in state.shapes:
        vx = float(np.clip(shape.vx + rng.uniform(-0.3, 0.3) * speed, -speed, speed))
        vy = float(np.clip(shape.vy + rng.uniform(-0.3, 0.3) * speed, -speed, speed))
        cx, cy = shape.cx + vx, shape.cy + vy
        if cx < shape.half_w or cx > width - shape.half_w:
            cx = float(np.clip(cx, shape.half_w, width - shape.half_w))
            vx = -vx
        if cy < shape.half_h or cy > height - shape.half_h:
            cy = float(np.clip(cy, shape.half_h, height - shape.half_h))
            vy = -vy
        level = float(np.clip(shape.level + rng.uniform(-delta, delta), 0, 1))
        updated = replace(shape, cx=cx, cy=cy, level=level, vx=vx, vy=vy)
        moved |= shape.mask(height, width) ^ updated.mask(height, width)
        new.shapes.append(updated)
    return new, moved


class MapSequence:
    """Seeded, temporally coherent quality-map sequence.

    Exposes the generator state and the mask of pixels crossed by shape
    boundaries on the latest step, so downstream checks can verify the
    per-pixel drift bound away from moving edges.
    """

    def __init__(self, height: int, width: int, cfg: MapGenConfig, seed: int):
        if height < 16 or width < 16:
            raise ValueError("maps must be at least 16x16 pixels")
        self.height, self.width, self.cfg = height, width, cfg
        self._rng = np.random.default_rng(seed)
        self.state = _initial_state(self._rng, height, width, cfg)
        self.current = _render(self.state, height, width)
        self.last_moved_mask = np.zeros((height, width), dtype=bool)

    def advance(self) -> np.ndarray:
        self.state, self.last_moved_mask = _advance_state(
            self.state, self._rng, self.height, self.width, self.cfg
        )
        self.current = _render(self.state, self.height, self.width)
        return self.current

    def maps(self, count: int):
        """First `count` maps of the sequence, including the initial one."""
        out = [self.current]
        for _ in range(count - 1):
            out.append(self.advance())
        return out


def generate_initial_map(height: int, width: int, cfg: MapGenConfig,
                         seed: int) -> np.ndarray:
    """First map of the seeded sequence (see MapSequence for full sequences)."""
    return MapSequence(height, width, cfg, seed).current


def update_map(prev: np.ndarray, cfg: MapGenConfig, seed: int) -> np.ndarray:
    """Stateless temporal update: per-pixel drift bounded by cfg.delta.

    Constant-only configurations drift by a single scalar so constant maps
    stay constant; otherwise a smooth low-frequency drift field is applied.
    Shape motion requires the tracked state in MapSequence.
    """
    prev = validate_qmap(prev)
    rng = np.random.default_rng(seed)
    if cfg.mix[2] == 1.0:
        step = rng.uniform(-cfg.delta, cfg.delta)
        return np.clip(prev + step, 0.0, 1.0)
    gh, gw = _grid_shape(prev.shape[0], prev.shape[1], cfg.kernel)
    drift = rng.uniform(-cfg.delta, cfg.delta, (gh, gw))
    return np.clip(prev + _bilinear_resize(drift, *prev.shape), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Resampling helpers
# ---------------------------------------------------------------------------

def _axis_interp_weights(n_in: int, n_out: int):
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    np.clip(pos, 0.0, n_in - 1.0, out=pos)
    lo = np.floor(pos).astype(np.int64)
    np.minimum(lo, n_in - 1, out=lo)
    frac = pos - lo
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, frac


def _bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel alignment.

    Every output value is a convex combination of inputs, so the output
    range never exceeds the input range.
    """
    src = np.asarray(src, dtype=np.float64)
    lo, hi, f = _axis_interp_weights(src.shape[0], out_h)
    tmp = src[lo, :] * (1.0 - f)[:, None] + src[hi, :] * f[:, None]
    lo, hi, f = _axis_interp_weights(src.shape[1], out_w)
    return tmp[:, lo] * (1.0 - f)[None, :] + tmp[:, hi] * f[None, :]


def _upsample_matrix(n_in: int, n_out: int) -> np.ndarray:
    lo, hi, f = _axis_interp_weights(n_in, n_out)
    u = np.zeros((n_out, n_in), dtype=np.float64)
    u[np.arange(n_out), lo] += 1.0 - f
    u[np.arange(n_out), hi] += f
    return u


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    bounds = (np.arange(n_out + 1, dtype=np.int64) * n_in) // n_out
    p = np.zeros((n_out, n_in), dtype=np.float64)
    for t in range(n_out):
        a, b = bounds[t], bounds[t + 1]
        p[t, a:b] = 1.0 / (b - a)
    return p


# ---------------------------------------------------------------------------
# Signaling codec
# ---------------------------------------------------------------------------

_RESIDUAL_RHOS = (0.2, 0.5, 0.8)
_residual_table_cache = {}


def _residual_table(rho: float):
    """Fixed table for prediction residuals of the 6-bit grid codes.

    A two-sided geometric of sharpness `rho` mixed with a uniform floor:
    small residuals code near their entropy while any residual stays
    finitely priced. The encoder picks the best sharpness per payload and
    signals it in the mode byte.
    """
    if rho not in _residual_table_cache:
        r = np.abs(np.arange(-(_QMAP_LEVELS - 1), _QMAP_LEVELS, dtype=np.float64))
        geo = rho ** r
        geo /= geo.sum()
        pmf = 0.9 * geo + 0.1 / r.size
        _residual_table_cache[rho] = entropy.pmf_to_quantized_cdf(pmf)
    from .rangecoder import CdfTable

    return CdfTable(-(_QMAP_LEVELS - 1), _residual_table_cache[rho])


def qmap_grid_codes(m: np.ndarray) -> np.ndarray:
    """6-bit signaled grid for a map: pool, invert the pool/upsample smoothing,
    quantize.

    The inversion makes the codec a projection: re-encoding a decoded map
    reproduces the same codes (and therefore identical bytes).
    """
    m = validate_qmap(m)
    h, w = m.shape
    gh = -(-h // QMAP_DOWNSAMPLE)
    gw = -(-w // QMAP_DOWNSAMPLE)
    p_y, p_x = _pool_matrix(h, gh), _pool_matrix(w, gw)
    pooled = p_y @ m @ p_x.T
    s_y = p_y @ _upsample_matrix(gh, h)
    s_x = p_x @ _upsample_matrix(gw, w)
    grid = np.linalg.solve(s_y, pooled)
    grid = np.linalg.solve(s_x, grid.T).T
    np.clip(grid, 0.0, 1.0, out=grid)
    return np.minimum(
        np.floor(grid * _QMAP_LEVELS).astype(np.int64), _QMAP_LEVELS - 1
    )


def _med(left, above, above_left):
    """Median edge detector: exact on planes, clamps at edges."""
    lo = np.minimum(left, above)
    hi = np.maximum(left, above)
    plane = left + above - above_left
    return np.where(above_left >= hi, lo, np.where(above_left <= lo, hi, plane))


def _predict(codes: np.ndarray) -> np.ndarray:
    pred = np.empty_like(codes)
    pred[0, 0] = _QMAP_LEVELS // 2
    pred[0, 1:] = codes[0, :-1]
    pred[1:, 0] = codes[:-1, 0]
    pred[1:, 1:] = _med(codes[1:, :-1], codes[:-1, 1:], codes[:-1, :-1])
    return pred


def _pack6(codes: np.ndarray) -> bytes:
    bits = np.unpackbits(codes.astype(np.uint8).reshape(-1, 1), axis=1)[:, 8 - QMAP_BITS:]
    return np.packbits(bits.ravel()).tobytes()


def _unpack6(data: bytes, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if bits.size < count * QMAP_BITS:
        raise entropy.TruncatedError("raw quality-map payload too short", offset=len(data))
    bits = bits[: count * QMAP_BITS].reshape(count, QMAP_BITS)
    weights = 1 << np.arange(QMAP_BITS - 1, -1, -1)
    return (bits * weights).sum(axis=1).astype(np.int64)


def encode_qmap(m: np.ndarray) -> bytes:
    """Code a map for transmission: 16x downsampled, 6-bit, entropy coded.

    Falls back to raw packed 6-bit codes whenever that is smaller, so the
    payload for a g-cell grid never exceeds ceil(6g/8) + 1 bytes.
    """
    codes = qmap_grid_codes(m)
    residuals = codes - _predict(codes)
    best = _pack6(codes)
    best_mode = _MODE_RAW
    for i, rho in enumerate(_RESIDUAL_RHOS):
        table = _residual_table(rho)
        coded = rc_encode(residuals.ravel(), [table] * residuals.size)
        if len(coded) < len(best):
            best, best_mode = coded, _MODE_CODED + i
    return bytes([best_mode]) + best


def decode_qmap(data: bytes, height: int, width: int) -> np.ndarray:
    """Invert encode_qmap: dequantize to bin centers, bilinearly upsample."""
    if len(data) < 1:
        raise entropy.TruncatedError("empty quality-map payload", offset=0)
    gh = -(-height // QMAP_DOWNSAMPLE)
    gw = -(-width // QMAP_DOWNSAMPLE)
    mode, body = data[0], data[1:]
    if mode == _MODE_RAW:
        codes = _unpack6(body, gh * gw).reshape(gh, gw)
    elif _MODE_CODED <= mode < _MODE_CODED + len(_RESIDUAL_RHOS):
        table = _residual_table(_RESIDUAL_RHOS[mode - _MODE_CODED])
        try:
            residuals = rc_decode(body, [table] * (gh * gw))
        except RangeDecodeError as e:
            raise entropy.TruncatedError(
                "coded quality-map payload exhausted", offset=1 + e.position
            ) from e
        codes = np.empty((gh, gw), dtype=np.int64)
        res = residuals.reshape(gh, gw)
        for i in range(gh):
            for j in range(gw):
                if i == 0 and j == 0:
                    pred = _QMAP_LEVELS // 2
                elif i == 0:
                    pred = codes[0, j - 1]
                elif j == 0:
                    pred = codes[i - 1, 0]
                else:
                    pred = int(_med(codes[i, j - 1], codes[i - 1, j], codes[i - 1, j - 1]))
                codes[i, j] = pred + res[i, j]
        if codes.min() < 0 or codes.max() >= _QMAP_LEVELS:
            raise entropy.BitstreamError("quality-map codes out of range", offset=1)
    else:
        raise entropy.BitstreamError(f"unknown quality-map mode {mode}", offset=0)
    centers = (codes + 0.5) / _QMAP_LEVELS
    return _bilinear_resize(centers, height, width)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def save_qmap(path: str, m: np.ndarray):
    """Write a map as an 8-bit grayscale image or raw float32 (.qmap)."""
    m = validate_qmap(m)
    if str(path).endswith(".qmap"):
        h, w = m.shape
        header = _QMAP_HEADER.pack(QMAP_MAGIC, h, w, 0, 0)
        payload = m.astype(">f4").tobytes()
        with open(path, "wb") as f:
            f.write(header + payload)
        return
    img = Image.fromarray(np.round(m * 255.0).astype(np.uint8), mode="L")
    img.save(path)


def load_qmap(path: str) -> np.ndarray:
    """Read a map saved by save_qmap (or any single-channel image)."""
    if str(path).endswith(".qmap"):
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < _QMAP_HEADER.size:
            raise ValueError(f"{path}: truncated quality-map header")
        magic, h, w, _, _ = _QMAP_HEADER.unpack_from(raw)
        if magic != QMAP_MAGIC:
            raise ValueError(f"{path}: bad quality-map magic {magic!r}")
        expected = _QMAP_HEADER.size + 4 * h * w
        if len(raw) != expected:
            raise ValueError(f"{path}: expected {expected} bytes, got {len(raw)}")
        values = np.frombuffer(raw, dtype=">f4", offset=_QMAP_HEADER.size)
        return validate_qmap(values.reshape(h, w).astype(np.float64))
    img = Image.open(path).convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def describe_lambda_range(alpha: float = DEFAULT_ALPHA,
                          beta: float = DEFAULT_BETA) -> tuple[float, float]:
    """(lambda at m=0, lambda at m=1) for the given mapping constants."""
    return alpha, alpha * math.exp(beta)
