"""Constellation-diagram rasterisation on a 7x7 complex plane.

Pixel convention: column ``j`` covers real parts ``[-E + j*pitch, -E + (j+1)*pitch)``
and row ``i`` covers imaginary parts ``(E - (i+1)*pitch, E - i*pitch]``, so row 0
is the top (+imag) edge. ``E`` is the half-extent (3.5) and
``pitch = 2E / resolution``.

The enhanced renderer spreads each sample over nearby pixel centroids with

    B[i, j] = sum_k P_k * exp(-alpha * d(i, j, k)),   P_k = |s_k|^2

truncated at radius ``4 / alpha``. The pixel containing a sample always
receives its contribution, so for very large alpha the enhanced image has
exactly the support of the gray histogram.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modulation import minmax


class EmptyImageError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    extent: float = 3.5
    resolution: int = 224
    clip_policy: str = "clamp"  # or "drop"

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError(f"resolution must be >= 8, got {self.resolution}")
        if not self.extent > 0:
            raise ValueError("extent must be positive")
        if self.clip_policy not in ("clamp", "drop"):
            raise ValueError(f"clip_policy must be 'clamp' or 'drop', got {self.clip_policy!r}")

    @property
    def pitch(self) -> float:
        return 2.0 * self.extent / self.resolution


@dataclass(frozen=True)
class DecayConfig:
    alphas: tuple[float, float, float] = (20.0, 40.0, 80.0)
    power_mode: str = "magnitude_squared"  # or "unit"

    def __post_init__(self):
        a = tuple(float(x) for x in self.alphas)
        if len(a) != 3:
            raise ValueError("exactly three decay rates are required")
        if not all(x > 0 for x in a):
            raise ValueError(f"decay rates must be positive, got {a}")
        if not a[0] < a[1] < a[2]:
            raise ValueError(f"decay rates must be strictly increasing, got {a}")
        if self.power_mode not in ("magnitude_squared", "unit"):
            raise ValueError(f"unknown power_mode {self.power_mode!r}")
        object.__setattr__(self, "alphas", a)


def _place(samples: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (x, y) plane positions after the clip policy, in canonical order.

    Sorting makes every renderer independent of the input sample order,
    bit for bit.
    """
    s = np.asarray(samples, dtype=np.complex128).reshape(-1)
    if s.size == 0:
        raise EmptyImageError("no samples to render")
    x, y = s.real, s.imag
    e = grid.extent
    if grid.clip_policy == "clamp":
        x = np.clip(x, -e, e)
        y = np.clip(y, -e, e)
    else:
        keep = (x >= -e) & (x < e) & (y > -e) & (y <= e)
        x, y = x[keep], y[keep]
        if x.size == 0:
            raise EmptyImageError("all samples fall outside the plane")
    order = np.lexsort((y, x))
    return x[order], y[order]


def _bins(x: np.ndarray, y: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    r = grid.resolution
    col = np.floor((x + grid.extent) / grid.pitch).astype(np.int64)
    row = np.floor((grid.extent - y) / grid.pitch).astype(np.int64)
    return np.clip(row, 0, r - 1), np.clip(col, 0, r - 1)


def render_gray(samples: np.ndarray, grid: GridSpec = GridSpec()) -> np.ndarray:
    """Per-pixel sample counts normalised by the maximum count."""
    x, y = _place(samples, grid)
    row, col = _bins(x, y, grid)
    r = grid.resolution
    counts = np.bincount(row * r + col, minlength=r * r).reshape(r, r)
    return (counts / counts.max()).astype(np.float32)


def enhanced_raw(samples: np.ndarray, grid: GridSpec, alpha: float,
                 power_mode: str = "magnitude_squared") -> np.ndarray:
    """Un-normalised exponential-decay image (float64)."""
    if not alpha > 0:
        raise ValueError(f"decay rate must be positive, got {alpha}")
    x, y = _place(samples, grid)
    power = x * x + y * y if power_mode == "magnitude_squared" else np.ones_like(x)
    row, col = _bins(x, y, grid)
    r, pitch, e = grid.resolution, grid.pitch, grid.extent
    radius = 4.0 / alpha
    w = int(np.ceil(radius / pitch)) + 1
    off = np.arange(-w, w + 1)
    d_row, d_col = np.meshgrid(off, off, indexing="ij")
    d_row, d_col = d_row.reshape(-1), d_col.reshape(-1)

    rows = row[:, None] + d_row[None, :]
    cols = col[:, None] + d_col[None, :]
    cx = -e + (cols + 0.5) * pitch
    cy = e - (rows + 0.5) * pitch
    dist = np.hypot(x[:, None] - cx, y[:, None] - cy)
    own = (d_row == 0) & (d_col == 0)
    valid = (rows >= 0) & (rows < r) & (cols >= 0) & (cols < r) & ((dist <= radius) | own[None, :])
    contrib = power[:, None] * np.exp(-alpha * dist)
    flat = (rows * r + cols)[valid]
    return np.bincount(flat, weights=contrib[valid], minlength=r * r).reshape(r, r)


def render_enhanced(samples: np.ndarray, grid: GridSpec = GridSpec(), alpha: float = 20.0,
                    power_mode: str = "magnitude_squared") -> np.ndarray:
    """Enhanced grayscale image normalised to [0, 1] (float32)."""
    return minmax(enhanced_raw(samples, grid, alpha, power_mode)).astype(np.float32)


def render_rgb(samples: np.ndarray, grid: GridSpec = GridSpec(),
               decay: DecayConfig = DecayConfig()) -> np.ndarray:
    """Three enhanced images, one per decay rate, stacked as [3, R, R]."""
    return np.stack([render_enhanced(samples, grid, a, decay.power_mode) for a in decay.alphas])


def to_ppm(image: np.ndarray) -> bytes:
    """Binary P6 bytes; values in [0, 1] quantised as floor(v * 255 + 0.5).

    Accepts [H, W] (replicated to gray RGB) or [3, H, W].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [H, W] or [3, H, W], got {list(img.shape)}")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape[1:]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.transpose(q, (1, 2, 0)).tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(to_ppm(image))


def read_ppm(path) -> np.ndarray:
    """Parse a P6 file back to uint8 [3, H, W]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, dims, maxval, payload = blob.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError("not an 8-bit binary PPM")
    w, h = (int(v) for v in dims.split())
    data = np.frombuffer(payload, dtype=np.uint8, count=w * h * 3)
    return np.transpose(data.reshape(h, w, 3), (2, 0, 1))
