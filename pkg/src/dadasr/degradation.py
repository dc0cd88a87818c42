"""Synthetic camera degradations and least-squares kernel estimation.

The forward model is ``LR = clamp(down_s(HR * k) + n)`` where ``*`` is a true
2-D convolution with whole-sample mirror ("reflect") boundary handling and
``down_s`` keeps the upper-left pixel of every ``s x s`` cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image as PILImage, ImageDraw
from scipy import ndimage

from .data import ColorSpace, Image

KERNEL_KINDS = ("iso_gauss", "aniso_gauss", "motion", "delta")


@dataclass(frozen=True, eq=False)
class Kernel:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel has non-finite weights")
        total = w.sum()
        if abs(total) < 1e-12:
            raise ValueError("kernel weights sum to zero; cannot normalize")
        object.__setattr__(self, "weights", w / total)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class CameraProfile:
    name: str
    kernel: Kernel
    noise_sigma: float = 0.0
    scale: int = 4
    kind: str = "delta"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.name:
            raise ValueError("camera profile needs a name")
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "params": dict(self.params),
                "scale": self.scale, "noise_sigma": self.noise_sigma,
                "kernel_size": self.kernel.size}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraProfile":
        return make_camera_profile(d["name"], d["kind"], d.get("params", {}),
                                   scale=d.get("scale", 4), noise_sigma=d.get("noise_sigma", 0.0),
                                   size=d.get("kernel_size", 25))


def _grid(size: int):
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    # rows index y, columns index x
    return np.meshgrid(ax, ax, indexing="ij")


def gaussian_kernel(size: int, sigma_x: float, sigma_y: Optional[float] = None,
                    angle_deg: float = 0.0) -> Kernel:
    sigma_y = sigma_x if sigma_y is None else sigma_y
    if sigma_x <= 0 or sigma_y <= 0:
        raise ValueError(f"gaussian sigmas must be positive, got {sigma_x}, {sigma_y}")
    th = math.radians(angle_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    cov = rot @ np.diag([sigma_x ** 2, sigma_y ** 2]) @ rot.T
    inv = np.linalg.inv(cov)
    yy, xx = _grid(size)
    q = inv[0, 0] * xx ** 2 + 2 * inv[0, 1] * xx * yy + inv[1, 1] * yy ** 2
    return Kernel(np.exp(-0.5 * q))


def motion_kernel(size: int, length: float, angle_deg: float = 0.0) -> Kernel:
    if length <= 0:
        raise ValueError(f"motion length must be positive, got {length}")
    r = size // 2
    w = np.zeros((size, size))
    th = math.radians(angle_deg)
    for t in np.linspace(-length / 2, length / 2, max(int(8 * length), 2)):
        x, y = r + t * math.cos(th), r - t * math.sin(th)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        # bilinear splat keeps sub-pixel line positions
        for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                           (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
            if 0 <= y0 + dy < size and 0 <= x0 + dx < size:
                w[y0 + dy, x0 + dx] += wt
    return Kernel(w)


def delta_kernel(size: int) -> Kernel:
    w = np.zeros((size, size))
    w[size // 2, size // 2] = 1.0
    return Kernel(w)


def make_camera_profile(name: str, kind: str, params: Optional[dict] = None, scale: int = 4,
                        noise_sigma: float = 0.0, size: int = 25) -> CameraProfile:
    params = dict(params or {})
    if kind == "iso_gauss":
        kernel = gaussian_kernel(size, float(params["sigma"]))
    elif kind == "aniso_gauss":
        kernel = gaussian_kernel(size, float(params["sigma_x"]), float(params["sigma_y"]),
                                 float(params.get("angle", 0.0)))
    elif kind == "motion":
        kernel = motion_kernel(size, float(params["length"]), float(params.get("angle", 0.0)))
    elif kind == "delta":
        kernel = delta_kernel(size)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KERNEL_KINDS}")
    return CameraProfile(name, kernel, float(noise_sigma), int(scale), kind, params)


def blur(pixels: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Channel-wise convolution with mirror padding (d c b | a b c d)."""
    px = np.asarray(pixels, dtype=np.float64)
    out = np.empty_like(px)
    for c in range(px.shape[2]):
        out[..., c] = ndimage.convolve(px[..., c], kernel.weights, mode="mirror")
    return out


def subsample(pixels: np.ndarray, scale: int) -> np.ndarray:
    return pixels[::scale, ::scale]


def degrade(hr: Image, profile: CameraProfile, rng: Optional[np.random.Generator] = None,
            noise_sigma: Optional[float] = None) -> Image:
    s = profile.scale
    if hr.height % s or hr.width % s:
        raise ValueError(f"HR size {hr.height}x{hr.width} not divisible by scale {s}")
    if min(hr.height, hr.width) <= profile.kernel.size // 2:
        raise ValueError("image too small for mirror padding with this kernel")
    sigma = profile.noise_sigma if noise_sigma is None else noise_sigma
    lr = subsample(blur(hr.pixels, profile.kernel), s)
    if sigma > 0:
        if rng is None:
            raise ValueError("noisy degradation needs an explicit rng")
        lr = lr + rng.normal(0.0, sigma, size=lr.shape)
    return Image(np.clip(lr, 0.0, 1.0), ColorSpace.RGB, profile.name)


def design_matrix(hr: np.ndarray, k_size: int, scale: int) -> np.ndarray:
    """Rows map a flipped k x k kernel to LR samples: ``down_s(hr * k) = A @ flip(k).ravel()``."""
    r = k_size // 2
    px = np.asarray(hr, dtype=np.float64)
    padded = np.pad(px, ((r, r), (r, r), (0, 0)), mode="reflect")
    win = sliding_window_view(padded, (k_size, k_size), axis=(0, 1))[::scale, ::scale]
    # win: (h, w, C, k, k)
    return win.reshape(-1, k_size * k_size)


@dataclass
class KernelEstimate:
    kernel: Kernel
    raw_weights: np.ndarray
    residual: float
    residual_history: list
    iterations: int
    converged: bool


def cgls(A: np.ndarray, b: np.ndarray, iters: int, tol: float):
    """Conjugate gradient on the normal equations (CGLS form).

    Returns (x, residual norms per iterate, iterations, converged).
    """
    x = np.zeros(A.shape[1])
    r = b.copy()
    s = A.T @ r
    p = s.copy()
    gamma = s @ s
    norm0 = math.sqrt(gamma)
    history = [float(np.linalg.norm(r))]
    if norm0 == 0.0:
        return x, history, 0, True
    for it in range(1, iters + 1):
        q = A @ p
        qq = q @ q
        if qq == 0.0:
            return x, history, it - 1, True
        alpha = gamma / qq
        x += alpha * p
        r -= alpha * q
        history.append(float(np.linalg.norm(r)))
        s = A.T @ r
        gamma_new = s @ s
        if math.sqrt(gamma_new) <= tol * norm0:
            return x, history, it, True
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    return x, history, iters, False


def estimate_kernel(hr: Image, lr: Image, k_size: int = 25, scale: int = 4,
                    iters: int = 2000, tol: float = 1e-10) -> KernelEstimate:
    """Unconstrained least-squares fit of ``k`` in ``||down_s(HR * k) - LR||^2``."""
    if k_size % 2 == 0:
        raise ValueError(f"k_size must be odd, got {k_size}")
    if hr.height != scale * lr.height or hr.width != scale * lr.width:
        raise ValueError(f"HR {hr.shape} and LR {lr.shape} inconsistent with scale {scale}")
    if hr.pixels.shape[2] != lr.pixels.shape[2]:
        raise ValueError("HR and LR channel counts differ")
    A = design_matrix(hr.pixels, k_size, scale)
    # sliding windows enumerate (y, x, c); LR ravel must use the same order
    b = lr.pixels.reshape(-1)
    x, history, n_it, converged = cgls(A, b, iters, tol)
    raw = x.reshape(k_size, k_size)[::-1, ::-1].copy()
    bnorm = float(np.linalg.norm(b)) or 1.0
    return KernelEstimate(Kernel(raw), raw, history[-1] / bnorm,
                          [h / bnorm for h in history], n_it, converged)


def kernel_distance(a: Kernel, b: Kernel) -> float:
    if a.size != b.size:
        raise ValueError(f"kernel sizes differ: {a.size} vs {b.size}")
    return float(np.linalg.norm(a.weights - b.weights))


def kernel_covariance(k: Kernel) -> np.ndarray:
    """Second central moments of the kernel weights, ordered (x, y)."""
    yy, xx = _grid(k.size)
    w = k.weights
    mx, my = (w * xx).sum(), (w * yy).sum()
    dx, dy = xx - mx, yy - my
    return np.array([[(w * dx * dx).sum(), (w * dx * dy).sum()],
                     [(w * dx * dy).sum(), (w * dy * dy).sum()]])


def save_kernel_grid(kernel, path) -> None:
    w = kernel.weights if isinstance(kernel, Kernel) else np.asarray(kernel)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, w, fmt="%.10e")


def load_kernel_grid(path) -> Kernel:
    return Kernel(np.loadtxt(path))


def synthetic_hr_image(rng: np.random.Generator, size: int = 256, n_shapes: int = 24,
                       grain: float = 0.04) -> Image:
    """Procedural scene of flat regions, edges and corners with fine texture.

    Shapes are rasterized at 2x and box-filtered down so edges are anti-aliased.
    """
    ss = 2 * size
    yy, xx = np.mgrid[0:ss, 0:ss] / ss
    c0, c1, c2 = rng.uniform(0.15, 0.85, size=(3, 3))
    base = (c0 * (1 - xx)[..., None] + c1 * xx[..., None]) * (1 - yy)[..., None] + c2 * yy[..., None]
    canvas = PILImage.fromarray(np.round(np.clip(base, 0, 1) * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(n_shapes):
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        kind = rng.integers(0, 4)
        x0, y0 = rng.integers(-ss // 8, ss, size=2)
        w, h = rng.integers(ss // 16, ss // 3, size=2)
        if kind == 0:
            draw.rectangle([int(x0), int(y0), int(x0 + w), int(y0 + h)], fill=color)
        elif kind == 1:
            draw.ellipse([int(x0), int(y0), int(x0 + w), int(y0 + h)], fill=color)
        elif kind == 2:
            pts = [(int(x0 + rng.integers(0, w)), int(y0 + rng.integers(0, h))) for _ in range(3)]
            draw.polygon(pts, fill=color)
        else:
            x1, y1 = rng.integers(0, ss, size=2)
            draw.line([int(x0), int(y0), int(x1), int(y1)], fill=color, width=int(rng.integers(2, 10)))
    px = np.asarray(canvas, dtype=np.float64) / 255.0
    # striped region for oriented high-frequency content
    mask = np.zeros((ss, ss), dtype=bool)
    sx, sy = rng.integers(0, ss // 2, size=2)
    mask[sy:sy + ss // 3, sx:sx + ss // 3] = True
    freq, th = rng.uniform(0.04, 0.12), rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(th) * xx * ss + np.sin(th) * yy * ss))
    px[mask] = 0.6 * px[mask] + 0.4 * stripes[mask][:, None]
    px = px.reshape(size, 2, size, 2, 3).mean(axis=(1, 3))
    noise = ndimage.gaussian_filter(rng.normal(0, 1, size=(size, size, 3)), sigma=(0.8, 0.8, 0))
    px = np.clip(px + grain * noise, 0.0, 1.0)
    return Image(px, ColorSpace.RGB)
