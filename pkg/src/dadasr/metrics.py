"""PSNR on luma, RGB SSIM, difference maps and cross-device evaluation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .data import Dataset, Image, Y_WEIGHTS

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

ArrayLike = Union[Image, np.ndarray]


def _pixels(img: ArrayLike) -> np.ndarray:
    px = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    if px.ndim == 2:
        px = px[..., None]
    return px.astype(np.float64, copy=False)


def _pair(sr, hr):
    a, b = _pixels(sr), _pixels(hr)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _crop(px: np.ndarray, border: int) -> np.ndarray:
    if border <= 0:
        return px
    if px.shape[0] <= 2 * border or px.shape[1] <= 2 * border:
        raise ValueError(f"image {px.shape[:2]} too small for border crop {border}")
    return px[border:-border, border:-border]


def psnr_y(sr: ArrayLike, hr: ArrayLike, border: int = 4) -> float:
    a, b = _pair(sr, hr)
    if a.shape[2] == 3:
        a, b = a @ Y_WEIGHTS, b @ Y_WEIGHTS
    else:
        a, b = a[..., 0], b[..., 0]
    diff = _crop(a, border) - _crop(b, border)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = ndimage.correlate1d(x, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    g = gaussian_window_1d()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))


def ssim(sr: ArrayLike, hr: ArrayLike, border: int = 4) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) averaged over channels."""
    a, b = _pair(sr, hr)
    a, b = _crop(a, border), _crop(b, border)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]))


@dataclass
class DifferenceMap:
    raw: np.ndarray
    display: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.raw.mean())


def difference_map(sr: ArrayLike, hr: ArrayLike) -> DifferenceMap:
    a, b = _pair(sr, hr)
    raw = np.abs(b - a)
    peak = raw.max()
    return DifferenceMap(raw, raw / peak if peak > 0 else np.zeros_like(raw))


@dataclass
class EvalReport:
    psnr_y: float
    ssim: float
    n_images: int
    domain: str
    model_id: str
    perceptual: Optional[float] = None
    border_crop: int = 4
    per_image: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("an evaluation needs at least one image")

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "psnr_y", "ssim"])
            for row in self.per_image:
                w.writerow([row["id"], f"{row['psnr_y']:.6f}", f"{row['ssim']:.6f}"])
            w.writerow(["mean", f"{self.psnr_y:.6f}", f"{self.ssim:.6f}"])

    def write_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


Predictor = Callable[[np.ndarray], np.ndarray]


def evaluate(predict: Predictor, dataset: Dataset, model_id: str = "model", border: int = 4,
             perceptual: Optional[Callable[[np.ndarray, np.ndarray], float]] = None) -> EvalReport:
    """Super-resolve every LR in a paired dataset and average PSNR-Y / SSIM (sorted by id)."""
    rows, percs = [], []
    for sample in sorted(dataset, key=lambda s: s.id):
        sr = np.clip(predict(sample.lr.pixels), 0.0, 1.0)
        hr = sample.hr.pixels
        rows.append({"id": sample.id, "psnr_y": psnr_y(sr, hr, border), "ssim": ssim(sr, hr, border)})
        if perceptual is not None:
            percs.append(float(perceptual(sr, hr)))
    return EvalReport(
        psnr_y=float(np.mean([r["psnr_y"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        n_images=len(rows), domain=str(dataset.domain), model_id=model_id,
        perceptual=float(np.mean(percs)) if percs else None, border_crop=border, per_image=rows)


@dataclass
class CrossDeviceMatrix:
    rows: List[str]
    cols: List[str]
    cells: Dict[str, Dict[str, EvalReport]]

    def values(self, metric: str = "psnr_y") -> np.ndarray:
        return np.array([[getattr(self.cells[r][c], metric) for c in self.cols] for r in self.rows])

    def write_csv(self, path, metric: str = "psnr_y") -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model \\ test"] + self.cols)
            for r, vals in zip(self.rows, self.values(metric)):
                w.writerow([r] + [f"{v:.6f}" for v in vals])

    def write_json(self, path) -> None:
        out = {"rows": self.rows, "cols": self.cols,
               "cells": {r: {c: self.cells[r][c].to_dict() for c in self.cols} for r in self.rows}}
        Path(path).write_text(json.dumps(out, indent=2, sort_keys=True))


def cross_device_matrix(models: Mapping[str, Predictor], test_sets: Sequence[Dataset],
                        border: int = 4) -> CrossDeviceMatrix:
    rows = list(models)
    cols = [str(ts.domain) for ts in test_sets]
    if len(set(cols)) != len(cols):
        raise ValueError(f"test set domains must be unique, got {cols}")
    cells = {r: {str(ts.domain): evaluate(models[r], ts, r, border) for ts in test_sets} for r in rows}
    return CrossDeviceMatrix(rows, cols, cells)
