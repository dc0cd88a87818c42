"""Image containers, dataset ingestion and patch sampling.

Directory layout understood by :func:`load_dataset`::

    <root>/<domain>/{train,test}/{LR,HR}/<id>.png

Unpaired domains omit ``HR/``. All pixels live in [0, 1] as float arrays;
conversion to/from 8 bit happens only in :func:`read_png` / :func:`write_png`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image as PILImage

# BT.601 full-range luma weights
Y_WEIGHTS = np.array([0.299, 0.587, 0.114])


class DatasetError(ValueError):
    pass


class ColorSpace(str, enum.Enum):
    RGB = "RGB"
    Y = "Y"


@dataclass(frozen=True)
class DomainTag:
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("domain tag must be non-empty")

    def __str__(self):
        return self.name


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x C float raster in [0, 1]."""

    pixels: np.ndarray
    colorspace: ColorSpace = ColorSpace.RGB
    device_tag: Optional[str] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3:
            raise ValueError(f"expected H x W x C pixels, got shape {px.shape}")
        expected = 3 if self.colorspace == ColorSpace.RGB else 1
        if px.shape[2] != expected:
            raise ValueError(
                f"{self.colorspace.value} image needs {expected} channels, got {px.shape[2]}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    def clamped(self) -> "Image":
        return replace(self, pixels=np.clip(self.pixels, 0.0, 1.0))


@dataclass(frozen=True)
class PairedSample:
    lr: Image
    hr: Image
    id: str

    @property
    def scale(self) -> int:
        return self.hr.height // self.lr.height

    def __post_init__(self):
        check_pair_shapes(self.lr.shape, self.hr.shape, self.id)


@dataclass(frozen=True)
class UnpairedSample:
    lr: Image
    id: str


def check_pair_shapes(lr_shape, hr_shape, name="", scale: Optional[int] = None):
    lh, lw = lr_shape[:2]
    hh, hw = hr_shape[:2]
    s = scale if scale is not None else (hh // lh if lh else 0)
    if s < 1 or hh != s * lh or hw != s * lw:
        raise DatasetError(
            f"{name}: HR shape {tuple(hr_shape)} is not an integer multiple of LR shape {tuple(lr_shape)}"
            + (f" at scale {scale}" if scale is not None else ""))


@dataclass
class Dataset:
    """Immutable-after-load collection of samples, sorted by id."""

    samples: tuple
    domain: DomainTag
    role: str
    scale: Optional[int] = None
    root: Optional[Path] = field(default=None, repr=False)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self):
        return [s.id for s in self.samples]


def read_png(path: Union[str, Path], device_tag: Optional[str] = None) -> Image:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr, ColorSpace.RGB, device_tag)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(img: Union[Image, np.ndarray], path: Union[str, Path]) -> None:
    px = img.pixels if isinstance(img, Image) else np.asarray(img)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(px)).save(path, format="PNG", optimize=False)


def load_dataset(root: Union[str, Path], role: str, split: Optional[str] = None,
                 scale: Optional[int] = None) -> Dataset:
    """Load a paired or unpaired dataset.

    ``root`` may be a split directory (containing ``LR/``), a domain directory
    (``split`` selects ``train``/``test``), or a directory holding ``LR/`` directly.
    """
    if role not in ("paired", "unpaired"):
        raise ValueError(f"role must be 'paired' or 'unpaired', got {role!r}")
    root = Path(root)
    base = root / split if split else root
    lr_dir, hr_dir = base / "LR", base / "HR"
    if not lr_dir.is_dir():
        raise DatasetError(f"missing LR directory: {lr_dir}")
    domain = DomainTag(root.name if split else (base.parent.name if base.name in ("train", "test") else base.name))
    tag = domain.name

    lr_files = sorted(lr_dir.glob("*.png"), key=lambda p: p.stem)
    if role == "unpaired":
        samples = tuple(UnpairedSample(read_png(p, tag), p.stem) for p in lr_files)
        return Dataset(samples, domain, role, scale, root)

    if not hr_dir.is_dir():
        raise DatasetError(f"paired dataset needs an HR directory: {hr_dir}")
    hr_files = {p.stem: p for p in hr_dir.glob("*.png")}
    lr_stems = {p.stem for p in lr_files}
    for p in lr_files:
        if p.stem not in hr_files:
            raise DatasetError(f"no HR counterpart for LR file {p}")
    for stem, p in sorted(hr_files.items()):
        if stem not in lr_stems:
            raise DatasetError(f"no LR counterpart for HR file {p}")

    samples = []
    for p in lr_files:
        lr = read_png(p, tag)
        hr = read_png(hr_files[p.stem], tag)
        check_pair_shapes(lr.shape, hr.shape, p.stem, scale)
        samples.append(PairedSample(lr, hr, p.stem))
    if scale is None and samples:
        scale = samples[0].scale
        for s in samples:
            check_pair_shapes(s.lr.shape, s.hr.shape, s.id, scale)
    return Dataset(tuple(samples), domain, role, scale, root)


def extract_patch(sample: Union[PairedSample, UnpairedSample], lr_size: int,
                  rng: np.random.Generator):
    lr = sample.lr.pixels
    h, w = lr.shape[:2]
    if h < lr_size or w < lr_size:
        raise ValueError(f"{sample.id}: LR {h}x{w} smaller than patch size {lr_size}")
    top = int(rng.integers(0, h - lr_size + 1))
    left = int(rng.integers(0, w - lr_size + 1))
    lr_patch = replace(sample.lr, pixels=lr[top:top + lr_size, left:left + lr_size])
    if isinstance(sample, UnpairedSample):
        return UnpairedSample(lr_patch, sample.id)
    s = sample.scale
    hr = sample.hr.pixels
    hr_patch = replace(sample.hr, pixels=hr[s * top:s * (top + lr_size), s * left:s * (left + lr_size)])
    return PairedSample(lr_patch, hr_patch, sample.id)


def dihedral(pixels: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` in 0..7 of the dihedral group: k % 4 quarter turns, then a flip if k >= 4."""
    out = np.rot90(pixels, k % 4, axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def inverse_dihedral(pixels: np.ndarray, k: int) -> np.ndarray:
    out = pixels[:, ::-1] if k >= 4 else pixels
    return np.ascontiguousarray(np.rot90(out, -(k % 4), axes=(0, 1)))


def augment(patch, rng: np.random.Generator, k: Optional[int] = None):
    """Apply one random dihedral-8 transform jointly to LR and HR.

    Pass ``k`` to force a specific group element (0 is the identity).
    """
    if k is None:
        k = int(rng.integers(0, 8))
    lr = replace(patch.lr, pixels=dihedral(patch.lr.pixels, k))
    if isinstance(patch, UnpairedSample):
        return UnpairedSample(lr, patch.id)
    return PairedSample(lr, replace(patch.hr, pixels=dihedral(patch.hr.pixels, k)), patch.id)


def rgb_to_y(img: Image) -> Image:
    if img.colorspace != ColorSpace.RGB:
        raise ValueError(f"rgb_to_y needs an RGB image, got {img.colorspace.value}")
    y = img.pixels @ Y_WEIGHTS
    return Image(np.clip(y, 0.0, 1.0)[..., None], ColorSpace.Y, img.device_tag)


def rgb_to_y_array(pixels: np.ndarray) -> np.ndarray:
    """Unclamped luma of an H x W x 3 array (linear)."""
    return np.asarray(pixels, dtype=np.float64) @ Y_WEIGHTS


def stack_lr(samples: Sequence) -> np.ndarray:
    return np.stack([s.lr.pixels for s in samples])


def stack_hr(samples: Sequence[PairedSample]) -> np.ndarray:
    return np.stack([s.hr.pixels for s in samples])
