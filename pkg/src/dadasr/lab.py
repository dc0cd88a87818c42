"""Synthetic multi-camera lab: split an HR corpus, degrade it per camera, write domain trees.

Layout produced by :func:`prepare_lab`::

    <root>/cameras.json
    <root>/<camera>/train/LR, <camera>/train/HR      (HR omitted for target cameras)
    <root>/<camera>/test/LR,  <camera>/test/HR
    <root>/_oracle/<camera>/train/LR, HR              (target cameras only)

The oracle tree exists so that Target-Only baselines and kernel-gap checks can be
computed without the target train HR ever appearing in the adaptation listing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from .data import DatasetError, Image, read_png, write_png
from .degradation import CameraProfile, degrade, synthetic_hr_image

ORACLE_DIR = "_oracle"


@dataclass
class LabLayout:
    root: Path
    cameras: Dict[str, CameraProfile]
    targets: List[str]
    train_ids: List[str]
    test_ids: List[str]

    def domain(self, camera: str) -> Path:
        return self.root / camera

    def oracle(self, camera: str) -> Path:
        """Paired train tree for ``camera``: the public tree for sources, the hidden one for targets."""
        return self.root / ORACLE_DIR / camera if camera in self.targets else self.root / camera


def synthetic_corpus(n: int, size: int = 256, seed: int = 0) -> List[Image]:
    rng = np.random.default_rng(seed)
    return [synthetic_hr_image(rng, size) for _ in range(n)]


def read_corpus(path: Union[str, Path]) -> List[Image]:
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise DatasetError(f"HR corpus {path} contains no PNG images")
    return [read_png(p) for p in files]


def split_ids(n: int, train_fraction: float, seed: int):
    """Seeded permutation of ``0..n-1`` cut at ``round(n * train_fraction)``; both halves sorted."""
    if n < 2:
        raise DatasetError(f"need at least 2 HR images to split, got {n}")
    perm = np.random.default_rng([seed, 7]).permutation(n)
    cut = int(round(n * train_fraction))
    cut = min(max(cut, 1), n - 1)
    return sorted(perm[:cut].tolist()), sorted(perm[cut:].tolist())


def _crop_to_scale(img: Image, scale: int) -> Image:
    h, w = img.height - img.height % scale, img.width - img.width % scale
    return Image(img.pixels[:h, :w])


def prepare_lab(root: Union[str, Path], corpus: Sequence[Image], cameras: Sequence[CameraProfile],
                targets: Sequence[str] = (), train_fraction: float = 0.8, seed: int = 0) -> LabLayout:
    """Write one paired domain tree per camera; the same image split is shared by all cameras."""
    if len(corpus) == 0:
        raise DatasetError("HR corpus is empty")
    if len(cameras) < 1:
        raise ValueError("at least one camera profile is required")
    names = [c.name for c in cameras]
    if len(set(names)) != len(names) or ORACLE_DIR in names:
        raise ValueError(f"camera names must be unique and not {ORACLE_DIR!r}: {names}")
    unknown = set(targets) - set(names)
    if unknown:
        raise ValueError(f"target cameras {sorted(unknown)} are not configured")

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    train, test = split_ids(len(corpus), train_fraction, seed)
    width = max(3, len(str(len(corpus))))
    ids = [f"{i:0{width}d}" for i in range(len(corpus))]
    for ci, cam in enumerate(cameras):
        # quantise HR first so that LR is the degradation of exactly the stored HR
        for split, members in (("train", train), ("test", test)):
            hidden = split == "train" and cam.name in targets
            base = (root / ORACLE_DIR / cam.name if hidden else root / cam.name) / split
            for i in members:
                hr = _quantise(_crop_to_scale(corpus[i], cam.scale))
                rng = np.random.default_rng([seed, ci, i])
                lr = degrade(hr, cam, rng)
                write_png(hr, base / "HR" / f"{ids[i]}.png")
                write_png(lr, base / "LR" / f"{ids[i]}.png")
                if hidden:
                    write_png(lr, root / cam.name / split / "LR" / f"{ids[i]}.png")
    meta = {"cameras": [c.to_dict() for c in cameras], "targets": list(targets), "seed": seed,
            "train_fraction": train_fraction, "train_ids": [ids[i] for i in train],
            "test_ids": [ids[i] for i in test]}
    (root / "cameras.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return LabLayout(root, {c.name: c for c in cameras}, list(targets),
                     [ids[i] for i in train], [ids[i] for i in test])


def _quantise(img: Image) -> Image:
    return Image(np.round(np.clip(img.pixels, 0, 1) * 255.0) / 255.0)


def load_lab(root: Union[str, Path]) -> LabLayout:
    root = Path(root)
    meta = json.loads((root / "cameras.json").read_text())
    cams = {d["name"]: CameraProfile.from_dict(d) for d in meta["cameras"]}
    return LabLayout(root, cams, meta["targets"], meta["train_ids"], meta["test_ids"])
