"""Static figures: loss curves, difference maps, kernel heatmaps and cross-device matrices."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .degradation import Kernel  # noqa: E402
from .metrics import CrossDeviceMatrix, difference_map  # noqa: E402

PathLike = Union[str, Path]


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def read_log(path: PathLike) -> list:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


def plot_loss_curves(records: Sequence[dict], path: PathLike) -> Path:
    keys = sorted({k for r in records for k in r} - {"iteration", "elapsed"})
    fig, ax = plt.subplots(figsize=(7, 4))
    its = [r["iteration"] for r in records]
    for k in keys:
        ax.plot(its, [r.get(k, np.nan) for r in records], label=k, lw=1)
    ax.set_xlabel("iteration")
    ax.set_yscale("log")
    ax.legend(fontsize=6, ncol=2)
    return _save(fig, path)


def plot_difference_maps(hr: np.ndarray, outputs: Mapping[str, np.ndarray], path: PathLike) -> Path:
    """HR on the left, then ``|hr - sr|`` for each named output on a shared colour scale."""
    maps = {k: difference_map(v, hr).raw.mean(axis=2) for k, v in outputs.items()}
    vmax = max(float(m.max()) for m in maps.values()) or 1.0
    fig, axes = plt.subplots(1, len(maps) + 1, figsize=(3 * (len(maps) + 1), 3))
    axes[0].imshow(np.clip(hr, 0, 1))
    axes[0].set_title("HR")
    for ax, (k, m) in zip(axes[1:], maps.items()):
        ax.imshow(m, cmap="inferno", vmin=0, vmax=vmax)
        ax.set_title(f"{k}\nmean {m.mean():.4f}", fontsize=8)
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)


def plot_kernels(kernels: Mapping[str, Kernel], path: PathLike) -> Path:
    fig, axes = plt.subplots(1, len(kernels), figsize=(2.5 * len(kernels), 2.8), squeeze=False)
    for ax, (k, ker) in zip(axes[0], kernels.items()):
        ax.imshow(ker.weights, cmap="viridis")
        ax.set_title(k, fontsize=8)
        ax.axis("off")
    return _save(fig, path)


def plot_cross_device(matrix: CrossDeviceMatrix, path: PathLike, metric: str = "psnr_y") -> Path:
    vals = matrix.values(metric)
    fig, ax = plt.subplots(figsize=(1.6 * len(matrix.cols) + 2, 1.2 * len(matrix.rows) + 1.5))
    im = ax.imshow(vals, cmap="magma")
    ax.set_xticks(range(len(matrix.cols)), matrix.cols)
    ax.set_yticks(range(len(matrix.rows)), matrix.rows)
    ax.set_xlabel("test domain")
    ax.set_ylabel("model")
    for i in range(vals.shape[0]):
        for j in range(vals.shape[1]):
            ax.text(j, i, f"{vals[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)


def plot_all(out_dir: PathLike, records: Sequence[dict], hr: np.ndarray, outputs: Dict[str, np.ndarray],
             kernels: Mapping[str, Kernel], matrix: CrossDeviceMatrix) -> Dict[str, Path]:
    out = Path(out_dir)
    return {
        "loss_curves": plot_loss_curves(records, out / "loss_curves.png"),
        "difference_maps": plot_difference_maps(hr, outputs, out / "difference_maps.png"),
        "kernels": plot_kernels(kernels, out / "kernels.png"),
        "cross_device": plot_cross_device(matrix, out / "cross_device.png"),
    }
