"""Experiment configuration files (YAML or JSON) with an ablation-matrix shorthand."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .degradation import CameraProfile, make_camera_profile
from .trainer import Toggles, TrainConfig

# each named row switches off exactly one component of the full method
ABLATION_ROWS: Dict[str, Toggles] = {
    "full": Toggles(),
    "no_inter_aa": Toggles(inter_aa=False),
    "no_intra_aa": Toggles(intra_aa=False),
    "no_dia": Toggles(dia=False),
}


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CameraSpec(_Strict):
    name: str
    kind: Literal["iso_gauss", "aniso_gauss", "motion", "delta"]
    params: Dict[str, float] = {}
    noise_sigma: float = Field(0.0, ge=0)
    kernel_size: int = Field(25, ge=1)

    def profile(self, scale: int) -> CameraProfile:
        return make_camera_profile(self.name, self.kind, dict(self.params), scale=scale,
                                   noise_sigma=self.noise_sigma, size=self.kernel_size)


class DataConfig(_Strict):
    root: str = "lab"
    source: str = "src"
    target: str = "tgt"
    corpus: Optional[str] = None  # directory of HR PNGs; synthetic images when absent
    n_synthetic: int = Field(25, ge=2)
    hr_size: int = Field(256, ge=32)
    corpus_seed: int = 123
    train_fraction: float = Field(0.8, gt=0, lt=1)
    cameras: List[CameraSpec] = [
        CameraSpec(name="src", kind="iso_gauss", params={"sigma": 0.8}),
        CameraSpec(name="tgt", kind="aniso_gauss", params={"sigma_x": 3.0, "sigma_y": 1.0, "angle": 30.0}),
    ]

    @field_validator("cameras")
    @classmethod
    def _unique(cls, v):
        names = [c.name for c in v]
        if len(set(names)) != len(names):
            raise ValueError(f"camera names must be unique, got {names}")
        return v


class MetricConfig(_Strict):
    border: int = Field(4, ge=0)


class ExperimentConfig(_Strict):
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    metrics: MetricConfig = MetricConfig()
    out_dir: str = "runs"
    ablation: Union[Literal["all"], List[str], None] = None

    @field_validator("ablation")
    @classmethod
    def _known_rows(cls, v):
        if isinstance(v, list):
            bad = [r for r in v if r not in ABLATION_ROWS]
            if bad:
                raise ValueError(f"unknown ablation rows {bad}; choose from {sorted(ABLATION_ROWS)}")
        return v

    def profiles(self) -> List[CameraProfile]:
        return [c.profile(self.train.scale) for c in self.data.cameras]

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def expand(self) -> Dict[str, TrainConfig]:
        """Named training configs: one per ablation row, or just the configured toggles."""
        if self.ablation is None:
            return {"run": self.train}
        rows = list(ABLATION_ROWS) if self.ablation == "all" else self.ablation
        return {r: self.train.model_copy(update={"toggles": ABLATION_ROWS[r]}) for r in rows}

    def with_overrides(self, seed: Optional[int] = None, preset: Optional[str] = None,
                       out_dir: Optional[str] = None) -> "ExperimentConfig":
        train = self.train
        if seed is not None:
            train = train.model_copy(update={"seed": seed})
        if preset is not None:
            train = train.model_copy(update={"preset": preset})
        cfg = self.model_copy(update={"train": train, **({"out_dir": out_dir} if out_dir else {})})
        cfg.train.arch()
        return cfg


def _format_error(err: ValidationError, source: str) -> str:
    lines = [f"invalid config {source}:"]
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {path}: {e['msg']}")
    return "\n".join(lines)


def parse_config(raw: dict, source: str = "<dict>") -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"invalid config {source}: top level must be a mapping")
    try:
        cfg = ExperimentConfig.model_validate(raw)
        cfg.train.arch()
    except ValidationError as e:
        raise ConfigError(_format_error(e, source)) from None
    except ValueError as e:
        raise ConfigError(f"invalid config {source}: {e}") from None
    return cfg


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid config {path}: {e}") from None
    return parse_config(raw, str(path))


def dump_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True))
