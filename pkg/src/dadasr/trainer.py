"""Source pretraining, supervised baselines and the dual-branch adaptation loop."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .data import Dataset, PairedSample, UnpairedSample, augment, extract_patch, load_dataset
from .losses import (LossReport, LossWeights, NonFiniteLossError, adv_d_loss, adv_g_loss, check_finite,
                     gw_loss, l1_loss, make_extractor, perceptual_loss, total_objective)
from .metrics import EvalReport, evaluate
from .networks import PRESETS, ArchConfig, ModelState, StructureError, Upsampler

log = logging.getLogger(__name__)

Y_COEFFS = (0.299, 0.587, 0.114)
EDGE_THRESHOLD = 0.04
CORNER_THRESHOLD = 2e-6
CHECKPOINT_FORMAT = "dadasr-checkpoint/1"


class Toggles(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    inter_aa: bool = True
    intra_aa: bool = True
    dia: bool = True


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    scale: int = Field(4, ge=1)
    lr_patch: int = Field(24, ge=4)
    batch_pairs: int = Field(4, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    max_iters: int = Field(500, ge=1)
    pretrain_iters: int = Field(1000, ge=1)
    pretrain_learning_rate: float = Field(1e-3, gt=0)
    pretrain_schedule: Literal["constant", "cosine"] = "cosine"
    mask_weight: float = Field(0.1, ge=0)
    # dihedral flips move the upper-left sampling grid and mirror anisotropic kernels
    augment: bool = False
    weights: LossWeights = LossWeights()
    toggles: Toggles = Toggles()
    seed: int = 0
    eval_every: int = Field(250, ge=1)
    d_steps: int = Field(1, ge=1)
    preset: str = "desk"
    extractor: str = "random"

    def arch(self) -> ArchConfig:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        return PRESETS[self.preset]

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ConfigMismatchError(ValueError):
    pass


# --- tensor helpers -----------------------------------------------------------------------

def to_tensor(batch: np.ndarray) -> torch.Tensor:
    """N x H x W x C float array -> N x C x H x W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).float()


def rgb_to_y_tensor(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    return Y_COEFFS[0] * r + Y_COEFFS[1] * g + Y_COEFFS[2] * b


def predictor(u: Upsampler):
    """Wrap an upsampler as H x W x 3 array -> clamped SR array (evaluation mode)."""

    def predict(lr: np.ndarray) -> np.ndarray:
        was_training = u.training
        u.eval()
        with torch.no_grad():
            sr = u.sr(to_tensor(lr[None]))
        u.train(was_training)
        return sr[0].clamp(0, 1).permute(1, 2, 0).double().numpy()

    return predict


def component_labels(hr: torch.Tensor) -> torch.Tensor:
    """Classical flat(0) / edge(1) / corner(2) labels from Sobel magnitude and Harris response."""
    y = rgb_to_y_tensor(hr)
    sx = torch.tensor([[-1.0, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=y.dtype).view(1, 1, 3, 3) / 8
    yp = F.pad(y, (1, 1, 1, 1), mode="replicate")
    gx, gy = F.conv2d(yp, sx), F.conv2d(yp, sx.transpose(2, 3))
    mag = torch.sqrt(gx * gx + gy * gy)
    ax = torch.arange(-3, 4, dtype=y.dtype)
    g = torch.exp(-ax ** 2 / 2)
    g = g / g.sum()
    win = (g[:, None] * g[None]).view(1, 1, 7, 7)

    def smooth(t):
        return F.conv2d(F.pad(t, (3, 3, 3, 3), mode="replicate"), win)

    a, b, c = smooth(gx * gx), smooth(gy * gy), smooth(gx * gy)
    harris = a * b - c * c - 0.05 * (a + b) ** 2
    labels = torch.zeros_like(y, dtype=torch.long)
    labels[mag > EDGE_THRESHOLD] = 1
    labels[harris > CORNER_THRESHOLD] = 2
    return labels[:, 0]


def parameter_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --- batch sampling -----------------------------------------------------------------------

def sample_patches(dataset: Dataset, n: int, lr_size: int, rng: np.random.Generator, do_augment=False):
    idx = rng.integers(0, len(dataset), size=n)
    out = []
    for i in idx:
        p = extract_patch(dataset[int(i)], lr_size, rng)
        out.append(augment(p, rng) if do_augment else p)
    lr = to_tensor(np.stack([p.lr.pixels for p in out]))
    if isinstance(out[0], PairedSample):
        return lr, to_tensor(np.stack([p.hr.pixels for p in out]))
    return lr


# --- supervised training ------------------------------------------------------------------

@dataclass
class SupervisedRun:
    model: Upsampler
    history: List[dict] = field(default_factory=list)
    snapshots: Dict[int, Upsampler] = field(default_factory=dict)


def train_supervised(config: TrainConfig, dataset: Dataset, iters: int, init: Optional[Upsampler] = None,
                     seed: Optional[int] = None, snapshot_at: Sequence[int] = (),
                     mask_supervision: bool = True) -> SupervisedRun:
    """GW-loss training on paired data, with classical component labels supervising the masks."""
    seed = config.seed if seed is None else seed
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 1])
    model = copy.deepcopy(init) if init is not None else Upsampler(config.arch())
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.pretrain_learning_rate, betas=config.adam_betas)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, iters)
             if config.pretrain_schedule == "cosine" else None)
    run = SupervisedRun(model)
    for it in range(1, iters + 1):
        lr, hr = sample_patches(dataset, config.batch_pairs, config.lr_patch, rng, config.augment)
        logits = model.mask_gen.logits(lr)
        sr, _, _ = model(lr, masks=torch.softmax(logits, dim=1))
        content = gw_loss(sr, hr)
        loss = content
        terms = {"gw": content}
        if mask_supervision and config.mask_weight > 0:
            mask_ce = F.cross_entropy(logits, component_labels(hr))
            loss = loss + config.mask_weight * mask_ce
            terms["mask_ce"] = mask_ce
        check_finite(terms)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        run.history.append({"iteration": it, **{k: float(v.detach()) for k, v in terms.items()}})
        if it in snapshot_at:
            run.snapshots[it] = copy.deepcopy(model)
    return run


def pretrain_source(config: TrainConfig, source: Dataset) -> Upsampler:
    """Train the source model that provides masks and perceptual targets, then freeze it."""
    model = train_supervised(config, source, config.pretrain_iters).model
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


# --- dual adversarial adaptation ----------------------------------------------------------

@dataclass
class PseudoLabel:
    content_target: torch.Tensor
    perceptual_target: torch.Tensor


def make_pseudo_labels(model: ModelState, x_t: torch.Tensor,
                       sr_source_branch: Optional[torch.Tensor] = None) -> PseudoLabel:
    """Content target is the live source-branch SR (detached); perceptual target comes from frozen u_s0."""
    if sr_source_branch is None:
        sr_source_branch = model.u_s.sr(x_t)
    with torch.no_grad():
        ref = model.u_s0.sr(x_t)
    return PseudoLabel(sr_source_branch.detach(), ref)


def _named(term: str, fn, *args):
    """Run an adversarial loss, attributing non-finite discriminator logits to ``term``."""
    try:
        return fn(*args)
    except NonFiniteLossError:
        raise NonFiniteLossError(term) from None


def _set_requires_grad(params, flag: bool):
    for p in params:
        p.requires_grad_(flag)


class DADATrainer:
    """Owns the model state, both optimizers and the sampling rng of one adaptation run."""

    def __init__(self, config: TrainConfig, pretrained: Upsampler, source: Dataset, target: Dataset,
                 extractor=None):
        self.config = config
        torch.manual_seed(config.seed)
        self.model = ModelState(pretrained, config.arch(), dia=config.toggles.dia)
        self.source, self.target = source, target
        self.extractor = extractor if extractor is not None else make_extractor(config.extractor)
        self.g_params = self.model.generator_parameters()
        self.d_params = self.model.discriminator_parameters()
        self.g_opt = torch.optim.Adam(self.g_params, lr=config.learning_rate, betas=config.adam_betas)
        self.d_opt = torch.optim.Adam(self.d_params, lr=config.learning_rate, betas=config.adam_betas)
        self.rng = np.random.default_rng([config.seed, 2])
        self.iteration = 0

    @property
    def adversarial(self) -> bool:
        t = self.config.toggles
        return t.inter_aa or t.intra_aa

    def sample_batch(self):
        c = self.config
        x_s, y_s = sample_patches(self.source, c.batch_pairs, c.lr_patch, self.rng, c.augment)
        x_t = sample_patches(self.target, c.batch_pairs, c.lr_patch, self.rng, c.augment)
        return x_s, y_s, x_t

    def forward(self, x_s, y_s, x_t):
        """Four SR paths, four cycle reconstructions and every generator-side loss term."""
        m, t = self.model, self.config.toggles
        n = x_s.shape[0]
        inputs = torch.cat([x_s, x_t])
        masks = m.u_s.mask_gen(inputs) if self.model.dia else None
        sr_S = m.u_s(inputs, masks=masks)[0]
        sr_T = m.u_t(inputs, masks=masks)[0]
        out = {"Ss": sr_S[:n], "St": sr_S[n:], "Ts": sr_T[:n], "Tt": sr_T[n:]}
        rec = 0.5 * (l1_loss(m.d_s(sr_S), inputs) + l1_loss(m.d_t(sr_T), inputs))
        label = make_pseudo_labels(m, x_t, out["St"])
        terms = {
            "con_s": gw_loss(out["Ss"], y_s),
            "con_t": gw_loss(out["Tt"], label.content_target),
            "rec": rec,
            "vgg": perceptual_loss(out["Tt"], label.perceptual_target, self.extractor),
        }
        check_finite(terms)
        d = m.discs
        if t.inter_aa:
            terms["inter_s_g"] = _named("inter_s_g", adv_g_loss, d["inter_s"], rgb_to_y_tensor(out["St"]))
            terms["inter_t_g"] = _named("inter_t_g", adv_g_loss, d["inter_t"], rgb_to_y_tensor(out["Ts"]))
        if t.intra_aa:
            terms["intra_s_g"] = _named("intra_s_g", adv_g_loss, d["intra_s"], out["Ts"])
            terms["intra_t_g"] = _named("intra_t_g", adv_g_loss, d["intra_t"], out["St"])
        return out, terms

    def discriminator_terms(self, out) -> Dict[str, torch.Tensor]:
        d, t = self.model.discs, self.config.toggles
        terms = {}
        if t.inter_aa:
            terms["inter_s_d"] = _named("inter_s_d", adv_d_loss, d["inter_s"], rgb_to_y_tensor(out["Ss"]),
                                        rgb_to_y_tensor(out["St"]))
            terms["inter_t_d"] = _named("inter_t_d", adv_d_loss, d["inter_t"], rgb_to_y_tensor(out["Tt"]),
                                        rgb_to_y_tensor(out["Ts"]))
        if t.intra_aa:
            terms["intra_s_d"] = _named("intra_s_d", adv_d_loss, d["intra_s"], out["Ss"], out["Ts"])
            terms["intra_t_d"] = _named("intra_t_d", adv_d_loss, d["intra_t"], out["Tt"], out["St"])
        return terms

    def step(self, batch=None) -> LossReport:
        """One iteration: generator update, then ``d_steps`` discriminator updates."""
        x_s, y_s, x_t = batch if batch is not None else self.sample_batch()
        _set_requires_grad(self.d_params, False)
        out, terms = self.forward(x_s, y_s, x_t)
        total = total_objective(terms, self.config.weights)
        self.g_opt.zero_grad(set_to_none=True)
        total.backward()
        self.g_opt.step()
        _set_requires_grad(self.d_params, True)

        values = {k: float(v.detach()) for k, v in terms.items()}
        values["total"] = float(total.detach())
        if self.adversarial:
            out = {k: v.detach() for k, v in out.items()}
            for _ in range(self.config.d_steps):
                d_terms = self.discriminator_terms(out)
                check_finite(d_terms)
                d_total = sum(d_terms.values())
                self.d_opt.zero_grad(set_to_none=True)
                d_total.backward()
                self.d_opt.step()
            values.update({k: float(v.detach()) for k, v in d_terms.items()})
        self.iteration += 1
        return LossReport(values)

    # --- checkpoints ---

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config_hash": self.config.config_hash(),
            "iteration": self.iteration,
            "networks": self.model.state_dict(),
            "g_opt": self.g_opt.state_dict(),
            "d_opt": self.d_opt.state_dict(),
            "rng": self.rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("format") != CHECKPOINT_FORMAT:
            raise StructureError(f"unrecognised checkpoint format {state.get('format')!r}")
        if state["config_hash"] != self.config.config_hash():
            raise ConfigMismatchError(
                f"checkpoint config hash {state['config_hash']} != current {self.config.config_hash()}")
        try:
            self.model.load_state_dict(state["networks"])
        except RuntimeError as e:
            raise StructureError(str(e)) from e
        self.g_opt.load_state_dict(state["g_opt"])
        self.d_opt.load_state_dict(state["d_opt"])
        self.rng.bit_generator.state = state["rng"]
        self.iteration = int(state["iteration"])

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    def load_checkpoint(self, path) -> None:
        self.load_state_dict(torch.load(path, map_location="cpu", weights_only=False))


def dada_step(trainer: DADATrainer, batch=None) -> LossReport:
    return trainer.step(batch)


# --- end-to-end experiment ----------------------------------------------------------------

@dataclass
class ExperimentResult:
    trainer: DADATrainer
    log: List[dict]
    report: EvalReport

    @property
    def model(self) -> ModelState:
        return self.trainer.model


def save_upsampler(u: Upsampler, path, config: TrainConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT + "+upsampler", "arch": u.cfg.to_dict(),
                "config_hash": config.config_hash(), "state": u.state_dict()}, path)
    return path


def load_upsampler(path) -> Upsampler:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format") != CHECKPOINT_FORMAT + "+upsampler":
        raise StructureError(f"{path} is not an upsampler checkpoint")
    u = Upsampler(ArchConfig(**state["arch"]))
    try:
        u.load_state_dict(state["state"])
    except RuntimeError as e:
        raise StructureError(str(e)) from e
    for p in u.parameters():
        p.requires_grad_(False)
    return u.eval()


def latest_checkpoint(out_dir) -> Optional[Path]:
    ckpts = sorted(Path(out_dir, "checkpoints").glob("iter_*.pt"))
    return ckpts[-1] if ckpts else None


def run_experiment(config: TrainConfig, source_dir, target_dir, out_dir,
                   pretrained: Optional[Upsampler] = None, resume: bool = False,
                   target_test_dir=None) -> ExperimentResult:
    """Pretrain (or reuse) the source model, adapt for ``max_iters`` steps, evaluate u_t on target test."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = load_dataset(source_dir, "paired", "train", scale=config.scale)
    target = load_dataset(target_dir, "unpaired", "train")
    target_test = load_dataset(target_test_dir or target_dir, "paired", "test", scale=config.scale)
    (out_dir / "config.json").write_text(
        json.dumps({"config_hash": config.config_hash(), "train": config.model_dump(mode="json")},
                   indent=2, sort_keys=True))

    pre_path = out_dir / "pretrained.pt"
    if pretrained is None:
        if pre_path.exists():
            pretrained = load_upsampler(pre_path)
        else:
            pretrained = pretrain_source(config, source)
            save_upsampler(pretrained, pre_path, config)

    trainer = DADATrainer(config, pretrained, source, target)
    log_path = out_dir / "train_log.jsonl"
    records: List[dict] = []
    if resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is not None:
            trainer.load_checkpoint(ckpt)
            if log_path.exists():
                records = [json.loads(l) for l in log_path.read_text().splitlines() if l.strip()]
                records = [r for r in records if r["iteration"] <= trainer.iteration]
            log.info("resumed from %s at iteration %d", ckpt, trainer.iteration)

    start = time.perf_counter()
    with open(log_path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
        while trainer.iteration < config.max_iters:
            try:
                report = trainer.step()
            except NonFiniteLossError as e:
                # periodic checkpoints stay untouched: the newest one is the last good state
                f.flush()
                last = latest_checkpoint(out_dir)
                (out_dir / "halt.json").write_text(json.dumps(
                    {"iteration": trainer.iteration + 1, "term": e.term,
                     "last_good_checkpoint": str(last) if last else None}, indent=2))
                raise
            rec = {"iteration": trainer.iteration, "elapsed": round(time.perf_counter() - start, 3),
                   **report.as_dict()}
            records.append(rec)
            f.write(json.dumps(rec, sort_keys=True) + "\n")
            if trainer.iteration % config.eval_every == 0 or trainer.iteration == config.max_iters:
                f.flush()
                trainer.save_checkpoint(out_dir / "checkpoints" / f"iter_{trainer.iteration:07d}.pt")

    report = evaluate(predictor(trainer.model.u_t), target_test, model_id=f"dada-{config.config_hash()}")
    report.write_json(out_dir / "eval_report.json")
    report.write_csv(out_dir / "eval_report.csv")
    return ExperimentResult(trainer, records, report)
