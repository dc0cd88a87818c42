"""Command-line entry point: ``dadasr <command> [--config PATH] [--out DIR] ...``.

Exit codes: 0 success, 2 configuration or input error, 3 training halted on a non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import DatasetError, load_dataset, read_png
from .degradation import estimate_kernel, kernel_distance, save_kernel_grid
from .lab import load_lab, prepare_lab, read_corpus, synthetic_corpus
from .losses import NonFiniteLossError
from .metrics import cross_device_matrix, evaluate
from .networks import StructureError, Upsampler
from .trainer import (CHECKPOINT_FORMAT, ConfigMismatchError, load_upsampler, predictor, run_experiment,
                      save_upsampler, train_supervised)

log = logging.getLogger("dadasr")

EXIT_OK, EXIT_CONFIG, EXIT_NAN = 0, 2, 3


class UsageError(Exception):
    pass


def _out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or cfg.out_dir)


def _lab_root(args, cfg: ExperimentConfig) -> Path:
    return Path(args.data or cfg.data.root)


def cmd_prepare_data(args, cfg: ExperimentConfig) -> int:
    d = cfg.data
    corpus = read_corpus(d.corpus) if d.corpus else synthetic_corpus(d.n_synthetic, d.hr_size, d.corpus_seed)
    root = Path(args.out or d.root)
    names = [c.name for c in d.cameras]
    for n in (d.source, d.target):
        if n not in names:
            raise UsageError(f"data.source/target {n!r} is not among cameras {names}")
    lab = prepare_lab(root, corpus, cfg.profiles(), targets=[d.target], train_fraction=d.train_fraction,
                      seed=d.corpus_seed)
    print(f"wrote {len(lab.cameras)} camera trees to {root}: {len(lab.train_ids)} train / "
          f"{len(lab.test_ids)} test images each")
    return EXIT_OK


def _pretrained_path(out: Path) -> Path:
    return out / "pretrained.pt"


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    lab = _lab_root(args, cfg)
    out = _out(args, cfg)
    source = load_dataset(lab / cfg.data.source, "paired", "train", scale=cfg.train.scale)
    run = train_supervised(cfg.train, source, cfg.train.pretrain_iters)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pretrain_log.jsonl", "w") as f:
        for r in run.history:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    save_upsampler(run.model, _pretrained_path(out), cfg.train)
    dump_config(cfg, out / "experiment.yaml")
    print(f"pretrained source model saved to {_pretrained_path(out)}")
    return EXIT_OK


def cmd_train_dada(args, cfg: ExperimentConfig) -> int:
    lab = _lab_root(args, cfg)
    out = _out(args, cfg)
    pre_path = _pretrained_path(out)
    pretrained = load_upsampler(pre_path) if pre_path.exists() else None
    runs = cfg.expand()
    for name, train_cfg in runs.items():
        run_dir = out / name if len(runs) > 1 or cfg.ablation else out
        if pretrained is not None:
            save_upsampler(pretrained, _pretrained_path(run_dir), train_cfg)
        t = train_cfg.toggles
        print(f"[{name}] inter_aa={t.inter_aa} intra_aa={t.intra_aa} dia={t.dia} "
              f"config={train_cfg.config_hash()}")
        res = run_experiment(train_cfg, lab / cfg.data.source, lab / cfg.data.target, run_dir,
                             pretrained=pretrained, resume=args.resume)
        if pretrained is None:
            pretrained = load_upsampler(_pretrained_path(run_dir))
            save_upsampler(pretrained, pre_path, train_cfg)
        print(f"[{name}] target test PSNR-Y {res.report.psnr_y:.3f} dB  SSIM {res.report.ssim:.4f}")
    return EXIT_OK


def load_any_upsampler(path: Path, cfg: ExperimentConfig) -> Upsampler:
    """Accept either a bare upsampler file or an adaptation checkpoint (its target branch is used)."""
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format") == CHECKPOINT_FORMAT:
        u = Upsampler(cfg.train.arch())
        u.load_state_dict(state["networks"]["u_t"])
        return u.eval()
    return load_upsampler(path)


def _default_checkpoint(out: Path) -> Path:
    for cand in (out / "checkpoints", out / "full" / "checkpoints"):
        ckpts = sorted(cand.glob("iter_*.pt"))
        if ckpts:
            return ckpts[-1]
    return out / "checkpoints" / "missing.pt"


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    out = _out(args, cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else _default_checkpoint(out)
    model = load_any_upsampler(ckpt, cfg)
    lab = _lab_root(args, cfg)
    test = load_dataset(lab / cfg.data.target, "paired", "test", scale=cfg.train.scale)
    rep = evaluate(predictor(model), test, model_id=ckpt.stem, border=cfg.metrics.border)
    eval_dir = out / "eval"
    rep.write_csv(eval_dir / f"{ckpt.stem}.csv")
    rep.write_json(eval_dir / f"{ckpt.stem}.json")
    print(f"{ckpt}: PSNR-Y {rep.psnr_y:.3f} dB  SSIM {rep.ssim:.4f} on {rep.n_images} {rep.domain} images")
    return EXIT_OK


def cmd_estimate_kernel(args, cfg: ExperimentConfig) -> int:
    out = _out(args, cfg) / "kernels"
    results = {}
    if args.hr or args.lr:
        if not (args.hr and args.lr):
            raise UsageError("--hr and --lr must be given together")
        est = estimate_kernel(read_png(args.hr), read_png(args.lr), scale=cfg.train.scale)
        save_kernel_grid(est.kernel, out / "estimate.txt")
        results["estimate"] = {"residual": est.residual, "iterations": est.iterations, "converged": est.converged}
    else:
        lab = load_lab(_lab_root(args, cfg))
        for name, prof in lab.cameras.items():
            sample = load_dataset(lab.root / name, "paired", "test", scale=prof.scale)[0]
            est = estimate_kernel(sample.hr, sample.lr, k_size=prof.kernel.size, scale=prof.scale)
            save_kernel_grid(est.kernel, out / f"{name}_estimate.txt")
            save_kernel_grid(prof.kernel, out / f"{name}_true.txt")
            results[name] = {"image": sample.id, "residual": est.residual, "iterations": est.iterations,
                             "converged": est.converged,
                             "relative_error": kernel_distance(est.kernel, prof.kernel)
                             / float(np.linalg.norm(prof.kernel.weights))}
    out.mkdir(parents=True, exist_ok=True)
    (out / "estimates.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    for k, v in results.items():
        print(k, json.dumps(v, sort_keys=True))
    return EXIT_OK


def cmd_plot(args, cfg: ExperimentConfig) -> int:
    from . import plots
    from .degradation import load_kernel_grid

    out = _out(args, cfg)
    run_dir = out / "full" if (out / "full" / "train_log.jsonl").exists() else out
    log_path = run_dir / "train_log.jsonl"
    if not log_path.exists():
        raise UsageError(f"no training log at {log_path}; run train-dada first")
    lab = load_lab(_lab_root(args, cfg))
    pretrained = load_any_upsampler(_pretrained_path(out), cfg)
    adapted = load_any_upsampler(_default_checkpoint(out), cfg)
    tests = [load_dataset(lab.root / n, "paired", "test", scale=cfg.train.scale) for n in lab.cameras]
    target = next(t for t in tests if str(t.domain) == cfg.data.target)
    sample = target[0]
    outputs = {"source model": predictor(pretrained)(sample.lr.pixels),
               "adapted": predictor(adapted)(sample.lr.pixels)}
    kernels = {f"{n} true": p.kernel for n, p in lab.cameras.items()}
    kdir = out / "kernels"
    for n in lab.cameras:
        if (kdir / f"{n}_estimate.txt").exists():
            kernels[f"{n} estimated"] = load_kernel_grid(kdir / f"{n}_estimate.txt")
    matrix = cross_device_matrix({"source model": predictor(pretrained), "adapted": predictor(adapted)},
                                 tests, border=cfg.metrics.border)
    matrix.write_csv(out / "plots" / "cross_device.csv")
    paths = plots.plot_all(out / "plots", plots.read_log(log_path), sample.hr.pixels, outputs, kernels, matrix)
    for k, p in paths.items():
        print(f"{k}: {p}")
    return EXIT_OK


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "pretrain": cmd_pretrain,
    "train-dada": cmd_train_dada,
    "eval": cmd_eval,
    "estimate-kernel": cmd_estimate_kernel,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dadasr", description="Cross-device SR adaptation lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML/JSON experiment config")
        p.add_argument("--out", help="output directory (lab root for prepare-data)")
        p.add_argument("--data", help="lab root holding the camera trees (default: data.root)")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")
        p.add_argument("--preset", choices=["desk", "paper-like"], help="network capacity preset")
        if name == "eval":
            p.add_argument("--checkpoint", help="upsampler or adaptation checkpoint")
        if name == "estimate-kernel":
            p.add_argument("--hr", help="HR image (with --lr)")
            p.add_argument("--lr", help="LR image (with --hr)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, preset=args.preset)
        return COMMANDS[args.command](args, cfg)
    except NonFiniteLossError as e:
        print(f"error: training halted: {e}", file=sys.stderr)
        return EXIT_NAN
    except (ConfigError, ConfigMismatchError, DatasetError, StructureError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
