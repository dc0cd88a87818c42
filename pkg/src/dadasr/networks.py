"""Upsamplers with component attention, cycle downsamplers and PatchGAN discriminators.

PatchGAN layout (kernel 4, padding 1 everywhere)::

    layer    stride  norm       out spatial (192 input)
    conv1    2       none       96
    conv2    2       instance   48
    conv3    2       instance   24
    head     1       none       23

so an ``H x W`` input yields ``(H//8 - 1) x (W//8 - 1)`` logits for H, W divisible by 8.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, asdict
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

COMPONENTS = ("flat", "edge", "corner")
DISCRIMINATORS = ("inter_s", "inter_t", "intra_s", "intra_t")


@dataclass(frozen=True)
class ArchConfig:
    scale: int = 4
    channels: int = 16
    hourglass_depth: int = 2
    hourglass_stacks: int = 1
    branch_blocks: int = 1
    mask_channels: int = 8
    mask_blocks: int = 1
    down_channels: int = 16
    down_blocks: int = 8
    disc_channels: int = 16

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "desk": ArchConfig(),
    "paper-like": ArchConfig(channels=64, hourglass_depth=4, hourglass_stacks=2, branch_blocks=2,
                             mask_channels=32, mask_blocks=3, down_channels=64, disc_channels=64),
}


def grid_upsample(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Bilinear upsampling that places LR pixel ``i`` at HR coordinate ``scale * i``.

    This matches the upper-left sampling of the degradation model; the usual
    ``align_corners=False`` convention would put it at ``scale * i + (scale - 1) / 2``.
    """
    h, w = x.shape[-2:]
    padded = F.pad(x, (0, 1, 0, 1), mode="replicate")
    up = F.interpolate(padded, size=(scale * h + 1, scale * w + 1), mode="bilinear", align_corners=True)
    return up[..., : scale * h, : scale * w]


def conv3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride, 1)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = conv3(ch, ch)
        self.conv2 = conv3(ch, ch)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Hourglass(nn.Module):
    def __init__(self, ch, depth):
        super().__init__()
        self.skip = ResBlock(ch)
        self.down = ResBlock(ch)
        self.inner = Hourglass(ch, depth - 1) if depth > 1 else ResBlock(ch)
        self.up = ResBlock(ch)

    def forward(self, x):
        low = F.avg_pool2d(x, 2, ceil_mode=True)
        low = self.up(self.inner(self.down(low)))
        return self.skip(x) + F.interpolate(low, size=x.shape[-2:], mode="nearest")


class ShuffleHead(nn.Module):
    """Sub-pixel projection from LR features to ``out_ch`` maps at ``scale`` x resolution."""

    def __init__(self, cin, out_ch, scale):
        super().__init__()
        self.conv = conv3(cin, out_ch * scale * scale)
        self.shuffle = nn.PixelShuffle(scale)

    def forward(self, x):
        return self.shuffle(self.conv(x))


class MaskGenerator(nn.Module):
    """Per-pixel soft assignment to flat / edge / corner at HR resolution."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.head = conv3(3, cfg.mask_channels)
        self.body = nn.Sequential(*[ResBlock(cfg.mask_channels) for _ in range(cfg.mask_blocks)])
        self.tail = ShuffleHead(cfg.mask_channels, len(COMPONENTS), cfg.scale)

    def logits(self, x):
        return self.tail(self.body(F.relu(self.head(x))))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


class Upsampler(nn.Module):
    """Hourglass backbone with three component branches blended by attention masks.

    Each branch adds a sub-pixel residual to a grid-aligned bilinear skip.
    ``forward`` returns ``(sr, masks, intermediates)`` with
    ``sr = sum_c masks[:, c] * intermediates[:, c]``.
    """

    def __init__(self, cfg: ArchConfig = PRESETS["desk"]):
        super().__init__()
        self.cfg = cfg
        self.scale = cfg.scale
        ch = cfg.channels
        self.head = conv3(3, ch)
        self.backbone = nn.Sequential(*[Hourglass(ch, cfg.hourglass_depth)
                                        for _ in range(cfg.hourglass_stacks)])
        self.branches = nn.ModuleList(
            nn.Sequential(*[ResBlock(ch) for _ in range(cfg.branch_blocks)], ShuffleHead(ch, 3, cfg.scale))
            for _ in COMPONENTS)
        self.mask_gen = MaskGenerator(cfg)

    def forward(self, x, masks: Optional[torch.Tensor] = None):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"upsampler expects N x 3 x H x W input, got {tuple(x.shape)}")
        base = grid_upsample(x, self.scale)
        feat = self.backbone(F.relu(self.head(x)))
        inters = torch.stack([base + b(feat) for b in self.branches], dim=1)  # N,3comp,3,H,W
        if masks is None:
            masks = self.mask_gen(x)
        sr = (masks.unsqueeze(2) * inters).sum(dim=1)
        return sr, masks, inters

    def sr(self, x):
        return self.forward(x)[0]


class Downsampler(nn.Module):
    """Two stride-2 convolutions then eight residual blocks, plus an upper-left subsampling skip."""

    def __init__(self, cfg: ArchConfig = PRESETS["desk"]):
        super().__init__()
        if cfg.scale != 4:
            raise ValueError("downsampler is built for scale 4 (two stride-2 stages)")
        ch = cfg.down_channels
        self.head = conv3(3, ch)
        self.stride1 = conv3(ch, ch, stride=2)
        self.stride2 = conv3(ch, ch, stride=2)
        self.body = nn.Sequential(*[ResBlock(ch) for _ in range(cfg.down_blocks)])
        self.tail = conv3(ch, 3)
        self.scale = cfg.scale

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.scale or w % self.scale:
            raise ValueError(f"downsampler input {h}x{w} not divisible by {self.scale}")
        f = F.relu(self.head(x))
        f = F.relu(self.stride1(f))
        f = F.relu(self.stride2(f))
        return x[..., :: self.scale, :: self.scale] + self.tail(self.body(f))


class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels: int, ch: int = 16):
        super().__init__()
        self.in_channels = in_channels
        self.model = nn.Sequential(
            nn.Conv2d(in_channels, ch, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, 2 * ch, 4, 2, 1),
            nn.InstanceNorm2d(2 * ch),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * ch, 4 * ch, 4, 2, 1),
            nn.InstanceNorm2d(4 * ch),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * ch, 1, 4, 1, 1),
        )

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"discriminator expects {self.in_channels} channels, got {x.shape[1]}")
        return self.model(x)


def patch_logit_size(n: int) -> int:
    for _ in range(3):
        n = (n + 2 - 4) // 2 + 1
    return (n + 2 - 4) // 1 + 1


def structure_signature(module: nn.Module):
    return [(k, tuple(v.shape)) for k, v in module.state_dict().items()]


class StructureError(ValueError):
    pass


def build_dia(u_s: Upsampler, u_t: Upsampler, pretrained: Upsampler) -> MaskGenerator:
    """Alias one mask generator, initialised from ``pretrained``, into both upsamplers."""
    if structure_signature(u_s) != structure_signature(u_t):
        raise StructureError("source and target upsamplers differ in structure")
    if structure_signature(u_s.mask_gen) != structure_signature(pretrained.mask_gen):
        raise StructureError("pretrained mask generator does not match the upsamplers")
    shared = copy.deepcopy(pretrained.mask_gen)
    for p in shared.parameters():
        p.requires_grad_(True)
    u_s.mask_gen = shared
    u_t.mask_gen = shared
    return shared


def unique_parameters(*modules: nn.Module):
    seen, out = set(), []
    for m in modules:
        for p in m.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


class ModelState:
    """The nine networks of a dual-branch run.

    ``u_s0`` is the frozen source-pretrained upsampler; ``u_s``/``u_t`` start as its copies.
    """

    def __init__(self, pretrained: Upsampler, cfg: ArchConfig, dia: bool = True):
        self.cfg = cfg
        self.dia = dia
        self.u_s0 = copy.deepcopy(pretrained)
        for p in self.u_s0.parameters():
            p.requires_grad_(False)
        self.u_s0.eval()
        self.u_s = copy.deepcopy(pretrained)
        self.u_t = copy.deepcopy(pretrained)
        for p in unique_parameters(self.u_s, self.u_t):
            p.requires_grad_(True)
        if dia:
            build_dia(self.u_s, self.u_t, self.u_s0)
        self.d_s = Downsampler(cfg)
        self.d_t = Downsampler(cfg)
        self.discs = nn.ModuleDict({
            "inter_s": PatchDiscriminator(1, cfg.disc_channels),
            "inter_t": PatchDiscriminator(1, cfg.disc_channels),
            "intra_s": PatchDiscriminator(3, cfg.disc_channels),
            "intra_t": PatchDiscriminator(3, cfg.disc_channels),
        })

    def networks(self) -> Dict[str, nn.Module]:
        nets = {"u_s": self.u_s, "u_t": self.u_t, "d_s": self.d_s, "d_t": self.d_t, "u_s0": self.u_s0}
        nets.update({f"disc_{k}": v for k, v in self.discs.items()})
        return nets

    def generator_parameters(self):
        return unique_parameters(self.u_s, self.u_t, self.d_s, self.d_t)

    def discriminator_parameters(self):
        return unique_parameters(self.discs)

    def state_dict(self):
        return {name: net.state_dict() for name, net in self.networks().items()}

    def load_state_dict(self, states):
        nets = self.networks()
        if set(states) != set(nets):
            raise StructureError(f"checkpoint networks {sorted(states)} != expected {sorted(nets)}")
        for name, net in nets.items():
            net.load_state_dict(states[name], strict=True)
