"""Content, cycle, perceptual and adversarial losses.

All functions take N x C x H x W tensors and return 0-dim tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

LOGIT_CLAMP = 20.0
EXTRACTOR_SEED = 20220117


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value=float("nan")):
        super().__init__(f"non-finite value in loss term {term!r}: {value}")
        self.term = term


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(0.1, ge=0)
    beta: float = Field(0.01, ge=0)
    lambda1: float = Field(0.005, ge=0)
    lambda2: float = Field(0.005, ge=0)
    lambda3: float = Field(0.005, ge=0)
    lambda4: float = Field(0.005, ge=0)

    def coefficients(self) -> Dict[str, float]:
        return {"con_s": 1.0, "con_t": 1.0, "rec": self.alpha, "vgg": self.beta,
                "inter_s_g": self.lambda1, "inter_t_g": self.lambda2,
                "intra_s_g": self.lambda3, "intra_t_g": self.lambda4}


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_shapes(a, b)
    return (a - b).abs().mean()


def gradient_magnitude(img: torch.Tensor) -> torch.Tensor:
    """Central-difference gradient magnitude, max over channels, scaled to [0, 1] per image.

    Borders use replicate padding. Returns N x 1 x H x W.
    """
    p = F.pad(img, (1, 1, 1, 1), mode="replicate")
    gx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / 2
    gy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / 2
    mag = torch.sqrt(gx * gx + gy * gy).amax(dim=1, keepdim=True)
    peak = mag.amax(dim=(2, 3), keepdim=True)
    return torch.where(peak > 0, mag / torch.where(peak > 0, peak, torch.ones_like(peak)), torch.zeros_like(mag))


def gw_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 weighted per pixel by ``1 + g``, g the normalised gradient magnitude of ``target``."""
    _check_shapes(pred, target)
    w = 1.0 + gradient_magnitude(target.detach())
    return (w * (pred - target).abs()).mean()


class RandomConvExtractor(nn.Module):
    """Frozen five-layer conv stack with fixed seeded weights (hermetic VGG stand-in)."""

    def __init__(self, in_channels: int = 3, width: int = 16, seed: int = EXTRACTOR_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        chans = [in_channels, width, width, 2 * width, 2 * width, 2 * width]
        for i in range(5):
            conv = nn.Conv2d(chans[i], chans[i + 1], 3, 2 if i in (1, 3) else 1, 1)
            fan_in = chans[i] * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers.append(conv)
            if i < 4:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.net(x)


class VGGConv53Extractor(nn.Module):
    """VGG-19 features up to conv5_3 (pre-activation). Needs torchvision weights on disk."""

    def __init__(self):
        super().__init__()
        from torchvision.models import vgg19, VGG19_Weights
        feats = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        # conv5_3 is index 32 in torchvision's layer list
        self.net = feats[:33]
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.net((x - self.mean) / self.std)


def make_extractor(kind: str = "random") -> nn.Module:
    if kind == "random":
        return RandomConvExtractor()
    if kind == "vgg19":
        return VGGConv53Extractor()
    raise ValueError(f"unknown perceptual extractor {kind!r}")


def perceptual_loss(pred: torch.Tensor, ref: torch.Tensor, extractor: Callable) -> torch.Tensor:
    _check_shapes(pred, ref)
    fp, fr = extractor(pred), extractor(ref)
    return (fp - fr).abs().mean()


def _logits(disc, img):
    out = disc(img)
    if not torch.isfinite(out).all():
        raise NonFiniteLossError("discriminator logits")
    return out.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)


def bce_real(logits):
    """-mean log sigmoid(logits)."""
    return F.softplus(-logits).mean()


def bce_fake(logits):
    """-mean log(1 - sigmoid(logits))."""
    return F.softplus(logits).mean()


def adv_d_loss(disc, real_img: torch.Tensor, fake_img: torch.Tensor) -> torch.Tensor:
    """Discriminator BCE: label 1 for ``real_img``, 0 for ``fake_img``; inputs are detached."""
    real_img, fake_img = real_img.detach(), fake_img.detach()
    if real_img.shape == fake_img.shape:
        logits = _logits(disc, torch.cat([real_img, fake_img]))
        lr, lf = logits[:real_img.shape[0]], logits[real_img.shape[0]:]
    else:
        lr, lf = _logits(disc, real_img), _logits(disc, fake_img)
    return bce_real(lr) + bce_fake(lf)


def adv_g_loss(disc, fake_img: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss on the sample the discriminator labels 0."""
    return bce_real(_logits(disc, fake_img))


@dataclass
class LossReport:
    values: Dict[str, float] = field(default_factory=dict)

    def __getitem__(self, k):
        return self.values[k]

    def __contains__(self, k):
        return k in self.values

    def as_dict(self):
        return dict(self.values)


def check_finite(terms: Mapping[str, object]) -> None:
    for name, v in terms.items():
        val = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(val):
            raise NonFiniteLossError(name, val)


def total_objective(terms: Mapping[str, object], w: LossWeights):
    """Weighted sum of the generator objective; absent terms are skipped.

    Term keys: con_s, con_t, rec, vgg, inter_s_g, inter_t_g, intra_s_g, intra_t_g.
    """
    coeffs = w.coefficients()
    unknown = set(terms) - set(coeffs)
    if unknown:
        raise KeyError(f"unknown objective terms: {sorted(unknown)}")
    check_finite(terms)
    parts = [c * terms[name] for name, c in coeffs.items() if name in terms]
    if not any(torch.is_tensor(p) for p in parts):
        return math.fsum(parts)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total
