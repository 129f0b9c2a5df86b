"""Encoder, skip-fused upscaling path, detection heads and the ARRD decoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

ARRD_LOCATIONS = ("loc1", "loc2", "loc3")
HEATMAP_PRIOR = 0.01
HEATMAP_CLAMP = 1e-4


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 3
    backbone_channels: tuple = (16, 32, 64, 128, 256)
    blocks_per_stage: int = 2
    up_channels: tuple = (128, 64, 64)
    head_channels: int = 64
    arrd_location: str | None = "loc2"
    arrd_channels: int = 16
    skip_fusion: str = "add"  # add | concat | none
    upsample: str = "nearest"  # nearest | deconv
    batchnorm: bool = True

    def __post_init__(self):
        if len(self.backbone_channels) != 5:
            raise ValueError("backbone_channels needs five stages (strides 2..32)")
        if len(self.up_channels) != 3:
            raise ValueError("up_channels needs three upscaling blocks")
        if self.arrd_location not in (None, *ARRD_LOCATIONS):
            raise ValueError(f"arrd_location must be one of {ARRD_LOCATIONS} or None")
        if self.skip_fusion not in ("add", "concat", "none"):
            raise ValueError(f"unknown skip_fusion {self.skip_fusion!r}")
        if self.upsample not in ("nearest", "deconv"):
            raise ValueError(f"unknown upsample {self.upsample!r}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        for k in ("backbone_channels", "up_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class DetectionOutputs(NamedTuple):
    heatmap: torch.Tensor
    wh: torch.Tensor
    offset: torch.Tensor


class Encoded(NamedTuple):
    bottleneck: torch.Tensor
    skips: dict
    input_hw: tuple


def _ceil_div(v, k):
    return -(-v // k)


def _norm(c, enabled):
    return nn.BatchNorm2d(c) if enabled else nn.Identity()


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, stride=1, bn=True):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride, 1, bias=not bn),
            _norm(cout, bn),
            nn.ReLU(inplace=True),
        )


class ResidualBlock(nn.Module):
    def __init__(self, c, bn=True):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, 1, 1, bias=not bn)
        self.bn1 = _norm(c, bn)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1, bias=not bn)
        self.bn2 = _norm(c, bn)
        self.act1 = nn.ReLU()
        self.act2 = nn.ReLU()

    def forward(self, x):
        y = self.act1(self.bn1(self.conv1(x)))
        return self.act2(x + self.bn2(self.conv2(y)))


class Encoder(nn.Module):
    """Five stride-2 stages; a 3x3 stride-2 conv with padding 1 gives ceil(h/2)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        stages, cin = [], 3
        for c in cfg.backbone_channels:
            blocks = [ConvBNReLU(cin, c, 2, cfg.batchnorm)]
            blocks += [ResidualBlock(c, cfg.batchnorm) for _ in range(cfg.blocks_per_stage)]
            stages.append(nn.Sequential(*blocks))
            cin = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = {}
        for i, stage in enumerate(self.stages):
            x = stage(x)
            feats[2 ** (i + 1)] = x
        return feats


class UpBlock(nn.Module):
    """x2 learned upsampling to an explicit target size, then optional skip fusion."""

    def __init__(self, cin, cout, skip_c, cfg: ModelConfig):
        super().__init__()
        self.mode = cfg.upsample
        if self.mode == "deconv":
            self.up = nn.ConvTranspose2d(cin, cin, 4, 2, 1, bias=False)
        self.conv = ConvBNReLU(cin, cout, 1, cfg.batchnorm)
        self.fusion = cfg.skip_fusion if skip_c else "none"
        if self.fusion == "add":
            self.proj = nn.Conv2d(skip_c, cout, 1, bias=False)
        elif self.fusion == "concat":
            self.proj = nn.Conv2d(cout + skip_c, cout, 1, bias=False)

    def forward(self, x, size, skip=None):
        if self.mode == "deconv":
            # ceil sizes never exceed 2x the coarser map, so cropping suffices
            x = self.up(x)[..., : size[0], : size[1]]
        else:
            x = F.interpolate(x, size=size, mode="nearest")
        x = self.conv(x)
        if skip is not None and self.fusion != "none":
            if skip.shape[-2:] != x.shape[-2:]:
                raise RuntimeError(
                    f"skip feature {tuple(skip.shape)} does not match upsampled map {tuple(x.shape)}"
                )
            if self.fusion == "add":
                x = x + self.proj(skip)
            else:
                x = self.proj(torch.cat([x, skip], dim=1))
        return x


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """``(B, C*r*r, h, w) -> (B, C, h*r, w*r)`` rearrangement."""
    b, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"channels {c} not divisible by r^2={r * r}")
    oc = c // (r * r)
    x = x.reshape(b, oc, r, r, h, w).permute(0, 1, 4, 2, 5, 3)
    return x.reshape(b, oc, h * r, w * r)


class ARRD(nn.Module):
    """Residual bilinear restoration decoder ending in a x4 pixel shuffle.

    ``out = resize(shuffle4(conv_path(f))) + resize(proj(f))``; both branches
    are bilinearly resized to the requested HR size, so any continuous
    scale factor is supported.
    """

    def __init__(self, cin, mid=16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, mid, 3, 1, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, 1, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, 3 * 16, 1),
        )
        self.skip = nn.Conv2d(cin, 3, 1)
        self.calls = 0

    def forward(self, f, target_hw):
        self.calls += 1
        size = (int(target_hw[0]), int(target_hw[1]))
        if size[0] < 1 or size[1] < 1:
            raise ValueError(f"target size must be positive, got {target_hw}")
        detail = pixel_shuffle(self.body(f), 4)
        detail = F.interpolate(detail, size=size, mode="bilinear", align_corners=False)
        base = F.interpolate(self.skip(f), size=size, mode="bilinear", align_corners=False)
        return detail + base


class Head(nn.Sequential):
    def __init__(self, cin, mid, cout):
        super().__init__(nn.Conv2d(cin, mid, 3, 1, 1), nn.ReLU(inplace=True), nn.Conv2d(mid, cout, 1))


def _kaiming_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class AERISNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        bc, uc = cfg.backbone_channels, cfg.up_channels
        self.encoder = Encoder(cfg)
        self.up1 = UpBlock(bc[4], uc[0], bc[3], cfg)  # /32 -> /16, skip /16
        self.up2 = UpBlock(uc[0], uc[1], bc[2], cfg)  # /16 -> /8, skip /8
        self.up3 = UpBlock(uc[1], uc[2], 0, cfg)  # /8 -> /4
        self.hm_head = Head(uc[2], cfg.head_channels, cfg.num_classes)
        self.wh_head = Head(uc[2], cfg.head_channels, 2)
        self.off_head = Head(uc[2], cfg.head_channels, 2)
        self.arrd = None
        if cfg.arrd_location is not None:
            cin = uc[ARRD_LOCATIONS.index(cfg.arrd_location)]
            with torch.random.fork_rng(devices=[]):
                self.arrd = ARRD(cin, cfg.arrd_channels)
        self.reset_parameters()

    def reset_parameters(self):
        # detector first, decoder last: with and without ARRD the detector weights are identical
        for name, m in self.named_children():
            if name != "arrd":
                _kaiming_init(m)
        for head in (self.hm_head, self.wh_head, self.off_head):
            nn.init.normal_(head[-1].weight, std=0.01)
        nn.init.constant_(self.hm_head[-1].bias, -math.log((1 - HEATMAP_PRIOR) / HEATMAP_PRIOR))
        if self.arrd is not None:
            _kaiming_init(self.arrd)

    # -- stages -------------------------------------------------------------

    def encode(self, x: torch.Tensor) -> Encoded:
        h, w = x.shape[-2:]
        d = self.cfg.stride
        if h < d or w < d:
            raise ValueError(f"input {h}x{w} smaller than backbone stride {d}")
        feats = self.encoder(x)
        return Encoded(feats[d], {8: feats[8], 16: feats[16]}, (int(h), int(w)))

    def upscale_with_skips(self, enc: Encoded):
        h, w = enc.input_hw
        sizes = [(_ceil_div(h, k), _ceil_div(w, k)) for k in (16, 8, 4)]
        for k, size in zip((16, 8), sizes):
            got = tuple(enc.skips[k].shape[-2:])
            if got != size:
                raise RuntimeError(f"/{k} skip has spatial dims {got}, expected {size}")
        loc1 = self.up1(enc.bottleneck, sizes[0], enc.skips[16])
        loc2 = self.up2(loc1, sizes[1], enc.skips[8])
        loc3 = self.up3(loc2, sizes[2])
        return {"loc1": loc1, "loc2": loc2, "loc3": loc3}

    def detect_heads(self, loc3: torch.Tensor) -> DetectionOutputs:
        heat = torch.sigmoid(self.hm_head(loc3)).clamp(HEATMAP_CLAMP, 1 - HEATMAP_CLAMP)
        return DetectionOutputs(heat, self.wh_head(loc3), self.off_head(loc3))

    def arrd_decode(self, feature: torch.Tensor, target_hw) -> torch.Tensor:
        if self.arrd is None:
            raise RuntimeError("model was built without an ARRD decoder")
        return self.arrd(feature, target_hw)

    # -- full passes --------------------------------------------------------

    def forward_train(self, x: torch.Tensor, target_hw=None):
        """Detection outputs plus the restored image (``None`` without ARRD)."""
        levels = self.upscale_with_skips(self.encode(x))
        det = self.detect_heads(levels["loc3"])
        restored = None
        if self.arrd is not None:
            if target_hw is None:
                raise ValueError("target_hw is required when the model has an ARRD decoder")
            restored = self.arrd_decode(levels[self.cfg.arrd_location], target_hw)
        return det, restored

    def forward_infer(self, x: torch.Tensor) -> DetectionOutputs:
        levels = self.upscale_with_skips(self.encode(x))
        return self.detect_heads(levels["loc3"])

    forward = forward_infer

    @torch.no_grad()
    def restore(self, x: torch.Tensor, target_hw) -> torch.Tensor:
        """Restored image clamped to [0, 1]; for inspection only, detection never needs it."""
        levels = self.upscale_with_skips(self.encode(x))
        return self.arrd_decode(levels[self.cfg.arrd_location], target_hw).clamp(0.0, 1.0)

    @property
    def arrd_calls(self) -> int:
        return 0 if self.arrd is None else self.arrd.calls


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32) -> AERISNet:
    """Deterministically initialised model for ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = AERISNet(cfg)
    return model.to(dtype)
