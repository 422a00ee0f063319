"""U-Net backbone with a direction-field head and FRF-based final classifier."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .frf import FRFConfig, frf_fuse, frf_rectify

CHECKPOINT_FORMAT = "dfm-checkpoint"
CONFIG_HEADER = "dfm-model-config v1"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 4
    base_channels: int = 64
    depth: int = 4
    frf_steps: int = 5

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        FRFConfig(self.frf_steps)

    def to_text(self):
        lines = [CONFIG_HEADER] + [f"{k} = {v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != CONFIG_HEADER:
            raise ValueError(f"unsupported model config header: {lines[:1]}")
        known = {f.name for f in fields(cls)}
        values = {}
        for ln in lines[1:]:
            key, _, val = (s.strip() for s in ln.partition("="))
            if key not in known:
                raise ValueError(f"unknown model config key {key!r}")
            values[key] = int(val)
        return cls(**values)


class ModelOutputs(NamedTuple):
    initial_logits: torch.Tensor
    direction_field: torch.Tensor
    final_logits: torch.Tensor
    features: torch.Tensor


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Up(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.reduce = nn.Conv2d(cin, cout, 1)
        self.block = conv_block(2 * cout, cout)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.block(torch.cat([skip, self.reduce(x)], dim=1))


class UNet(nn.Module):
    """Encoder-decoder returning a ``base_channels`` feature map at input resolution."""

    def __init__(self, in_channels, base, depth):
        super().__init__()
        widths = [base * 2**i for i in range(depth + 1)]
        self.inc = conv_block(in_channels, widths[0])
        self.down = nn.ModuleList(conv_block(widths[i], widths[i + 1]) for i in range(depth))
        self.up = nn.ModuleList(Up(widths[i + 1], widths[i]) for i in reversed(range(depth)))

    def forward(self, x):
        skips = [self.inc(x)]
        for block in self.down:
            skips.append(block(F.max_pool2d(skips[-1], 2)))
        h = skips.pop()
        for up in self.up:
            h = up(h, skips.pop())
        return h


class DFMNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.backbone = UNet(cfg.in_channels, c, cfg.depth)
        self.seg_head = nn.Conv2d(c, cfg.num_classes, 1)
        self.df_head = nn.Conv2d(c, 2, 1)
        self.final_head = nn.Conv2d(2 * c, cfg.num_classes, 1)

    def forward(self, image) -> ModelOutputs:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        h, w = image.shape[-2:]
        k = 2**self.cfg.depth
        if h % k or w % k:
            raise ValueError(f"input size {h}x{w} must be divisible by 2**depth = {k}")
        f0 = self.backbone(image)
        initial = self.seg_head(f0)
        df = self.df_head(f0)
        fn = frf_rectify(f0, df, self.cfg.frf_steps)
        final = self.final_head(frf_fuse(f0, fn))
        out = ModelOutputs(initial, df, final, f0)
        if squeeze:
            out = ModelOutputs(*(t[0] for t in out))
        return out


def he_init_(model, generator=None):
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(cfg: ModelConfig | None = None, seed: int | None = None) -> DFMNet:
    cfg = cfg or ModelConfig()
    model = DFMNet(cfg)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    he_init_(model, gen)
    return model


def save_checkpoint(model, path, **meta):
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "model_config": model.cfg.to_text(),
            "state_dict": model.state_dict(),
            "meta": meta,
        },
        path,
    )


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Returns ``(model, meta)``; ``expect`` must match the stored config when given."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a DFM checkpoint")
    if blob.get("version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    cfg = ModelConfig.from_text(blob["model_config"])
    if expect is not None and expect != cfg:
        raise ValueError(f"{path}: checkpoint config {cfg} does not match expected {expect}")
    model = DFMNet(cfg)
    model.load_state_dict(blob["state_dict"])
    return model, blob.get("meta", {})
