"""Feature rectification and fusion.

Each step resamples the feature map at ``p + DF(p)`` with bilinear
interpolation; the same displacement is reused at every step.  Sample
positions are clamped to the image rectangle.  Everything is plain torch
arithmetic, so gradients reach both the features and the field.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

DEFAULT_STEPS = 5


@dataclass(frozen=True)
class FRFConfig:
    steps: int = DEFAULT_STEPS

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


def _batched(t, name):
    if t.dim() == 3:
        return t.unsqueeze(0), True
    if t.dim() == 4:
        return t, False
    raise ValueError(f"{name} must be (C, H, W) or (B, C, H, W), got {tuple(t.shape)}")


def identity_grid(h, w, dtype=torch.float32, device=None):
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys])


class BilinearSampler:
    """Corner indices and weights for a fixed set of sample positions.

    ``coords`` is ``(B, 2, H, W)`` with channel 0 = x, channel 1 = y.  The
    weights stay attached to the autograd graph of ``coords``; the integer
    corners do not (bilinear interpolation is piecewise linear in position).
    """

    def __init__(self, coords, h, w):
        b = coords.shape[0]
        x = coords[:, 0].clamp(0, w - 1)
        y = coords[:, 1].clamp(0, h - 1)
        x0 = torch.floor(x.detach()).clamp(max=max(w - 2, 0))
        y0 = torch.floor(y.detach()).clamp(max=max(h - 2, 0))
        wx = (x - x0).reshape(-1, 1)
        wy = (y - y0).reshape(-1, 1)
        x0, y0 = x0.long(), y0.long()
        x1 = (x0 + 1).clamp(max=w - 1)
        y1 = (y0 + 1).clamp(max=h - 1)
        base = (torch.arange(b, device=coords.device) * h * w).view(b, 1, 1)
        self.index = [(base + yy * w + xx).reshape(-1) for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
        self.weight = [(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy]
        self.shape = (b, h, w)

    def rows(self, f):
        b, c, h, w = f.shape
        return f.permute(0, 2, 3, 1).reshape(b * h * w, c)

    def unrows(self, rows):
        b, h, w = self.shape
        return rows.reshape(b, h, w, -1).permute(0, 3, 1, 2)

    def sample_rows(self, rows):
        out = self.weight[0] * rows.index_select(0, self.index[0])
        for idx, wt in zip(self.index[1:], self.weight[1:]):
            out = out + wt * rows.index_select(0, idx)
        return out


def _prepare(f, coords):
    f4, squeeze = _batched(f, "features")
    c4, _ = _batched(coords, "coords")
    b, _, h, w = f4.shape
    if c4.shape[1] != 2 or c4.shape[2:] != (h, w) or c4.shape[0] not in (1, b):
        raise ValueError(
            f"coords shape {tuple(coords.shape)} does not match features {tuple(f.shape)}"
        )
    return f4, c4.expand(b, -1, -1, -1), squeeze


def bilinear_sample(f, coords):
    """Sample ``f`` at absolute ``(x, y)`` positions, clamped to the image.

    ``f`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``coords`` is ``(2, H, W)`` or
    ``(B, 2, H, W)`` with channel 0 = x, channel 1 = y.
    """
    f4, c4, squeeze = _prepare(f, coords)
    sampler = BilinearSampler(c4, *f4.shape[2:])
    out = sampler.unrows(sampler.sample_rows(sampler.rows(f4)))
    return out[0] if squeeze else out


def frf_step(f_prev, df):
    """One rectification step: ``F_k(p) = F_{k-1}(p + DF(p))``."""
    h, w = f_prev.shape[-2:]
    if df.shape[-3:] != (2, h, w):
        raise ValueError(f"field shape {tuple(df.shape)} does not match features {tuple(f_prev.shape)}")
    grid = identity_grid(h, w, dtype=df.dtype, device=df.device)
    return bilinear_sample(f_prev, grid + df)


def frf_rectify(f0, df, cfg=None):
    """Apply :func:`frf_step` ``cfg.steps`` times (an int is accepted too)."""
    if cfg is None:
        cfg = FRFConfig()
    elif isinstance(cfg, int):
        cfg = FRFConfig(cfg)
    steps = cfg.steps
    h, w = f0.shape[-2:]
    if df.shape[-3:] != (2, h, w):
        raise ValueError(f"field shape {tuple(df.shape)} does not match features {tuple(f0.shape)}")
    if steps == 0:
        return f0
    coords = identity_grid(h, w, dtype=df.dtype, device=df.device) + df
    f4, c4, squeeze = _prepare(f0, coords)
    # the displacement is reused at every step, so the corners are computed once
    sampler = BilinearSampler(c4, h, w)
    rows = sampler.rows(f4)
    for _ in range(steps):
        rows = sampler.sample_rows(rows)
    out = sampler.unrows(rows)
    return out[0] if squeeze else out


def frf_fuse(f0, fn):
    """Concatenate along channels in the order ``[F^N; F^0]``."""
    if f0.shape != fn.shape:
        raise ValueError(f"cannot fuse {tuple(fn.shape)} with {tuple(f0.shape)}")
    return torch.cat([fn, f0], dim=-3)
