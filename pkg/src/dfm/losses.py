"""Training objective: two cross-entropies plus a weighted direction-field loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .direction_field import check_mask


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    lambda_df: float = 1.0
    # ε = 1e-6 leaves arccos(1 - ε)^2 ≈ 2e-6 per pixel at a perfect prediction.
    epsilon_acos: float = 1e-7
    squared_l2: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_df < 0:
            raise ValueError("alpha and lambda_df must be non-negative")
        if not 0 < self.epsilon_acos < 1e-3:
            raise ValueError("epsilon_acos must lie in (0, 1e-3)")


def cross_entropy(logits, gt):
    """Mean per-pixel negative log-likelihood of the true class.

    ``logits`` is ``(K+1, H, W)`` or ``(B, K+1, H, W)``; ``gt`` holds class ids.
    """
    gt = torch.as_tensor(gt, device=logits.device).long()
    if logits.dim() == 3:
        logits, gt = logits.unsqueeze(0), gt.unsqueeze(0)
    if logits.shape[-2:] != gt.shape[-2:] or logits.shape[0] != gt.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(gt.shape)} disagree")
    k1 = logits.shape[1]
    if gt.numel() and (int(gt.min()) < 0 or int(gt.max()) >= k1):
        raise ValueError(f"label outside [0, {k1 - 1}]")
    return F.cross_entropy(logits, gt)


def class_balance_weights(mask):
    """Per-pixel weights that give every present foreground class equal total mass.

    A pixel of foreground class i gets ``sum_j |C_j| / (N_cls * |C_i|)`` with
    the sum and ``N_cls`` over foreground classes present; background gets 1.
    """
    mask = check_mask(mask)
    w = np.ones(mask.shape, dtype=np.float64)
    labels, counts = np.unique(mask[mask > 0], return_counts=True)
    if len(labels) == 0:
        return w
    total = counts.sum()
    for c, n in zip(labels, counts):
        w[mask == c] = total / (len(labels) * n)
    return w


def _safe_norm(v, eps):
    # sqrt has an infinite slope at 0; norms below eps count as exactly zero
    sq = (v * v).sum(dim=1)
    small = sq < eps * eps
    norm = torch.sqrt(torch.where(small, torch.ones_like(sq), sq))
    return torch.where(small, torch.zeros_like(sq), norm), small


def direction_field_loss(pred, gt, weight, cfg=None):
    """Weighted L2 + squared-angle loss, averaged over pixels.

    The angle term only counts where ``gt`` is non-zero; the predicted vector
    is normalised for the angle and used raw for the L2 term.
    """
    cfg = cfg or LossConfig()
    gt = torch.as_tensor(gt, dtype=pred.dtype, device=pred.device)
    weight = torch.as_tensor(weight, dtype=pred.dtype, device=pred.device)
    if pred.dim() == 3:
        pred, gt, weight = pred.unsqueeze(0), gt.unsqueeze(0), weight.unsqueeze(0)
    if pred.shape != gt.shape or pred.shape[1] != 2 or weight.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, weight {tuple(weight.shape)}"
        )

    diff = gt - pred
    if cfg.squared_l2:
        l2 = (diff * diff).sum(dim=1)
    else:
        l2, _ = _safe_norm(diff, 1e-8)

    pnorm, tiny = _safe_norm(pred, 1e-8)
    unit = pred / torch.where(tiny, torch.ones_like(pnorm), pnorm).unsqueeze(1)
    eps = cfg.epsilon_acos
    cos = (unit * gt).sum(dim=1).clamp(-1 + eps, 1 - eps)
    fg = (gt != 0).any(dim=1)
    angle = torch.where(fg, torch.arccos(cos) ** 2, torch.zeros_like(cos))

    return (weight * (l2 + cfg.alpha * angle)).mean()


def total_loss(ce_initial, ce_final, df_loss, cfg=None):
    cfg = cfg or LossConfig()
    return ce_initial + ce_final + cfg.lambda_df * df_loss
