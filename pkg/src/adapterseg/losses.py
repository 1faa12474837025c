"""Training objectives: BCE + soft IoU (camouflage, polyp, cell) and balanced BCE (shadow)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch

EPS = 1e-7

TASK_LOSSES = {
    "cod": ("bce", "iou"),
    "polyp": ("bce", "iou"),
    "cell": ("bce", "iou"),
    "shadow": ("balanced_bce",),
}


class BalancedBCEFallback(UserWarning):
    """Raised as a warning when a batch lacks one class and balanced BCE degrades to plain BCE."""


@dataclass
class LossValue:
    value: torch.Tensor
    terms: dict[str, float] = field(default_factory=dict)
    fallback: bool = False


def _check(p: torch.Tensor, y: torch.Tensor) -> None:
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} != target shape {tuple(y.shape)}")


def bce_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -[y ln p + (1-y) ln(1-p)], p clamped to [eps, 1-eps]."""
    _check(p, y)
    p = p.clamp(EPS, 1 - EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def iou_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Soft IoU loss 1 - sum(py) / sum(p + y - py).

    Inputs of rank 4 ([B, 1, H, W]) are scored per sample and averaged; anything
    else is scored as one map. A zero denominator scores 0.
    """
    _check(p, y)
    # no clamp: it would make an empty target with an all-zero prediction score 1
    dims = tuple(range(1, p.dim())) if p.dim() == 4 else tuple(range(p.dim()))
    inter = (p * y).sum(dim=dims)
    union = (p + y - p * y).sum(dim=dims)
    safe = torch.where(union > 0, union, torch.ones_like(union))
    loss = torch.where(union > 0, 1 - inter / safe, torch.zeros_like(union))
    return loss.mean()


def balance_weight(y: torch.Tensor) -> tuple[float, bool]:
    """alpha = N_neg / N, and whether both classes are present."""
    n = y.numel()
    n_pos = float((y > 0.5).sum())
    return (n - n_pos) / n, 0 < n_pos < n


def balanced_bce_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """-(1/N) sum[alpha y ln p + (1-alpha)(1-y) ln(1-p)], alpha = N_neg/N over the batch.

    Falls back to plain BCE (with a BalancedBCEFallback warning) if a class is absent.
    """
    _check(p, y)
    alpha, both = balance_weight(y)
    if not both:
        warnings.warn("target has a single class; using plain BCE", BalancedBCEFallback, stacklevel=2)
        return bce_loss(p, y)
    p = p.clamp(EPS, 1 - EPS)
    return -(alpha * y * torch.log(p) + (1 - alpha) * (1 - y) * torch.log(1 - p)).mean()


_LOSS_FNS = {"bce": bce_loss, "iou": iou_loss, "balanced_bce": balanced_bce_loss}


def task_loss(task: str, p: torch.Tensor, y: torch.Tensor) -> LossValue:
    """Unit-weighted sum of the task's loss terms, with a per-term breakdown."""
    if task not in TASK_LOSSES:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASK_LOSSES)}")
    total = None
    terms = {}
    fallback = False
    for name in TASK_LOSSES[task]:
        if name == "balanced_bce":
            fallback = not balance_weight(y)[1]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", BalancedBCEFallback)
                term = balanced_bce_loss(p, y)
        else:
            term = _LOSS_FNS[name](p, y)
        terms[name] = float(term.detach())
        total = term if total is None else total + term
    return LossValue(total, terms, fallback)
