"""Segmentation loss, per-element entropy and ensemble entropy loss.

Probability maps follow the ``(N, C, *spatial)`` layout produced by
:class:`ttsfuda.models.UNet`: ``C == 1`` is a foreground-probability map,
``C > 1`` holds per-class probabilities.  Logarithms are natural, so
entropies are in nats.
"""

from __future__ import annotations

from typing import Sequence

import torch

from .exceptions import ConfigError, ShapeError

PROB_EPS = 1e-7
DICE_SMOOTH = 1.0
_RANGE_TOL = 1e-6


def _check_probs(pred: torch.Tensor):
    lo, hi = float(pred.detach().min()), float(pred.detach().max())
    if lo < -_RANGE_TOL or hi > 1 + _RANGE_TOL:
        raise ValueError(f"probabilities must lie in [0, 1], got range [{lo:.6g}, {hi:.6g}]")


def soft_dice(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Per-sample soft Dice coefficient, reduced over every non-batch axis."""
    dims = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(dims)
    return (2 * inter + smooth) / (pred.sum(dims) + target.sum(dims) + smooth)


def seg_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = PROB_EPS, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """``0.5 * BCE + (1 - soft Dice)`` for binary maps.

    For a multi-class ``pred`` (``C > 1``) ``target`` is an integer class map
    of shape ``(N, *spatial)``; cross-entropy replaces BCE and the Dice term
    is averaged over the foreground classes.
    """
    _check_probs(pred)
    if pred.shape[1] == 1:
        if target.shape != pred.shape:
            raise ShapeError(f"target shape {tuple(target.shape)} does not match prediction {tuple(pred.shape)}")
        target = target.to(pred.dtype)
        p = pred.clamp(eps, 1 - eps)
        bce = -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()
        dice = soft_dice(pred, target, smooth).mean()
        return 0.5 * bce + (1 - dice)

    n_classes = pred.shape[1]
    if target.shape != pred.shape[:1] + pred.shape[2:]:
        raise ShapeError(f"class map shape {tuple(target.shape)} does not match prediction {tuple(pred.shape)}")
    target = target.long()
    if int(target.min()) < 0 or int(target.max()) >= n_classes:
        raise ValueError(f"class indices must lie in [0, {n_classes}), got [{int(target.min())}, {int(target.max())}]")
    onehot = torch.nn.functional.one_hot(target, n_classes).movedim(-1, 1).to(pred.dtype)
    p = pred.clamp(eps, 1.0)
    ce = -(onehot * torch.log(p)).sum(1).mean()
    dices = [soft_dice(pred[:, c:c + 1], onehot[:, c:c + 1], smooth).mean() for c in range(1, n_classes)]
    return 0.5 * ce + (1 - torch.stack(dices).mean())


def _xlogx(p: torch.Tensor, eps: float) -> torch.Tensor:
    # floor only the log argument: exact 0*log(0) = 0 and finite gradients at p in {0, 1}
    return p * torch.log(p.clamp_min(eps))


def entropy_map(pred: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    """Per-element Shannon entropy (nats) of a probability map.

    Binary maps (``C == 1``) use ``-(p ln p + (1-p) ln(1-p))``; multi-class
    maps use ``-sum_c p_c ln p_c``.  The result always has a single channel.
    """
    if pred.ndim < 2:
        raise ShapeError(f"expected an (N, C, ...) probability map, got shape {tuple(pred.shape)}")
    if pred.shape[1] == 1:
        return -(_xlogx(pred, eps) + _xlogx(1 - pred, eps))
    return -_xlogx(pred, eps).sum(1, keepdim=True)


def ensemble_entropy_loss(h_orig: torch.Tensor, h_augs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over elements of ``H(orig) + mean_j H(aug_j)``.

    The mean runs over every element of the batch, which for a single image is
    the ``1 / (H*W)`` normalization (``1 / (D*H*W)`` for volumes).
    """
    h_augs = list(h_augs)
    if not h_augs:
        raise ConfigError("ensemble entropy loss needs at least one augmented entropy map (M >= 1)")
    for h in h_augs:
        if h.shape != h_orig.shape:
            raise ShapeError(f"augmented entropy map shape {tuple(h.shape)} differs from {tuple(h_orig.shape)}")
    return (h_orig + torch.stack(h_augs).mean(0)).mean()


def aug_consistency_loss(teacher_latent: torch.Tensor, student_latent: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between teacher and student latent features."""
    if teacher_latent.shape != student_latent.shape:
        raise ShapeError(
            f"latent shapes differ: teacher {tuple(teacher_latent.shape)} vs student {tuple(student_latent.shape)}"
        )
    return ((teacher_latent - student_latent) ** 2).mean()
