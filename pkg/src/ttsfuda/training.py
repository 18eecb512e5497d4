"""Optimizer construction and small helpers shared by the training loops."""

from __future__ import annotations

import logging
import math

import numpy as np
import torch

from .exceptions import TrainingDivergedError

logger = logging.getLogger(__name__)


def make_optimizer(params, cfg, total_steps: int = 1):
    """Build the optimizer (and a per-step scheduler or None) from an OptimConfig.

    ``momentum`` is Adam's first-moment decay; for SGD it is the classic
    momentum term.  The cosine schedule anneals from ``lr`` to ``min_lr`` over
    ``total_steps`` optimizer steps.
    """
    params = [p for p in params if p.requires_grad]
    if cfg.name == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.momentum, cfg.beta2), weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = None
    if cfg.scheduler == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1), eta_min=min(cfg.min_lr, cfg.lr))
    return opt, sched


def check_finite(loss: torch.Tensor, where: str, step: int):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{where}: loss became {loss.item()} at step {step}; aborting")


def to_tensor(array, device="cpu", dtype=torch.float32):
    return torch.as_tensor(np.ascontiguousarray(array), dtype=dtype, device=device)


def seed_everything(seed: int):
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def n_batches(n: int, batch_size: int) -> int:
    return int(math.ceil(n / batch_size))
