"""Task-specific adaptation: EMA teacher-student self-training with latent consistency.

The teacher sees the strongly augmented batch, the student the weakly
augmented one (``swap_aug_routing`` reverses this).  The student is
supervised by the binarized teacher prediction plus the mean squared
difference of the two networks' deepest encoder features; the teacher
follows the student by an exponential moving average after every optimizer
step and is the network returned at the end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .augment import apply_strong, apply_weak, derive_seed
from .config import AdaptConfig
from .data import UnlabeledView, iter_batches, random_crop
from .exceptions import ConfigError, DatasetError
from .losses import aug_consistency_loss, seg_loss
from .models import UNet, clone_model
from .training import check_finite, make_optimizer, n_batches, to_tensor

__all__ = ["TeacherStudentPair", "ema_update", "aug_consistency_loss", "pseudo_labels", "adapt_stage2"]

logger = logging.getLogger(__name__)


@dataclass
class TeacherStudentPair:
    teacher: UNet
    student: UNet
    ema_rate: float = 0.99
    ema_updates: int = 0

    def __post_init__(self):
        if self.teacher.arch != self.student.arch:
            raise ConfigError(f"teacher and student architectures differ: {self.teacher.arch} vs {self.student.arch}")
        if not 0 <= self.ema_rate <= 1:
            raise ConfigError(f"ema_rate must lie in [0, 1], got {self.ema_rate}")

    @classmethod
    def from_model(cls, init: UNet, ema_rate: float = 0.99) -> "TeacherStudentPair":
        teacher, student = clone_model(init), clone_model(init)
        for p in teacher.parameters():
            p.requires_grad_(False)
        return cls(teacher, student, ema_rate)


@torch.no_grad()
def ema_update(pair: TeacherStudentPair) -> TeacherStudentPair:
    """``teacher <- rate * teacher + (1 - rate) * student``, parameter-wise, in place."""
    if pair.teacher.arch != pair.student.arch:
        raise ConfigError("EMA update needs identical teacher and student architectures")
    rate = pair.ema_rate
    t_state = pair.teacher.state_dict()
    for name, s in pair.student.state_dict().items():
        t = t_state[name]
        if t.dtype.is_floating_point:
            t.mul_(rate).add_(s.detach(), alpha=1.0 - rate)
        else:
            t.copy_(s)
    pair.ema_updates += 1
    return pair


def pseudo_labels(probs: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Hard labels from teacher probabilities: threshold (binary) or argmax (multi-class)."""
    if probs.shape[1] == 1:
        return (probs >= threshold).to(probs.dtype)
    return probs.argmax(1)


def adapt_stage2(
    init: UNet,
    target_data: UnlabeledView,
    cfg: AdaptConfig,
    history: Optional[list] = None,
    pair: Optional[TeacherStudentPair] = None,
) -> UNet:
    """Self-train on the unlabeled target images and return the final teacher."""
    if not isinstance(target_data, UnlabeledView):
        raise TypeError("adaptation accepts only an UnlabeledView of the target data (call dataset.unlabeled())")
    if len(target_data) == 0:
        raise DatasetError("stage 2: target dataset is empty")
    s2 = cfg.stage2
    device = cfg.device
    dims = init.arch.dims
    strong_specs, weak_specs = s2.tier_specs("strong", dims), s2.tier_specs("weak", dims)
    if pair is None:
        pair = TeacherStudentPair.from_model(init.to(device), s2.ema_rate)
    teacher, student = pair.teacher, pair.student
    teacher.eval()
    student.train()
    steps = s2.epochs * n_batches(len(target_data), cfg.batch_size)
    opt, sched = make_optimizer(student.parameters(), cfg.optimizer, steps)
    crop_rng = np.random.default_rng(derive_seed(cfg.seed, 21))
    crop = cfg.data.crop_size if dims == 3 else None

    step = 0
    for epoch in range(s2.epochs):
        for b, idx in enumerate(iter_batches(len(target_data), cfg.batch_size, derive_seed(cfg.seed, 3, epoch))):
            images = target_data.images(idx)
            if crop is not None:
                images = random_crop(images, None, crop, crop_rng)[0]
            x = to_tensor(images, device)
            aug_seed = derive_seed(cfg.seed, 4, epoch, b)
            strong = apply_strong(x, aug_seed, strong_specs)
            weak = apply_weak(x, aug_seed, weak_specs)
            x_teacher, x_student = (weak, strong) if s2.swap_aug_routing else (strong, weak)
            with torch.no_grad():
                t_probs, t_latent = teacher(x_teacher)
            s_probs, s_latent = student(x_student)
            sup = seg_loss(s_probs, pseudo_labels(t_probs, s2.pseudo_threshold))
            cons = aug_consistency_loss(t_latent, s_latent)
            loss = sup + s2.consistency_weight * cons
            check_finite(loss, "stage 2", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            student.step_count += 1
            ema_update(pair)
            teacher.step_count += 1
            step += 1
            if history is not None:
                history.append({"stage": "stage2", "epoch": epoch, "step": step, "seg": sup.item(), "ac": cons.item(), "loss": loss.item()})
        logger.info("stage 2 epoch %d done (%d steps)", epoch + 1, step)
    for p in teacher.parameters():
        p.requires_grad_(True)
    return teacher
