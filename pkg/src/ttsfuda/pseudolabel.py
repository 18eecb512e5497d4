"""Target-specific adaptation: selective-voting pseudo-labels and ensemble entropy training.

The frozen source network labels each target batch and its augmented
views.  Entropy maps of those predictions are fused into a normalized map
``H_S``; thresholding it gives the selective mask ``Z``, the uncertain
probability band gives the false-negative mask ``U``, and the enhanced
pseudo-label is ``binarize(p) | (Z & U)``.  A copy of the source network is
then trained on the enhanced labels plus the ensemble entropy loss.

All kernels take tensors whose leading axis is the batch; per-image
operations (the delta selection and min-max normalization) reduce over the
remaining axes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .augment import AugSpec, derive_seed, ensemble
from .config import AdaptConfig, SelectiveVoteConfig
from .data import UnlabeledView, iter_batches, random_crop
from .exceptions import ConfigError, DatasetError, ShapeError
from .losses import ensemble_entropy_loss, entropy_map, seg_loss
from .models import UNet, clone_model
from .training import check_finite, make_optimizer, n_batches, to_tensor

logger = logging.getLogger(__name__)


def _per_image(x: torch.Tensor, op):
    return op(x.reshape(x.shape[0], -1), dim=1).view(-1, *([1] * (x.ndim - 1)))


def minmax_normalize(h: torch.Tensor) -> torch.Tensor:
    """Scale every image of ``h`` to [0, 1]; constant images map to zeros."""
    lo = _per_image(h, lambda v, dim: v.min(dim=dim).values)
    hi = _per_image(h, lambda v, dim: v.max(dim=dim).values)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (h - lo) / safe, torch.zeros_like(h))


def fuse_entropy(h_orig: torch.Tensor, h_augs: Sequence[torch.Tensor], alpha: float, delta: float) -> torch.Tensor:
    """Fused, normalized entropy map ``Norm(alpha*H + (1-alpha)*H_aug)``.

    ``H_aug`` is the element-wise mean of the augmented maps whose mean
    entropy (per image) is at least ``delta``; when no map of an image
    passes, all of its augmented maps are averaged.
    """
    h_augs = list(h_augs)
    if not h_augs:
        return minmax_normalize(h_orig)
    for h in h_augs:
        if h.shape != h_orig.shape:
            raise ShapeError(f"entropy map shape {tuple(h.shape)} differs from {tuple(h_orig.shape)}")
    stack = torch.stack(h_augs)  # (M, N, ...)
    means = stack.reshape(stack.shape[0], stack.shape[1], -1).mean(-1)  # (M, N)
    keep = (means >= delta).to(stack.dtype)
    none_kept = keep.sum(0) == 0
    keep = torch.where(none_kept.unsqueeze(0), torch.ones_like(keep), keep)
    weights = keep.view(*keep.shape, *([1] * (stack.ndim - 2)))
    h_aug = (stack * weights).sum(0) / weights.sum(0)
    return minmax_normalize(alpha * h_orig + (1 - alpha) * h_aug)


def selective_mask(h_s: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """``Z = 1`` where the fused entropy is at least ``threshold``."""
    return (h_s >= threshold).to(h_s.dtype)


def fn_mask(pred: torch.Tensor, lambda1: float, lambda2: float) -> torch.Tensor:
    """``U = 1`` inside the open probability band ``(lambda1, lambda2)``."""
    if not lambda1 < lambda2:
        raise ConfigError(f"fn_mask needs lambda1 < lambda2, got {lambda1}, {lambda2}")
    return ((pred > lambda1) & (pred < lambda2)).to(pred.dtype)


def enhance(pred_bin: torch.Tensor, z: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """``pred_bin | (z & u)``, returned in ``pred_bin``'s dtype."""
    if not pred_bin.shape == z.shape == u.shape:
        raise ShapeError(f"mask shapes differ: {tuple(pred_bin.shape)}, {tuple(z.shape)}, {tuple(u.shape)}")
    return (pred_bin.bool() | (z.bool() & u.bool())).to(pred_bin.dtype)


@dataclass
class PseudoLabelBundle:
    """Intermediate maps of one selective-voting pass.

    For binary networks every field is ``(N, 1, *spatial)``.  For multi-class
    networks the per-class fields hold one channel per foreground class and
    ``enhanced`` is an ``(N, *spatial)`` class-index map.
    """

    base_pred: torch.Tensor
    aug_preds: List[torch.Tensor]
    enhanced: torch.Tensor
    selective_mask: torch.Tensor
    fn_mask: torch.Tensor
    fused_entropy: torch.Tensor


def _vote_binary(p, p_augs, cfg: SelectiveVoteConfig):
    h_s = fuse_entropy(entropy_map(p), [entropy_map(q) for q in p_augs], cfg.alpha, cfg.delta)
    z = selective_mask(h_s)
    u = fn_mask(p, cfg.lambda1, cfg.lambda2)
    return h_s, z, u


def vote(base: torch.Tensor, aug_preds: Sequence[torch.Tensor], cfg: SelectiveVoteConfig, use_enhance: bool = True) -> PseudoLabelBundle:
    """Run selective voting on precomputed probability maps."""
    aug_preds = list(aug_preds)
    if base.shape[1] == 1:
        h_s, z, u = _vote_binary(base, aug_preds, cfg)
        pred_bin = (base >= cfg.binarize_threshold).to(base.dtype)
        enhanced = enhance(pred_bin, z, u) if use_enhance else pred_bin
        return PseudoLabelBundle(base, aug_preds, enhanced, z, u, h_s)

    # one-vs-rest per foreground class on its probability channel
    hs, zs, us = [], [], []
    for c in range(1, base.shape[1]):
        h_s, z, u = _vote_binary(base[:, c:c + 1], [q[:, c:c + 1] for q in aug_preds], cfg)
        hs.append(h_s)
        zs.append(z)
        us.append(u)
    h_s, z, u = torch.cat(hs, 1), torch.cat(zs, 1), torch.cat(us, 1)
    labels = base.argmax(1)
    if use_enhance:
        flip = (z * u).bool() & (labels == 0).unsqueeze(1)
        score = torch.where(flip, base[:, 1:], torch.full_like(base[:, 1:], -1.0))
        best = score.max(1)
        labels = torch.where(best.values >= 0, best.indices + 1, labels)
    return PseudoLabelBundle(base, aug_preds, labels, z, u, h_s)


def generate_bundle(
    source: UNet,
    x: torch.Tensor,
    augs: Sequence[AugSpec],
    cfg: SelectiveVoteConfig,
    seed: int = 0,
    views: Optional[Sequence[torch.Tensor]] = None,
    use_enhance: bool = True,
) -> PseudoLabelBundle:
    """Pseudo-label ``x`` with the frozen ``source`` network and selective voting.

    ``views`` may pass precomputed augmented inputs; otherwise they are drawn
    from ``augs`` with ``seed``.
    """
    if views is None:
        views = ensemble(x, augs, seed)
    elif not views:
        raise ConfigError("the ensemble augmentation set is empty (M >= 1 required)")
    was_training = source.training
    source.eval()
    try:
        with torch.no_grad():
            probs, _ = source(torch.cat([x, *views]))
    finally:
        source.train(was_training)
    chunks = list(probs.split(x.shape[0]))
    return vote(chunks[0], chunks[1:], cfg, use_enhance)


def _crop(images, crop_size, rng):
    if crop_size is None:
        return images
    return random_crop(images, None, crop_size, rng)[0]


def adapt_stage1(
    source: UNet,
    target_data: UnlabeledView,
    cfg: AdaptConfig,
    history: Optional[list] = None,
) -> UNet:
    """Train a copy of ``source`` on the unlabeled target images.

    Per batch the loss is ``seg_loss(p, enhanced pseudo-label) +
    eem_weight * L_EEM`` where ``p`` and the augmented-view predictions come
    from the trainable copy; the source network itself is never updated.
    Returns the adapted network with ``step_count`` advanced by one per batch.
    """
    if not isinstance(target_data, UnlabeledView):
        raise TypeError("adaptation accepts only an UnlabeledView of the target data (call dataset.unlabeled())")
    if len(target_data) == 0:
        raise DatasetError("stage 1: target dataset is empty")
    s1 = cfg.stage1
    device = cfg.device
    specs = s1.ensemble_specs(source.arch.dims)
    source = source.to(device)
    for p in source.parameters():
        p.requires_grad_(False)
    model = clone_model(source)
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()
    steps = s1.epochs * n_batches(len(target_data), cfg.batch_size)
    opt, sched = make_optimizer(model.parameters(), cfg.optimizer, steps)
    crop_rng = np.random.default_rng(derive_seed(cfg.seed, 11))
    crop = cfg.data.crop_size if source.arch.dims == 3 else None

    step = 0
    for epoch in range(s1.epochs):
        for b, idx in enumerate(iter_batches(len(target_data), cfg.batch_size, derive_seed(cfg.seed, 1, epoch))):
            x = to_tensor(_crop(target_data.images(idx), crop, crop_rng), device)
            views = ensemble(x, specs, derive_seed(cfg.seed, 2, epoch, b))
            bundle = generate_bundle(source, x, specs, s1, views=views, use_enhance=s1.enhance)
            probs, _ = model(torch.cat([x, *views]))
            chunks = probs.split(x.shape[0])
            sup = seg_loss(chunks[0], bundle.enhanced)
            eem = ensemble_entropy_loss(entropy_map(chunks[0]), [entropy_map(q) for q in chunks[1:]])
            loss = sup + s1.eem_weight * eem
            check_finite(loss, "stage 1", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            model.step_count += 1
            step += 1
            if history is not None:
                history.append({"stage": "stage1", "epoch": epoch, "step": step, "seg": sup.item(), "eem": eem.item(), "loss": loss.item()})
        logger.info("stage 1 epoch %d done (%d steps)", epoch + 1, step)
    for p in source.parameters():
        p.requires_grad_(True)
    return model


def dump_bundle_png(bundle: PseudoLabelBundle, directory, ids: Sequence[str], channel: int = 0):
    """Write one PNG per sample with panels p, H_S, Z, U and the enhanced label.

    Volumes are shown at their middle slice along the first spatial axis.
    For multi-class bundles ``channel`` selects the foreground class.
    """
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    multiclass = bundle.base_pred.shape[1] > 1
    paths = []
    for i, sid in enumerate(ids):
        if multiclass:
            p = bundle.base_pred[i, channel + 1]
            enhanced = (bundle.enhanced[i] == channel + 1).float()
        else:
            p = bundle.base_pred[i, 0]
            enhanced = bundle.enhanced[i, 0]
        panels = [p, bundle.fused_entropy[i, channel], bundle.selective_mask[i, channel], bundle.fn_mask[i, channel], enhanced]
        panels = [t.detach().cpu().float().numpy() for t in panels]
        if panels[0].ndim == 3:
            mid = panels[0].shape[0] // 2
            panels = [a[mid] for a in panels]
        sep = np.ones((panels[0].shape[0], 2), dtype=np.float32)
        row = np.concatenate(sum(([a, sep] for a in panels), [])[:-1], axis=1)
        path = directory / f"{sid}_stage1.png"
        Image.fromarray((np.clip(row, 0, 1) * 255).astype(np.uint8)).save(path)
        paths.append(path)
    return paths
