"""Config-driven experiment runner used by the CLI and the estimators."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import derive_seed
from .config import AdaptConfig
from .data import (
    SegDataset,
    SynthShiftSpec,
    UnlabeledView,
    iter_batches,
    load_fundus,
    load_volumes,
    random_crop,
    synth_shift,
)
from .exceptions import ConfigError, DatasetError
from .losses import seg_loss
from .metrics import EvalReport, evaluate
from .models import UNet, build_model, load_checkpoint, save_checkpoint
from .pseudolabel import adapt_stage1, dump_bundle_png, generate_bundle
from .selftrain import adapt_stage2
from .training import check_finite, make_optimizer, n_batches, seed_everything, to_tensor

logger = logging.getLogger(__name__)

MODES = {
    "stage1": ("stage1",),
    "stage2": ("stage2",),
    "stage1->stage2": ("stage1", "stage2"),
    "stage2->stage1": ("stage2", "stage1"),
}
MODE_ALIASES = {"stage1→stage2": "stage1->stage2", "stage2→stage1": "stage2->stage1", "both": "stage1->stage2"}


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"unknown adaptation mode {mode!r}; choose from {sorted(MODES)}")
    return mode


def train_source(model: UNet, dataset: SegDataset, cfg: AdaptConfig, history: Optional[list] = None) -> UNet:
    """Supervised training of ``model`` on a labeled source dataset with ``seg_loss``."""
    if len(dataset) == 0:
        raise DatasetError("source dataset is empty")
    if not dataset.labeled:
        raise DatasetError("source training needs a labeled dataset")
    device = cfg.device
    model = model.to(device)
    model.train()
    sc = cfg.source
    steps = sc.epochs * n_batches(len(dataset), cfg.batch_size)
    opt, sched = make_optimizer(model.parameters(), sc.optimizer, steps)
    crop_rng = np.random.default_rng(derive_seed(cfg.seed, 31))
    crop = cfg.data.crop_size if model.arch.dims == 3 else None
    step = 0
    for epoch in range(sc.epochs):
        for idx in iter_batches(len(dataset), cfg.batch_size, derive_seed(cfg.seed, 5, epoch)):
            images, labels = dataset.images(idx), dataset.labels(idx)
            if crop is not None:
                images, labels = random_crop(images, labels, crop, crop_rng)
            x = to_tensor(images, device)
            probs, _ = model(x)
            if model.arch.out_classes == 1:
                y = to_tensor(labels[:, None], device)
            else:
                y = to_tensor(labels, device, torch.long)
            loss = seg_loss(probs, y)
            check_finite(loss, "source training", step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            model.step_count += 1
            step += 1
            if history is not None:
                history.append({"stage": "source", "epoch": epoch, "step": step, "loss": loss.item()})
        logger.info("source epoch %d/%d loss %.4f", epoch + 1, sc.epochs, loss.item())
    return model


def adapt(source: UNet, target: UnlabeledView, cfg: AdaptConfig, mode: str = "stage1->stage2", history: Optional[list] = None) -> Dict[str, UNet]:
    """Run the stages of ``mode`` in order; each stage starts from the previous output.

    Returns the network after every stage, keyed by stage name.
    """
    mode = canonical_mode(mode)
    seed_everything(cfg.seed)
    outputs = {}
    current = source
    for stage in MODES[mode]:
        if stage == "stage1":
            current = adapt_stage1(current, target, cfg, history)
        else:
            current = adapt_stage2(current, target, cfg, history)
        outputs[stage] = current
    return outputs


# ------------------------------------------------------------------ data


@dataclass
class ExperimentData:
    source_train: SegDataset
    source_val: Optional[SegDataset]
    target: SegDataset
    target_eval: Optional[SegDataset] = None

    @property
    def target_labeled(self) -> Optional[SegDataset]:
        if self.target_eval is not None:
            return self.target_eval
        return self.target if self.target.labeled else None


def load_data(cfg: AdaptConfig) -> ExperimentData:
    d = cfg.data
    if d.kind == "synthetic":
        s = d.synthetic
        spec = SynthShiftSpec(
            n_samples=max(s.n_source + s.n_source_val, s.n_target),
            image_size=s.image_size,
            shape_family=s.shape_family,
            intensity_shift=s.intensity_shift,
            contrast_scale=s.contrast_scale,
            noise_sigma=s.noise_sigma,
            seed=s.seed,
        )
        source, target = synth_shift(spec)
        src_train = source.subset(range(s.n_source), "synthetic-source")
        src_val = source.subset(range(s.n_source, s.n_source + s.n_source_val), "synthetic-source-val") if s.n_source_val else None
        return ExperimentData(src_train, src_val, target.subset(range(s.n_target), "synthetic-target"))
    if d.kind == "fundus":
        source = load_fundus(d.source_dir, d.image_size, labeled=True)
        target = load_fundus(d.target_dir, d.image_size, labeled=False)
        target_eval = load_fundus(d.target_eval_dir, d.image_size, labeled=True) if d.target_eval_dir else None
    else:
        source = load_volumes(d.source_dir, d.modality_source, labeled=True)
        target = load_volumes(d.target_dir, d.modality_target, labeled=False)
        target_eval = load_volumes(d.target_eval_dir, d.modality_target, labeled=True) if d.target_eval_dir else None
    train, val = source.split(cfg.source.val_fraction, cfg.seed) if cfg.source.val_fraction > 0 else (source, None)
    return ExperimentData(train, val, target, target_eval)


def _roi(cfg: AdaptConfig, model: UNet):
    return cfg.data.roi_size if model.arch.dims == 3 else None


def evaluate_model(model: UNet, dataset: SegDataset, cfg: AdaptConfig, meta=None) -> EvalReport:
    meta = {"config_hash": cfg.config_hash(), **(meta or {})}
    return evaluate(model, dataset, cfg.batch_size, _roi(cfg, model), meta, cfg.device)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------ commands


def run_train_source(cfg: AdaptConfig, data: Optional[ExperimentData] = None) -> Tuple[Path, Optional[EvalReport]]:
    """Train the source network, save ``source.ckpt`` and report on the source validation split."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data or load_data(cfg)
    seed_everything(cfg.seed)
    model = build_model(cfg.arch_spec, cfg.seed)
    train_source(model, data.source_train, cfg)
    ckpt = save_checkpoint(model, out / "source.ckpt")
    report = None
    if data.source_val is not None and data.source_val.labeled:
        report = evaluate_model(model, data.source_val, cfg, {"model": "source", "mode": "source", "checkpoint_sha256": file_hash(ckpt), "config": cfg.to_dict()})
        report.to_json(out / "source_report.json")
        report.to_csv(out / "source_report.csv")
    return ckpt, report


def run_adapt(
    cfg: AdaptConfig,
    mode: str,
    checkpoint=None,
    data: Optional[ExperimentData] = None,
    dump_stage1: Optional[int] = None,
) -> Tuple[Path, Dict[str, EvalReport]]:
    """Adapt the source checkpoint with ``mode``; save the result and per-stage reports."""
    mode = canonical_mode(mode)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = Path(checkpoint) if checkpoint else out / "source.ckpt"
    if not checkpoint.exists():
        raise ConfigError(f"source checkpoint {str(checkpoint)!r} does not exist; run train-source first")
    source = load_checkpoint(checkpoint, expected_dims=cfg.arch_spec.dims)
    data = data or load_data(cfg)
    view = data.target.unlabeled()
    if mode == "stage2->stage1":
        logger.warning("stage2->stage1 is an ablation ordering and is expected to underperform")
    if dump_stage1:
        specs = cfg.stage1.ensemble_specs(source.arch.dims)
        n = min(int(dump_stage1), len(view))
        x = to_tensor(view.images(range(n)), cfg.device)
        bundle = generate_bundle(source.to(cfg.device), x, specs, cfg.stage1, derive_seed(cfg.seed, 99), use_enhance=cfg.stage1.enhance)
        dump_bundle_png(bundle, out / "stage1_dump", view.ids[:n])
    outputs = adapt(source, view, cfg, mode)
    slug = mode.replace("->", "_")
    reports = {}
    labeled = data.target_labeled
    ckpt = None
    for i, (stage, model) in enumerate(outputs.items()):
        ckpt = save_checkpoint(model, out / f"adapt_{slug}_{i + 1}_{stage}.ckpt")
        if labeled is not None:
            meta = {"model": f"{mode}:{stage}", "mode": mode if i == len(outputs) - 1 else f"{mode}:{stage}", "stage": stage,
                    "checkpoint_sha256": file_hash(ckpt), "config": cfg.to_dict()}
            if mode == "stage2->stage1":
                meta["tag"] = "ablation ordering"
            report = evaluate_model(model, labeled, cfg, meta)
            report.to_json(out / f"report_{slug}_{stage}.json")
            report.to_csv(out / f"report_{slug}_{stage}.csv")
            reports[stage] = report
    final = out / f"adapted_{slug}.ckpt"
    final.write_bytes(ckpt.read_bytes())
    return final, reports


def run_evaluate(cfg: AdaptConfig, checkpoint, data: Optional[ExperimentData] = None, which: str = "target", mode: str = "evaluate") -> EvalReport:
    model = load_checkpoint(checkpoint, expected_dims=cfg.arch_spec.dims)
    data = data or load_data(cfg)
    dataset = data.target_labeled if which == "target" else data.source_val
    if dataset is None:
        raise DatasetError(f"no labeled {which} dataset available for evaluation")
    return evaluate_model(model, dataset, cfg, {"model": str(checkpoint), "mode": mode, "checkpoint_sha256": file_hash(checkpoint), "config": cfg.to_dict()})
