"""Dice evaluation, BraTS region composition and evaluation reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .data import SegDataset
from .exceptions import DatasetError, ShapeError
from .models import UNet, predict_volume
from .training import to_tensor

REGIONS = ("WT", "TC", "ET")


def dice(pred, gt) -> float:
    """Dice overlap ``2|P & G| / (|P| + |G|)`` of two binary masks; 1.0 when both are empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if m.size and not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    p, g = pred.astype(bool), gt.astype(bool)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


def brats_regions(label) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Whole tumor {1,2,3}, tumor core {1,3} and enhancing tumor {3} masks of a remapped label map."""
    label = np.asarray(label)
    bad = np.setdiff1d(np.unique(label), [0, 1, 2, 3])
    if bad.size:
        raise ValueError(f"class indices outside {{0,1,2,3}}: {bad.tolist()}")
    wt = np.isin(label, (1, 2, 3)).astype(np.uint8)
    tc = np.isin(label, (1, 3)).astype(np.uint8)
    et = (label == 3).astype(np.uint8)
    return wt, tc, et


@dataclass
class EvalReport:
    """Per-sample Dice scores with their aggregate and run metadata."""

    per_sample: List[Tuple[str, Dict[str, float]]]
    aggregate: Dict[str, Dict[str, float]]
    meta: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_scores(cls, per_sample, meta=None, pooled=None):
        keys = list(per_sample[0][1]) if per_sample else []
        aggregate = {}
        for k in keys:
            vals = np.array([s[k] for _, s in per_sample], dtype=np.float64)
            aggregate[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
            if pooled is not None:
                aggregate[k]["pooled"] = float(pooled[k])
        return cls(list(per_sample), aggregate, dict(meta or {}))

    def mean(self, key: Optional[str] = None) -> float:
        key = key or next(iter(self.aggregate))
        return self.aggregate[key]["mean"]

    def to_dict(self):
        return {
            "meta": self.meta,
            "aggregate": self.aggregate,
            "per_sample": [{"id": sid, **scores} for sid, scores in self.per_sample],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "region", "dice"])
        for sid, scores in self.per_sample:
            for region, value in scores.items():
                writer.writerow([sid, region, f"{value:.6f}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path_or_text):
        text = str(path_or_text)
        if not text.lstrip().startswith("{"):
            text = Path(path_or_text).read_text()
        data = json.loads(text)
        per_sample = [(row.pop("id"), row) for row in data["per_sample"]]
        return cls(per_sample, data["aggregate"], data.get("meta", {}))


def predict_probs(model: UNet, images: np.ndarray, batch_size: int = 8, roi=None, device="cpu") -> np.ndarray:
    """Probabilities for a stack of images; volumes go through sliding windows when ``roi`` is set."""
    model = model.to(device)
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            if model.arch.dims == 3 and roi is not None:
                for im in images:
                    out.append(predict_volume(model, im, roi).cpu().numpy())
                return np.stack(out)
            for start in range(0, len(images), batch_size):
                probs, _ = model(to_tensor(images[start:start + batch_size], device))
                out.append(probs.cpu().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out)


def hard_predictions(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if probs.shape[1] == 1:
        return (probs[:, 0] >= threshold).astype(np.uint8)
    return probs.argmax(1).astype(np.uint8)


def score_masks(pred: np.ndarray, gt: np.ndarray, out_classes: int) -> Dict[str, float]:
    if out_classes == 1:
        return {"dice": dice(pred, gt)}
    if out_classes == 4:
        return {name: dice(p, g) for name, p, g in zip(REGIONS, brats_regions(pred), brats_regions(gt))}
    return {f"class{c}": dice(pred == c, gt == c) for c in range(1, out_classes)}


def evaluate(model: UNet, dataset: SegDataset, batch_size: int = 8, roi=None, meta=None, device="cpu") -> EvalReport:
    """Dice of ``model`` on a labeled dataset.

    Binary networks are thresholded at 0.5, multi-class ones use argmax;
    4-class networks are scored on the BraTS WT/TC/ET regions.  The
    aggregate holds the per-image mean and std, plus the pooled Dice over
    all pixels.
    """
    if not isinstance(dataset, SegDataset) or not dataset.labeled:
        raise DatasetError("evaluation needs a labeled SegDataset")
    per_sample = []
    inter: Dict[str, float] = {}
    total: Dict[str, float] = {}
    n_classes = model.arch.out_classes
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        preds = hard_predictions(predict_probs(model, dataset.images(idx), batch_size, roi, device))
        gts = dataset.labels(idx)
        for i, pred, gt in zip(idx, preds, gts):
            per_sample.append((dataset[i].id, score_masks(pred, gt, n_classes)))
            for key, p, g in _region_pairs(pred, gt, n_classes):
                inter[key] = inter.get(key, 0.0) + float(np.logical_and(p, g).sum())
                total[key] = total.get(key, 0.0) + float(p.sum() + g.sum())
    pooled = {k: (2 * inter[k] / total[k] if total[k] else 1.0) for k in inter}
    meta = {"dataset": dataset.name, "n_samples": len(dataset), **(meta or {})}
    return EvalReport.from_scores(per_sample, meta, pooled)


def _region_pairs(pred, gt, n_classes):
    if n_classes == 1:
        return [("dice", pred.astype(bool), gt.astype(bool))]
    if n_classes == 4:
        return [(name, p.astype(bool), g.astype(bool)) for name, p, g in zip(REGIONS, brats_regions(pred), brats_regions(gt))]
    return [(f"class{c}", pred == c, gt == c) for c in range(1, n_classes)]
