"""Datasets: fundus image/mask folders, MRI volumes and a synthetic domain shift.

Adaptation code only ever receives an :class:`UnlabeledView`, which holds
images and ids but no reference to the labels of the dataset it came from.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, DatasetError, ShapeError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".gif", ".ppm")
MODALITIES = ("FLAIR", "T1", "T1ce", "T2")
BRATS_LABEL_MAP = {0: 0, 1: 1, 2: 2, 4: 3}


@dataclass
class SegSample:
    """One image with an optional label.

    ``image`` is ``(C, *spatial)`` float32 in [0, 1]; ``label`` is a
    ``(*spatial)`` integer map (binary mask or class indices) or ``None``.
    """

    image: np.ndarray
    label: Optional[np.ndarray]
    id: str


class SegDataset:
    """An ordered, read-only collection of samples."""

    def __init__(self, samples: Sequence, name: str = "dataset"):
        self.samples = list(samples)
        self.name = name

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.samples]

    @property
    def labeled(self) -> bool:
        return len(self.samples) > 0 and all(s.label is not None for s in self.samples)

    def images(self, idx=None) -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        return np.stack([self.samples[i].image for i in idx])

    def labels(self, idx=None) -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        out = []
        for i in idx:
            label = self.samples[i].label
            if label is None:
                raise DatasetError(f"sample {self.samples[i].id!r} of {self.name!r} has no label")
            out.append(label)
        return np.stack(out)

    def unlabeled(self) -> "UnlabeledView":
        return UnlabeledView([s.image for s in self.samples], [s.id for s in self.samples], self.name)

    def subset(self, idx, name=None) -> "SegDataset":
        return SegDataset([self.samples[i] for i in idx], name or self.name)

    def split(self, fraction: float, seed: int = 0) -> Tuple["SegDataset", "SegDataset"]:
        """Shuffle with ``seed`` and split off ``fraction`` of the samples."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_second = int(round(fraction * len(self)))
        first, second = order[: len(self) - n_second], order[len(self) - n_second:]
        return self.subset(sorted(first), f"{self.name}-train"), self.subset(sorted(second), f"{self.name}-val")


class UnlabeledView:
    """Images of a dataset with the labels stripped; the only input adaptation accepts."""

    def __init__(self, images: Sequence[np.ndarray], ids: Sequence[str], name: str = "dataset"):
        self._images = [np.asarray(im, dtype=np.float32) for im in images]
        self.ids = list(ids)
        self.name = name

    def __len__(self):
        return len(self._images)

    def images(self, idx=None) -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        return np.stack([self._images[i] for i in idx])

    @classmethod
    def from_array(cls, images, name="array"):
        images = np.asarray(images, dtype=np.float32)
        return cls(list(images), [f"{name}-{i}" for i in range(len(images))], name)


def iter_batches(n: int, batch_size: int, seed: Optional[int] = None) -> Iterator[np.ndarray]:
    """Index batches over ``range(n)``; shuffled deterministically when ``seed`` is given."""
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def random_crop(images: np.ndarray, labels: Optional[np.ndarray], size: Sequence[int], rng: np.random.Generator):
    """Crop the same random window from every image (and label) of a batch."""
    spatial = images.shape[2:]
    size = [min(s, d) for s, d in zip(size, spatial)]
    starts = [int(rng.integers(0, d - s + 1)) for s, d in zip(size, spatial)]
    window = tuple(slice(a, a + s) for a, s in zip(starts, size))
    images = images[(slice(None), slice(None)) + window]
    if labels is not None:
        labels = labels[(slice(None),) + window]
    return images, labels


# ---------------------------------------------------------------- fundus


def _load_raster(path: Path, size: Optional[int], mask: bool):
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L" if mask else "RGB")
        if size is not None:
            im = im.resize((size, size), Image.NEAREST if mask else Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if mask:
        return arr
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _index_rasters(folder: Path) -> Dict[str, Path]:
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_fundus(directory, image_size: Optional[int] = 512, labeled: bool = True, mask_threshold: float = 0.5) -> SegDataset:
    """Load ``images/`` and ``masks/`` with matching file stems.

    Images become RGB float arrays in [0, 1], resized bilinearly to
    ``image_size``; masks are resized nearest-neighbour and binarized at
    ``mask_threshold``.  With ``labeled=False`` masks are optional.
    """
    directory = Path(directory)
    image_dir, mask_dir = directory / "images", directory / "masks"
    if not image_dir.is_dir():
        raise DatasetError(f"{directory}: missing images/ directory")
    images = _index_rasters(image_dir)
    if not images:
        raise DatasetError(f"{image_dir}: no images found")
    masks = _index_rasters(mask_dir) if mask_dir.is_dir() else {}
    if labeled:
        missing = [stem for stem in images if stem not in masks]
        if missing:
            raise DatasetError(f"{directory}: no mask for image(s) {', '.join(missing)}")
    samples = []
    for stem, path in images.items():
        label = None
        if stem in masks:
            label = (_load_raster(masks[stem], image_size, mask=True) >= mask_threshold).astype(np.uint8)
        samples.append(SegSample(_load_raster(path, image_size, mask=False), label, stem))
    return SegDataset(samples, directory.name)


# ---------------------------------------------------------------- volumes


def normalize_volume(volume: np.ndarray) -> np.ndarray:
    """Z-score then min-max scale a volume to [0, 1]; constant volumes become zeros."""
    v = volume.astype(np.float64)
    std = v.std()
    v = (v - v.mean()) / std if std > 0 else np.zeros_like(v)
    span = v.max() - v.min()
    v = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    return v.astype(np.float32)


def remap_labels(label: np.ndarray, mapping: Dict[int, int] = BRATS_LABEL_MAP, source: str = "label") -> np.ndarray:
    values = np.unique(label)
    unexpected = [int(v) for v in values if int(v) not in mapping or v != int(v)]
    if unexpected:
        raise DatasetError(f"{source}: unexpected label value(s) {unexpected}; expected {sorted(mapping)}")
    lut = np.zeros(max(mapping) + 1, dtype=np.uint8)
    for k, v in mapping.items():
        lut[k] = v
    return lut[label.astype(np.int64)]


def save_volume(array: np.ndarray, path, affine=None):
    import nibabel as nib

    nib.save(nib.Nifti1Image(np.asarray(array), np.eye(4) if affine is None else affine), str(path))


def read_volume(path) -> np.ndarray:
    import nibabel as nib

    return np.asarray(nib.load(str(path)).dataobj)


def _find_volume(case_dir: Path, case: str, key: str) -> Optional[Path]:
    for suffix in (".nii.gz", ".nii"):
        for name in (f"{case}_{key}{suffix}", f"{case}_{key.lower()}{suffix}"):
            if (case_dir / name).exists():
                return case_dir / name
    return None


def load_volumes(directory, modality="T2", labeled: bool = True, label_map: Dict[int, int] = None) -> SegDataset:
    """Load a BraTS-style folder: ``<case>/<case>_<MODALITY>.nii.gz`` plus ``<case>_seg.nii.gz``.

    ``modality`` is a name, a list of names, or ``"all"``; each selected
    modality becomes one channel.  Labels are remapped to contiguous class
    indices (``{0,1,2,4} -> {0,1,2,3}`` by default).
    """
    label_map = BRATS_LABEL_MAP if label_map is None else {int(k): int(v) for k, v in label_map.items()}
    mods = list(MODALITIES) if modality == "all" else ([modality] if isinstance(modality, str) else list(modality))
    unknown = [m for m in mods if m not in MODALITIES]
    if unknown:
        raise ConfigError(f"unknown modality {unknown}; choose from {MODALITIES}")
    directory = Path(directory)
    cases = sorted(p for p in directory.iterdir() if p.is_dir()) if directory.is_dir() else []
    if not cases:
        raise DatasetError(f"{directory}: no case folders found")
    samples, problems = [], []
    for case_dir in cases:
        case = case_dir.name
        channels = []
        for m in mods:
            path = _find_volume(case_dir, case, m)
            if path is None:
                problems.append(f"{case}: missing {m} volume")
                continue
            channels.append(normalize_volume(read_volume(path)))
        label = None
        seg = _find_volume(case_dir, case, "seg")
        if seg is not None:
            label = remap_labels(read_volume(seg), label_map, source=str(seg))
        elif labeled:
            problems.append(f"{case}: missing seg volume")
        if len(channels) != len(mods):
            continue
        shapes = {c.shape for c in channels} | ({label.shape} if label is not None else set())
        if len(shapes) != 1:
            raise ShapeError(f"{case}: modality/label dimensions disagree: {sorted(shapes)}")
        samples.append(SegSample(np.stack(channels), label, case))
    if problems:
        raise DatasetError(f"{directory}: " + "; ".join(problems))
    return SegDataset(samples, directory.name)


# ---------------------------------------------------------------- synthetic shift


@dataclass(frozen=True)
class SynthShiftSpec:
    """Parameters of the synthetic source/target pair.

    Both domains share the geometry distribution; the target applies a
    contrast scale about the image mean, an additive intensity shift and
    Gaussian noise on top of the source rendering.
    """

    n_samples: int = 200
    image_size: int = 64
    shape_family: str = "ellipses"
    intensity_shift: float = 0.3
    contrast_scale: float = 0.6
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        errors = []
        if self.n_samples < 1:
            errors.append("synthetic.n_samples must be >= 1")
        if self.image_size < 8:
            errors.append("synthetic.image_size must be >= 8")
        if self.shape_family not in ("ellipses", "blobs"):
            errors.append(f"synthetic.shape_family must be 'ellipses' or 'blobs', got {self.shape_family!r}")
        if self.contrast_scale <= 0:
            errors.append("synthetic.contrast_scale must be > 0")
        if self.noise_sigma < 0:
            errors.append("synthetic.noise_sigma must be >= 0")
        return errors


def _smooth_field(rng, size, scale):
    coarse = rng.normal(size=(scale, scale))
    reps = int(np.ceil(size / scale))
    field = np.kron(coarse, np.ones((reps, reps)))[:size, :size]
    k = np.ones(reps) / reps
    field = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 0, field)
    field = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, field)
    return field / (np.abs(field).max() + 1e-8)


def _render_mask(rng, size, family):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        ry, rx = rng.uniform(0.08, 0.2, size=2) * size
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        r = (u / ry) ** 2 + (v / rx) ** 2
        if family == "blobs":
            angle = np.arctan2(v, u)
            r = r * (1 + 0.25 * np.sin(rng.integers(2, 5) * angle + rng.uniform(0, 2 * np.pi)))
        mask |= r <= 1.0
    return mask


LUMA = np.array([0.299, 0.587, 0.114])
SOURCE_BG = np.array([0.40, 0.30, 0.20])
SOURCE_FG = np.array([0.60, 0.45, 0.30])


def render_source(spec: SynthShiftSpec, sub_seed: int) -> SegSample:
    """Render one source-domain RGB image and its mask.

    Each image gets its own saturation (down to grayscale), contrast
    (x0.85 to x1.15 about the mean) and brightness offset (+-0.3), so the
    source model keys on local structure rather than on absolute colour.
    """
    rng = np.random.default_rng(sub_seed)
    size = spec.image_size
    mask = _render_mask(rng, size, spec.shape_family)
    texture = 0.08 * _smooth_field(rng, size, 6)
    image = np.where(mask[None], SOURCE_FG[:, None, None], SOURCE_BG[:, None, None]) + texture[None]
    gray = np.tensordot(LUMA, image, 1)[None]
    image = gray + (image - gray) * rng.uniform(0.0, 1.0)
    mean = image.mean()
    image = mean + (image - mean) * rng.uniform(0.85, 1.15) + rng.uniform(-0.3, 0.3)
    image = image + rng.normal(0, 0.02, size=image.shape)
    return SegSample(np.clip(image, 0, 1).astype(np.float32), mask.astype(np.uint8), f"src-{sub_seed}")


def shift_sample(sample: SegSample, spec: SynthShiftSpec, noise_seed: int) -> SegSample:
    """Apply the target-domain intensity shift to a rendered sample."""
    image = sample.image.astype(np.float64)
    mean = image.mean()
    shifted = mean + (image - mean) * spec.contrast_scale + spec.intensity_shift
    if spec.noise_sigma > 0:
        shifted = shifted + np.random.default_rng(noise_seed).normal(0, spec.noise_sigma, size=image.shape)
    return SegSample(np.clip(shifted, 0, 1).astype(np.float32), sample.label, sample.id)


def synth_sample(spec: SynthShiftSpec, sub_seed: int, domain: str) -> SegSample:
    sample = render_source(spec, sub_seed)
    if domain == "source":
        return sample
    out = shift_sample(sample, spec, sub_seed ^ 0x7A7)
    return dataclasses.replace(out, id=f"tgt-{sub_seed}")


def synth_shift(spec: SynthShiftSpec) -> Tuple[SegDataset, SegDataset]:
    """Seeded synthetic source and target datasets, both with ground truth.

    Target labels exist for evaluation only; adaptation sees them through
    :meth:`SegDataset.unlabeled`, which drops them.
    """
    errors = spec.validate()
    if errors:
        raise ConfigError("; ".join(errors), errors)
    seeds = np.random.SeedSequence(spec.seed).spawn(2)
    src_seeds = seeds[0].generate_state(spec.n_samples)
    tgt_seeds = seeds[1].generate_state(spec.n_samples)
    source = SegDataset([synth_sample(spec, int(s), "source") for s in src_seeds], "synthetic-source")
    target = SegDataset([synth_sample(spec, int(s), "target") for s in tgt_seeds], "synthetic-target")
    return source, target
