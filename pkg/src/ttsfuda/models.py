"""2D/3D UNet used as source, student and teacher network, plus checkpoint I/O.

The network is a plain encoder-decoder: each level runs a conv block
(conv-ReLU, twice by default), the encoder downsamples with max-pooling and
the decoder upsamples with bilinear (2D) or trilinear (3D) interpolation,
concatenating the matching encoder features.  ``forward`` returns the
probability map together with the deepest encoder features, which the
self-training stage uses for its latent consistency term.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import (
    CheckpointError,
    ConfigError,
    IncompatibleCheckpointError,
    ShapeError,
)

CHECKPOINT_MAGIC = b"TTSFUDA\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor of a segmentation network."""

    dims: int = 2
    levels: int = 5
    in_channels: int = 3
    out_classes: int = 1
    base_width: int = 64
    convs_per_block: int = 2
    kernel_size: int = 3
    instance_norm: bool = False

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors), errors)

    def validate(self):
        errors = []
        if self.dims not in (2, 3):
            errors.append(f"arch.dims must be 2 or 3, got {self.dims!r}")
        if not isinstance(self.levels, int) or self.levels < 2:
            errors.append(f"arch.levels must be an integer >= 2, got {self.levels!r}")
        for name in ("in_channels", "out_classes", "base_width", "convs_per_block"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                errors.append(f"arch.{name} must be a positive integer, got {value!r}")
        if not isinstance(self.kernel_size, int) or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            errors.append(f"arch.kernel_size must be a positive odd integer, got {self.kernel_size!r}")
        return errors

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def widths(self):
        return [self.base_width * 2**i for i in range(self.levels)]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown arch fields: {unknown}", [f"arch.{k}: unknown field" for k in unknown])
        return cls(**data)


def _conv(dims):
    return nn.Conv2d if dims == 2 else nn.Conv3d


def _norm(dims):
    return nn.InstanceNorm2d if dims == 2 else nn.InstanceNorm3d


class ConvBlock(nn.Sequential):
    def __init__(self, arch: ArchSpec, in_ch: int, out_ch: int):
        layers = []
        for i in range(arch.convs_per_block):
            layers.append(_conv(arch.dims)(in_ch if i == 0 else out_ch, out_ch, arch.kernel_size, padding=arch.kernel_size // 2))
            if arch.instance_norm:
                layers.append(_norm(arch.dims)(out_ch, affine=True))
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class UNet(nn.Module):
    """Encoder-decoder segmentation network.

    Attributes
    ----------
    arch : ArchSpec
        Architecture descriptor; embedded in every checkpoint.
    step_count : int
        Number of optimizer steps applied to this network so far.
    """

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.step_count = 0
        widths = arch.widths
        self.encoders = nn.ModuleList()
        in_ch = arch.in_channels
        for w in widths:
            self.encoders.append(ConvBlock(arch, in_ch, w))
            in_ch = w
        self.decoders = nn.ModuleList()
        for level in reversed(range(arch.levels - 1)):
            self.decoders.append(ConvBlock(arch, widths[level + 1] + widths[level], widths[level]))
        self.head = _conv(arch.dims)(widths[0], arch.out_classes, 1)
        self._pool = F.max_pool2d if arch.dims == 2 else F.max_pool3d
        self._upmode = "bilinear" if arch.dims == 2 else "trilinear"

    def check_input(self, x: torch.Tensor):
        expected_ndim = self.arch.dims + 2
        if x.ndim != expected_ndim:
            raise ShapeError(f"expected a {expected_ndim}-d batch (N, C, spatial...), got shape {tuple(x.shape)}")
        if x.shape[1] != self.arch.in_channels:
            raise ShapeError(f"axis 1 (channels) has size {x.shape[1]}, network expects {self.arch.in_channels}")
        factor = self.arch.downsample_factor
        for axis in range(2, x.ndim):
            if x.shape[axis] % factor:
                raise ShapeError(
                    f"spatial axis {axis} has size {x.shape[axis]}, which is not divisible by {factor} "
                    f"(2**(levels-1) for levels={self.arch.levels})"
                )

    def logits_and_latent(self, x: torch.Tensor):
        self.check_input(x)
        skips = []
        h = x
        for i, enc in enumerate(self.encoders):
            if i > 0:
                h = self._pool(h, 2)
            h = enc(h)
            skips.append(h)
        latent = h
        for dec, skip in zip(self.decoders, reversed(skips[:-1])):
            h = F.interpolate(h, size=skip.shape[2:], mode=self._upmode, align_corners=False)
            h = dec(torch.cat([h, skip], dim=1))
        return self.head(h), latent

    def forward(self, x: torch.Tensor):
        """Return ``(probabilities, latent_features)`` for a batch ``x``."""
        logits, latent = self.logits_and_latent(x)
        return logits_to_probs(logits), latent


def logits_to_probs(logits: torch.Tensor) -> torch.Tensor:
    if logits.shape[1] == 1:
        return torch.sigmoid(logits)
    return torch.softmax(logits, dim=1)


def build_model(arch: ArchSpec, seed: int = 0) -> UNet:
    """Build a freshly initialized network; identical for identical ``(arch, seed)``."""
    if not isinstance(arch, ArchSpec):
        arch = ArchSpec.from_dict(dict(arch))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNet(arch)
    return model


def forward(model: UNet, batch, eval_mode: bool = True):
    """Run ``model`` on ``batch`` without tracking gradients.

    Returns the probability map and the latent features as tensors.
    """
    x = torch.as_tensor(batch, dtype=torch.float32)
    was_training = model.training
    if eval_mode:
        model.eval()
    try:
        with torch.no_grad():
            return model(x)
    finally:
        model.train(was_training)


def parameter_count(model_or_arch) -> int:
    model = model_or_arch if isinstance(model_or_arch, nn.Module) else UNet(model_or_arch)
    return sum(p.numel() for p in model.parameters())


def predict_volume(model: UNet, volume, roi: Sequence[int] = (96, 96, 96), overlap: float = 0.25, batch_size: int = 2) -> torch.Tensor:
    """Sliding-window inference over one (C, *spatial) image of any size.

    Windows of size ``roi`` (clipped to the padded image) are tiled with the
    given fractional overlap; overlapping probabilities are averaged.  The
    image is zero-padded up to a multiple of the network's downsampling
    factor and cropped back afterwards.
    """
    x = torch.as_tensor(volume, dtype=torch.float32)
    dims = model.arch.dims
    if x.ndim != dims + 1:
        raise ShapeError(f"expected a single (C, spatial...) image with {dims} spatial axes, got {tuple(x.shape)}")
    factor = model.arch.downsample_factor
    spatial = list(x.shape[1:])
    padded = [int(math.ceil(s / factor) * factor) for s in spatial]
    roi = [min(int(math.ceil(r / factor) * factor), p) for r, p in zip(roi, padded)]
    pad = []
    for s, p in reversed(list(zip(spatial, padded))):
        pad += [0, p - s]
    x = F.pad(x, pad)

    starts = []
    for size, win in zip(padded, roi):
        step = max(int(win * (1 - overlap)), 1)
        axis_starts = list(range(0, size - win + 1, step))
        if axis_starts[-1] != size - win:
            axis_starts.append(size - win)
        starts.append(axis_starts)
    corners = [tuple(c) for c in np.stack(np.meshgrid(*starts, indexing="ij"), -1).reshape(-1, dims)]

    out = torch.zeros((model.arch.out_classes, *padded))
    count = torch.zeros((1, *padded))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for i in range(0, len(corners), batch_size):
                chunk = corners[i:i + batch_size]
                windows = [x[(slice(None),) + tuple(slice(c, c + w) for c, w in zip(corner, roi))] for corner in chunk]
                probs, _ = model(torch.stack(windows))
                for corner, p in zip(chunk, probs):
                    idx = (slice(None),) + tuple(slice(c, c + w) for c, w in zip(corner, roi))
                    out[idx] += p
                    count[idx] += 1
    finally:
        model.train(was_training)
    out = out / count
    return out[(slice(None),) + tuple(slice(0, s) for s in spatial)]


def save_checkpoint(model: UNet, path) -> Path:
    """Write ``model`` to a single-file checkpoint.

    Layout: magic, uint16 version, uint32 header length, JSON header (arch,
    step count, parameter names and shapes), then every tensor of the state
    dict as raw little-endian float32 in header order.
    """
    path = Path(path)
    state = model.state_dict()
    entries = [{"name": name, "shape": list(t.shape)} for name, t in state.items()]
    header = json.dumps(
        {"arch": model.arch.to_dict(), "step_count": int(model.step_count), "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for t in state.values():
        buf.write(t.detach().cpu().numpy().astype("<f4", copy=False).tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path, expected_arch: Optional[ArchSpec] = None, expected_dims: Optional[int] = None) -> UNet:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises :class:`CheckpointError` for unreadable files and
    :class:`IncompatibleCheckpointError` when the stored architecture does not
    match ``expected_arch`` / ``expected_dims``.  No model is returned unless
    the whole file parsed.
    """
    raw = Path(path).read_bytes()
    prefix = len(CHECKPOINT_MAGIC) + 6
    if len(raw) < prefix or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a ttsfuda checkpoint (bad magic)")
    version, header_len = struct.unpack("<HI", raw[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[prefix:prefix + header_len].decode("utf-8"))
        arch = ArchSpec.from_dict(header["arch"])
        step_count = int(header["step_count"])
        entries = [(e["name"], tuple(int(s) for s in e["shape"])) for e in header["tensors"]]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint header ({exc})") from exc

    if expected_dims is not None and arch.dims != expected_dims:
        raise IncompatibleCheckpointError(f"{path}: checkpoint holds a {arch.dims}D network, expected {expected_dims}D")
    if expected_arch is not None and arch != expected_arch:
        raise IncompatibleCheckpointError(f"{path}: checkpoint architecture {arch} does not match expected {expected_arch}")

    offset = prefix + header_len
    state = {}
    for name, shape in entries:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload at tensor {name!r}")
        state[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).copy())
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payload")

    model = UNet(arch)
    expected = model.state_dict()
    if list(expected) != list(state) or any(expected[k].shape != state[k].shape for k in state):
        raise CheckpointError(f"{path}: tensor layout does not match architecture {arch}")
    model.load_state_dict(state)
    model.step_count = step_count
    return model


def clone_model(model: UNet) -> UNet:
    twin = UNet(model.arch)
    twin.load_state_dict(model.state_dict())
    twin.step_count = model.step_count
    return twin.to(next(model.parameters()).device)
