"""Seeded intensity augmentations: a weak tier, a strong tier and the ensemble.

All augmentations take a batch ``(N, C, *spatial)`` with values in [0, 1]
and return a batch of the same shape, clamped to [0, 1].  Random parameters
are drawn per sample from a ``torch.Generator`` derived from the seed, so a
given ``(spec, seed, image)`` always produces the same output.

Intensity-only augmentations leave pixel positions untouched, so masks
computed on an augmented image align element-wise with the original.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ConfigError

TIERS = ("weak", "strong", "ensemble")


@dataclass(frozen=True)
class AugSpec:
    """A named augmentation with parameter overrides.

    Range parameters are ``(low, high)`` pairs or a single magnitude ``m``,
    read as ``(-m, m)`` around the neutral value.
    """

    name: str
    params: Dict[str, object] = field(default_factory=dict)
    tier: str = "ensemble"

    def __post_init__(self):
        if self.name not in REGISTRY:
            raise ConfigError(f"unknown augmentation {self.name!r}; known: {sorted(REGISTRY)}")
        if self.tier not in TIERS:
            raise ConfigError(f"augmentation tier must be one of {TIERS}, got {self.tier!r}")

    @property
    def geometric(self) -> bool:
        return REGISTRY[self.name].geometric

    def __call__(self, x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        return REGISTRY[self.name].fn(x, generator, **self.params).clamp(0.0, 1.0)


@dataclass(frozen=True)
class _Entry:
    fn: Callable
    geometric: bool = False


REGISTRY: Dict[str, _Entry] = {}


def register(name: str, geometric: bool = False):
    def deco(fn):
        REGISTRY[name] = _Entry(fn, geometric)
        return fn
    return deco


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _uniform(gen, n, rng, neutral):
    if isinstance(rng, (int, float)):
        lo, hi = neutral - rng, neutral + rng
    else:
        lo, hi = rng
    return lo + (hi - lo) * torch.rand(n, generator=gen, dtype=torch.float64)


def _per_sample(values, x):
    return values.to(x.dtype).view(-1, *([1] * (x.ndim - 1)))


def _luma(x):
    if x.shape[1] == 3:
        w = torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype).view(1, 3, *([1] * (x.ndim - 2)))
        return (x * w).sum(1, keepdim=True)
    return x.mean(1, keepdim=True)


def _spatial_mean(x):
    return x.mean(dim=tuple(range(1, x.ndim)), keepdim=True)


@register("identity")
def identity(x, gen):
    return x.clone()


@register("brightness")
def brightness(x, gen, magnitude=0.1):
    return x * _per_sample(_uniform(gen, x.shape[0], magnitude, 1.0), x)


@register("contrast")
def contrast(x, gen, magnitude=0.3):
    f = _per_sample(_uniform(gen, x.shape[0], magnitude, 1.0), x)
    mean = _spatial_mean(_luma(x))
    return mean + (x - mean) * f


@register("saturation")
def saturation(x, gen, magnitude=0.3):
    f = _per_sample(_uniform(gen, x.shape[0], magnitude, 1.0), x)
    if x.shape[1] != 3:
        return x.clone()
    gray = _luma(x)
    return gray + (x - gray) * f


@register("jitter")
def jitter(x, gen, brightness=0.2, contrast=0.2, saturation=0.2, shift=0.0, gamma=0.0):
    """Colour jitter; on non-RGB inputs saturation is skipped and ``shift``/``gamma`` act as intensity jitter."""
    n = x.shape[0]
    b = _per_sample(_uniform(gen, n, brightness, 1.0), x)
    c = _per_sample(_uniform(gen, n, contrast, 1.0), x)
    s = _per_sample(_uniform(gen, n, saturation, 1.0), x)
    t = _per_sample(_uniform(gen, n, shift, 0.0), x)
    g = _per_sample(_uniform(gen, n, gamma, 1.0), x)
    out = x * b
    mean = _spatial_mean(_luma(out))
    out = mean + (out - mean) * c
    if x.shape[1] == 3:
        gray = _luma(out)
        out = gray + (out - gray) * s
    out = (out + t).clamp(0.0, 1.0)
    return out ** g


@register("grayscale")
def grayscale(x, gen, p=1.0):
    """Replace RGB channels by luma with probability ``p``; no-op for non-RGB inputs."""
    keep = torch.rand(x.shape[0], generator=gen) >= p
    if x.shape[1] != 3:
        return x.clone()
    gray = _luma(x).expand_as(x)
    return torch.where(_per_sample(keep, x).bool(), x, gray)


@register("gamma")
def gamma(x, gen, magnitude=0.3):
    g = _per_sample(_uniform(gen, x.shape[0], magnitude, 1.0), x)
    return x.clamp(0.0, 1.0) ** g


@register("intensity")
def intensity(x, gen, scale=0.1, shift=0.1):
    a = _per_sample(_uniform(gen, x.shape[0], scale, 1.0), x)
    b = _per_sample(_uniform(gen, x.shape[0], shift, 0.0), x)
    return x * a + b


@register("blur")
def blur(x, gen, sigma=(0.1, 2.0)):
    """Separable Gaussian blur with a per-sample sigma drawn from ``sigma``."""
    sigmas = _uniform(gen, x.shape[0], sigma, 0.0)
    out = torch.empty_like(x)
    for i, s in enumerate(sigmas.tolist()):
        out[i] = _gaussian_blur(x[i:i + 1], max(s, 1e-3))[0]
    return out


def _gaussian_blur(x, sigma):
    radius = max(1, int(math.ceil(3 * sigma)))
    t = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    k = k / k.sum()
    channels = x.shape[1]
    spatial = x.ndim - 2
    conv = F.conv2d if spatial == 2 else F.conv3d
    for axis in range(spatial):
        shape = [1] * spatial
        shape[axis] = -1
        weight = k.view(1, 1, *shape).repeat(channels, 1, *([1] * spatial))
        padding = [0] * spatial
        padding[axis] = radius
        pad = []
        for p in reversed(padding):
            pad += [p, p]
        x = conv(F.pad(x, pad, mode="replicate"), weight, groups=channels)
    return x


@register("hflip", geometric=True)
def hflip(x, gen, p=0.5):
    flip = torch.rand(x.shape[0], generator=gen) < p
    out = x.clone()
    out[flip] = torch.flip(x[flip], dims=[-1])
    return out


def default_specs(tier: str, dims: int = 2) -> List[AugSpec]:
    """Default augmentation list of a tier.

    The ensemble tier is colour jitter, grayscale and contrast (M = 3).  For
    volumes, jitter turns into intensity scale/shift plus gamma and grayscale
    is a no-op on single-channel scans.
    """
    if tier == "weak":
        return [AugSpec("jitter", {"brightness": 0.1, "contrast": 0.1, "saturation": 0.0}, "weak")]
    if tier == "strong":
        if dims == 3:
            return [
                AugSpec("jitter", {"brightness": 0.4, "contrast": 0.4, "saturation": 0.0, "shift": 0.1, "gamma": 0.4}, "strong"),
                AugSpec("blur", {"sigma": (0.1, 1.5)}, "strong"),
            ]
        return [
            AugSpec("jitter", {"brightness": 0.4, "contrast": 0.4, "saturation": 0.4}, "strong"),
            AugSpec("grayscale", {"p": 0.2}, "strong"),
            AugSpec("blur", {"sigma": (0.1, 2.0)}, "strong"),
        ]
    if tier == "ensemble":
        if dims == 3:
            return [
                AugSpec("jitter", {"brightness": 0.2, "contrast": 0.2, "saturation": 0.0, "shift": 0.1, "gamma": 0.2}),
                AugSpec("grayscale"),
                AugSpec("contrast", {"magnitude": 0.3}),
            ]
        return [
            AugSpec("jitter", {"brightness": 0.2, "contrast": 0.2, "saturation": 0.2}),
            AugSpec("grayscale"),
            AugSpec("contrast", {"magnitude": 0.3}),
        ]
    raise ConfigError(f"augmentation tier must be one of {TIERS}, got {tier!r}")


def resolve_specs(items, tier: str) -> List[AugSpec]:
    """Turn config entries (names, ``{name, params}`` dicts or AugSpecs) into AugSpecs."""
    specs = []
    for item in items:
        if isinstance(item, AugSpec):
            specs.append(item)
        elif isinstance(item, str):
            specs.append(AugSpec(item, {}, tier))
        elif isinstance(item, dict):
            unknown = set(item) - {"name", "params", "tier"}
            if unknown or "name" not in item:
                raise ConfigError(f"augmentation entry must be {{name, params}}, got {item!r}")
            specs.append(AugSpec(item["name"], dict(item.get("params") or {}), tier))
        else:
            raise ConfigError(f"cannot interpret augmentation entry {item!r}")
    return specs


def ensemble(x: torch.Tensor, specs: Sequence[AugSpec], seed: int) -> List[torch.Tensor]:
    """Apply each spec to ``x`` independently, returning M = len(specs) views."""
    specs = list(specs)
    if not specs:
        raise ConfigError("the ensemble augmentation set is empty (M >= 1 required)")
    bad = [s.name for s in specs if s.geometric]
    if bad:
        raise ConfigError(f"geometric augmentations {bad} would misalign pseudo-label masks in the ensemble tier")
    return [spec(x, _generator(derive_seed(seed, i))) for i, spec in enumerate(specs)]


def compose(x: torch.Tensor, specs: Sequence[AugSpec], seed: int) -> torch.Tensor:
    """Apply ``specs`` one after another."""
    out = x
    for i, spec in enumerate(specs):
        out = spec(out, _generator(derive_seed(seed, i)))
    return out


def apply_weak(x: torch.Tensor, seed: int, specs: Sequence[AugSpec] = None) -> torch.Tensor:
    if specs is None:
        specs = default_specs("weak", x.ndim - 2)
    return compose(x, specs, derive_seed(seed, 0x5EA))


def apply_strong(x: torch.Tensor, seed: int, specs: Sequence[AugSpec] = None) -> torch.Tensor:
    if specs is None:
        specs = default_specs("strong", x.ndim - 2)
    return compose(x, specs, derive_seed(seed, 0x57F))
