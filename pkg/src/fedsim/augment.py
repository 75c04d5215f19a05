"""Multi-view augmentation: flip, pad-and-crop, rectangular erase, noise.

Grids are (height, width, channels) arrays; flat feature vectors degrade
to block-erase plus noise, since flip/crop have no meaning there.  Every
view keeps the source label and domain tag, and each view index consumes
its own child of the caller's random stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadPolicy, OutOfBounds


@dataclass(frozen=True)
class Sample:
    values: np.ndarray  # (H, W, C) grid or flat vector
    label: int
    domain_tag: str = ""


@dataclass(frozen=True)
class AugmentPolicy:
    num_views: int = 2
    erase_fraction: float = 0.1
    crop_pad: int = 0
    flip_prob: float = 0.0
    noise_sigma: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if self.num_views < 1:
            raise BadPolicy("num_views must be >= 1")
        if not 0.0 <= self.erase_fraction < 1.0:
            raise BadPolicy("erase_fraction must be in [0, 1)")
        if self.crop_pad < 0:
            raise BadPolicy("crop_pad must be non-negative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise BadPolicy("flip_prob must be in [0, 1]")
        if self.noise_sigma < 0.0:
            raise BadPolicy("noise_sigma must be non-negative")


DISABLED_POLICY = AugmentPolicy(num_views=1, erase_fraction=0.0, noise_sigma=0.0,
                                enabled=False)


def flip_h(grid: np.ndarray) -> np.ndarray:
    """Reverse column order per channel."""
    return grid[:, ::-1, :].copy()


def erase(grid: np.ndarray, rect: tuple[int, int, int, int]) -> np.ndarray:
    """Zero the (row, col, height, width) rectangle."""
    r0, c0, h, w = rect
    if r0 < 0 or c0 < 0 or h < 0 or w < 0 or r0 + h > grid.shape[0] or c0 + w > grid.shape[1]:
        raise OutOfBounds(f"erase rect {rect} outside grid {grid.shape}")
    out = grid.copy()
    out[r0:r0 + h, c0:c0 + w, :] = 0.0
    return out


def crop_pad(grid: np.ndarray, pad: int, offset: tuple[int, int]) -> np.ndarray:
    """Zero-pad by `pad` then extract an original-size window at `offset`."""
    dr, dc = offset
    if pad < 0 or not (0 <= dr <= 2 * pad and 0 <= dc <= 2 * pad):
        raise OutOfBounds(f"crop offset {offset} outside pad range {pad}")
    if pad == 0:
        return grid.copy()
    h, w, c = grid.shape
    padded = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=grid.dtype)
    padded[pad:pad + h, pad:pad + w, :] = grid
    return padded[dr:dr + h, dc:dc + w, :].copy()


def add_noise(values: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return values + rng.normal(0.0, sigma, size=values.shape)


def _erase_flat(vec: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    n = vec.shape[0]
    k = int(round(n * fraction))
    if k < 1:
        return vec.copy()
    start = int(rng.integers(0, n - k + 1))
    out = vec.copy()
    out[start:start + k] = 0.0
    return out


def _augment_grid(grid: np.ndarray, policy: AugmentPolicy,
                  rng: np.random.Generator) -> np.ndarray:
    v = grid
    if policy.flip_prob > 0.0 and rng.random() < policy.flip_prob:
        v = flip_h(v)
    if policy.crop_pad > 0:
        offset = tuple(int(o) for o in rng.integers(0, 2 * policy.crop_pad + 1, size=2))
        v = crop_pad(v, policy.crop_pad, offset)
    if policy.erase_fraction > 0.0:
        h, w = v.shape[0], v.shape[1]
        eh = max(1, int(round(h * np.sqrt(policy.erase_fraction))))
        ew = max(1, int(round(w * np.sqrt(policy.erase_fraction))))
        r0 = int(rng.integers(0, h - eh + 1))
        c0 = int(rng.integers(0, w - ew + 1))
        v = erase(v, (r0, c0, eh, ew))
    if policy.noise_sigma > 0.0:
        v = add_noise(v, policy.noise_sigma, rng)
    return v if v is not grid else grid.copy()


def make_views(sample: Sample, policy: AugmentPolicy,
               rng: np.random.Generator) -> list[Sample]:
    """Produce num_views independently augmented copies of the sample."""
    if not policy.enabled:
        return [Sample(sample.values.copy(), sample.label, sample.domain_tag)
                for _ in range(policy.num_views)]
    views = []
    for child in rng.spawn(policy.num_views):
        if sample.values.ndim == 3:
            v = _augment_grid(sample.values, policy, child)
        else:
            flat = sample.values.reshape(-1)
            v = _erase_flat(flat, policy.erase_fraction, child) \
                if policy.erase_fraction > 0.0 else flat.copy()
            if policy.noise_sigma > 0.0:
                v = add_noise(v, policy.noise_sigma, child)
            v = v.reshape(sample.values.shape)
        views.append(Sample(v, sample.label, sample.domain_tag))
    return views
