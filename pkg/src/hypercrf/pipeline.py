"""Band grouping, patch extraction, augmentation and train/val splitting."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cube import HyperCube, LabelMap
from .tensor import Tensor

UNLABELED = 0


@dataclass
class BandGroupSet:
    """Contiguous band ranges [start, stop) covering the full spectrum."""

    group_size: int
    groups: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.groups)

    def widths(self) -> list[int]:
        return [b - a for a, b in self.groups]


@dataclass
class LabeledPatch:
    data: Tensor  # (M, N, L) spatial x spatial x bands
    center: tuple[int, int]
    group_index: int
    label: int


@dataclass
class AugmentConfig:
    """Virtual-sample fusion parameters.

    alpha is the light-intensity mixing factor drawn once per sample from
    U[alpha_low, alpha_high]; beta is i.i.d. Gaussian noise per element with
    std beta_sigma * (per-band dynamic range of the two parents).
    """

    alpha_low: float = 0.7
    alpha_high: float = 1.0
    beta_sigma: float = 0.01
    geometric: bool = True
    seed: int = 42

    def __post_init__(self):
        if not (0.0 <= self.alpha_low <= self.alpha_high <= 1.0):
            raise ValueError(
                f"alpha range must satisfy 0 <= low <= high <= 1, "
                f"got [{self.alpha_low}, {self.alpha_high}]"
            )
        if self.beta_sigma < 0:
            raise ValueError("beta_sigma must be >= 0")


def split_band_groups(cube: HyperCube | int, group_size: int) -> BandGroupSet:
    """Split [0, B) into ceil(B/L) contiguous groups of L neighboring bands."""
    bands = cube if isinstance(cube, int) else cube.bands
    if not 1 <= group_size <= bands:
        raise ValueError(f"group size {group_size} outside [1, {bands}]")
    groups = [(a, min(a + group_size, bands)) for a in range(0, bands, group_size)]
    return BandGroupSet(group_size=group_size, groups=groups)


def mirror_pad(values: np.ndarray, pad_x: int, pad_y: int) -> np.ndarray:
    """Mirror (symmetric) padding of the two leading spatial axes."""
    return np.pad(values, [(pad_x, pad_x), (pad_y, pad_y), (0, 0)], mode="symmetric")


def extract_patches(
    cube: HyperCube,
    labels: LabelMap,
    groups: BandGroupSet,
    patch: tuple[int, int] = (11, 11),
) -> list[LabeledPatch]:
    """One mirror-padded M x N x L patch per labeled pixel per band group.

    Output order is stable: pixels row-major, then group index.
    """
    m, n = patch
    if m % 2 == 0 or n % 2 == 0:
        raise ValueError(f"patch extents must be odd, got {m}x{n}")
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise ValueError(
            f"label extents {labels.labels.shape} != cube extents "
            f"{(cube.height, cube.width)}"
        )
    hm, hn = m // 2, n // 2
    padded = mirror_pad(cube.values, hm, hn)
    xs, ys = np.nonzero(labels.labels != UNLABELED)
    out: list[LabeledPatch] = []
    for x, y in zip(xs.tolist(), ys.tolist()):
        lab = int(labels.labels[x, y])
        window = padded[x : x + m, y : y + n, :]
        for gi, (a, b) in enumerate(groups.groups):
            out.append(
                LabeledPatch(
                    data=Tensor.from_array(window[:, :, a:b]),
                    center=(x, y),
                    group_index=gi,
                    label=lab,
                )
            )
    return out


def fuse_virtual_sample(
    x_i: LabeledPatch,
    x_j: LabeledPatch,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> LabeledPatch:
    """Fuse two same-class patches: y = alpha*x_i + (1-alpha)*x_j + beta.

    The virtual sample keeps x_i's class label and center.
    """
    if x_i.label != x_j.label:
        raise ValueError(f"parent labels differ: {x_i.label} != {x_j.label}")
    if x_i.group_index != x_j.group_index:
        raise ValueError(
            f"parent band groups differ: {x_i.group_index} != {x_j.group_index}"
        )
    a = x_i.data.view().astype(np.float64)
    b = x_j.data.view().astype(np.float64)
    alpha = rng.uniform(cfg.alpha_low, cfg.alpha_high)
    y = alpha * a + (1.0 - alpha) * b
    if cfg.beta_sigma > 0:
        stacked = np.stack([a, b])
        band_range = stacked.max(axis=(0, 1, 2)) - stacked.min(axis=(0, 1, 2))
        y = y + rng.normal(0.0, 1.0, size=a.shape) * (cfg.beta_sigma * band_range)
    return LabeledPatch(
        data=Tensor.from_array(y),
        center=x_i.center,
        group_index=x_i.group_index,
        label=x_i.label,
    )


def geometric_augment(patch: LabeledPatch) -> list[LabeledPatch]:
    """The 7 non-identity rotations/flips of a square patch (spectral axis fixed)."""
    a = patch.data.view()
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"geometric augmentation needs a square patch, got {a.shape[:2]}")
    variants = [np.rot90(a, k, axes=(0, 1)) for k in (1, 2, 3)]
    flipped = np.flip(a, axis=1)
    variants.append(flipped)
    variants.extend(np.rot90(flipped, k, axes=(0, 1)) for k in (1, 2, 3))
    return [
        LabeledPatch(
            data=Tensor.from_array(v),
            center=patch.center,
            group_index=patch.group_index,
            label=patch.label,
        )
        for v in variants
    ]


def split_train_val(samples: list, fraction: float, seed: int):
    """Deterministic, per-class proportional split into (train, val)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        by_class.setdefault(int(s.label), []).append(idx)
    train_idx: list[int] = []
    val_idx: list[int] = []
    for label in sorted(by_class):
        idxs = np.array(by_class[label])
        if idxs.size < 2:
            warnings.warn(
                f"class {label} has {idxs.size} sample(s); keeping all in train",
                stacklevel=2,
            )
            train_idx.extend(idxs.tolist())
            continue
        rng.shuffle(idxs)
        cut = int(fraction * idxs.size)
        cut = min(max(cut, 1), idxs.size - 1)
        train_idx.extend(idxs[:cut].tolist())
        val_idx.extend(idxs[cut:].tolist())
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]
