"""Seeded synthetic scene generator used for desk-scale verification.

Each class gets a smooth spectral signature (sum of Gaussian bumps over the
band axis); the spatial layout is a seeded Voronoi tessellation of blob
sites; pixel values are the class signature plus additive Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cube import HyperCube, LabelMap


class InfeasibleSceneError(ValueError):
    pass


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    bands: int = 40
    num_classes: int = 3
    blob_count: int = 12
    noise_sigma: float = 0.02
    seed: int = 42

    def __post_init__(self):
        if self.num_classes < 2:
            raise InfeasibleSceneError("need at least 2 classes")
        if self.blob_count < self.num_classes:
            raise InfeasibleSceneError(
                f"blob_count {self.blob_count} < num_classes {self.num_classes}"
            )


def _class_signatures(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """(K, B) smooth spectra, pairwise L2-separated from each other."""
    b = np.arange(spec.bands, dtype=np.float64)
    floor = max(5.0 * spec.noise_sigma, 0.5)
    for _ in range(200):
        sigs = np.empty((spec.num_classes, spec.bands))
        for c in range(spec.num_classes):
            centers = rng.uniform(0, spec.bands, size=3)
            widths = rng.uniform(spec.bands / 20.0, spec.bands / 6.0, size=3)
            amps = rng.uniform(0.25, 0.8, size=3)
            bumps = amps[:, None] * np.exp(
                -((b[None, :] - centers[:, None]) ** 2) / (2.0 * widths[:, None] ** 2)
            )
            sigs[c] = 0.15 + bumps.sum(axis=0)
        dists = [
            np.linalg.norm(sigs[i] - sigs[j])
            for i in range(spec.num_classes)
            for j in range(i + 1, spec.num_classes)
        ]
        if min(dists) >= floor:
            return sigs
    raise InfeasibleSceneError("could not draw separated class spectra")


def _voronoi_labels(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """(H, W) labels in 1..K; every class covers at least 1% of the pixels."""
    min_pixels = max(1, int(0.01 * spec.height * spec.width))
    for _ in range(200):
        sx = rng.uniform(0, spec.height, size=spec.blob_count)
        sy = rng.uniform(0, spec.width, size=spec.blob_count)
        site_class = np.concatenate(
            [
                np.arange(1, spec.num_classes + 1),
                rng.integers(1, spec.num_classes + 1,
                             size=spec.blob_count - spec.num_classes),
            ]
        )
        gx, gy = np.meshgrid(
            np.arange(spec.height), np.arange(spec.width), indexing="ij"
        )
        d2 = (gx[..., None] - sx) ** 2 + (gy[..., None] - sy) ** 2
        labels = site_class[d2.argmin(axis=-1)]
        counts = np.bincount(labels.reshape(-1), minlength=spec.num_classes + 1)
        if counts[1:].min() >= min_pixels:
            return labels.astype(np.uint16)
    raise InfeasibleSceneError("could not place blobs with >=1% coverage per class")


def synth_scene(spec: SceneSpec) -> tuple[HyperCube, LabelMap]:
    rng = np.random.default_rng(spec.seed)
    sigs = _class_signatures(spec, rng)
    labels = _voronoi_labels(spec, rng)
    values = sigs[labels.astype(np.intp) - 1]
    if spec.noise_sigma > 0:
        values = values + rng.normal(
            0.0, spec.noise_sigma, size=(spec.height, spec.width, spec.bands)
        )
    return HyperCube(values=values.astype(np.float32)), LabelMap(labels)
