"""Per-band-group 3D CNN training, pixelwise classification, and the fused
feature map that seeds the CRF stage.

Each band group trains its own network on mini-batch SGD with a softmax /
cross-entropy head; at inference the group posteriors are averaged per pixel.
The feature map stacks each group's penultimate feature vector onto the
image grid with the group index as the spectral coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cube import HyperCube, LabelMap
from .layers import SgdConfig, sgd_step
from .network import (
    NetworkParams,
    NetworkSpec,
    cross_entropy,
    init_network,
    patch_backward_batch,
    patch_forward_batch,
)
from .pipeline import BandGroupSet, LabeledPatch, mirror_pad, split_train_val


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class FeatureMap:
    """(H, W, Z, C) feature grid; Z indexes band groups, C feature channels."""

    values: np.ndarray
    provenance: BandGroupSet

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 4:
            raise ValueError(f"feature map must be (H, W, Z, C), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("non-finite values in feature map")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.values.shape[:3]

    def as_channels_first(self) -> np.ndarray:
        """(C, H, W, Z) view for grid-mode networks."""
        return np.ascontiguousarray(np.moveaxis(self.values, 3, 0))


def _stack_group(patches: list[LabeledPatch]):
    x = np.stack([p.data.view() for p in patches]).astype(np.float32)[:, None]
    y = np.array([p.label - 1 for p in patches], dtype=np.intp)
    return x, y


def _epoch_loss(spec, params, x, y, padding, batch: int) -> float:
    total = 0.0
    for i in range(0, x.shape[0], batch):
        probs, _, _, _ = patch_forward_batch(spec, params, x[i : i + batch], padding)
        total += cross_entropy(probs, y[i : i + batch]) * min(batch, x.shape[0] - i)
    return total / x.shape[0]


def train_group_cnns(
    patches: list[LabeledPatch],
    spec: NetworkSpec,
    sgd: SgdConfig,
    padding: str = "valid",
    val_fraction: float = 0.9,
):
    """Mini-batch SGD per band group; returns (params per group, loss curves).

    Loss curves are per-epoch (train, val) mean cross-entropy. Training
    aborts with a diagnostic if the loss goes non-finite.
    """
    groups = sorted({p.group_index for p in patches})
    root = np.random.SeedSequence(sgd.seed)
    children = root.spawn(max(groups) + 1 if groups else 0)
    params_map: dict[int, NetworkParams] = {}
    curves: dict[int, list[tuple[float, float]]] = {}
    for gi in groups:
        group_patches = [p for p in patches if p.group_index == gi]
        split_seed, init_seed = (int(s) for s in children[gi].generate_state(2))
        train, val = split_train_val(group_patches, val_fraction, seed=split_seed)
        if not val:  # tiny classes: validate on train
            val = train
        xtr, ytr = _stack_group(train)
        xva, yva = _stack_group(val)
        rng = np.random.default_rng(init_seed)
        params = init_network(spec, xtr.shape[1:], rng, padding, "patch")
        history: list[tuple[float, float]] = []
        n = xtr.shape[0]
        for epoch in range(sgd.epochs):
            order = rng.permutation(n)
            running = 0.0
            for i in range(0, n, sgd.batch_size):
                sel = order[i : i + sgd.batch_size]
                xb, yb = xtr[sel], ytr[sel]
                probs, _, _, caches = patch_forward_batch(spec, params, xb, padding)
                running += cross_entropy(probs, yb) * sel.size
                glogits = probs.copy()
                glogits[np.arange(sel.size), yb] -= 1.0
                grads = patch_backward_batch(spec, params, caches, glogits / sel.size, padding)
                params = NetworkParams(sgd_step(params.layers, grads, sgd))
            train_loss = running / n
            val_loss = _epoch_loss(spec, params, xva, yva, padding, sgd.batch_size)
            if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
                raise TrainingDivergedError(
                    f"group {gi}: loss diverged at epoch {epoch} "
                    f"(train={train_loss}, val={val_loss})"
                )
            history.append((train_loss, val_loss))
        params_map[gi] = params
        curves[gi] = history
    return params_map, curves


_INFER_CHUNK = 128


def _iter_pixel_windows(cube: HyperCube, patch: tuple[int, int], chunk: int):
    m, n = patch
    padded = mirror_pad(cube.values, m // 2, n // 2)
    coords = [(x, y) for x in range(cube.height) for y in range(cube.width)]
    for i in range(0, len(coords), chunk):
        block = coords[i : i + chunk]
        win = np.stack([padded[x : x + m, y : y + n, :] for x, y in block])
        yield block, win


def _forward_cube(
    cube: HyperCube,
    groups: BandGroupSet,
    params_map: dict[int, NetworkParams],
    spec: NetworkSpec,
    patch: tuple[int, int] = (11, 11),
    padding: str = "valid",
    chunk: int = _INFER_CHUNK,
):
    """Per-pixel group posteriors and penultimate features for a whole cube."""
    missing = [gi for gi in range(len(groups)) if gi not in params_map]
    if missing:
        raise KeyError(f"missing trained parameters for band groups {missing}")
    k = spec.num_classes
    h, w = cube.height, cube.width
    post = np.zeros((h, w, k), dtype=np.float64)
    feats: np.ndarray | None = None
    for block, win in _iter_pixel_windows(cube, patch, chunk):
        for gi, (a, b) in enumerate(groups.groups):
            x = np.ascontiguousarray(win[:, None, :, :, a:b], dtype=np.float32)
            probs, _, f, _ = patch_forward_batch(spec, params_map[gi], x, padding)
            if feats is None:
                feats = np.zeros((h, w, len(groups), f.shape[1]), dtype=np.float32)
            for j, (px, py) in enumerate(block):
                post[px, py] += probs[j]
                feats[px, py, gi] = f[j]
    post /= len(groups)
    return post, feats


def classify_pixels(
    cube: HyperCube,
    groups: BandGroupSet,
    params_map: dict[int, NetworkParams],
    spec: NetworkSpec,
    patch: tuple[int, int] = (11, 11),
    padding: str = "valid",
) -> tuple[LabelMap, np.ndarray]:
    """Average the per-group posteriors per pixel and take the argmax label."""
    post, _ = _forward_cube(cube, groups, params_map, spec, patch, padding)
    labels = (post.argmax(axis=2) + 1).astype(np.uint16)
    return LabelMap(labels), post.astype(np.float32)


def extract_feature_map(
    cube: HyperCube,
    groups: BandGroupSet,
    params_map: dict[int, NetworkParams],
    spec: NetworkSpec,
    patch: tuple[int, int] = (11, 11),
    padding: str = "valid",
) -> FeatureMap:
    """Penultimate activations per pixel per group on the (H, W, Z=G, C) grid."""
    _, feats = _forward_cube(cube, groups, params_map, spec, patch, padding)
    return FeatureMap(values=feats, provenance=groups)


def infer_cube(
    cube: HyperCube,
    groups: BandGroupSet,
    params_map: dict[int, NetworkParams],
    spec: NetworkSpec,
    patch: tuple[int, int] = (11, 11),
    padding: str = "valid",
):
    """One shared forward pass returning (LabelMap, posteriors, FeatureMap)."""
    post, feats = _forward_cube(cube, groups, params_map, spec, patch, padding)
    labels = (post.argmax(axis=2) + 1).astype(np.uint16)
    return LabelMap(labels), post.astype(np.float32), FeatureMap(feats, groups)
