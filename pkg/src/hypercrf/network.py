"""Network descriptions, parameter containers, and sequential execution.

Two execution modes share the same layer kernels:

  * patch mode  - classifier networks consuming (N, C, M, N, L) patch
                  batches; tensors are flattened before dense/softmax heads.
  * grid mode   - potential networks consuming one (C, X, Y, Z) grid with
                  same padding; the softmax head is a per-voxel projection
                  so outputs stay voxel-aligned.

Checkpoint files carry the magic "HCNN", a JSON description, then the raw
parameter tensors in declaration order; round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import (
    activation_derivative,
    apply_activation,
    conv_backward_input_batch,
    conv_backward_kernel_batch,
    conv_forward_batch,
    conv_output_spatial,
    maxpool3d,
    pool_backward_batch,
    pool_forward_batch,
    softmax,
)
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"HCNN"


# ---------------------------------------------------------------------------
# layer and network specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    kernels: int
    extents: tuple[int, int, int] = (5, 5, 5)
    activation: str = "relu"


@dataclass(frozen=True)
class PoolSpec:
    window: tuple[int, int] = (2, 2)


@dataclass(frozen=True)
class DenseSpec:
    units: int
    activation: str = "relu"


@dataclass(frozen=True)
class SoftmaxSpec:
    num_classes: int


LayerSpec = ConvSpec | PoolSpec | DenseSpec | SoftmaxSpec


@dataclass
class NetworkSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if not self.layers or not isinstance(self.layers[-1], SoftmaxSpec):
            raise ValueError("network must end with a softmax layer")
        if not any(isinstance(l, ConvSpec) for l in self.layers):
            raise ValueError("network needs at least one conv3d layer")

    @property
    def num_classes(self) -> int:
        return self.layers[-1].num_classes

    def pool_count(self) -> int:
        return sum(isinstance(l, PoolSpec) for l in self.layers)

    def conv_widths(self) -> list[int]:
        return [l.kernels for l in self.layers if isinstance(l, ConvSpec)]


def format_layer(l: LayerSpec) -> str:
    if isinstance(l, ConvSpec):
        p, q, r = l.extents
        return f"conv:{l.kernels}:{p}x{q}x{r}:{l.activation}"
    if isinstance(l, PoolSpec):
        return "pool"
    if isinstance(l, DenseSpec):
        return f"dense:{l.units}:{l.activation}"
    return f"softmax:{l.num_classes}"


def parse_layer(s: str) -> LayerSpec:
    parts = s.strip().split(":")
    kind = parts[0]
    if kind == "conv":
        ext = tuple(int(v) for v in parts[2].split("x"))
        act = parts[3] if len(parts) > 3 else "relu"
        return ConvSpec(kernels=int(parts[1]), extents=ext, activation=act)
    if kind == "pool":
        return PoolSpec()
    if kind == "dense":
        act = parts[2] if len(parts) > 2 else "relu"
        return DenseSpec(units=int(parts[1]), activation=act)
    if kind == "softmax":
        return SoftmaxSpec(num_classes=int(parts[1]))
    raise ValueError(f"unknown layer spec {s!r}")


def format_layers(spec: NetworkSpec) -> str:
    return ", ".join(format_layer(l) for l in spec.layers)


def parse_layers(s: str) -> NetworkSpec:
    return NetworkSpec(tuple(parse_layer(tok) for tok in s.split(",") if tok.strip()))


# ---------------------------------------------------------------------------
# presets (architectures of the reference datasets; all convs 32 x 5x5x5)
# ---------------------------------------------------------------------------

_PRESETS = {
    # name: (n_convs, 1-based conv indices followed by a pool)
    "indian-pines-cls": (7, {1, 2, 5, 7}),
    "pavia-cls": (6, {1, 2, 5}),
    "griffith-cls": (6, {1, 2, 5}),
    "synthetic-cls": (6, {1, 2, 5}),
    "indian-pines-seg": (4, {1, 4}),
    "pavia-seg": (3, {1, 3}),
    "griffith-seg": (3, {1}),
    "synthetic-seg": (3, {1, 3}),
}


def build_network(dataset_profile, num_classes: int) -> NetworkSpec:
    """NetworkSpec for a named preset, or for explicit layer strings.

    Presets follow the reference architectures (32 kernels of 5x5x5 per conv
    layer); they assume inputs large enough for their padding mode. Explicit
    layers are given as a comma-separated string or list of layer strings.
    """
    if isinstance(dataset_profile, str) and dataset_profile in _PRESETS:
        n_convs, pools = _PRESETS[dataset_profile]
        layers: list[LayerSpec] = []
        for i in range(1, n_convs + 1):
            layers.append(ConvSpec(kernels=32, extents=(5, 5, 5), activation="relu"))
            if i in pools:
                layers.append(PoolSpec())
        layers.append(SoftmaxSpec(num_classes=num_classes))
        return NetworkSpec(tuple(layers))
    if isinstance(dataset_profile, str):
        if ":" in dataset_profile or dataset_profile.strip().startswith(("conv", "pool")):
            return parse_layers(dataset_profile)
        raise ValueError(
            f"unknown preset {dataset_profile!r}; known: {sorted(_PRESETS)}"
        )
    if isinstance(dataset_profile, (list, tuple)):
        return NetworkSpec(
            tuple(l if not isinstance(l, str) else parse_layer(l) for l in dataset_profile)
        )
    raise TypeError(f"cannot build a network from {type(dataset_profile)!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class NetworkParams:
    layers: list[dict[str, np.ndarray]]

    def copy(self) -> "NetworkParams":
        return NetworkParams([{k: v.copy() for k, v in d.items()} for d in self.layers])

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams(
            [{k: np.zeros_like(v) for k, v in d.items()} for d in self.layers]
        )


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def walk_shapes(spec: NetworkSpec, input_shape, padding: str, mode: str):
    """Per-layer output shapes (channels-first); raises on underflow."""
    shapes = []
    c, *spatial = input_shape
    flat: int | None = None
    for l in spec.layers:
        if isinstance(l, ConvSpec):
            if flat is not None:
                raise ShapeError("conv layer after flattening")
            spatial = list(conv_output_spatial(spatial, l.extents, padding))
            if min(spatial) < 1:
                raise ShapeError(
                    f"conv {l.extents} underflows input extents in {input_shape}"
                )
            c = l.kernels
            shapes.append((c, *spatial))
        elif isinstance(l, PoolSpec):
            if flat is not None:
                raise ShapeError("pool layer after flattening")
            spatial = [(spatial[0] + 1) // 2, (spatial[1] + 1) // 2, spatial[2]]
            shapes.append((c, *spatial))
        elif isinstance(l, DenseSpec):
            if mode == "grid":
                raise ShapeError("dense layers are not voxel-aligned; grid nets use conv + softmax only")
            flat = flat if flat is not None else c * int(np.prod(spatial))
            shapes.append((l.units,))
            flat = l.units
        else:  # softmax
            if mode == "grid":
                shapes.append((l.num_classes, *spatial))
            else:
                flat = flat if flat is not None else c * int(np.prod(spatial))
                shapes.append((l.num_classes,))
    return shapes


def init_network(
    spec: NetworkSpec,
    input_shape,
    rng: np.random.Generator,
    padding: str = "valid",
    mode: str = "patch",
    dtype=np.float32,
    zero: bool = False,
) -> NetworkParams:
    """Seeded Glorot-uniform initialization (or all-zero when `zero`)."""
    params: list[dict[str, np.ndarray]] = []
    c, *spatial = input_shape
    flat: int | None = None
    for l in spec.layers:
        if isinstance(l, ConvSpec):
            p, q, r = l.extents
            shape = (c, p, q, r, l.kernels)
            fan = p * q * r
            k = (
                np.zeros(shape, dtype=dtype)
                if zero
                else _glorot(rng, shape, c * fan, l.kernels * fan, dtype)
            )
            params.append({"bias": np.zeros(l.kernels, dtype=dtype), "kernels": k})
            spatial = list(conv_output_spatial(spatial, l.extents, padding))
            c = l.kernels
        elif isinstance(l, PoolSpec):
            params.append({})
            spatial = [(spatial[0] + 1) // 2, (spatial[1] + 1) // 2, spatial[2]]
        elif isinstance(l, DenseSpec):
            n_in = flat if flat is not None else c * int(np.prod(spatial))
            w = (
                np.zeros((n_in, l.units), dtype=dtype)
                if zero
                else _glorot(rng, (n_in, l.units), n_in, l.units, dtype)
            )
            params.append({"bias": np.zeros(l.units, dtype=dtype), "weights": w})
            flat = l.units
        else:  # softmax head: dense projection (patch) / 1x1x1 projection (grid)
            n_in = c if mode == "grid" else (flat if flat is not None else c * int(np.prod(spatial)))
            w = (
                np.zeros((n_in, l.num_classes), dtype=dtype)
                if zero
                else _glorot(rng, (n_in, l.num_classes), n_in, l.num_classes, dtype)
            )
            params.append({"bias": np.zeros(l.num_classes, dtype=dtype), "weights": w})
    walk_shapes(spec, input_shape, padding, mode)  # shape feasibility check
    return NetworkParams(params)


# ---------------------------------------------------------------------------
# patch-mode execution (batched)
# ---------------------------------------------------------------------------

def patch_forward_batch(spec: NetworkSpec, params: NetworkParams, x5, padding="valid"):
    """Forward a (N, C, X, Y, Z) batch; returns (probs, logits, features, caches).

    `features` is the spatial mean of the last pre-flatten activation - the
    per-sample feature vector whose width is the final conv stage's depth.
    """
    t = x5
    feats = None
    caches: list[dict] = []
    logits = None
    for l, par in zip(spec.layers, params.layers):
        if isinstance(l, ConvSpec):
            pre = conv_forward_batch(t, par["kernels"], padding)
            pre = pre + par["bias"].astype(pre.dtype)[None, :, None, None, None]
            caches.append({"in": t, "pre": pre})
            t = apply_activation(l.activation, pre)
        elif isinstance(l, PoolSpec):
            out, off = pool_forward_batch(t)
            caches.append({"in_shape": t.shape, "off": off})
            t = out
        else:
            if t.ndim == 5:
                feats = t.mean(axis=(2, 3, 4))
                caches.append({"flatten_from": t.shape})
                t = t.reshape(t.shape[0], -1)
            else:
                caches.append({})
            pre = t.astype(np.float64) @ par["weights"].astype(np.float64)
            pre = pre + par["bias"].astype(np.float64)
            caches[-1].update({"in": t, "pre": pre})
            if isinstance(l, DenseSpec):
                t = apply_activation(l.activation, pre).astype(x5.dtype)
            else:
                logits = pre
                t = softmax(pre).astype(x5.dtype)
    return t, logits, feats, caches


def patch_backward_batch(spec, params, caches, grad_logits, padding="valid"):
    """Backward pass from d(loss)/d(logits); returns per-layer grad dicts.

    The first layer's input gradient is never consumed and is skipped.
    """
    grads: list[dict[str, np.ndarray]] = [None] * len(spec.layers)
    g = grad_logits
    for i in range(len(spec.layers) - 1, -1, -1):
        l, par, cache = spec.layers[i], params.layers[i], caches[i]
        if isinstance(l, ConvSpec):
            gpre = g * activation_derivative(l.activation, cache["pre"])
            grads[i] = {
                "bias": gpre.sum(axis=(0, 2, 3, 4)),
                "kernels": conv_backward_kernel_batch(cache["in"], gpre, padding, l.extents),
            }
            if i == 0:
                break
            g = conv_backward_input_batch(gpre, par["kernels"], padding, cache["in"].shape[2:])
        elif isinstance(l, PoolSpec):
            grads[i] = {}
            g = pool_backward_batch(g, cache["off"], cache["in_shape"])
        else:
            if isinstance(l, DenseSpec):
                gpre = g * activation_derivative(l.activation, cache["pre"])
            else:
                gpre = g  # caller passes d(loss)/d(logits) directly
            x2 = cache["in"].astype(np.float64)
            grads[i] = {"bias": gpre.sum(axis=0), "weights": x2.T @ gpre}
            g = gpre @ par["weights"].astype(np.float64).T
            if "flatten_from" in cache:
                g = g.reshape(cache["flatten_from"])
    return grads


def cross_entropy(probs: np.ndarray, labels0: np.ndarray) -> float:
    """Mean negative log likelihood; labels are 0-based class indices."""
    p = probs[np.arange(probs.shape[0]), labels0]
    return float(-np.log(np.maximum(p, 1e-300)).mean())


# ---------------------------------------------------------------------------
# grid-mode execution (single grid, same padding, voxel-aligned head)
# ---------------------------------------------------------------------------

@dataclass
class GridForward:
    probs: np.ndarray   # (K, X, Y, Z)
    logits: np.ndarray  # (K, X, Y, Z)
    caches: list
    pool_records: list  # PoolRecord per pool layer, in forward order


def grid_forward(spec: NetworkSpec, params: NetworkParams, x4, padding="same") -> GridForward:
    t = np.asarray(x4)
    caches: list[dict] = []
    records = []
    logits = probs = None
    for l, par in zip(spec.layers, params.layers):
        if isinstance(l, ConvSpec):
            pre = conv_forward_batch(t[None], par["kernels"], padding)[0]
            pre = pre + par["bias"].astype(pre.dtype)[:, None, None, None]
            caches.append({"in": t, "pre": pre})
            t = apply_activation(l.activation, pre)
        elif isinstance(l, PoolSpec):
            rec = maxpool3d(Tensor.from_array(t, dtype=t.dtype))
            caches.append({"record": rec, "in_shape": t.shape})
            records.append(rec)
            t = rec.output.view()
        elif isinstance(l, DenseSpec):
            raise ShapeError("dense layers are not voxel-aligned; grid nets use conv + softmax only")
        else:
            w = par["weights"].astype(np.float64)
            logits = np.einsum("cxyz,ck->kxyz", t.astype(np.float64), w)
            logits = logits + par["bias"].astype(np.float64)[:, None, None, None]
            caches.append({"in": t})
            probs = np.moveaxis(softmax(np.moveaxis(logits, 0, -1)), -1, 0)
    return GridForward(probs=probs, logits=logits.astype(t.dtype), caches=caches,
                       pool_records=records)


def grid_backward(spec, params, caches, grad_logits, padding="same", need_input=False):
    """Backward from d(loss)/d(logits) on the head grid; returns (grads, grad_input).

    grad_input is only computed when `need_input` (the feature map is frozen
    in this pipeline, so potential-net training never needs it).
    """
    grads: list[dict[str, np.ndarray]] = [None] * len(spec.layers)
    g = np.asarray(grad_logits, dtype=np.float64)
    for i in range(len(spec.layers) - 1, -1, -1):
        l, par, cache = spec.layers[i], params.layers[i], caches[i]
        if isinstance(l, SoftmaxSpec):
            x = cache["in"].astype(np.float64)
            grads[i] = {
                "bias": g.sum(axis=(1, 2, 3)),
                "weights": np.einsum("cxyz,kxyz->ck", x, g),
            }
            g = np.einsum("kxyz,ck->cxyz", g, par["weights"].astype(np.float64))
        elif isinstance(l, PoolSpec):
            grads[i] = {}
            rec = cache["record"]
            g = pool_backward_batch(g[None], _per_channel_off(rec), (1, *cache["in_shape"]))[0]
        else:
            gpre = g * activation_derivative(l.activation, cache["pre"])
            grads[i] = {
                "bias": gpre.sum(axis=(1, 2, 3)),
                "kernels": conv_backward_kernel_batch(
                    cache["in"][None], gpre[None], padding, l.extents
                ),
            }
            if i == 0 and not need_input:
                return grads, None
            g = conv_backward_input_batch(
                gpre[None], par["kernels"], padding, cache["in"].shape[1:]
            )[0]
    return grads, g


def _per_channel_off(rec):
    """Window offsets (1, C, ox, oy, Z) recovered from a PoolRecord."""
    c, x, y, z = rec.in_shape
    flat = rec.argmax_indices
    sy = (flat // z) % y
    sx = (flat // (y * z)) % x
    ox = sx // 2
    oy = sy // 2
    off = ((sx - 2 * ox) << 1) | (sy - 2 * oy)
    return off.astype(np.uint8)[None]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _param_items(params: NetworkParams):
    for d in params.layers:
        for key in sorted(d):
            yield d[key]


def write_array_block(fh, arr) -> None:
    a = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<B", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes())


def read_array_block(fh) -> np.ndarray:
    (nd,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{nd}I", fh.read(4 * nd))
    count = int(np.prod(shape)) if shape else 1
    return np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).copy()


def write_header(fh, header: dict) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def read_header(fh) -> dict:
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"expected checkpoint magic HCNN, found {magic!r}")
    (blen,) = struct.unpack("<I", fh.read(4))
    return json.loads(fh.read(blen).decode("utf-8"))


def save_checkpoint(path, spec: NetworkSpec, params: NetworkParams, meta: dict | None = None):
    header = {
        "layers": [format_layer(l) for l in spec.layers],
        "meta": meta or {},
    }
    with open(Path(path), "wb") as fh:
        write_header(fh, header)
        for arr in _param_items(params):
            write_array_block(fh, arr)


def load_checkpoint(path):
    with open(Path(path), "rb") as fh:
        header = read_header(fh)
        spec = NetworkSpec(tuple(parse_layer(s) for s in header["layers"]))
        layers: list[dict[str, np.ndarray]] = []
        for l in spec.layers:
            if isinstance(l, ConvSpec):
                keys = ["bias", "kernels"]
            elif isinstance(l, PoolSpec):
                keys = []
            else:
                keys = ["bias", "weights"]
            layers.append({key: read_array_block(fh) for key in keys})
    return spec, NetworkParams(layers), header.get("meta", {})
