"""Unpooling / deconvolution / ReLU refinement of coarse potential logits.

A refiner mirrors the pooled stages of a potential network: one
{unpool, deconv3d, relu} stage per pooling layer, applied in reverse pool
order, with kernel extents taken from the conv layer preceding each pool.
Unpooling reuses the recorded max locations; when the refined tensor's
channel count differs from the pooled tensor's, the record's per-window
majority switches place the values. Channel count is preserved end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layers import Conv3dLayer, PoolRecord, deconv3d, deconv3d_backward
from .network import read_array_block, read_header, write_array_block, write_header
from .tensor import ShapeError, Tensor


@dataclass
class RefinerSpec:
    """Stage kernel extents in apply order (reverse of the forward pools)."""

    channels: int
    stage_extents: tuple[tuple[int, int, int], ...]

    @property
    def num_stages(self) -> int:
        return len(self.stage_extents)


def build_refiner(pairwise_spec, channels: int) -> RefinerSpec:
    """One stage per pooling layer of the paired network; identity if none."""
    from .network import ConvSpec, PoolSpec  # local import avoids cycles

    extents: list[tuple[int, int, int]] = []
    last_conv = (1, 1, 1)
    for l in pairwise_spec.layers:
        if isinstance(l, ConvSpec):
            last_conv = l.extents
        elif isinstance(l, PoolSpec):
            extents.append(last_conv)
    return RefinerSpec(channels=channels, stage_extents=tuple(reversed(extents)))


def _triangle(extent: int) -> np.ndarray:
    c = (extent - 1) / 2.0
    return 1.0 - np.abs(np.arange(extent) - c) / ((extent + 1) / 2.0)


def init_refiner(spec: RefinerSpec, dtype=np.float32) -> list[dict[str, np.ndarray]]:
    """Per-channel bilinear-like stencils so the untrained refiner upsamples smoothly."""
    params = []
    for p, q, r in spec.stage_extents:
        stencil = (
            _triangle(p)[:, None, None] * _triangle(q)[None, :, None] * _triangle(r)[None, None, :]
        )
        k = np.zeros((spec.channels, p, q, r, spec.channels), dtype=dtype)
        for c in range(spec.channels):
            k[c, :, :, :, c] = stencil
        params.append({"bias": np.zeros(spec.channels, dtype=dtype), "kernels": k})
    return params


def _switch_unpool(t: np.ndarray, switches: np.ndarray, out_spatial) -> np.ndarray:
    x, y, z = out_spatial
    out = np.zeros((t.shape[0], x, y, z), dtype=t.dtype)
    dx = (switches >> 1).astype(np.intp)
    dy = (switches & 1).astype(np.intp)
    oxi, oyi, zi = np.indices(switches.shape, sparse=True)
    out[:, 2 * oxi + dx, 2 * oyi + dy, zi] = t
    return out


def _switch_gather(g: np.ndarray, switches: np.ndarray) -> np.ndarray:
    dx = (switches >> 1).astype(np.intp)
    dy = (switches & 1).astype(np.intp)
    oxi, oyi, zi = np.indices(switches.shape, sparse=True)
    return g[:, 2 * oxi + dx, 2 * oyi + dy, zi]


def _stage_layer(par: dict[str, np.ndarray]) -> Conv3dLayer:
    return Conv3dLayer(
        kernels=Tensor.from_array(par["kernels"], dtype=par["kernels"].dtype),
        biases=np.zeros(par["kernels"].shape[0], dtype=par["kernels"].dtype),
        activation="relu",
    )


def refine_forward(
    edge_logits: Tensor,
    pool_records: list[PoolRecord],
    spec: RefinerSpec,
    params: list[dict[str, np.ndarray]],
):
    """Apply the refiner stages; returns (refined Tensor, caches for backward)."""
    if len(pool_records) != spec.num_stages:
        raise ShapeError(
            f"refiner has {spec.num_stages} stages but got {len(pool_records)} pool records"
        )
    if edge_logits.shape[0] != spec.channels and spec.num_stages:
        raise ShapeError(
            f"refiner expects {spec.channels} channels, got {edge_logits.shape[0]}"
        )
    t = edge_logits.view()
    caches = []
    for par, rec in zip(params, reversed(pool_records)):
        if t.shape[1:] != rec.output.shape[1:]:
            raise ShapeError(
                f"stage input spatial {t.shape[1:]} != pooled spatial {rec.output.shape[1:]}"
            )
        up = _switch_unpool(t, rec.switch_offsets, rec.in_shape[1:])
        layer = _stage_layer(par)
        out = deconv3d(
            Tensor.from_array(up, dtype=up.dtype), layer, padding="same", bias=par["bias"]
        )
        caches.append({"unpooled": up, "record": rec, "layer": layer})
        t = out.view()
    return Tensor.from_array(t, dtype=edge_logits.dtype), caches


def refine(
    edge_logits: Tensor,
    pool_records: list[PoolRecord],
    spec: RefinerSpec,
    params: list[dict[str, np.ndarray]],
) -> Tensor:
    out, _ = refine_forward(edge_logits, pool_records, spec, params)
    return out


def refine_backward(
    caches: list,
    grad_out: Tensor,
    spec: RefinerSpec,
    params: list[dict[str, np.ndarray]],
):
    """Gradients of refine w.r.t. its input and every stage's kernels/bias."""
    g = grad_out.view()
    grads: list[dict[str, np.ndarray]] = [None] * len(caches)
    for i in range(len(caches) - 1, -1, -1):
        cache = caches[i]
        gin, gk, gb = deconv3d_backward(
            Tensor.from_array(cache["unpooled"], dtype=cache["unpooled"].dtype),
            cache["layer"],
            Tensor.from_array(g, dtype=g.dtype),
            padding="same",
            bias=params[i]["bias"],
        )
        grads[i] = {"bias": gb, "kernels": gk.view()}
        g = _switch_gather(gin.view(), cache["record"].switch_offsets)
    return Tensor.from_array(g, dtype=g.dtype), grads


def save_refiner(path, spec: RefinerSpec, params) -> None:
    header = {
        "refiner": {
            "channels": spec.channels,
            "stage_extents": [list(e) for e in spec.stage_extents],
        }
    }
    with open(Path(path), "wb") as fh:
        write_header(fh, header)
        for par in params:
            for key in sorted(par):
                write_array_block(fh, par[key])


def load_refiner(path):
    with open(Path(path), "rb") as fh:
        header = read_header(fh)["refiner"]
        spec = RefinerSpec(
            channels=int(header["channels"]),
            stage_extents=tuple(tuple(e) for e in header["stage_extents"]),
        )
        params = []
        for _ in spec.stage_extents:
            params.append({key: read_array_block(fh) for key in ("bias", "kernels")})
    return spec, params
