"""Forward/backward layer kernels for 3D convolutional networks.

Conventions:
  * activations and feature maps are laid out channels-first, (C, X, Y, Z);
    batched internals prepend a sample axis, (N, C, X, Y, Z);
  * convolution kernels are (m_in, P, Q, R, m_out) and slide with stride 1;
  * products accumulate in 64-bit, results are stored in the input dtype;
  * max-pool ties break toward the lowest flat source index so unpooling
    is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


class CorruptRecordError(ValueError):
    """A pool record addresses locations outside its source tensor."""


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ACT = {
    "identity": (lambda x: x, lambda pre: np.ones_like(pre)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda pre: (pre > 0).astype(pre.dtype)),
    "sigmoid": (_sigmoid, lambda pre: _sigmoid(pre) * (1.0 - _sigmoid(pre))),
}


def apply_activation(name: str, pre: np.ndarray) -> np.ndarray:
    return _ACT[name][0](pre)


def activation_derivative(name: str, pre: np.ndarray) -> np.ndarray:
    return _ACT[name][1](pre)


def relu(t: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return Tensor(t.shape, np.maximum(t.data, 0.0))


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax along the last axis; rows sum to 1."""
    a = np.asarray(logits, dtype=np.float64)
    if a.size == 0:
        raise ValueError("softmax of empty logits")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    a = np.asarray(logits, dtype=np.float64)
    if a.size == 0:
        raise ValueError("softmax of empty logits")
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# layer types
# ---------------------------------------------------------------------------

@dataclass
class Conv3dLayer:
    """3D convolution weights: kernels (m_in, P, Q, R, m_out) + per-map bias."""

    kernels: Tensor
    biases: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if len(self.kernels.shape) != 5:
            raise ShapeError(f"kernel tensor must have 5 axes, got {self.kernels.shape}")
        _, p, q, r, m_out = self.kernels.shape
        if p < 1 or q < 1 or r < 1:
            raise ShapeError(f"kernel extents must be >= 1, got {p}x{q}x{r}")
        self.biases = np.asarray(self.biases, dtype=self.kernels.dtype).reshape(-1)
        if self.biases.size != m_out:
            raise ShapeError(
                f"bias count {self.biases.size} != output map count {m_out}"
            )
        if self.activation not in _ACT:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def m_in(self) -> int:
        return self.kernels.shape[0]

    @property
    def m_out(self) -> int:
        return self.kernels.shape[4]

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.kernels.shape[1:4]


@dataclass
class PoolRecord:
    """Max-pool output plus the flat source index of every window maximum.

    `switch_offsets` holds a per-window majority vote of the per-channel
    argmax offsets; the deconvolution refiner uses it to unpool tensors
    whose channel count differs from the pooled tensor's.
    """

    output: Tensor
    argmax_indices: np.ndarray  # int64, shaped like output
    in_shape: tuple[int, ...]
    switch_offsets: np.ndarray = field(repr=False, default=None)


@dataclass
class SgdConfig:
    learning_rate: float
    batch_size: int = 100
    epochs: int = 1
    seed: int = 42

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")


# ---------------------------------------------------------------------------
# batched convolution internals (shared by every network in the pipeline)
# ---------------------------------------------------------------------------

def _same_pads(extents) -> list[tuple[int, int]]:
    return [((e - 1) // 2, e // 2) for e in extents]


def _pad_spatial(x5: np.ndarray, pads) -> np.ndarray:
    return np.pad(x5, [(0, 0), (0, 0)] + list(pads), mode="constant")


# windowed correlation materializes an (N,C,out...,P,Q,R) copy; above this
# size fall back to the offset loop, which stays input-sized
_WINDOW_BYTES_LIMIT = 192 * 1024 * 1024


def _window_bytes(n, c, out_spatial, extents) -> int:
    ox, oy, oz = out_spatial
    p, q, r = extents
    return 8 * n * c * ox * oy * oz * p * q * r


def conv_forward_batch(x5: np.ndarray, kernels: np.ndarray, padding: str) -> np.ndarray:
    """Pre-activation correlation of (N,Ci,X,Y,Z) with (Ci,P,Q,R,Co).

    Accumulates one kernel offset at a time (a GEMM per offset) so memory
    stays input-sized and the reduction order is fixed.
    """
    ci, p, q, r, co = kernels.shape
    if x5.shape[1] != ci:
        raise ShapeError(
            f"input channels {x5.shape[1]} (shape {x5.shape[1:]}) != kernel m_in {ci} "
            f"(kernel {kernels.shape})"
        )
    if padding == "same":
        if p % 2 == 0 or q % 2 == 0:
            raise ShapeError(
                f"same padding needs odd spatial kernel extents, got {p}x{q}"
            )
        x5 = _pad_spatial(x5, _same_pads((p, q, r)))
    if any(x5.shape[2 + i] < (p, q, r)[i] for i in range(3)):
        raise ShapeError(
            f"spatial extents {x5.shape[2:]} smaller than kernel extents {(p, q, r)}"
        )
    out_dtype = x5.dtype
    x5 = x5.astype(np.float64, copy=False)
    k = kernels.astype(np.float64, copy=False)
    n = x5.shape[0]
    ox, oy, oz = (x5.shape[2 + i] - (p, q, r)[i] + 1 for i in range(3))
    if _window_bytes(n, ci, (ox, oy, oz), (p, q, r)) <= _WINDOW_BYTES_LIMIT:
        win = np.lib.stride_tricks.sliding_window_view(x5, (p, q, r), axis=(2, 3, 4))
        pre = np.tensordot(win, k, axes=([1, 5, 6, 7], [0, 1, 2, 3]))
    else:
        pre = np.zeros((n, ox, oy, oz, co))
        for dp in range(p):
            for dq in range(q):
                for dr in range(r):
                    sl = x5[:, :, dp : dp + ox, dq : dq + oy, dr : dr + oz]
                    pre += np.tensordot(sl, k[:, dp, dq, dr, :], axes=([1], [0]))
    return np.moveaxis(pre, 4, 1).astype(out_dtype)


def conv_backward_kernel_batch(x5, gpre5, padding: str, extents) -> np.ndarray:
    """Gradient of the pre-activation output w.r.t. the kernels, (Ci,P,Q,R,Co)."""
    p, q, r = extents
    if padding == "same":
        x5 = _pad_spatial(x5, _same_pads((p, q, r)))
    x5 = x5.astype(np.float64, copy=False)
    g = gpre5.astype(np.float64, copy=False)
    ci = x5.shape[1]
    n, co = g.shape[:2]
    ox, oy, oz = g.shape[2:]
    if _window_bytes(n, ci, (ox, oy, oz), (p, q, r)) <= _WINDOW_BYTES_LIMIT:
        win = np.lib.stride_tricks.sliding_window_view(x5, (p, q, r), axis=(2, 3, 4))
        return np.tensordot(win, g, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    gk = np.empty((ci, p, q, r, co))
    for dp in range(p):
        for dq in range(q):
            for dr in range(r):
                sl = x5[:, :, dp : dp + ox, dq : dq + oy, dr : dr + oz]
                gk[:, dp, dq, dr, :] = np.tensordot(sl, g, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gk


def conv_backward_input_batch(gpre5, kernels, padding: str, in_spatial) -> np.ndarray:
    """Adjoint of conv_forward_batch: scatters output gradients onto the input."""
    ci, p, q, r, co = kernels.shape
    g = gpre5.astype(np.float64, copy=False)
    k = kernels.astype(np.float64, copy=False)
    n = g.shape[0]
    ox, oy, oz = g.shape[2:]
    if padding == "same":
        pads = _same_pads((p, q, r))
        padded_spatial = tuple(s + lo + hi for s, (lo, hi) in zip(in_spatial, pads))
    else:
        padded_spatial = tuple(o + e - 1 for o, e in zip((ox, oy, oz), (p, q, r)))
    if _window_bytes(n, co, padded_spatial, (p, q, r)) <= _WINDOW_BYTES_LIMIT:
        full = [(p - 1, p - 1), (q - 1, q - 1), (r - 1, r - 1)]
        gp = _pad_spatial(g, full)
        win = np.lib.stride_tricks.sliding_window_view(gp, (p, q, r), axis=(2, 3, 4))
        kflip = k[:, ::-1, ::-1, ::-1, :]
        gx = np.moveaxis(np.tensordot(win, kflip, axes=([1, 5, 6, 7], [4, 1, 2, 3])), 4, 1)
    else:
        gx = np.zeros((n, ci) + padded_spatial)
        for dp in range(p):
            for dq in range(q):
                for dr in range(r):
                    # (n, ox, oy, oz, ci) contribution of this kernel offset
                    contrib = np.tensordot(g, k[:, dp, dq, dr, :], axes=([1], [1]))
                    gx[:, :, dp : dp + ox, dq : dq + oy, dr : dr + oz] += np.moveaxis(
                        contrib, 4, 1
                    )
    if padding == "same":
        sl = tuple(slice(lo, lo + s) for (lo, _), s in zip(pads, in_spatial))
        gx = gx[(slice(None), slice(None)) + sl]
    return gx.astype(gpre5.dtype)


def conv_output_spatial(in_spatial, extents, padding: str) -> tuple[int, ...]:
    if padding == "same":
        return tuple(in_spatial)
    return tuple(n - e + 1 for n, e in zip(in_spatial, extents))


# ---------------------------------------------------------------------------
# public single-tensor ops
# ---------------------------------------------------------------------------

def conv3d_forward(input: Tensor, layer: Conv3dLayer, padding: str = "valid") -> Tensor:
    """Correlate a (C, X, Y, Z) tensor with the layer kernels and activate."""
    if len(input.shape) != 4:
        raise ShapeError(f"conv3d input must be (C, X, Y, Z), got {input.shape}")
    pre = conv_forward_batch(input.view()[None], layer.kernels.view(), padding)
    pre = pre + layer.biases.astype(pre.dtype)[None, :, None, None, None]
    out = apply_activation(layer.activation, pre[0])
    return Tensor.from_array(out, dtype=input.dtype)


def conv3d_backward(
    input: Tensor, layer: Conv3dLayer, grad_out: Tensor, padding: str = "valid"
):
    """Gradients of conv3d_forward (activation included) w.r.t. input, kernels, biases."""
    x5 = input.view()[None].astype(np.float64)
    k = layer.kernels.view().astype(np.float64)
    pre = conv_forward_batch(x5, k, padding) + layer.biases.astype(np.float64)[None, :, None, None, None]
    if grad_out.shape != pre.shape[1:]:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != forward output shape {pre.shape[1:]}"
        )
    gpre = grad_out.view()[None].astype(np.float64) * activation_derivative(layer.activation, pre)
    gx = conv_backward_input_batch(gpre, k, padding, input.shape[1:])[0]
    gk = conv_backward_kernel_batch(x5, gpre, padding, layer.extents)
    gb = gpre.sum(axis=(0, 2, 3, 4))
    dt = input.dtype
    return (
        Tensor.from_array(gx, dtype=dt),
        Tensor.from_array(gk, dtype=dt),
        gb.astype(dt),
    )


def pool_forward_batch(x5: np.ndarray):
    """2x2 spatial max-pool of (N, C, X, Y, Z); returns (out, offsets).

    Odd extents are padded with -inf. Offsets are window-local codes
    o = 2*dx + dy in {0..3}; argmax takes the first (lowest-flat-index) max.
    """
    n, c, x, y, z = x5.shape
    ox, oy = (x + 1) // 2, (y + 1) // 2
    if x % 2 or y % 2:
        x5 = np.pad(
            x5,
            [(0, 0), (0, 0), (0, x % 2), (0, y % 2), (0, 0)],
            mode="constant",
            constant_values=-np.inf,
        )
    w = x5.reshape(n, c, ox, 2, oy, 2, z)
    cand = np.moveaxis(w, (3, 5), (5, 6)).reshape(n, c, ox, oy, z, 4)
    off = cand.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(cand, off[..., None].astype(np.intp), axis=-1)[..., 0]
    return out.astype(x5.dtype), off


def pool_backward_batch(gout5, off, in_shape):
    n, c, x, y, z = in_shape
    gx = np.zeros((n, c, x + x % 2, y + y % 2, z), dtype=gout5.dtype)
    ox, oy = (x + 1) // 2, (y + 1) // 2
    ii = np.indices((n, c, ox, oy, z), sparse=True)
    dx, dy = (off >> 1).astype(np.intp), (off & 1).astype(np.intp)
    gx[ii[0], ii[1], 2 * ii[2] + dx, 2 * ii[3] + dy, ii[4]] += gout5
    return gx[:, :, :x, :y, :]


def maxpool3d(input: Tensor, window: tuple[int, int] = (2, 2)) -> PoolRecord:
    """2x2 spatial max-pool of (C, X, Y, Z); the spectral axis is untouched."""
    if window != (2, 2):
        raise ValueError(f"only 2x2 pooling windows are supported, got {window}")
    if len(input.shape) != 4:
        raise ShapeError(f"maxpool3d input must be (C, X, Y, Z), got {input.shape}")
    c, x, y, z = input.shape
    out, off = pool_forward_batch(input.view()[None])
    out, off = out[0], off[0]
    dx, dy = (off >> 1).astype(np.int64), (off & 1).astype(np.int64)
    ci, oxi, oyi, zi = np.indices(off.shape, sparse=True)
    sx, sy = 2 * oxi + dx, 2 * oyi + dy
    flat = ((ci * x + sx) * y + sy) * z + zi
    # majority vote of offsets across channels; ties toward the lowest offset
    counts = (off[None, ...] == np.arange(4, dtype=np.uint8)[:, None, None, None, None]).sum(axis=1)
    switches = counts.argmax(axis=0).astype(np.uint8)
    return PoolRecord(
        output=Tensor.from_array(out, dtype=input.dtype),
        argmax_indices=flat,
        in_shape=input.shape,
        switch_offsets=switches,
    )


def unpool3d(record: PoolRecord, values: Tensor) -> Tensor:
    """Scatter `values` back to the recorded argmax locations, zeros elsewhere."""
    if values.shape != record.output.shape:
        raise ShapeError(
            f"unpool input shape {values.shape} != pooled shape {record.output.shape}"
        )
    idx = record.argmax_indices.reshape(-1)
    total = int(np.prod(record.in_shape))
    if idx.size and (idx.min() < 0 or idx.max() >= total):
        raise CorruptRecordError(
            f"argmax index out of range for source shape {record.in_shape}"
        )
    out = np.zeros(total, dtype=values.dtype)
    out[idx] = values.data
    return Tensor(record.in_shape, out)


def deconv3d(
    input: Tensor,
    layer: Conv3dLayer,
    padding: str = "valid",
    bias: np.ndarray | None = None,
) -> Tensor:
    """Transposed convolution: the exact adjoint of conv3d_forward.

    Maps m_out channels back to m_in; `valid` grows each spatial extent by
    (kernel - 1), `same` preserves extents. An optional per-output-map bias
    (length m_in) is added before the layer activation.
    """
    if len(input.shape) != 4:
        raise ShapeError(f"deconv3d input must be (C, X, Y, Z), got {input.shape}")
    if input.shape[0] != layer.m_out:
        raise ShapeError(
            f"deconv3d input channels {input.shape[0]} != kernel m_out {layer.m_out} "
            f"(kernel {layer.kernels.shape})"
        )
    if padding == "same":
        out_spatial = input.shape[1:]
    else:
        out_spatial = tuple(n + e - 1 for n, e in zip(input.shape[1:], layer.extents))
    lin = conv_backward_input_batch(
        input.view()[None], layer.kernels.view(), padding, out_spatial
    )[0]
    if bias is not None:
        lin = lin + np.asarray(bias, dtype=lin.dtype)[:, None, None, None]
    out = apply_activation(layer.activation, lin)
    return Tensor.from_array(out, dtype=input.dtype)


def deconv3d_backward(
    input: Tensor,
    layer: Conv3dLayer,
    grad_out: Tensor,
    padding: str = "valid",
    bias: np.ndarray | None = None,
):
    """Gradients of deconv3d w.r.t. input, kernels, and the deconv bias."""
    if padding == "same":
        out_spatial = input.shape[1:]
    else:
        out_spatial = tuple(n + e - 1 for n, e in zip(input.shape[1:], layer.extents))
    x5 = input.view()[None].astype(np.float64)
    k = layer.kernels.view().astype(np.float64)
    pre = conv_backward_input_batch(x5, k, padding, out_spatial)
    if bias is not None:
        pre = pre + np.asarray(bias, dtype=np.float64)[None, :, None, None, None]
    if grad_out.shape != pre.shape[1:]:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != deconv output shape {pre.shape[1:]}"
        )
    gpre = grad_out.view()[None].astype(np.float64) * activation_derivative(layer.activation, pre)
    gx = conv_forward_batch(gpre, k, padding)[0]
    gk = conv_backward_kernel_batch(gpre, x5, padding, layer.extents)
    gb = gpre.sum(axis=(0, 2, 3, 4))
    dt = input.dtype
    return (
        Tensor.from_array(gx, dtype=dt),
        Tensor.from_array(gk, dtype=dt),
        gb.astype(dt),
    )


# ---------------------------------------------------------------------------
# dense layer + optimizer step
# ---------------------------------------------------------------------------

def dense_forward(x2: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                  activation: str = "identity") -> np.ndarray:
    pre = x2.astype(np.float64) @ weights.astype(np.float64) + bias.astype(np.float64)
    return apply_activation(activation, pre).astype(x2.dtype)


def dense_backward(x2, weights, bias, grad_out, activation: str = "identity"):
    pre = x2.astype(np.float64) @ weights.astype(np.float64) + bias.astype(np.float64)
    gpre = grad_out.astype(np.float64) * activation_derivative(activation, pre)
    gx = gpre @ weights.astype(np.float64).T
    gw = x2.astype(np.float64).T @ gpre
    gb = gpre.sum(axis=0)
    return gx.astype(x2.dtype), gw.astype(x2.dtype), gb.astype(x2.dtype)


def sgd_step(params, grads, config: SgdConfig):
    """w <- w - eta * g, applied recursively over arrays, dicts and sequences."""
    eta = config.learning_rate
    if isinstance(params, Tensor):
        return Tensor(params.shape, params.data - eta * grads.data.astype(params.dtype))
    if isinstance(params, np.ndarray):
        g = np.asarray(grads)
        if g.shape != params.shape:
            raise ShapeError(f"param shape {params.shape} != grad shape {g.shape}")
        return params - eta * g.astype(params.dtype)
    if isinstance(params, dict):
        return {k: sgd_step(v, grads[k], config) for k, v in params.items()}
    if isinstance(params, (list, tuple)):
        out = [sgd_step(p, g, config) for p, g in zip(params, grads)]
        return type(params)(out)
    raise TypeError(f"cannot update parameters of type {type(params)!r}")
