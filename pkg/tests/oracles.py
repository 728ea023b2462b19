"""Independent brute-force oracles used by the test suite.

These deliberately avoid the library's stride-trick/tensordot code paths:
convolution is re-derived by direct summation, pooling by per-window scans,
gradients by central finite differences.
"""

import numpy as np


def same_pads(extents):
    return [((e - 1) // 2, e // 2) for e in extents]


def conv3d_loop(x, k, bias=None, padding="valid"):
    """Direct summation over output positions; x (C,X,Y,Z), k (C,P,Q,R,Co)."""
    ci, p, q, r, co = k.shape
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if padding == "same":
        pads = same_pads((p, q, r))
        x = np.pad(x, [(0, 0)] + pads)
    _, xx, yy, zz = x.shape
    ox, oy, oz = xx - p + 1, yy - q + 1, zz - r + 1
    out = np.zeros((co, ox, oy, oz))
    for a in range(ox):
        for b in range(oy):
            for c in range(oz):
                win = x[:, a : a + p, b : b + q, c : c + r]
                for j in range(co):
                    out[j, a, b, c] = np.sum(win * k[:, :, :, :, j])
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None, None, None]
    return out


def conv3d_shift_add(x, k, bias=None, padding="valid"):
    """Direct summation via shifted slices; faster oracle for large sweeps."""
    ci, p, q, r, co = k.shape
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if padding == "same":
        x = np.pad(x, [(0, 0)] + same_pads((p, q, r)))
    _, xx, yy, zz = x.shape
    ox, oy, oz = xx - p + 1, yy - q + 1, zz - r + 1
    out = np.zeros((co, ox, oy, oz))
    for i in range(ci):
        for dp in range(p):
            for dq in range(q):
                for dr in range(r):
                    patch = x[i, dp : dp + ox, dq : dq + oy, dr : dr + oz]
                    for j in range(co):
                        out[j] += k[i, dp, dq, dr, j] * patch
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None, None, None]
    return out


def maxpool_scan(x):
    """Per-window scan of (C, X, Y, Z) with 2x2 spatial windows, -inf padding."""
    c, xx, yy, zz = x.shape
    ox, oy = (xx + 1) // 2, (yy + 1) // 2
    out = np.full((c, ox, oy, zz), -np.inf)
    idx = np.zeros((c, ox, oy, zz), dtype=np.int64)
    for ic in range(c):
        for a in range(ox):
            for b in range(oy):
                for z in range(zz):
                    best, best_flat = -np.inf, -1
                    for dx in (0, 1):
                        for dy in (0, 1):
                            sx, sy = 2 * a + dx, 2 * b + dy
                            if sx >= xx or sy >= yy:
                                continue
                            v = x[ic, sx, sy, z]
                            if v > best:
                                best = v
                                best_flat = ((ic * xx + sx) * yy + sy) * zz + z
                    out[ic, a, b, z] = best
                    idx[ic, a, b, z] = best_flat
    return out, idx


def central_difference(f, x, h=1e-3):
    """Elementwise central finite differences of a scalar function of x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradient(analytic, numeric, rtol=1e-3, floor=1e-4):
    """Relative comparison with a small absolute floor for near-zero entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(numeric), floor)
    err = np.abs(analytic - numeric) / denom
    return float(err.max(initial=0.0))
