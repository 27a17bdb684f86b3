"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba versions are used when numba imports cleanly and the environment
variable ``DFSHIELD_DISABLE_NUMBA`` is unset (or ``0``).  Both paths expose the
same signatures; ``numpy_impl`` and ``numba_impl`` give direct access to each
so tests and benchmarks can compare them.

Kernels
-------
conv2d_forward, conv2d_backward_input, conv2d_backward_weight
    Stride-1, zero-padded 2-D cross-correlation (NCHW / OIHW layout).
pairwise_distances
    Euclidean distance matrix, squared differences summed in feature order.
nearest_centroid
    Index of the closest centroid per row (lowest index wins ties).
sign_refine
    Per-element sign agreement, threshold mask and agreeing-component sum
    over a stack of B flattened gradients.
"""
import os
import types

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

DISABLED = os.environ.get("DFSHIELD_DISABLE_NUMBA", "0") not in ("", "0")


# --------------------------------------------------------------------------
# numpy fallbacks
# --------------------------------------------------------------------------

def _np_conv2d_forward(x, w, pad):
    k_h, k_w = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k_h, k_w), axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", win, w, optimize=True)


def _np_conv2d_backward_input(gout, w, pad, in_h, in_w):
    n = gout.shape[0]
    c_in, k_h, k_w = w.shape[1], w.shape[2], w.shape[3]
    out_h, out_w = gout.shape[2], gout.shape[3]
    gxp = np.zeros((n, c_in, in_h + 2 * pad, in_w + 2 * pad))
    for i in range(k_h):
        for j in range(k_w):
            gxp[:, :, i:i + out_h, j:j + out_w] += np.einsum(
                "nohw,oc->nchw", gout, w[:, :, i, j], optimize=True)
    return gxp[:, :, pad:pad + in_h, pad:pad + in_w].copy()


def _np_conv2d_backward_weight(gout, x, pad, k_h, k_w):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k_h, k_w), axis=(2, 3))
    return np.einsum("nohw,nchwij->ocij", gout, win, optimize=True)


def _np_pairwise_distances(a, b):
    n, m, d = a.shape[0], b.shape[0], a.shape[1]
    out = np.empty((n, m))
    rows = max(1, 4_000_000 // max(1, m * d))
    for s in range(0, n, rows):
        diff = a[s:s + rows, None, :] - b[None, :, :]
        out[s:s + rows] = np.sqrt(np.square(diff).sum(axis=-1))
    return out


def _np_nearest_centroid(x, c):
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    rows = max(1, 4_000_000 // max(1, c.shape[0] * x.shape[1]))
    for s in range(0, n, rows):
        diff = x[s:s + rows, None, :] - c[None, :, :]
        out[s:s + rows] = np.argmin(np.square(diff).sum(axis=-1), axis=1)
    return out


def _np_sign_refine(grads, tau):
    n_batches = grads.shape[0]
    signs = np.sign(grads)
    agreement = signs.sum(axis=0) / n_batches
    mask = np.abs(agreement) >= tau
    agree = (agreement[None, :] * grads) > 0
    total = np.where(agree, grads, 0.0).sum(axis=0)
    refined = np.where(mask, total, 0.0)
    return agreement, mask, refined


numpy_impl = types.SimpleNamespace(
    conv2d_forward=_np_conv2d_forward,
    conv2d_backward_input=_np_conv2d_backward_input,
    conv2d_backward_weight=_np_conv2d_backward_weight,
    pairwise_distances=_np_pairwise_distances,
    nearest_centroid=_np_nearest_centroid,
    sign_refine=_np_sign_refine,
)


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

def _build_numba():
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def _im2col(x, pad, k_h, k_w, out_h, out_w):
        # rows (b, y, z), columns (c, i, j); zero outside the image
        n, c_in, h, wd = x.shape
        cols = np.zeros((n * out_h * out_w, c_in * k_h * k_w))
        for b in range(n):
            for y in range(out_h):
                for z in range(out_w):
                    r = (b * out_h + y) * out_w + z
                    for c in range(c_in):
                        for i in range(k_h):
                            yy = y + i - pad
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(k_w):
                                zz = z + j - pad
                                if zz >= 0 and zz < wd:
                                    cols[r, (c * k_h + i) * k_w + j] = x[b, c, yy, zz]
        return cols

    @njit
    def _col2im(cols, n, c_in, h, wd, pad, k_h, k_w, out_h, out_w):
        gx = np.zeros((n, c_in, h, wd))
        for b in range(n):
            for y in range(out_h):
                for z in range(out_w):
                    r = (b * out_h + y) * out_w + z
                    for c in range(c_in):
                        for i in range(k_h):
                            yy = y + i - pad
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(k_w):
                                zz = z + j - pad
                                if zz >= 0 and zz < wd:
                                    gx[b, c, yy, zz] += cols[r, (c * k_h + i) * k_w + j]
        return gx

    @njit
    def _rows_to_nchw(rows, n, c_out, out_h, out_w):
        out = np.empty((n, c_out, out_h, out_w))
        for b in range(n):
            for y in range(out_h):
                for z in range(out_w):
                    r = (b * out_h + y) * out_w + z
                    for o in range(c_out):
                        out[b, o, y, z] = rows[r, o]
        return out

    @njit
    def _nchw_to_rows(g):
        n, c_out, out_h, out_w = g.shape
        rows = np.empty((n * out_h * out_w, c_out))
        for b in range(n):
            for o in range(c_out):
                for y in range(out_h):
                    for z in range(out_w):
                        rows[(b * out_h + y) * out_w + z, o] = g[b, o, y, z]
        return rows

    @njit
    def conv2d_forward(x, w, pad):
        n, c_in, h, wd = x.shape
        c_out, _, k_h, k_w = w.shape
        out_h = h + 2 * pad - k_h + 1
        out_w = wd + 2 * pad - k_w + 1
        cols = _im2col(x, pad, k_h, k_w, out_h, out_w)
        rows = np.dot(cols, np.ascontiguousarray(w.reshape(c_out, -1).T))
        return _rows_to_nchw(rows, n, c_out, out_h, out_w)

    @njit
    def conv2d_backward_input(gout, w, pad, in_h, in_w):
        n, c_out, out_h, out_w = gout.shape
        c_in, k_h, k_w = w.shape[1], w.shape[2], w.shape[3]
        cols = np.dot(_nchw_to_rows(gout), np.ascontiguousarray(w.reshape(c_out, -1)))
        return _col2im(cols, n, c_in, in_h, in_w, pad, k_h, k_w, out_h, out_w)

    @njit
    def conv2d_backward_weight(gout, x, pad, k_h, k_w):
        n, c_out, out_h, out_w = gout.shape
        c_in = x.shape[1]
        cols = _im2col(x, pad, k_h, k_w, out_h, out_w)
        gw = np.dot(np.ascontiguousarray(_nchw_to_rows(gout).T), cols)
        return gw.reshape(c_out, c_in, k_h, k_w)

    @njit
    def pairwise_distances(a, b):
        n, d = a.shape
        m = b.shape[0]
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    t = a[i, k] - b[j, k]
                    acc += t * t
                out[i, j] = np.sqrt(acc)
        return out

    @njit
    def nearest_centroid(x, c):
        n, d = x.shape
        k = c.shape[0]
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            best = np.inf
            arg = 0
            for j in range(k):
                acc = 0.0
                for t in range(d):
                    u = x[i, t] - c[j, t]
                    acc += u * u
                if acc < best:
                    best = acc
                    arg = j
            out[i] = arg
        return out

    @njit
    def sign_refine(grads, tau):
        n_batches, p = grads.shape
        agreement = np.empty(p)
        mask = np.empty(p, dtype=np.bool_)
        refined = np.empty(p)
        for k in range(p):
            s = 0.0
            for b in range(n_batches):
                g = grads[b, k]
                if g > 0:
                    s += 1.0
                elif g < 0:
                    s -= 1.0
            a = s / n_batches
            agreement[k] = a
            keep = abs(a) >= tau
            mask[k] = keep
            total = 0.0
            for b in range(n_batches):
                g = grads[b, k]
                if a * g > 0:
                    total += g
            refined[k] = total if keep else 0.0
        return agreement, mask, refined

    return types.SimpleNamespace(
        conv2d_forward=conv2d_forward,
        conv2d_backward_input=conv2d_backward_input,
        conv2d_backward_weight=conv2d_backward_weight,
        pairwise_distances=pairwise_distances,
        nearest_centroid=nearest_centroid,
        sign_refine=sign_refine,
    )


numba_impl = _build_numba() if numba is not None else None
USE_NUMBA = numba_impl is not None and not DISABLED
_active = numba_impl if USE_NUMBA else numpy_impl


def _contig(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, pad):
    return _active.conv2d_forward(_contig(x), _contig(w), int(pad))


def conv2d_backward_input(gout, w, pad, in_h, in_w):
    return _active.conv2d_backward_input(_contig(gout), _contig(w), int(pad),
                                         int(in_h), int(in_w))


def conv2d_backward_weight(gout, x, pad, k_h, k_w):
    return _active.conv2d_backward_weight(_contig(gout), _contig(x), int(pad),
                                          int(k_h), int(k_w))


def pairwise_distances(a, b):
    return _active.pairwise_distances(_contig(a), _contig(b))


def nearest_centroid(x, c):
    return _active.nearest_centroid(_contig(x), _contig(c))


def sign_refine(grads, tau):
    return _active.sign_refine(_contig(grads), float(tau))


def backend():
    """Name of the active kernel backend (``"numba"`` or ``"numpy"``)."""
    return "numba" if USE_NUMBA else "numpy"
