"""Hot inner loops, with numba and pure-numpy implementations.

The backend is picked once at import time. Set ``CROSSBAR_NUMBA=0`` to force
the numpy path (numba is also skipped automatically when it is not
importable). Both implementations are always importable under explicit
names so tests and benchmarks can compare them directly.
"""
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def _flag_enabled(value):
    return value.strip().lower() not in ("0", "false", "no", "off", "")


USE_NUMBA = HAVE_NUMBA and _flag_enabled(os.environ.get("CROSSBAR_NUMBA", "1"))


def _njit(func):
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def _out_dim(n, k, s):
    return (n - k) // s + 1


# --------------------------------------------------------------------------
# im2col / col2im on channel-major maps x[c, n, h, w]. The column matrix is
# (c*kh*kw, n*oh*ow) so a (cout, c*kh*kw) kernel matrix times it lands
# directly in channel-major output layout.
# --------------------------------------------------------------------------

def im2col_numpy(x, kh, kw, sh=1, sw=1):
    c, n, h, w = x.shape
    oh, ow = _out_dim(h, kh, sh), _out_dim(w, kw, sw)
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = x[:, :, u:u + sh * (oh - 1) + 1:sh, v:v + sw * (ow - 1) + 1:sw]
    return cols.reshape(c * kh * kw, n * oh * ow)


@_njit
def _im2col_nb(x, kh, kw, sh, sw):
    c, n, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    cols = np.empty((c * kh * kw, n * oh * ow), dtype=x.dtype)
    for ch in range(c):
        for u in range(kh):
            for v in range(kw):
                dst = cols[(ch * kh + u) * kw + v]
                for b in range(n):
                    for i in range(oh):
                        srow = x[ch, b, i * sh + u]
                        base = (b * oh + i) * ow
                        for j in range(ow):
                            dst[base + j] = srow[j * sw + v]
    return cols


def im2col_numba(x, kh, kw, sh=1, sw=1):
    return _im2col_nb(np.ascontiguousarray(x), kh, kw, sh, sw)


def col2im_numpy(cols, x_shape, kh, kw, sh=1, sw=1):
    c, n, h, w = x_shape
    oh, ow = _out_dim(h, kh, sh), _out_dim(w, kw, sw)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    dx = np.zeros(x_shape, dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            dx[:, :, u:u + sh * (oh - 1) + 1:sh, v:v + sw * (ow - 1) + 1:sw] += cols[:, u, v]
    return dx


@_njit
def _col2im_nb(cols, c, n, h, w, kh, kw, sh, sw):
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    dx = np.zeros((c, n, h, w), dtype=cols.dtype)
    for ch in range(c):
        for u in range(kh):
            for v in range(kw):
                row = (ch * kh + u) * kw + v
                for b in range(n):
                    for i in range(oh):
                        base = (b * oh + i) * ow
                        for j in range(ow):
                            dx[ch, b, i * sh + u, j * sw + v] += cols[row, base + j]
    return dx


def col2im_numba(cols, x_shape, kh, kw, sh=1, sw=1):
    c, n, h, w = x_shape
    return _col2im_nb(np.ascontiguousarray(cols), c, n, h, w, kh, kw, sh, sw)


# --------------------------------------------------------------------------
# max pooling; argmax is the row-major offset inside the window, first max wins
# --------------------------------------------------------------------------

def maxpool_forward_numpy(x, ph, pw, sh, sw):
    n, c, h, w = x.shape
    oh, ow = _out_dim(h, ph, sh), _out_dim(w, pw, sw)
    win = np.lib.stride_tricks.sliding_window_view(x, (ph, pw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :oh, :ow].reshape(n, c, oh, ow, ph * pw)
    arg = np.argmax(win, axis=-1)  # numpy argmax returns the first occurrence
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


@_njit
def _maxpool_fwd_nb(x, ph, pw, sh, sw):
    n, c, h, w = x.shape
    oh = (h - ph) // sh + 1
    ow = (w - pw) // sw + 1
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    best = x[b, ch, i * sh, j * sw]
                    bi = 0
                    for u in range(ph):
                        for v in range(pw):
                            val = x[b, ch, i * sh + u, j * sw + v]
                            if val > best:
                                best = val
                                bi = u * pw + v
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = bi
    return out, arg


def maxpool_forward_numba(x, ph, pw, sh, sw):
    return _maxpool_fwd_nb(np.ascontiguousarray(x), ph, pw, sh, sw)


def maxpool_backward_numpy(grad_out, arg, x_shape, ph, pw, sh, sw):
    n, c, oh, ow = grad_out.shape
    dx = np.zeros(x_shape, dtype=grad_out.dtype)
    rows = (np.arange(oh) * sh)[:, None] + arg // pw
    cols = (np.arange(ow) * sw)[None, :] + arg % pw
    bi = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (bi, ci, rows, cols), grad_out)
    return dx


@_njit
def _maxpool_bwd_nb(grad_out, arg, n, c, h, w, pw, sh, sw):
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    dx = np.zeros((n, c, h, w), dtype=grad_out.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    a = arg[b, ch, i, j]
                    dx[b, ch, i * sh + a // pw, j * sw + a % pw] += grad_out[b, ch, i, j]
    return dx


def maxpool_backward_numba(grad_out, arg, x_shape, ph, pw, sh, sw):
    n, c, h, w = x_shape
    return _maxpool_bwd_nb(np.ascontiguousarray(grad_out), np.ascontiguousarray(arg), n, c, h, w, pw, sh, sw)


# --------------------------------------------------------------------------
# directed Hausdorff on integer point sets; returns the squared distance
# --------------------------------------------------------------------------

def directed_hausdorff_sq_numpy(a, b, chunk=2048):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    worst = 0
    for start in range(0, len(a), chunk):
        blk = a[start:start + chunk]
        d = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        worst = max(worst, int(d.min(axis=1).max()))
    return worst


@_njit
def _directed_hausdorff_sq_nb(a, b):
    worst = 0
    for i in range(a.shape[0]):
        best = -1
        for j in range(b.shape[0]):
            dr = a[i, 0] - b[j, 0]
            dc = a[i, 1] - b[j, 1]
            d = dr * dr + dc * dc
            if best < 0 or d < best:
                best = d
                if best <= worst:
                    break  # this point cannot raise the max
        if best > worst:
            worst = best
    return worst


def directed_hausdorff_sq_numba(a, b):
    return int(_directed_hausdorff_sq_nb(np.ascontiguousarray(a, dtype=np.int64),
                                         np.ascontiguousarray(b, dtype=np.int64)))


# numpy's strided block copies beat the numba loop for im2col (see
# benchmarks/bench_kernels.py), so both backends use them.
im2col = im2col_numpy
if USE_NUMBA:
    col2im = col2im_numba
    maxpool_forward = maxpool_forward_numba
    maxpool_backward = maxpool_backward_numba
    directed_hausdorff_sq = directed_hausdorff_sq_numba
else:
    col2im = col2im_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy
    directed_hausdorff_sq = directed_hausdorff_sq_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
