"""Dilated same-padded 2-D convolution kernels.

Two interchangeable backends compute the same thing:

* ``numba`` - compiled im2col gather (and col2im scatter for the input adjoint)
  around one BLAS product per image, parallel over the batch.  Each image is
  handled by one thread and the kernel-gradient batch sum is serial, so results
  do not depend on the numba thread count.
* ``numpy`` - one BLAS contraction per filter tap over shifted slices.

``conv2d_reference`` is a deliberately naive direct sum used as the referee for
both.
"""

import numpy as np

from amdcn._jit import DEFAULT_BACKEND, HAS_NUMBA, jit_opts, njit, prange

BACKENDS = ("numba", "numpy")
_backend = DEFAULT_BACKEND


def get_backend():
    return _backend


def set_backend(name):
    """Select the kernel backend for subsequent calls; returns the previous one."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    prev, _backend = _backend, name
    return prev


def _tap_range(n, shift):
    # output rows/cols whose shifted source index stays inside [0, n)
    return max(0, -shift), min(n, n - shift)


# ---------------------------------------------------------------------------
# numba: compiled im2col gather / col2im scatter around a BLAS product per image


@njit(**jit_opts(parallel=False))
def _im2col(src, dil, KH, KW, col):
    # src [Ci,H,W] -> col [Ci*KH*KW, H*W], zero where the tap falls in the padding
    Ci, H, W = src.shape
    ch = (KH - 1) // 2
    cw = (KW - 1) // 2
    col[:, :] = 0.0
    for ci in range(Ci):
        for i in range(KH):
            dy = dil * (i - ch)
            y0 = max(0, -dy)
            y1 = min(H, H - dy)
            for j in range(KW):
                dx = dil * (j - cw)
                x0 = max(0, -dx)
                x1 = min(W, W - dx)
                r = (ci * KH + i) * KW + j
                for y in range(y0, y1):
                    base = y * W
                    srow = src[ci, y + dy]
                    for xx in range(x0, x1):
                        col[r, base + xx] = srow[xx + dx]


@njit(**jit_opts(parallel=False))
def _col2im(col, dil, KH, KW, dst):
    # adjoint of _im2col: dst [Ci,H,W] accumulates col [Ci*KH*KW, H*W]
    Ci, H, W = dst.shape
    ch = (KH - 1) // 2
    cw = (KW - 1) // 2
    dst[:, :, :] = 0.0
    for ci in range(Ci):
        for i in range(KH):
            dy = dil * (i - ch)
            y0 = max(0, -dy)
            y1 = min(H, H - dy)
            for j in range(KW):
                dx = dil * (j - cw)
                x0 = max(0, -dx)
                x1 = min(W, W - dx)
                r = (ci * KH + i) * KW + j
                for y in range(y0, y1):
                    base = y * W
                    drow = dst[ci, y + dy]
                    for xx in range(x0, x1):
                        drow[xx + dx] += col[r, base + xx]


@njit(**jit_opts())
def _fwd_numba(x, w, b, dil, out):
    B, Ci, H, W = x.shape
    Co, _, KH, KW = w.shape
    wm = np.ascontiguousarray(w).reshape(Co, Ci * KH * KW)
    for n in prange(B):
        col = np.empty((Ci * KH * KW, H * W), dtype=x.dtype)
        _im2col(x[n], dil, KH, KW, col)
        res = np.dot(wm, col)
        for co in range(Co):
            o = out[n, co].reshape(H * W)
            bv = b[co]
            for p in range(H * W):
                o[p] = res[co, p] + bv


@njit(**jit_opts())
def _bwd_input_numba(g, w, dil, gin):
    B, Co, H, W = g.shape
    _, Ci, KH, KW = w.shape
    wt = np.ascontiguousarray(np.ascontiguousarray(w).reshape(Co, Ci * KH * KW).T)
    for n in prange(B):
        gcol = np.dot(wt, np.ascontiguousarray(g[n]).reshape(Co, H * W))
        _col2im(gcol, dil, KH, KW, gin[n])


@njit(**jit_opts(parallel=False))
def _bwd_kernel_numba(g, x, dil, gw):
    # batch reduction kept serial so the summation order is fixed
    B, Co, H, W = g.shape
    _, Ci, KH, KW = gw.shape
    K = Ci * KH * KW
    acc = np.zeros((Co, K), dtype=g.dtype)
    col = np.empty((K, H * W), dtype=g.dtype)
    for n in range(B):
        _im2col(x[n], dil, KH, KW, col)
        acc += np.dot(np.ascontiguousarray(g[n]).reshape(Co, H * W), col.T)
    gw[:, :, :, :] = acc.reshape(Co, Ci, KH, KW)


# ---------------------------------------------------------------------------
# numpy


def _fwd_numpy(x, w, b, dil, out):
    B, Ci, H, W = x.shape
    Co, _, KH, KW = w.shape
    ch, cw = (KH - 1) // 2, (KW - 1) // 2
    out[...] = b[None, :, None, None]
    for i in range(KH):
        dy = dil * (i - ch)
        y0, y1 = _tap_range(H, dy)
        if y0 >= y1:
            continue
        for j in range(KW):
            dx = dil * (j - cw)
            x0, x1 = _tap_range(W, dx)
            if x0 >= x1:
                continue
            src = x[:, :, y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            # (Co, Ci) . (B, Ci, h, w) -> (Co, B, h, w)
            contrib = np.tensordot(w[:, :, i, j], src, axes=([1], [1]))
            out[:, :, y0:y1, x0:x1] += contrib.transpose(1, 0, 2, 3)


def _bwd_input_numpy(g, w, dil, gin):
    B, Co, H, W = g.shape
    _, Ci, KH, KW = w.shape
    ch, cw = (KH - 1) // 2, (KW - 1) // 2
    gin[...] = 0.0
    for i in range(KH):
        dy = dil * (i - ch)
        y0, y1 = _tap_range(H, dy)
        if y0 >= y1:
            continue
        for j in range(KW):
            dx = dil * (j - cw)
            x0, x1 = _tap_range(W, dx)
            if x0 >= x1:
                continue
            # (Co, Ci)^T . (B, Co, h, w) -> (Ci, B, h, w)
            contrib = np.tensordot(w[:, :, i, j], g[:, :, y0:y1, x0:x1], axes=([0], [1]))
            gin[:, :, y0 + dy:y1 + dy, x0 + dx:x1 + dx] += contrib.transpose(1, 0, 2, 3)


def _bwd_kernel_numpy(g, x, dil, gw):
    B, Co, H, W = g.shape
    _, Ci, KH, KW = gw.shape
    ch, cw = (KH - 1) // 2, (KW - 1) // 2
    gw[...] = 0.0
    for i in range(KH):
        dy = dil * (i - ch)
        y0, y1 = _tap_range(H, dy)
        if y0 >= y1:
            continue
        for j in range(KW):
            dx = dil * (j - cw)
            x0, x1 = _tap_range(W, dx)
            if x0 >= x1:
                continue
            src = x[:, :, y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            gw[:, :, i, j] = np.tensordot(g[:, :, y0:y1, x0:x1], src, axes=([0, 2, 3], [0, 2, 3]))


_IMPL = {
    "numba": (_fwd_numba, _bwd_input_numba, _bwd_kernel_numba),
    "numpy": (_fwd_numpy, _bwd_input_numpy, _bwd_kernel_numpy),
}


def _pick(backend):
    return _IMPL[backend or _backend]


def conv2d_forward(x, w, b, dilation, backend=None):
    """Same-padded dilated convolution of ``x[B,Ci,H,W]`` with ``w[Co,Ci,kh,kw]`` plus ``b[Co]``."""
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    b = np.ascontiguousarray(b, dtype=x.dtype)
    out = np.empty((x.shape[0], w.shape[0], x.shape[2], x.shape[3]), dtype=x.dtype)
    _pick(backend)[0](x, w, b, int(dilation), out)
    return out


def conv2d_backward_input(grad_out, w, dilation, backend=None):
    g = np.ascontiguousarray(grad_out)
    w = np.ascontiguousarray(w, dtype=g.dtype)
    gin = np.empty((g.shape[0], w.shape[1], g.shape[2], g.shape[3]), dtype=g.dtype)
    _pick(backend)[1](g, w, int(dilation), gin)
    return gin


def conv2d_backward_kernel(grad_out, x, kernel_shape, dilation, backend=None):
    g = np.ascontiguousarray(grad_out)
    x = np.ascontiguousarray(x, dtype=g.dtype)
    gw = np.empty(kernel_shape, dtype=g.dtype)
    _pick(backend)[2](g, x, int(dilation), gw)
    return gw


def conv2d_reference(x, w, b, dilation):
    """Direct evaluation of the dilated-convolution sum, one output pixel at a time."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, Ci, H, W = x.shape
    Co, _, KH, KW = w.shape
    ch, cw = (KH - 1) // 2, (KW - 1) // 2
    out = np.zeros((B, Co, H, W))
    for n in range(B):
        for co in range(Co):
            for y in range(H):
                for xx in range(W):
                    s = float(b[co])
                    for ci in range(Ci):
                        for i in range(KH):
                            for j in range(KW):
                                sy = y + dilation * (i - ch)
                                sx = xx + dilation * (j - cw)
                                if 0 <= sy < H and 0 <= sx < W:
                                    s += x[n, ci, sy, sx] * w[co, ci, i, j]
                    out[n, co, y, xx] = s
    return out
