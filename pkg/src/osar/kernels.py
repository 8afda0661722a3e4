"""Hot numeric kernels behind the convolution layers.

Convolutions are lowered to matrix multiplies through im2col/col2im. The
patch-gather and scatter-add loops are the only parts numpy does not already
do well, so they are JIT-compiled with numba by default. Set ``OSAR_NO_NUMBA=1``
to force the pure-numpy implementations (bit-identical results, used as the
baseline in benchmarks/bench_kernels.py and as a fallback when numba is
missing).

The column buffer is laid out (C*kh*kw, B*OH*OW), i.e. one row per kernel
tap: the gather then writes long sequential runs instead of scattering one
element per row, and BLAS consumes the transposed view without a copy.
Zero padding is folded into the gather/scatter so no padded copy of the
input is ever materialized.
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("OSAR_NO_NUMBA", "0").lower() not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False


def conv_out_size(size, k, stride, padding):
    """Output extent of a convolution along one axis (floor division)."""
    return (size + 2 * padding - k) // stride + 1


def _im2col_np(img, kh, kw, stride, pad):
    b, c, h, w = img.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad:
        img = np.pad(img, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((c, kh, kw, b, oh, ow), dtype=img.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, i, j] = img[:, :, i:i + stride * oh:stride,
                               j:j + stride * ow:stride].transpose(1, 0, 2, 3)
    return col.reshape(c * kh * kw, b * oh * ow)


def _col2im_np(col, b, c, h, w, kh, kw, stride, pad):
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    col6 = col.reshape(c, kh, kw, b, oh, ow)
    img = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    # Strided slices never alias within one (i, j), so += is a plain scatter-add.
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + stride * oh:stride,
                j:j + stride * ow:stride] += col6[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        img = np.ascontiguousarray(img[:, :, pad:pad + h, pad:pad + w])
    return img


if USE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(img, kh, kw, stride, pad):
        b, c, h, w = img.shape
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        col = np.empty((c * kh * kw, b * oh * ow), dtype=img.dtype)
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        k = (ch * kh + i) * kw + j
                        for y in range(oh):
                            sy = y * stride + i - pad
                            m = (n * oh + y) * ow
                            if sy < 0 or sy >= h:
                                for x in range(ow):
                                    col[k, m + x] = 0
                            else:
                                for x in range(ow):
                                    sx = x * stride + j - pad
                                    if 0 <= sx < w:
                                        col[k, m + x] = img[n, ch, sy, sx]
                                    else:
                                        col[k, m + x] = 0
        return col

    @njit(cache=True)
    def _col2im_nb(col, b, c, h, w, kh, kw, stride, pad):
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        img = np.zeros((b, c, h, w), dtype=col.dtype)
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        k = (ch * kh + i) * kw + j
                        for y in range(oh):
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                continue
                            m = (n * oh + y) * ow
                            for x in range(ow):
                                sx = x * stride + j - pad
                                if 0 <= sx < w:
                                    img[n, ch, sy, sx] += col[k, m + x]
        return img

    def im2col(img, kh, kw, stride, pad=0):
        return _im2col_nb(np.ascontiguousarray(img), kh, kw, stride, pad)

    def col2im(col, b, c, h, w, kh, kw, stride, pad=0):
        return _col2im_nb(np.ascontiguousarray(col), b, c, h, w, kh, kw, stride, pad)

else:

    def im2col(img, kh, kw, stride, pad=0):
        return _im2col_np(img, kh, kw, stride, pad)

    def col2im(col, b, c, h, w, kh, kw, stride, pad=0):
        return _col2im_np(col, b, c, h, w, kh, kw, stride, pad)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
