# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled rendering kernels: bilinear blob splatting and 3x3 convolution.

Must match slenderfit._kernels._fallback to float rounding; the blob grid
spans [-3, 3] blob units with a one-cell zero fade outside.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, floor

cnp.import_array()

cdef double BLOB_RADIUS = 3.0


cdef inline double _read(const double[:, ::1] blob, Py_ssize_t g,
                         Py_ssize_t iy, Py_ssize_t ix) nogil:
    if iy < 0 or iy >= g or ix < 0 or ix >= g:
        return 0.0
    return blob[iy, ix]


def splat_fwd(const double[:, ::1] blob, const double[::1] xs,
              const double[::1] ys, const double[::1] scales,
              double[:, ::1] canvas):
    """Accumulate M bilinear blob splats into ``canvas`` (in place)."""
    cdef Py_ssize_t g = blob.shape[0]
    cdef Py_ssize_t h = canvas.shape[0]
    cdef Py_ssize_t w = canvas.shape[1]
    cdef Py_ssize_t m = xs.shape[0]
    cdef double delta = 2.0 * BLOB_RADIUS / (g - 1)
    cdef double c = (g - 1) / 2.0
    cdef Py_ssize_t k, i, j, i0, i1, j0, j1, ix, iy
    cdef double cx, cy, s, r, inv, gx, gy, tx, ty
    cdef double b00, b01, b10, b11, val, fx, fy

    with nogil:
        for k in range(m):
            cx = xs[k]
            cy = ys[k]
            s = scales[k]
            inv = 1.0 / (s * delta)
            r = s * (BLOB_RADIUS + delta)
            i0 = <Py_ssize_t>ceil(cy - r)
            i1 = <Py_ssize_t>floor(cy + r)
            j0 = <Py_ssize_t>ceil(cx - r)
            j1 = <Py_ssize_t>floor(cx + r)
            if i0 < 0: i0 = 0
            if j0 < 0: j0 = 0
            if i1 > h - 1: i1 = h - 1
            if j1 > w - 1: j1 = w - 1
            for i in range(i0, i1 + 1):
                gy = (i - cy) * inv + c
                fy = floor(gy)
                ty = gy - fy
                iy = <Py_ssize_t>fy
                for j in range(j0, j1 + 1):
                    gx = (j - cx) * inv + c
                    fx = floor(gx)
                    tx = gx - fx
                    ix = <Py_ssize_t>fx
                    b00 = _read(blob, g, iy, ix)
                    b01 = _read(blob, g, iy, ix + 1)
                    b10 = _read(blob, g, iy + 1, ix)
                    b11 = _read(blob, g, iy + 1, ix + 1)
                    val = ((1.0 - tx) * (1.0 - ty) * b00 + tx * (1.0 - ty) * b01
                           + (1.0 - tx) * ty * b10 + tx * ty * b11)
                    canvas[i, j] += val


def splat_bwd(const double[:, ::1] blob, const double[::1] xs,
              const double[::1] ys, const double[::1] scales,
              const double[:, ::1] dcanvas):
    """Gradients of splat_fwd w.r.t. blob pixels, centers, and scales."""
    cdef Py_ssize_t g = blob.shape[0]
    cdef Py_ssize_t h = dcanvas.shape[0]
    cdef Py_ssize_t w = dcanvas.shape[1]
    cdef Py_ssize_t m = xs.shape[0]
    cdef double delta = 2.0 * BLOB_RADIUS / (g - 1)
    cdef double c = (g - 1) / 2.0

    dblob_arr = np.zeros((g, g), dtype=np.float64)
    dxs_arr = np.zeros(m, dtype=np.float64)
    dys_arr = np.zeros(m, dtype=np.float64)
    dscales_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] dblob = dblob_arr
    cdef double[::1] dxs = dxs_arr
    cdef double[::1] dys = dys_arr
    cdef double[::1] dscales = dscales_arr

    cdef Py_ssize_t k, i, j, i0, i1, j0, j1, ix, iy
    cdef double cx, cy, s, r, inv, gx, gy, tx, ty, fx, fy
    cdef double b00, b01, b10, b11, dval, dv_dgx, dv_dgy
    cdef double acc_x, acc_y, acc_s

    with nogil:
        for k in range(m):
            cx = xs[k]
            cy = ys[k]
            s = scales[k]
            inv = 1.0 / (s * delta)
            r = s * (BLOB_RADIUS + delta)
            i0 = <Py_ssize_t>ceil(cy - r)
            i1 = <Py_ssize_t>floor(cy + r)
            j0 = <Py_ssize_t>ceil(cx - r)
            j1 = <Py_ssize_t>floor(cx + r)
            if i0 < 0: i0 = 0
            if j0 < 0: j0 = 0
            if i1 > h - 1: i1 = h - 1
            if j1 > w - 1: j1 = w - 1
            acc_x = 0.0
            acc_y = 0.0
            acc_s = 0.0
            for i in range(i0, i1 + 1):
                gy = (i - cy) * inv + c
                fy = floor(gy)
                ty = gy - fy
                iy = <Py_ssize_t>fy
                for j in range(j0, j1 + 1):
                    dval = dcanvas[i, j]
                    gx = (j - cx) * inv + c
                    fx = floor(gx)
                    tx = gx - fx
                    ix = <Py_ssize_t>fx
                    b00 = _read(blob, g, iy, ix)
                    b01 = _read(blob, g, iy, ix + 1)
                    b10 = _read(blob, g, iy + 1, ix)
                    b11 = _read(blob, g, iy + 1, ix + 1)
                    if iy >= 0 and iy < g:
                        if ix >= 0 and ix < g:
                            dblob[iy, ix] += (1.0 - tx) * (1.0 - ty) * dval
                        if ix + 1 >= 0 and ix + 1 < g:
                            dblob[iy, ix + 1] += tx * (1.0 - ty) * dval
                    if iy + 1 >= 0 and iy + 1 < g:
                        if ix >= 0 and ix < g:
                            dblob[iy + 1, ix] += (1.0 - tx) * ty * dval
                        if ix + 1 >= 0 and ix + 1 < g:
                            dblob[iy + 1, ix + 1] += tx * ty * dval
                    dv_dgx = (1.0 - ty) * (b01 - b00) + ty * (b11 - b10)
                    dv_dgy = (1.0 - tx) * (b10 - b00) + tx * (b11 - b01)
                    acc_x += dv_dgx * dval
                    acc_y += dv_dgy * dval
                    acc_s += (dv_dgx * (gx - c) + dv_dgy * (gy - c)) * dval
            dxs[k] = -acc_x * inv
            dys[k] = -acc_y * inv
            dscales[k] = -acc_s / s
    return dblob_arr, dxs_arr, dys_arr, dscales_arr


def conv3x3_fwd(const double[:, ::1] img, const double[:, ::1] kernel):
    """3x3 cross-correlation with replicate padding; same-size output."""
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    out_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, a, b, ii, jj
    cdef double acc
    with nogil:
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for a in range(3):
                    ii = i + a - 1
                    if ii < 0: ii = 0
                    if ii > h - 1: ii = h - 1
                    for b in range(3):
                        jj = j + b - 1
                        if jj < 0: jj = 0
                        if jj > w - 1: jj = w - 1
                        acc += kernel[a, b] * img[ii, jj]
                out[i, j] = acc
    return out_arr


def conv3x3_bwd(const double[:, ::1] img, const double[:, ::1] kernel,
                const double[:, ::1] dout):
    """Gradients of conv3x3_fwd w.r.t. the image and the kernel."""
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    dimg_arr = np.zeros((h, w), dtype=np.float64)
    dk_arr = np.zeros((3, 3), dtype=np.float64)
    cdef double[:, ::1] dimg = dimg_arr
    cdef double[:, ::1] dk = dk_arr
    cdef Py_ssize_t i, j, a, b, ii, jj
    cdef double dv
    with nogil:
        for i in range(h):
            for j in range(w):
                dv = dout[i, j]
                for a in range(3):
                    ii = i + a - 1
                    if ii < 0: ii = 0
                    if ii > h - 1: ii = h - 1
                    for b in range(3):
                        jj = j + b - 1
                        if jj < 0: jj = 0
                        if jj > w - 1: jj = w - 1
                        dk[a, b] += dv * img[ii, jj]
                        dimg[ii, jj] += dv * kernel[a, b]
    return dimg_arr, dk_arr
