"""Pure-numpy implementations of the hot rendering kernels.

Semantics reference for the compiled extension: both backends must agree to
float rounding. The blob image covers [-R, R]^2 blob units (R = BLOB_RADIUS)
with grid spacing delta = 2R/(G-1); samples outside the grid read as zero,
with bilinear fade over the last cell, so each splat is a continuous function
of its center and scale.
"""

from __future__ import annotations

import numpy as np

BLOB_RADIUS = 3.0


def _grid_coords(blob, xs, ys, scales, shape):
    """Common splat geometry: per-point pixel boxes and blob-grid coords.

    Returns (rows, cols, gx, gy, valid) arrays of shape (M, S, S) where S is
    the shared box size; ``valid`` masks pixels inside the canvas.
    """
    g = blob.shape[0]
    delta = 2.0 * BLOB_RADIUS / (g - 1)
    h, w = shape
    # support radius in pixels: grid extent plus the one-cell zero fade
    radii = scales * (BLOB_RADIUS + delta)
    rmax = min(float(np.max(radii)), float(max(h, w)))
    half = int(np.ceil(rmax)) + 1  # +1 covers center rounding slack
    offs = np.arange(-half, half + 1)
    rows = np.round(ys).astype(np.int64)[:, None, None] + offs[None, :, None]
    cols = np.round(xs).astype(np.int64)[:, None, None] + offs[None, None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    inv = 1.0 / (scales * delta)
    c = (g - 1) / 2.0
    gx = (cols - xs[:, None, None]) * inv[:, None, None] + c
    gy = (rows - ys[:, None, None]) * inv[:, None, None] + c
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    return rows, cols, gx, gy, valid


def _corners(blob, gx, gy):
    """Zero-padded bilinear corner values and weights at grid coords."""
    g = blob.shape[0]
    fx = np.floor(gx)
    fy = np.floor(gy)
    tx = gx - fx
    ty = gy - fy
    ix = fx.astype(np.int64)
    iy = fy.astype(np.int64)

    def read(iyy, ixx):
        ok = (iyy >= 0) & (iyy < g) & (ixx >= 0) & (ixx < g)
        return np.where(ok, blob[np.clip(iyy, 0, g - 1), np.clip(ixx, 0, g - 1)], 0.0), ok

    b00, _ = read(iy, ix)
    b01, _ = read(iy, ix + 1)
    b10, _ = read(iy + 1, ix)
    b11, _ = read(iy + 1, ix + 1)
    return ix, iy, tx, ty, b00, b01, b10, b11


def splat_fwd(blob, xs, ys, scales, canvas):
    """Accumulate M bilinear blob splats into ``canvas`` (in place)."""
    if xs.size == 0:
        return
    rows, cols, gx, gy, valid = _grid_coords(blob, xs, ys, scales, canvas.shape)
    ix, iy, tx, ty, b00, b01, b10, b11 = _corners(blob, gx, gy)
    val = ((1 - tx) * (1 - ty) * b00 + tx * (1 - ty) * b01
           + (1 - tx) * ty * b10 + tx * ty * b11)
    val = np.where(valid, val, 0.0)
    np.add.at(canvas, (np.clip(rows, 0, canvas.shape[0] - 1).ravel(),
                       np.clip(cols, 0, canvas.shape[1] - 1).ravel()),
              val.ravel())


def splat_bwd(blob, xs, ys, scales, dcanvas):
    """Gradients of splat_fwd w.r.t. blob pixels, centers, and scales."""
    g = blob.shape[0]
    delta = 2.0 * BLOB_RADIUS / (g - 1)
    dblob = np.zeros_like(blob)
    dxs = np.zeros_like(xs)
    dys = np.zeros_like(ys)
    dscales = np.zeros_like(scales)
    if xs.size == 0:
        return dblob, dxs, dys, dscales
    rows, cols, gx, gy, valid = _grid_coords(blob, xs, ys, scales, dcanvas.shape)
    ix, iy, tx, ty, b00, b01, b10, b11 = _corners(blob, gx, gy)
    dval = np.where(valid,
                    dcanvas[np.clip(rows, 0, dcanvas.shape[0] - 1),
                            np.clip(cols, 0, dcanvas.shape[1] - 1)], 0.0)

    # blob gradient: scatter the bilinear weights
    for wgt, iyy, ixx in (((1 - tx) * (1 - ty), iy, ix),
                          (tx * (1 - ty), iy, ix + 1),
                          ((1 - tx) * ty, iy + 1, ix),
                          (tx * ty, iy + 1, ix + 1)):
        ok = (iyy >= 0) & (iyy < g) & (ixx >= 0) & (ixx < g)
        contrib = np.where(ok, wgt * dval, 0.0)
        np.add.at(dblob, (np.clip(iyy, 0, g - 1).ravel(),
                          np.clip(ixx, 0, g - 1).ravel()), contrib.ravel())

    # coordinate gradients via the bilinear derivative
    dv_dgx = (1 - ty) * (b01 - b00) + ty * (b11 - b10)
    dv_dgy = (1 - tx) * (b10 - b00) + tx * (b11 - b01)
    inv = 1.0 / (scales * delta)
    c = (g - 1) / 2.0
    dgx = np.where(valid, dv_dgx * dval, 0.0)
    dgy = np.where(valid, dv_dgy * dval, 0.0)
    dxs[:] = np.sum(dgx, axis=(1, 2)) * (-inv)
    dys[:] = np.sum(dgy, axis=(1, 2)) * (-inv)
    dscales[:] = (np.sum(dgx * (gx - c) + dgy * (gy - c), axis=(1, 2))
                  * (-1.0 / scales))
    return dblob, dxs, dys, dscales


def conv3x3_fwd(img, kernel):
    """3x3 cross-correlation with replicate padding; same-size output."""
    padded = np.pad(img, 1, mode="edge")
    h, w = img.shape
    out = np.zeros_like(img)
    for a in range(3):
        for b in range(3):
            out += kernel[a, b] * padded[a:a + h, b:b + w]
    return out


def conv3x3_bwd(img, kernel, dout):
    """Gradients of conv3x3_fwd w.r.t. the image and the kernel."""
    h, w = img.shape
    padded = np.pad(img, 1, mode="edge")
    dk = np.empty_like(kernel)
    dpad = np.zeros_like(padded)
    for a in range(3):
        for b in range(3):
            dk[a, b] = np.sum(dout * padded[a:a + h, b:b + w])
            dpad[a:a + h, b:b + w] += kernel[a, b] * dout
    dimg = dpad[1:-1, 1:-1].copy()
    # fold replicate-padding gradients back onto the border pixels
    dimg[0, :] += dpad[0, 1:-1]
    dimg[-1, :] += dpad[-1, 1:-1]
    dimg[:, 0] += dpad[1:-1, 0]
    dimg[:, -1] += dpad[1:-1, -1]
    dimg[0, 0] += dpad[0, 0]
    dimg[0, -1] += dpad[0, -1]
    dimg[-1, 0] += dpad[-1, 0]
    dimg[-1, -1] += dpad[-1, -1]
    return dimg, dk
