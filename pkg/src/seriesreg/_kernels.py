"""Hot sampling loops, compiled with numba when available.

The numpy fallback computes identical per-point formulas, so both paths
agree bit for bit on values and flags; only speed differs.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a soft dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return deco

_SNAP = 1e-9


@njit(fastmath=False)
def _bilinear_kernel(values, mask, use_mask, width, height, scale,
                     points, need_grad, vals, grad, mask_ok, inside):
    n = points.shape[0]
    wm2 = width - 2
    hm2 = height - 2
    for i in range(n):
        rx = points[i, 0] * scale
        ry = points[i, 1] * scale
        clamped_x = (rx < 0.0) or (rx > width - 1.0)
        clamped_y = (ry < 0.0) or (ry > height - 1.0)
        px = min(max(rx, 0.0), width - 1.0)
        py = min(max(ry, 0.0), height - 1.0)
        rpx = np.round(px)
        if abs(px - rpx) < _SNAP:
            px = rpx
        rpy = np.round(py)
        if abs(py - rpy) < _SNAP:
            py = rpy
        x0 = int(np.floor(px))
        if x0 > wm2:
            x0 = wm2
        y0 = int(np.floor(py))
        if y0 > hm2:
            y0 = hm2
        fx = px - x0
        fy = py - y0
        base = y0 * width + x0
        v00 = values[base]
        v10 = values[base + 1]
        v01 = values[base + width]
        v11 = values[base + width + 1]
        w00 = (1 - fx) * (1 - fy)
        w10 = fx * (1 - fy)
        w01 = (1 - fx) * fy
        w11 = fx * fy
        vals[i] = v00 * w00 + v10 * w10 + v01 * w01 + v11 * w11
        if need_grad:
            gx = ((v10 - v00) * (1 - fy) + (v11 - v01) * fy) * scale
            gy = ((v01 - v00) * (1 - fx) + (v11 - v10) * fx) * scale
            if clamped_x:
                gx = 0.0
            if clamped_y:
                gy = 0.0
            grad[i, 0] = gx
            grad[i, 1] = gy
        good = True
        if use_mask:
            if w00 > 0 and mask[base] == 0:
                good = False
            elif w10 > 0 and mask[base + 1] == 0:
                good = False
            elif w01 > 0 and mask[base + width] == 0:
                good = False
            elif w11 > 0 and mask[base + width + 1] == 0:
                good = False
        mask_ok[i] = good
        inside[i] = not (clamped_x or clamped_y)


def _bilinear_numpy(values, mask, use_mask, width, height, scale,
                    points, need_grad, vals, grad, mask_ok, inside):
    rx = points[:, 0] * scale
    ry = points[:, 1] * scale
    clamped_x = (rx < 0.0) | (rx > width - 1.0)
    clamped_y = (ry < 0.0) | (ry > height - 1.0)
    px = np.clip(rx, 0.0, width - 1.0)
    py = np.clip(ry, 0.0, height - 1.0)
    rpx = np.round(px)
    rpy = np.round(py)
    px = np.where(np.abs(px - rpx) < _SNAP, rpx, px)
    py = np.where(np.abs(py - rpy) < _SNAP, rpy, py)
    x0 = np.minimum(np.floor(px).astype(np.intp), width - 2)
    y0 = np.minimum(np.floor(py).astype(np.intp), height - 2)
    fx = px - x0
    fy = py - y0
    base = y0 * width + x0
    v00 = values[base]
    v10 = values[base + 1]
    v01 = values[base + width]
    v11 = values[base + width + 1]
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    vals[:] = v00 * w00 + v10 * w10 + v01 * w01 + v11 * w11
    if need_grad:
        gx = ((v10 - v00) * (1 - fy) + (v11 - v01) * fy) * scale
        gy = ((v01 - v00) * (1 - fx) + (v11 - v10) * fx) * scale
        gx[clamped_x] = 0.0
        gy[clamped_y] = 0.0
        grad[:, 0] = gx
        grad[:, 1] = gy
    if use_mask:
        bad = (((w00 > 0) & (mask[base] == 0)) | ((w10 > 0) & (mask[base + 1] == 0))
               | ((w01 > 0) & (mask[base + width] == 0))
               | ((w11 > 0) & (mask[base + width + 1] == 0)))
        mask_ok[:] = ~bad
    else:
        mask_ok[:] = True
    inside[:] = ~(clamped_x | clamped_y)


def bilinear_sample(values_flat: np.ndarray, mask_flat: np.ndarray | None,
                    width: int, height: int, scale: float, points: np.ndarray,
                    need_grad: bool):
    """Clamped bilinear sampling of a flat row-major image at points.

    Returns (vals, grad, mask_ok, inside): grad is the interpolant
    gradient with clamped directions zeroed (None when not requested);
    mask_ok is False where a nonzero-weight pixel is masked out (always
    True without a mask); inside is False for points clamped from
    outside the domain.
    """
    n = points.shape[0]
    vals = np.empty(n)
    grad = np.empty((n, 2)) if need_grad else np.empty((1, 2))
    mask_ok = np.empty(n, dtype=np.bool_)
    inside = np.empty(n, dtype=np.bool_)
    use_mask = mask_flat is not None
    mask = mask_flat if use_mask else np.empty(1, dtype=np.uint8)
    impl = _bilinear_kernel if HAVE_NUMBA else _bilinear_numpy
    impl(values_flat, mask, use_mask, width, height, scale,
         np.ascontiguousarray(points), need_grad, vals, grad, mask_ok, inside)
    return vals, (grad if need_grad else None), mask_ok, inside
