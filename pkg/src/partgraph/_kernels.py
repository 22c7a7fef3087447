"""Inner loop of within-part message passing.

Compiled with numba when it is importable; the plain numpy version stays
around both as the fallback and as the reference the compiled kernel is
tested against.  Both versions must keep the same elementwise arithmetic
(v - wdx*|dx| - wdy*|dy| + sacw) and the same first-row-major tie rule so
results are bit-identical either way.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None
    HAVE_NUMBA = False


def _window_message_loops(child, pid, sacw, wdx, wdy, ax, ay, stride,
                          ax_g, ay_g, rad_g, out_val, out_arg):
    hg, wg = child.shape
    ninf = -np.inf
    for py in range(hg):
        cgy = py + ay_g
        y0 = int(math.ceil(cgy - rad_g))
        y1 = int(math.floor(cgy + rad_g))
        if y0 < 0:
            y0 = 0
        if y1 > hg - 1:
            y1 = hg - 1
        for px in range(wg):
            cgx = px + ax_g
            x0 = int(math.ceil(cgx - rad_g))
            x1 = int(math.floor(cgx + rad_g))
            if x0 < 0:
                x0 = 0
            if x1 > wg - 1:
                x1 = wg - 1
            best = ninf
            barg = -1
            pp = pid[py, px]
            for cy in range(y0, y1 + 1):
                dy = (cy - py) * stride - ay
                if dy < 0.0:
                    dy = -dy
                wy = wdy * dy
                for cx in range(x0, x1 + 1):
                    v = child[cy, cx]
                    if v == ninf:
                        continue
                    dx = (cx - px) * stride - ax
                    if dx < 0.0:
                        dx = -dx
                    v = v - wdx * dx - wy + sacw[pid[cy, cx], pp]
                    if v > best:
                        best = v
                        barg = cy * wg + cx
            out_val[py, px] = best
            out_arg[py, px] = barg


def window_message_numpy(child, pid, sacw, wdx, wdy, ax, ay, stride,
                         ax_g, ay_g, rad_g, out_val, out_arg):
    """Reference implementation, vectorized per window."""
    hg, wg = child.shape
    ninf = -np.inf
    for py in range(hg):
        y0 = max(0, int(math.ceil(py + ay_g - rad_g)))
        y1 = min(hg - 1, int(math.floor(py + ay_g + rad_g)))
        dy = wdy * np.abs((np.arange(y0, y1 + 1) - py) * stride - ay)
        for px in range(wg):
            x0 = max(0, int(math.ceil(px + ax_g - rad_g)))
            x1 = min(wg - 1, int(math.floor(px + ax_g + rad_g)))
            if y0 > y1 or x0 > x1:
                out_val[py, px] = ninf
                out_arg[py, px] = -1
                continue
            dx = wdx * np.abs((np.arange(x0, x1 + 1) - px) * stride - ax)
            vals = (child[y0:y1 + 1, x0:x1 + 1] - dx[None, :] - dy[:, None]
                    + sacw[pid[y0:y1 + 1, x0:x1 + 1], pid[py, px]])
            k = int(np.argmax(vals))
            v = vals.flat[k]
            out_val[py, px] = v
            if v == ninf:
                out_arg[py, px] = -1
            else:
                ww = x1 - x0 + 1
                out_arg[py, px] = (y0 + k // ww) * wg + (x0 + k % ww)


if HAVE_NUMBA:
    window_message = njit(cache=True, fastmath=False)(_window_message_loops)
else:
    window_message = window_message_numpy


# ---------------------------------------------------------------------------
# seeded region growing
#
# A binary heap ordered by (cost, insertion counter); the counter is unique,
# so the pop order is the sorted order of the live keys and any correct heap
# reproduces it exactly. The packed value is (pixel index << 32) | region.


def _grow_region_loops(rgb, seeds, labels):
    h, w = labels.shape
    cap = 4 * h * w + 8
    hc = np.empty(cap, dtype=np.float64)
    hk = np.empty(cap, dtype=np.int64)
    hv = np.empty(cap, dtype=np.int64)
    size = 0
    counter = 0
    for rid in range(seeds.shape[0]):
        labels[seeds[rid, 0], seeds[rid, 1]] = rid

    for start in range(seeds.shape[0] + cap):
        if start < seeds.shape[0]:
            y = seeds[start, 0]
            x = seeds[start, 1]
            rid = start
        else:
            if size == 0:
                break
            # pop the cheapest frontier pixel
            val = hv[0]
            size -= 1
            mc = hc[size]
            mk = hk[size]
            mv = hv[size]
            i = 0
            while True:
                l = 2 * i + 1
                if l >= size:
                    break
                if l + 1 < size and (hc[l + 1] < hc[l]
                                     or (hc[l + 1] == hc[l]
                                         and hk[l + 1] < hk[l])):
                    l += 1
                if hc[l] < mc or (hc[l] == mc and hk[l] < mk):
                    hc[i] = hc[l]
                    hk[i] = hk[l]
                    hv[i] = hv[l]
                    i = l
                else:
                    break
            hc[i] = mc
            hk[i] = mk
            hv[i] = mv
            rid = int(val & 0xFFFFFFFF)
            pix = int(val >> 32)
            y = pix // w
            x = pix % w
            if labels[y, x] >= 0:
                continue
            labels[y, x] = rid
        b0 = rgb[y, x, 0]
        b1 = rgb[y, x, 1]
        b2 = rgb[y, x, 2]
        for t in range(4):
            if t == 0:
                ny, nx = y - 1, x
            elif t == 1:
                ny, nx = y, x + 1
            elif t == 2:
                ny, nx = y + 1, x
            else:
                ny, nx = y, x - 1
            if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] < 0:
                d0 = b0 - rgb[ny, nx, 0]
                d1 = b1 - rgb[ny, nx, 1]
                d2 = b2 - rgb[ny, nx, 2]
                cost = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                # sift up
                i = size
                size += 1
                while i > 0:
                    p = (i - 1) >> 1
                    if hc[p] > cost or (hc[p] == cost and hk[p] > counter):
                        hc[i] = hc[p]
                        hk[i] = hk[p]
                        hv[i] = hv[p]
                        i = p
                    else:
                        break
                hc[i] = cost
                hk[i] = counter
                hv[i] = ((np.int64(ny) * w + nx) << np.int64(32)) | np.int64(rid)
                counter += 1


if HAVE_NUMBA:
    grow_regions_kernel = njit(cache=True, fastmath=False)(_grow_region_loops)
else:
    grow_regions_kernel = _grow_region_loops
