"""Hot numeric kernels: polyline rasterization and batch cosine distance.

Each kernel has a numba-compiled implementation and a vectorized pure-numpy
fallback. The active path is chosen at import time: numba when importable,
unless ``WAVEICL_PURE_NUMPY=1`` forces the numpy path. Both rasterization
paths use identical rounding (half-to-even via np.rint) and stamp geometry,
so rendered images are bit-identical regardless of backend. Distance kernels
accumulate in float64 on both paths; summation order differs, so agreement
is to float64 round-off, not bitwise.

``benchmarks/bench_kernels.py`` compares the two paths.
"""

from __future__ import annotations

import os

import numpy as np

PURE_NUMPY = os.environ.get("WAVEICL_PURE_NUMPY", "") == "1"

try:
    if PURE_NUMPY:
        raise ImportError("pure-numpy path forced via WAVEICL_PURE_NUMPY=1")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    njit = None
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# polyline stamping
#
# A polyline is drawn by walking every segment with max(|dx|,|dy|)+1 evenly
# spaced samples (in rounded pixel space) and stamping a stroke x stroke
# square at each sample. Square caps, no anti-aliasing: a pixel is either
# the stroke color or untouched.
# ---------------------------------------------------------------------------


def _stamp_polyline_loops(img, xs, ys, stroke, r, g, b):
    h = img.shape[0]
    w = img.shape[1]
    half = stroke // 2
    t_count = xs.shape[0]
    seg_count = t_count - 1 if t_count > 1 else 1
    for t in range(seg_count):
        if t_count == 1:
            x0 = xs[0]
            y0 = ys[0]
            x1 = x0
            y1 = y0
        else:
            x0 = xs[t]
            y0 = ys[t]
            x1 = xs[t + 1]
            y1 = ys[t + 1]
        dx = np.rint(x1) - np.rint(x0)
        dy = np.rint(y1) - np.rint(y0)
        adx = -dx if dx < 0 else dx
        ady = -dy if dy < 0 else dy
        n = int(adx) if adx > ady else int(ady)
        for i in range(n + 1):
            frac = i / n if n > 0 else 0.0
            px = int(np.rint(x0 + (x1 - x0) * frac))
            py = int(np.rint(y0 + (y1 - y0) * frac))
            for oy in range(-half, -half + stroke):
                yy = py + oy
                if yy < 0 or yy >= h:
                    continue
                for ox in range(-half, -half + stroke):
                    xx = px + ox
                    if xx < 0 or xx >= w:
                        continue
                    img[yy, xx, 0] = r
                    img[yy, xx, 1] = g
                    img[yy, xx, 2] = b


def stamp_polyline_numpy(img: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                         stroke: int, rgb: tuple[int, int, int]) -> None:
    """Vectorized equivalent of the loop kernel; bit-identical output."""
    h, w = img.shape[0], img.shape[1]
    rx = np.rint(xs)
    ry = np.rint(ys)
    if xs.shape[0] == 1:
        px = rx.astype(np.int64)
        py = ry.astype(np.int64)
    else:
        x0, x1 = xs[:-1], xs[1:]
        y0, y1 = ys[:-1], ys[1:]
        n = np.maximum(np.abs(rx[1:] - rx[:-1]), np.abs(ry[1:] - ry[:-1])).astype(np.int64)
        counts = n + 1
        total = int(counts.sum())
        seg = np.repeat(np.arange(n.shape[0], dtype=np.int64), counts)
        starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        within = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
        nseg = n[seg]
        # same float op as the loop kernel: i/n in float64, 0.0 when n == 0
        frac = np.where(nseg == 0, 0.0, within / np.maximum(nseg, 1))
        px = np.rint(x0[seg] + (x1[seg] - x0[seg]) * frac).astype(np.int64)
        py = np.rint(y0[seg] + (y1[seg] - y0[seg]) * frac).astype(np.int64)
    half = stroke // 2
    off = np.arange(stroke, dtype=np.int64) - half
    p = px.shape[0]
    yy = np.broadcast_to(py[:, None, None] + off[None, :, None], (p, stroke, stroke)).ravel()
    xx = np.broadcast_to(px[:, None, None] + off[None, None, :], (p, stroke, stroke)).ravel()
    mask = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    img[yy[mask], xx[mask]] = np.asarray(rgb, dtype=np.uint8)


# ---------------------------------------------------------------------------
# batch cosine distance
# ---------------------------------------------------------------------------


def _cosine_distances_loops(mat, ref):
    n, d = mat.shape
    out = np.empty(n, np.float64)
    rn = 0.0
    for j in range(d):
        rn += ref[j] * ref[j]
    rn = np.sqrt(rn)
    for i in range(n):
        dot = 0.0
        mn = 0.0
        for j in range(d):
            v = mat[i, j]
            dot += v * ref[j]
            mn += v * v
        out[i] = 1.0 - dot / (np.sqrt(mn) * rn)
    return out


def cosine_distances_numpy(mat: np.ndarray, ref: np.ndarray) -> np.ndarray:
    dots = mat @ ref
    norms = np.sqrt(np.einsum("ij,ij->i", mat, mat))
    rn = np.sqrt(ref @ ref)
    return 1.0 - dots / (norms * rn)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    _stamp_polyline_jit = njit(cache=True)(_stamp_polyline_loops)
    _cosine_distances_jit = njit(cache=True)(_cosine_distances_loops)

    def stamp_polyline_numba(img, xs, ys, stroke, rgb):
        _stamp_polyline_jit(img, xs, ys, np.int64(stroke),
                            np.uint8(rgb[0]), np.uint8(rgb[1]), np.uint8(rgb[2]))

    def cosine_distances_numba(mat, ref):
        return _cosine_distances_jit(mat, ref)

    stamp_polyline = stamp_polyline_numba
    _cosine_distances_f64 = cosine_distances_numba
else:
    stamp_polyline_numba = None
    cosine_distances_numba = None
    stamp_polyline = stamp_polyline_numpy
    _cosine_distances_f64 = cosine_distances_numpy


def cosine_distances_to(mat: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Cosine distance from every row of ``mat`` to ``ref``, float64 math.

    Inputs may be float32 (the storage precision); accumulation is float64.
    Callers are responsible for rejecting zero-norm vectors.
    """
    m = np.ascontiguousarray(mat, dtype=np.float64)
    r = np.ascontiguousarray(ref, dtype=np.float64)
    return _cosine_distances_f64(m, r)


def backend_name() -> str:
    return "numba" if HAS_NUMBA else "numpy"
