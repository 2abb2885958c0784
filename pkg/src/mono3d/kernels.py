"""Hot numeric kernels: numba-jitted fast path with a pure-numpy fallback.

Backend is picked once at import from the MONO3D_KERNELS environment
variable: "numba", "numpy", or "auto" (default; numba when importable).
`set_backend` switches at runtime, mainly for tests and benchmarks.

Both paths compute each output element with the same operation order so
they agree to the last bit on gathers and to ~1 ulp on scatter-adds.
"""

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _resolve(name):
    if name == "auto":
        return "numba" if _HAVE_NUMBA else "numpy"
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("MONO3D_KERNELS=numba but numba is not importable")
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    return name


_BACKEND = _resolve(os.environ.get("MONO3D_KERNELS", "auto"))


def active_backend():
    return _BACKEND


def set_backend(name):
    """Switch kernel backend ("numba" or "numpy"). Returns the previous one."""
    global _BACKEND
    prev = _BACKEND
    _BACKEND = _resolve(name)
    return prev


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _im2col_numpy(xp, kh, kw, sh, sw, oh, ow):
    n, c, hp, wp = xp.shape
    sn, sc, sy, sx = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sy, sx, sy * sh, sx * sw),
        writeable=False,
    )
    return np.ascontiguousarray(view.reshape(n, c, kh * kw, oh * ow))


def _col2im_numpy(cols, hp, wp, kh, kw, sh, sw, oh, ow):
    n, c = cols.shape[0], cols.shape[1]
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += cols6[:, :, i, j]
    return xp


def _bilinear_gather_numpy(x, iy0, iy1, fy, ix0, ix1, fx):
    w00 = (1.0 - fy)[:, None] * (1.0 - fx)[None, :]
    w01 = (1.0 - fy)[:, None] * fx[None, :]
    w10 = fy[:, None] * (1.0 - fx)[None, :]
    w11 = fy[:, None] * fx[None, :]
    v00 = x[:, :, iy0[:, None], ix0[None, :]]
    v01 = x[:, :, iy0[:, None], ix1[None, :]]
    v10 = x[:, :, iy1[:, None], ix0[None, :]]
    v11 = x[:, :, iy1[:, None], ix1[None, :]]
    return v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11


def _bilinear_scatter_numpy(g, iy0, iy1, fy, ix0, ix1, fx, h, w):
    n, c = g.shape[0], g.shape[1]
    w00 = (1.0 - fy)[:, None] * (1.0 - fx)[None, :]
    w01 = (1.0 - fy)[:, None] * fx[None, :]
    w10 = fy[:, None] * (1.0 - fx)[None, :]
    w11 = fy[:, None] * fx[None, :]
    dx = np.zeros((n, c, h, w), dtype=g.dtype)
    np.add.at(dx, (slice(None), slice(None), iy0[:, None], ix0[None, :]), g * w00)
    np.add.at(dx, (slice(None), slice(None), iy0[:, None], ix1[None, :]), g * w01)
    np.add.at(dx, (slice(None), slice(None), iy1[:, None], ix0[None, :]), g * w10)
    np.add.at(dx, (slice(None), slice(None), iy1[:, None], ix1[None, :]), g * w11)
    return dx


def _raster_iou_numpy(boxes_a, boxes_b, n_grid):
    out = np.zeros(boxes_a.shape[0], dtype=np.float64)
    for p in range(boxes_a.shape[0]):
        out[p] = _raster_iou_one_numpy(boxes_a[p], boxes_b[p], n_grid)
    return out


def _footprint_extent(box):
    cx, cz, hl, hw, yaw = box
    c, s = np.cos(yaw), np.sin(yaw)
    ex = abs(c) * hl + abs(s) * hw
    ez = abs(s) * hl + abs(c) * hw
    return cx - ex, cx + ex, cz - ez, cz + ez


def _raster_iou_one_numpy(a, b, n_grid):
    ax0, ax1, az0, az1 = _footprint_extent(a)
    bx0, bx1, bz0, bz1 = _footprint_extent(b)
    x0, x1 = min(ax0, bx0), max(ax1, bx1)
    z0, z1 = min(az0, bz0), max(az1, bz1)
    xs = x0 + (np.arange(n_grid) + 0.5) * (x1 - x0) / n_grid
    zs = z0 + (np.arange(n_grid) + 0.5) * (z1 - z0) / n_grid
    px = xs[None, :]
    pz = zs[:, None]

    def inside(box):
        cx, cz, hl, hw, yaw = box
        c, s = np.cos(yaw), np.sin(yaw)
        dx = px - cx
        dz = pz - cz
        lx = c * dx - s * dz
        lz = s * dx + c * dz
        return (np.abs(lx) <= hl) & (np.abs(lz) <= hw)

    in_a = inside(a)
    in_b = inside(b)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a) + np.count_nonzero(in_b) - inter
    return inter / union if union > 0 else 0.0


_numpy_impl = {
    "im2col": _im2col_numpy,
    "col2im": _col2im_numpy,
    "bilinear_gather": _bilinear_gather_numpy,
    "bilinear_scatter": _bilinear_scatter_numpy,
    "raster_iou": _raster_iou_numpy,
}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _im2col_numba(xp, kh, kw, sh, sw, oh, ow):
        n, c, hp, wp = xp.shape
        cols = np.empty((n, c, kh * kw, oh * ow), dtype=xp.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        k = i * kw + j
                        for y in range(oh):
                            row = y * sh + i
                            for x in range(ow):
                                cols[b, ch, k, y * ow + x] = xp[b, ch, row, x * sw + j]
        return cols

    @numba.njit(cache=True)
    def _col2im_numba(cols, hp, wp, kh, kw, sh, sw, oh, ow):
        n, c = cols.shape[0], cols.shape[1]
        xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        # accumulation order (i, j) outer matches the numpy slice loop
        for i in range(kh):
            for j in range(kw):
                k = i * kw + j
                for b in range(n):
                    for ch in range(c):
                        for y in range(oh):
                            row = y * sh + i
                            for x in range(ow):
                                xp[b, ch, row, x * sw + j] += cols[b, ch, k, y * ow + x]
        return xp

    @numba.njit(cache=True)
    def _bilinear_gather_numba(x, iy0, iy1, fy, ix0, ix1, fx):
        n, c = x.shape[0], x.shape[1]
        oh, ow = iy0.shape[0], ix0.shape[0]
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    wy1 = fy[i]
                    wy0 = 1.0 - wy1
                    for j in range(ow):
                        wx1 = fx[j]
                        wx0 = 1.0 - wx1
                        out[b, ch, i, j] = (
                            x[b, ch, iy0[i], ix0[j]] * (wy0 * wx0)
                            + x[b, ch, iy0[i], ix1[j]] * (wy0 * wx1)
                            + x[b, ch, iy1[i], ix0[j]] * (wy1 * wx0)
                            + x[b, ch, iy1[i], ix1[j]] * (wy1 * wx1)
                        )
        return out

    @numba.njit(cache=True)
    def _bilinear_scatter_numba(g, iy0, iy1, fy, ix0, ix1, fx, h, w):
        n, c = g.shape[0], g.shape[1]
        oh, ow = iy0.shape[0], ix0.shape[0]
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    wy1 = fy[i]
                    wy0 = 1.0 - wy1
                    for j in range(ow):
                        wx1 = fx[j]
                        wx0 = 1.0 - wx1
                        gv = g[b, ch, i, j]
                        dx[b, ch, iy0[i], ix0[j]] += gv * (wy0 * wx0)
                        dx[b, ch, iy0[i], ix1[j]] += gv * (wy0 * wx1)
                        dx[b, ch, iy1[i], ix0[j]] += gv * (wy1 * wx0)
                        dx[b, ch, iy1[i], ix1[j]] += gv * (wy1 * wx1)
        return dx

    @numba.njit(cache=True)
    def _raster_iou_numba(boxes_a, boxes_b, n_grid):
        out = np.zeros(boxes_a.shape[0], dtype=np.float64)
        for p in range(boxes_a.shape[0]):
            acx, acz, ahl, ahw, ayaw = (
                boxes_a[p, 0],
                boxes_a[p, 1],
                boxes_a[p, 2],
                boxes_a[p, 3],
                boxes_a[p, 4],
            )
            bcx, bcz, bhl, bhw, byaw = (
                boxes_b[p, 0],
                boxes_b[p, 1],
                boxes_b[p, 2],
                boxes_b[p, 3],
                boxes_b[p, 4],
            )
            ac, as_ = np.cos(ayaw), np.sin(ayaw)
            bc, bs = np.cos(byaw), np.sin(byaw)
            aex = abs(ac) * ahl + abs(as_) * ahw
            aez = abs(as_) * ahl + abs(ac) * ahw
            bex = abs(bc) * bhl + abs(bs) * bhw
            bez = abs(bs) * bhl + abs(bc) * bhw
            x0 = min(acx - aex, bcx - bex)
            x1 = max(acx + aex, bcx + bex)
            z0 = min(acz - aez, bcz - bez)
            z1 = max(acz + aez, bcz + bez)
            stepx = (x1 - x0) / n_grid
            stepz = (z1 - z0) / n_grid
            n_inter = 0
            n_union = 0
            for i in range(n_grid):
                pz = z0 + (i + 0.5) * stepz
                for j in range(n_grid):
                    px = x0 + (j + 0.5) * stepx
                    dx = px - acx
                    dz = pz - acz
                    in_a = (
                        abs(ac * dx - as_ * dz) <= ahl and abs(as_ * dx + ac * dz) <= ahw
                    )
                    dx = px - bcx
                    dz = pz - bcz
                    in_b = abs(bc * dx - bs * dz) <= bhl and abs(bs * dx + bc * dz) <= bhw
                    if in_a and in_b:
                        n_inter += 1
                        n_union += 1
                    elif in_a or in_b:
                        n_union += 1
            if n_union > 0:
                out[p] = n_inter / n_union
        return out

    _numba_impl = {
        "im2col": _im2col_numba,
        "col2im": _col2im_numba,
        "bilinear_gather": _bilinear_gather_numba,
        "bilinear_scatter": _bilinear_scatter_numba,
        "raster_iou": _raster_iou_numba,
    }
else:  # pragma: no cover
    _numba_impl = {}


def _dispatch(name):
    impl = _numba_impl if _BACKEND == "numba" else _numpy_impl
    return impl[name]


def im2col(xp, kh, kw, sh, sw, oh, ow):
    """Patch matrix [N, C, kh*kw, oh*ow] from padded input [N, C, Hp, Wp]."""
    return _dispatch("im2col")(xp, kh, kw, sh, sw, oh, ow)


def col2im(cols, hp, wp, kh, kw, sh, sw, oh, ow):
    """Scatter-add inverse of im2col; returns padded-input gradient."""
    return _dispatch("col2im")(cols, hp, wp, kh, kw, sh, sw, oh, ow)


def bilinear_gather(x, iy0, iy1, fy, ix0, ix1, fx):
    """Separable bilinear sampling on the last two axes.

    iy0/iy1 are floor/ceil row indices per output row, fy the fractional
    weight of iy1 (same for columns). Indices must be pre-clamped.
    """
    return _dispatch("bilinear_gather")(x, iy0, iy1, fy, ix0, ix1, fx)


def bilinear_scatter(g, iy0, iy1, fy, ix0, ix1, fx, h, w):
    """Adjoint of bilinear_gather: scatter output grads to an HxW map."""
    return _dispatch("bilinear_scatter")(g, iy0, iy1, fy, ix0, ix1, fx, h, w)


def raster_iou(boxes_a, boxes_b, n_grid):
    """Monte-Carlo-free grid estimate of footprint IoU per box pair.

    Boxes are (cx, cz, half_l, half_w, yaw) rows; an n_grid x n_grid lattice
    of cell centers covers the joint bounding rectangle of each pair.
    Independent of the polygon-clipping path, so it serves as its check.
    """
    return _dispatch("raster_iou")(
        np.ascontiguousarray(boxes_a, dtype=np.float64),
        np.ascontiguousarray(boxes_b, dtype=np.float64),
        n_grid,
    )
