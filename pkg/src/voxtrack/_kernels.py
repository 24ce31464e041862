"""Numba kernels for ray marching, surface extraction, and field fitting.

All kernels run in float64 and share one trilinear sampler and one
density/color composition branch, so the scalar reference operations in
:mod:`voxtrack.field` and the batched render paths are bit-identical by
construction.  Parallel loops only ever write to per-ray or per-chunk
slots; reductions happen outside in a fixed order, keeping every result
deterministic regardless of thread scheduling.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

# transmittance below this is treated as fully absorbed (applied identically
# in every code path, so single-ray and image renders stay bit-equal)
T_CUTOFF = 1e-12
OPACITY_EPS = 1e-6
FIT_CHUNKS = 4  # fixed chunk count => deterministic gradient reduction


@njit(cache=True, inline="always")
def _sample_grid(grid, bmin, bmax, inv_d, px, py, pz):
    """Trilinear sample of an activated (nx,ny,nz,4) grid; zero outside bbox."""
    if (
        px < bmin[0]
        or py < bmin[1]
        or pz < bmin[2]
        or px > bmax[0]
        or py > bmax[1]
        or pz > bmax[2]
    ):
        return 0.0, 0.0, 0.0, 0.0
    nx, ny, nz = grid.shape[0], grid.shape[1], grid.shape[2]
    gx = (px - bmin[0]) * inv_d[0]
    gy = (py - bmin[1]) * inv_d[1]
    gz = (pz - bmin[2]) * inv_d[2]
    ix = int(gx)
    iy = int(gy)
    iz = int(gz)
    if ix > nx - 2:
        ix = nx - 2
    if iy > ny - 2:
        iy = ny - 2
    if iz > nz - 2:
        iz = nz - 2
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    w000 = (1.0 - fx) * (1.0 - fy) * (1.0 - fz)
    w100 = fx * (1.0 - fy) * (1.0 - fz)
    w010 = (1.0 - fx) * fy * (1.0 - fz)
    w110 = fx * fy * (1.0 - fz)
    w001 = (1.0 - fx) * (1.0 - fy) * fz
    w101 = fx * (1.0 - fy) * fz
    w011 = (1.0 - fx) * fy * fz
    w111 = fx * fy * fz
    s = (
        w000 * grid[ix, iy, iz, 0]
        + w100 * grid[ix + 1, iy, iz, 0]
        + w010 * grid[ix, iy + 1, iz, 0]
        + w110 * grid[ix + 1, iy + 1, iz, 0]
        + w001 * grid[ix, iy, iz + 1, 0]
        + w101 * grid[ix + 1, iy, iz + 1, 0]
        + w011 * grid[ix, iy + 1, iz + 1, 0]
        + w111 * grid[ix + 1, iy + 1, iz + 1, 0]
    )
    r = (
        w000 * grid[ix, iy, iz, 1]
        + w100 * grid[ix + 1, iy, iz, 1]
        + w010 * grid[ix, iy + 1, iz, 1]
        + w110 * grid[ix + 1, iy + 1, iz, 1]
        + w001 * grid[ix, iy, iz + 1, 1]
        + w101 * grid[ix + 1, iy, iz + 1, 1]
        + w011 * grid[ix, iy + 1, iz + 1, 1]
        + w111 * grid[ix + 1, iy + 1, iz + 1, 1]
    )
    g = (
        w000 * grid[ix, iy, iz, 2]
        + w100 * grid[ix + 1, iy, iz, 2]
        + w010 * grid[ix, iy + 1, iz, 2]
        + w110 * grid[ix + 1, iy + 1, iz, 2]
        + w001 * grid[ix, iy, iz + 1, 2]
        + w101 * grid[ix + 1, iy, iz + 1, 2]
        + w011 * grid[ix, iy + 1, iz + 1, 2]
        + w111 * grid[ix + 1, iy + 1, iz + 1, 2]
    )
    b = (
        w000 * grid[ix, iy, iz, 3]
        + w100 * grid[ix + 1, iy, iz, 3]
        + w010 * grid[ix, iy + 1, iz, 3]
        + w110 * grid[ix + 1, iy + 1, iz, 3]
        + w001 * grid[ix, iy, iz + 1, 3]
        + w101 * grid[ix + 1, iy, iz + 1, 3]
        + w011 * grid[ix, iy + 1, iz + 1, 3]
        + w111 * grid[ix + 1, iy + 1, iz + 1, 3]
    )
    return s, r, g, b


@njit(cache=True, inline="always")
def _compose(sb, rb, gb, bb, so, ro, go, bo):
    """Density-weighted composition; passthrough branches are bit-exact."""
    if so == 0.0:
        return sb, rb, gb, bb
    if sb == 0.0:
        return so, ro, go, bo
    s = sb + so
    if s < 1e-12:
        return s, rb, gb, bb
    return s, (sb * rb + so * ro) / s, (sb * gb + so * go) / s, (sb * bb + so * bo) / s


@njit(cache=True)
def sample_point(grid, bmin, bmax, inv_d, p):
    return _sample_grid(grid, bmin, bmax, inv_d, p[0], p[1], p[2])


@njit(cache=True, parallel=True)
def march_rays(
    origins,
    dirs,
    nears,
    fars,
    steps,
    grid_o,
    bmin_o,
    bmax_o,
    inv_o,
    has_bg,
    grid_b,
    bmin_b,
    bmax_b,
    inv_b,
    out_rgb,
    out_depth,
    out_opacity,
):
    """Emission-absorption quadrature along each ray.

    Samples sit at ``near + i*step`` for ``i = 0..floor((far-near)/step)``,
    endpoints included, each weighted by the full ``step``:
    alpha_i = 1 - exp(-sigma_i * step), rgb = sum T_i alpha_i c_i,
    depth = weighted mean sample distance.
    """
    n_rays = origins.shape[0]
    for r in prange(n_rays):
        near = nears[r]
        far = fars[r]
        step = steps[r]
        acc_r = 0.0
        acc_g = 0.0
        acc_b = 0.0
        acc_d = 0.0
        acc_o = 0.0
        if far > near and step > 0.0:
            ox = origins[r, 0]
            oy = origins[r, 1]
            oz = origins[r, 2]
            dx = dirs[r, 0]
            dy = dirs[r, 1]
            dz = dirs[r, 2]
            n = int(np.floor((far - near) / step + 1e-9)) + 1
            delta = step
            trans = 1.0
            for i in range(n):
                tm = near + i * step
                px = ox + tm * dx
                py = oy + tm * dy
                pz = oz + tm * dz
                so, ro, go, bo = _sample_grid(grid_o, bmin_o, bmax_o, inv_o, px, py, pz)
                if has_bg:
                    sb, rb, gb, bb = _sample_grid(grid_b, bmin_b, bmax_b, inv_b, px, py, pz)
                else:
                    sb = 0.0
                    rb = 0.0
                    gb = 0.0
                    bb = 0.0
                sig, cr, cg, cb = _compose(sb, rb, gb, bb, so, ro, go, bo)
                if sig > 0.0:
                    alpha = 1.0 - np.exp(-sig * delta)
                    w = trans * alpha
                    acc_r += w * cr
                    acc_g += w * cg
                    acc_b += w * cb
                    acc_d += w * tm
                    acc_o += w
                    trans *= 1.0 - alpha
                    if trans < T_CUTOFF:
                        break
        out_rgb[r, 0] = acc_r
        out_rgb[r, 1] = acc_g
        out_rgb[r, 2] = acc_b
        out_opacity[r] = acc_o
        out_depth[r] = acc_d / acc_o if acc_o >= OPACITY_EPS else 0.0


@njit(cache=True, parallel=True)
def first_crossing(
    origins, dirs, nears, fars, steps, grid_o, bmin_o, bmax_o, inv_o, out_t, out_hit
):
    """Distance at which accumulated opacity first exceeds 0.5 (object only)."""
    n_rays = origins.shape[0]
    for r in prange(n_rays):
        out_t[r] = 0.0
        out_hit[r] = False
        near = nears[r]
        far = fars[r]
        step = steps[r]
        if not (far > near) or step <= 0.0:
            continue
        ox = origins[r, 0]
        oy = origins[r, 1]
        oz = origins[r, 2]
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        n = int(np.floor((far - near) / step + 1e-9)) + 1
        trans = 1.0
        acc_o = 0.0
        for i in range(n):
            tm = near + i * step
            so, _, _, _ = _sample_grid(
                grid_o, bmin_o, bmax_o, inv_o, ox + tm * dx, oy + tm * dy, oz + tm * dz
            )
            if so > 0.0:
                alpha = 1.0 - np.exp(-so * step)
                acc_o += trans * alpha
                trans *= 1.0 - alpha
                if acc_o > 0.5:
                    out_t[r] = tm
                    out_hit[r] = True
                    break
                if trans < T_CUTOFF:
                    break


@njit(cache=True, inline="always")
def _scatter_corner(gs, gc, bmin, inv_d, nx, ny, nz, px, py, pz, dact, dsig, dcol_r, dcol_g, dcol_b):
    """Accumulate one sample's gradient into the chunk-local raw-grid buffers."""
    gx = (px - bmin[0]) * inv_d[0]
    gy = (py - bmin[1]) * inv_d[1]
    gz = (pz - bmin[2]) * inv_d[2]
    ix = int(gx)
    iy = int(gy)
    iz = int(gz)
    if ix > nx - 2:
        ix = nx - 2
    if iy > ny - 2:
        iy = ny - 2
    if iz > nz - 2:
        iz = nz - 2
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    for dx in range(2):
        wx = fx if dx == 1 else 1.0 - fx
        for dy in range(2):
            wy = fy if dy == 1 else 1.0 - fy
            for dz in range(2):
                wz = fz if dz == 1 else 1.0 - fz
                w = wx * wy * wz
                if w == 0.0:
                    continue
                jx = ix + dx
                jy = iy + dy
                jz = iz + dz
                gs[jx, jy, jz] += w * dsig * dact[jx, jy, jz, 0]
                gc[jx, jy, jz, 0] += w * dcol_r * dact[jx, jy, jz, 1]
                gc[jx, jy, jz, 1] += w * dcol_g * dact[jx, jy, jz, 2]
                gc[jx, jy, jz, 2] += w * dcol_b * dact[jx, jy, jz, 3]


@njit(cache=True, parallel=True)
def fit_pass(
    origins,
    dirs,
    nears,
    fars,
    steps,
    grid_o,
    dact_o,
    bmin_o,
    bmax_o,
    inv_o,
    has_bg,
    grid_b,
    bmin_b,
    bmax_b,
    inv_b,
    targets,
    compute_grad,
    nmax,
    loss_out,
    g_sig,
    g_col,
):
    """Forward render + squared-error backprop into the object field's raw grids.

    Rays are split into ``FIT_CHUNKS`` fixed contiguous chunks; each chunk
    accumulates into its own gradient buffer and loss slot.  The forward
    march matches :func:`march_rays` sample for sample.  Loss terms and
    gradients here are un-normalized sums of squared residuals; the caller
    divides by (3 * n_rays).
    """
    n_rays = origins.shape[0]
    nchunks = g_sig.shape[0]
    chunk = (n_rays + nchunks - 1) // nchunks
    nx, ny, nz = grid_o.shape[0], grid_o.shape[1], grid_o.shape[2]
    for c in prange(nchunks):
        lo = c * chunk
        hi = min(n_rays, lo + chunk)
        buf = np.empty((nmax, 14))
        for r in range(lo, hi):
            near = nears[r]
            far = fars[r]
            step = steps[r]
            ox = origins[r, 0]
            oy = origins[r, 1]
            oz = origins[r, 2]
            dx = dirs[r, 0]
            dy = dirs[r, 1]
            dz = dirs[r, 2]
            acc_r = 0.0
            acc_g = 0.0
            acc_b = 0.0
            m = 0
            trans = 1.0
            if far > near and step > 0.0:
                n = int(np.floor((far - near) / step + 1e-9)) + 1
                delta = step
                for i in range(n):
                    tm = near + i * step
                    px = ox + tm * dx
                    py = oy + tm * dy
                    pz = oz + tm * dz
                    so, ro, go, bo = _sample_grid(grid_o, bmin_o, bmax_o, inv_o, px, py, pz)
                    if has_bg:
                        sb, rb, gb, bb = _sample_grid(grid_b, bmin_b, bmax_b, inv_b, px, py, pz)
                    else:
                        sb = 0.0
                        rb = 0.0
                        gb = 0.0
                        bb = 0.0
                    sig, cr, cg, cb = _compose(sb, rb, gb, bb, so, ro, go, bo)
                    if sig > 0.0:
                        alpha = 1.0 - np.exp(-sig * delta)
                        w = trans * alpha
                        acc_r += w * cr
                        acc_g += w * cg
                        acc_b += w * cb
                        buf[m, 0] = tm
                        buf[m, 1] = delta
                        buf[m, 2] = alpha
                        buf[m, 3] = trans
                        buf[m, 4] = w
                        buf[m, 5] = sig
                        buf[m, 6] = so
                        buf[m, 7] = sb
                        buf[m, 8] = ro
                        buf[m, 9] = go
                        buf[m, 10] = bo
                        buf[m, 11] = cr
                        buf[m, 12] = cg
                        buf[m, 13] = cb
                        m += 1
                        trans *= 1.0 - alpha
                        if trans < T_CUTOFF:
                            break
            res_r = acc_r - targets[r, 0]
            res_g = acc_g - targets[r, 1]
            res_b = acc_b - targets[r, 2]
            loss_out[c] += res_r * res_r + res_g * res_g + res_b * res_b
            if not compute_grad:
                continue
            # dL/d rgb_ch (un-normalized)
            gl_r = 2.0 * res_r
            gl_g = 2.0 * res_g
            gl_b = 2.0 * res_b
            # suffix sums over later samples: S_ch = sum_{j>i} w_j c_j_ch
            s_r = 0.0
            s_g = 0.0
            s_b = 0.0
            for i in range(m - 1, -1, -1):
                tm = buf[i, 0]
                delta = buf[i, 1]
                alpha = buf[i, 2]
                trans_i = buf[i, 3]
                w = buf[i, 4]
                sig = buf[i, 5]
                so = buf[i, 6]
                sb = buf[i, 7]
                ro = buf[i, 8]
                go = buf[i, 9]
                bo = buf[i, 10]
                cr = buf[i, 11]
                cg = buf[i, 12]
                cb = buf[i, 13]
                if so > 0.0:
                    ta = trans_i * (1.0 - alpha)
                    dsig_r = delta * (ta * cr - s_r)
                    dsig_g = delta * (ta * cg - s_g)
                    dsig_b = delta * (ta * cb - s_b)
                    dl_dsig = gl_r * dsig_r + gl_g * dsig_g + gl_b * dsig_b
                    if sb == 0.0:
                        dso = dl_dsig
                        dco_r = gl_r * w
                        dco_g = gl_g * w
                        dco_b = gl_b * w
                    else:
                        inv_sig = 1.0 / sig
                        # color depends on sigma_o through the weighted mean
                        dl_dc_r = gl_r * w
                        dl_dc_g = gl_g * w
                        dl_dc_b = gl_b * w
                        dso = dl_dsig + (
                            dl_dc_r * (ro - cr) + dl_dc_g * (go - cg) + dl_dc_b * (bo - cb)
                        ) * inv_sig
                        frac = so * inv_sig
                        dco_r = dl_dc_r * frac
                        dco_g = dl_dc_g * frac
                        dco_b = dl_dc_b * frac
                    px = ox + tm * dx
                    py = oy + tm * dy
                    pz = oz + tm * dz
                    _scatter_corner(
                        g_sig[c],
                        g_col[c],
                        bmin_o,
                        inv_o,
                        nx,
                        ny,
                        nz,
                        px,
                        py,
                        pz,
                        dact_o,
                        dso,
                        dco_r,
                        dco_g,
                        dco_b,
                    )
                s_r += w * cr
                s_g += w * cg
                s_b += w * cb
