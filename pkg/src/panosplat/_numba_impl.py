"""Numba-jitted hot kernels.

This module is only imported when the numba backend is active; every kernel
here has a pure-numpy twin next to its caller.  Kernels are sequential by
design: compositing and greedy selection are order-dependent, and the fixed
iteration order is what makes results reproducible.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def sparse_conv(coords, feats, sorted_keys, order, kernel, bias, coord_bits):
    m = coords.shape[0]
    k = kernel.shape[0]
    h = k // 2
    fin = feats.shape[1]
    fout = kernel.shape[4]
    off = np.int64(1) << coord_bits
    shift_y = coord_bits + 1
    shift_x = 2 * (coord_bits + 1)
    out = np.empty((m, fout))
    for i in range(m):
        for c in range(fout):
            out[i, c] = bias[c]
    for i in range(m):
        cx, cy, cz = coords[i, 0], coords[i, 1], coords[i, 2]
        # z-major window order to match the numpy lane exactly
        for iz in range(k):
            for iy in range(k):
                for ix in range(k):
                    key = (
                        ((cx + ix - h + off) << shift_x)
                        | ((cy + iy - h + off) << shift_y)
                        | (cz + iz - h + off)
                    )
                    pos = np.searchsorted(sorted_keys, key)
                    if pos >= m or sorted_keys[pos] != key:
                        continue
                    src = order[pos]
                    for c in range(fout):
                        acc = 0.0
                        for f in range(fin):
                            acc += feats[src, f] * kernel[ix, iy, iz, f, c]
                        out[i, c] += acc
    return out


@njit(cache=True)
def composite_forward(
    mean2d, conic, radius_px, order, opacity, category, res, power_cutoff, weight_clamp
):
    k = category.shape[1]
    probs = np.zeros((res, res, k))
    alpha = np.zeros((res, res))
    trans = np.ones((res, res))
    for oi in range(order.shape[0]):
        s = order[oi]
        cx = mean2d[s, 0]
        cy = mean2d[s, 1]
        rad = radius_px[s]
        x0 = max(0, int(np.floor(cx - rad)))
        x1 = min(res - 1, int(np.ceil(cx + rad)))
        y0 = max(0, int(np.floor(cy - rad)))
        y1 = min(res - 1, int(np.ceil(cy + rad)))
        if x0 > x1 or y0 > y1:
            continue
        c00 = conic[s, 0]
        c01 = conic[s, 1]
        c11 = conic[s, 2]
        op = opacity[s]
        for y in range(y0, y1 + 1):
            dy = y + 0.5 - cy
            for x in range(x0, x1 + 1):
                dx = x + 0.5 - cx
                power = 0.5 * (c00 * dx * dx + 2.0 * c01 * dy * dx + c11 * dy * dy)
                if power > power_cutoff:
                    continue
                w = op * np.exp(-power)
                if w > weight_clamp:
                    w = weight_clamp
                t = trans[y, x]
                contrib = t * w
                for c in range(k):
                    probs[y, x, c] += contrib * category[s, c]
                alpha[y, x] += contrib
                trans[y, x] = t * (1.0 - w)
    return probs, alpha


@njit(cache=True)
def composite_backward(
    mean2d,
    conic,
    radius_px,
    order,
    opacity,
    category,
    grad_map,
    res,
    power_cutoff,
    weight_clamp,
):
    n = mean2d.shape[0]
    k = category.shape[1]
    g_op = np.zeros(n)
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))

    # sweep 1: per-pixel total of T_j * w_j * A_j over all splats
    total = np.zeros((res, res))
    trans = np.ones((res, res))
    for oi in range(order.shape[0]):
        s = order[oi]
        cx = mean2d[s, 0]
        cy = mean2d[s, 1]
        rad = radius_px[s]
        x0 = max(0, int(np.floor(cx - rad)))
        x1 = min(res - 1, int(np.ceil(cx + rad)))
        y0 = max(0, int(np.floor(cy - rad)))
        y1 = min(res - 1, int(np.ceil(cy + rad)))
        if x0 > x1 or y0 > y1:
            continue
        c00 = conic[s, 0]
        c01 = conic[s, 1]
        c11 = conic[s, 2]
        op = opacity[s]
        for y in range(y0, y1 + 1):
            dy = y + 0.5 - cy
            for x in range(x0, x1 + 1):
                dx = x + 0.5 - cx
                power = 0.5 * (c00 * dx * dx + 2.0 * c01 * dy * dx + c11 * dy * dy)
                if power > power_cutoff:
                    continue
                w = op * np.exp(-power)
                if w > weight_clamp:
                    w = weight_clamp
                a = 0.0
                for c in range(k):
                    a += grad_map[y, x, c] * category[s, c]
                t = trans[y, x]
                total[y, x] += t * w * a
                trans[y, x] = t * (1.0 - w)

    # sweep 2: suffix = total - prefix - own term gives each splat's
    # downstream contribution without dividing transmittance back out
    prefix = np.zeros((res, res))
    for y in range(res):
        for x in range(res):
            trans[y, x] = 1.0
    for oi in range(order.shape[0]):
        s = order[oi]
        cx = mean2d[s, 0]
        cy = mean2d[s, 1]
        rad = radius_px[s]
        x0 = max(0, int(np.floor(cx - rad)))
        x1 = min(res - 1, int(np.ceil(cx + rad)))
        y0 = max(0, int(np.floor(cy - rad)))
        y1 = min(res - 1, int(np.ceil(cy + rad)))
        if x0 > x1 or y0 > y1:
            continue
        c00 = conic[s, 0]
        c01 = conic[s, 1]
        c11 = conic[s, 2]
        op = opacity[s]
        for y in range(y0, y1 + 1):
            dy = y + 0.5 - cy
            for x in range(x0, x1 + 1):
                dx = x + 0.5 - cx
                power = 0.5 * (c00 * dx * dx + 2.0 * c01 * dy * dx + c11 * dy * dy)
                if power > power_cutoff:
                    continue
                g = np.exp(-power)
                wraw = op * g
                dead = wraw >= weight_clamp
                w = weight_clamp if dead else wraw
                a = 0.0
                for c in range(k):
                    a += grad_map[y, x, c] * category[s, c]
                t = trans[y, x]
                term = t * w * a
                if not dead:
                    suffix = total[y, x] - prefix[y, x] - term
                    dldw = t * a - suffix / (1.0 - w)
                    g_op[s] += dldw * g
                    dldpow = -dldw * wraw
                    g_mean[s, 0] -= dldpow * (c00 * dx + c01 * dy)
                    g_mean[s, 1] -= dldpow * (c01 * dx + c11 * dy)
                    g_conic[s, 0] += 0.5 * dldpow * dx * dx
                    g_conic[s, 1] += dldpow * dx * dy
                    g_conic[s, 2] += 0.5 * dldpow * dy * dy
                prefix[y, x] += term
                trans[y, x] = t * (1.0 - w)
    return g_op, g_mean, g_conic


@njit(cache=True)
def fps_select(points, k, start):
    n = points.shape[0]
    out = np.empty(k, dtype=np.int64)
    best = np.empty(n)
    out[0] = start
    px, py, pz = points[start, 0], points[start, 1], points[start, 2]
    for j in range(n):
        dx = points[j, 0] - px
        dy = points[j, 1] - py
        dz = points[j, 2] - pz
        best[j] = dx * dx + dy * dy + dz * dz
    for i in range(1, k):
        bi = 0
        bv = best[0]
        for j in range(1, n):
            if best[j] > bv:  # strict: ties keep the lowest index
                bv = best[j]
                bi = j
        out[i] = bi
        px, py, pz = points[bi, 0], points[bi, 1], points[bi, 2]
        for j in range(n):
            dx = points[j, 0] - px
            dy = points[j, 1] - py
            dz = points[j, 2] - pz
            d = dx * dx + dy * dy + dz * dz
            if d < best[j]:
                best[j] = d
    return out


@njit(cache=True)
def nn_sqdist_brute(queries, refs):
    nq = queries.shape[0]
    nr = refs.shape[0]
    out = np.empty(nq)
    for i in range(nq):
        best = np.inf
        for j in range(nr):
            dx = queries[i, 0] - refs[j, 0]
            dy = queries[i, 1] - refs[j, 1]
            dz = queries[i, 2] - refs[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
        out[i] = best
    return out


@njit(cache=True)
def nn_sqdist_grid(queries, refs, lo, cell, dims, starts, order, slack):
    # ring search over a uniform grid; the stop rule compares the best
    # distance against the query's margin inside the scanned cell box, minus
    # a slack absorbing floating-point cell assignment, so the scanned set
    # provably contains the minimum and results match brute force bitwise
    nq = queries.shape[0]
    out = np.empty(nq)
    nx, ny, nz = dims[0], dims[1], dims[2]
    for i in range(nq):
        qx, qy, qz = queries[i, 0], queries[i, 1], queries[i, 2]
        cx = int(np.floor((qx - lo[0]) / cell))
        cy = int(np.floor((qy - lo[1]) / cell))
        cz = int(np.floor((qz - lo[2]) / cell))
        cap = max(max(cx, nx - 1 - cx), max(cy, ny - 1 - cy))
        cap = max(cap, max(cz, nz - 1 - cz))
        best = np.inf
        ring = 0
        while True:
            x0, x1 = max(cx - ring, 0), min(cx + ring, nx - 1)
            y0, y1 = max(cy - ring, 0), min(cy + ring, ny - 1)
            z0, z1 = max(cz - ring, 0), min(cz + ring, nz - 1)
            for ox in range(x0, x1 + 1):
                for oy in range(y0, y1 + 1):
                    for oz in range(z0, z1 + 1):
                        m = max(abs(ox - cx), max(abs(oy - cy), abs(oz - cz)))
                        if m != ring:
                            continue
                        cid = (ox * ny + oy) * nz + oz
                        for t in range(starts[cid], starts[cid + 1]):
                            j = order[t]
                            dx = qx - refs[j, 0]
                            dy = qy - refs[j, 1]
                            dz = qz - refs[j, 2]
                            d = dx * dx + dy * dy + dz * dz
                            if d < best:
                                best = d
            if ring >= cap:
                break
            if best < np.inf:
                margin = min(qx - (lo[0] + (cx - ring) * cell),
                             (lo[0] + (cx + ring + 1) * cell) - qx)
                margin = min(margin, qy - (lo[1] + (cy - ring) * cell))
                margin = min(margin, (lo[1] + (cy + ring + 1) * cell) - qy)
                margin = min(margin, qz - (lo[2] + (cz - ring) * cell))
                margin = min(margin, (lo[2] + (cz + ring + 1) * cell) - qz)
                margin = (margin - slack) * (1.0 - 1e-9)
                if margin > 0.0 and best <= margin * margin:
                    break
            ring += 1
        out[i] = best
    return out
