"""Compiled hot loops: per-level KLT iteration, plane scoring, auction bidding.

Everything here is deterministic: per-point work is independent (no cross-point
reductions inside parallel loops), and sequential sums keep a fixed order.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

STATE_TRACKING = 0
STATE_LOST = 1
STATE_OOB = 2


@njit(cache=True, inline="always")
def _bilinear(img, x, y):
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    ax = x - x0
    ay = y - y0
    return (1.0 - ay) * ((1.0 - ax) * img[y0, x0] + ax * img[y0, x0 + 1]) + ay * (
        (1.0 - ax) * img[y0 + 1, x0] + ax * img[y0 + 1, x0 + 1]
    )


@njit(cache=True, parallel=True)
def klt_level(
    i_prev,
    grad_x,
    grad_y,
    i_next,
    pts,
    disp,
    state,
    resid,
    win_r,
    max_iters,
    eps,
    min_eig,
    finest,
):
    """One pyramid level of Lucas-Kanade for all points.

    pts holds the level-scaled source positions, disp the running displacement
    estimate in this level's pixels (updated in place). Points whose state is
    no longer STATE_TRACKING are skipped. Window bounds respect a one-pixel
    margin so that central-difference gradients stay valid under bilinear
    sampling.
    """
    h, w = i_prev.shape
    n = pts.shape[0]
    side = 2 * win_r + 1
    npix = side * side
    lo = 1.0
    hi_x = float(w - 2)
    hi_y = float(h - 2)
    diverge = 3.0 * side

    for k in prange(n):
        if state[k] != STATE_TRACKING:
            continue
        px = pts[k, 0]
        py = pts[k, 1]
        if px - win_r < lo or px + win_r > hi_x or py - win_r < lo or py + win_r > hi_y:
            if finest:
                state[k] = STATE_OOB
            continue

        template = np.empty(npix, np.float64)
        gxs = np.empty(npix, np.float64)
        gys = np.empty(npix, np.float64)
        gxx = 0.0
        gxy = 0.0
        gyy = 0.0
        idx = 0
        for dy in range(-win_r, win_r + 1):
            for dx in range(-win_r, win_r + 1):
                sx = px + dx
                sy = py + dy
                template[idx] = _bilinear(i_prev, sx, sy)
                gx = _bilinear(grad_x, sx, sy)
                gy = _bilinear(grad_y, sx, sy)
                gxs[idx] = gx
                gys[idx] = gy
                gxx += gx * gx
                gxy += gx * gy
                gyy += gy * gy
                idx += 1

        a = gxx / npix
        b = gxy / npix
        c = gyy / npix
        lam_min = 0.5 * (a + c - np.sqrt((a - c) * (a - c) + 4.0 * b * b))
        if lam_min < min_eig:
            state[k] = STATE_LOST
            continue
        det = gxx * gyy - gxy * gxy

        vx = 0.0
        vy = 0.0
        hit_border = False
        diverged = False
        for _ in range(max_iters):
            cx = px + disp[k, 0] + vx
            cy = py + disp[k, 1] + vy
            if cx - win_r < lo or cx + win_r > hi_x or cy - win_r < lo or cy + win_r > hi_y:
                hit_border = True
                break
            bx = 0.0
            by = 0.0
            idx = 0
            for dy in range(-win_r, win_r + 1):
                for dx in range(-win_r, win_r + 1):
                    di = template[idx] - _bilinear(i_next, cx + dx, cy + dy)
                    bx += di * gxs[idx]
                    by += di * gys[idx]
                    idx += 1
            ux = (gyy * bx - gxy * by) / det
            uy = (gxx * by - gxy * bx) / det
            vx += ux
            vy += uy
            if vx * vx + vy * vy > diverge * diverge:
                diverged = True
                break
            if ux * ux + uy * uy < eps * eps:
                break

        if diverged:
            state[k] = STATE_LOST
            continue
        if hit_border:
            # Coarse levels simply skip refinement; only the true image decides.
            if finest:
                state[k] = STATE_OOB
            continue

        disp[k, 0] += vx
        disp[k, 1] += vy

        if finest:
            cx = px + disp[k, 0]
            cy = py + disp[k, 1]
            if cx - win_r < lo or cx + win_r > hi_x or cy - win_r < lo or cy + win_r > hi_y:
                state[k] = STATE_OOB
                continue
            s = 0.0
            idx = 0
            for dy in range(-win_r, win_r + 1):
                for dx in range(-win_r, win_r + 1):
                    s += abs(template[idx] - _bilinear(i_next, cx + dx, cy + dy))
                    idx += 1
            resid[k] = s / npix


@njit(cache=True, parallel=True)
def plane_costs(points, normals, offsets, threshold_sq):
    """MSAC cost sum(min(d^2, thr^2)) for a batch of candidate planes."""
    m = normals.shape[0]
    n = points.shape[0]
    costs = np.empty(m, np.float64)
    for i in prange(m):
        nx = normals[i, 0]
        ny = normals[i, 1]
        nz = normals[i, 2]
        off = offsets[i]
        total = 0.0
        for j in range(n):
            d = nx * points[j, 0] + ny * points[j, 1] + nz * points[j, 2] + off
            d2 = d * d
            if d2 > threshold_sq:
                d2 = threshold_sq
            total += d2
        costs[i] = total
    return costs


@njit(cache=True)
def cell_union(pts, order, starts, pairs, tol_sq):
    """Union-find over voxel cells linked when any cross-cell point pair is
    within sqrt(tol_sq). pts rows are indexed through order, grouped per cell
    by starts. Returns the root cell per cell, fully path-compressed."""
    n_cells = starts.shape[0] - 1
    parent = np.arange(n_cells)
    for p in range(pairs.shape[0]):
        a = pairs[p, 0]
        b = pairs[p, 1]
        ra = a
        while parent[ra] != ra:
            parent[ra] = parent[parent[ra]]
            ra = parent[ra]
        rb = b
        while parent[rb] != rb:
            parent[rb] = parent[parent[rb]]
            rb = parent[rb]
        if ra == rb:
            continue
        hit = False
        for i in range(starts[a], starts[a + 1]):
            pi = order[i]
            for j in range(starts[b], starts[b + 1]):
                pj = order[j]
                dx = pts[pi, 0] - pts[pj, 0]
                dy = pts[pi, 1] - pts[pj, 1]
                dz = pts[pi, 2] - pts[pj, 2]
                if dx * dx + dy * dy + dz * dz <= tol_sq:
                    hit = True
                    break
            if hit:
                break
        if hit:
            parent[rb] = ra
    for c in range(n_cells):
        r = c
        while parent[r] != r:
            r = parent[r]
        parent[c] = r
    return parent


@njit(cache=True)
def auction_assignment(pa, pb, eps_start, eps_final):
    """Forward auction with epsilon scaling for the min-cost assignment
    between equally sized point sets under squared euclidean cost.

    Gauss-Seidel bidding in fixed index order; prices persist across scaling
    phases, assignments reset. Returns assign with assign[i] = matched index
    into pb for row i of pa.
    """
    n = pa.shape[0]
    price = np.zeros(n, np.float64)
    owner = np.empty(n, np.int64)
    assign = np.empty(n, np.int64)
    eps = eps_start
    while True:
        for j in range(n):
            owner[j] = -1
        for i in range(n):
            assign[i] = -1
        n_free = n
        while n_free > 0:
            for i in range(n):
                if assign[i] != -1:
                    continue
                best = -1e300
                second = -1e300
                best_j = -1
                for j in range(n):
                    dx = pa[i, 0] - pb[j, 0]
                    dy = pa[i, 1] - pb[j, 1]
                    dz = pa[i, 2] - pb[j, 2]
                    value = -(dx * dx + dy * dy + dz * dz) - price[j]
                    if value > best:
                        second = best
                        best = value
                        best_j = j
                    elif value > second:
                        second = value
                if second < -1e299:
                    bid = price[best_j] + eps
                else:
                    bid = price[best_j] + (best - second) + eps
                prev = owner[best_j]
                if prev >= 0:
                    assign[prev] = -1
                    n_free += 1
                owner[best_j] = i
                assign[i] = best_j
                price[best_j] = bid
                n_free -= 1
        if eps <= eps_final:
            break
        eps = eps / 4.0
        if eps < eps_final:
            eps = eps_final
    return assign
