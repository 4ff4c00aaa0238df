"""Numba kernels for tile-binned Gaussian rasterization and its backward pass.

Gaussians arrive pre-sorted front-to-back. Each tile gets the subsequence of
Gaussians whose 3-sigma box overlaps it, so per-pixel iteration order equals
the global depth order and the output does not depend on the tile size.
Every pixel is processed by a single sequential loop; parallelism is over
tiles/pixels only, so results do not depend on the thread count.
"""

import math

import numpy as np
from numba import njit, prange

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4


@njit(cache=True)
def bin_tiles(mx, my, radius, width, height, tile):
    """CSR lists (offsets, members) of sorted-Gaussian positions per tile."""
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n = mx.shape[0]
    counts = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    bounds = np.empty((n, 4), dtype=np.int64)
    for k in range(n):
        r = radius[k]
        # conservative by one pixel; the per-pixel box test is authoritative
        c0 = max(int(math.floor(mx[k] - r - 0.5)) - 1, 0)
        c1 = min(int(math.ceil(mx[k] + r - 0.5)) + 1, width - 1)
        r0 = max(int(math.floor(my[k] - r - 0.5)) - 1, 0)
        r1 = min(int(math.ceil(my[k] + r - 0.5)) + 1, height - 1)
        if c0 > c1 or r0 > r1:
            bounds[k, 0] = 1
            bounds[k, 1] = 0
            continue
        bounds[k, 0] = c0 // tile
        bounds[k, 1] = c1 // tile
        bounds[k, 2] = r0 // tile
        bounds[k, 3] = r1 // tile
        for ty in range(bounds[k, 2], bounds[k, 3] + 1):
            for tx in range(bounds[k, 0], bounds[k, 1] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    members = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for k in range(n):
        if bounds[k, 0] > bounds[k, 1]:
            continue
        for ty in range(bounds[k, 2], bounds[k, 3] + 1):
            for tx in range(bounds[k, 0], bounds[k, 1] + 1):
                t = ty * tiles_x + tx
                members[fill[t]] = k
                fill[t] += 1
    return offsets, members


@njit(cache=True)
def power_floor(opac):
    """Per-Gaussian exponent below which opacity * exp(power) < ALPHA_MIN.

    A small margin keeps borderline cases on the exact path.
    """
    out = np.empty_like(opac)
    for k in range(opac.shape[0]):
        out[k] = math.log(ALPHA_MIN / opac[k]) - 1e-6
    return out


@njit(inline="always")
def _span(m, r, lo, hi):
    """Pixel index range (clipped to [lo, hi)) whose centers may lie in [m-r, m+r]."""
    a = max(int(math.floor(m - r - 0.5)), lo)
    b = min(int(math.ceil(m + r - 0.5)) + 1, hi)
    return a, b


@njit(inline="always")
def _row_span(mx, dy, ca, cb, cc, pmin, a0, a1):
    """Columns of this row that can reach ``power >= pmin``, within [a0, a1).

    Solves the quadratic in dx and pads by a pixel; callers still apply the
    exact per-pixel test, so the result is only a tighter loop bound.
    """
    # 0.5 ca dx^2 + cb dy dx + (0.5 cc dy^2 + pmin) <= 0
    bq = cb * dy
    disc = bq * bq - ca * (cc * dy * dy + 2.0 * pmin)
    if disc < 0.0:
        return a0, a0
    sq = math.sqrt(disc)
    lo = mx + (-bq - sq) / ca
    hi = mx + (-bq + sq) / ca
    c0 = max(int(math.floor(lo - 0.5)) - 1, a0)
    c1 = min(int(math.ceil(hi - 0.5)) + 2, a1)
    return c0, c1


@njit(parallel=True, cache=True)
def forward(mx, my, radius, ca, cb, cc, opac, pmin, color, bg, width, height, tile,
            tile_offsets, tile_members):
    """Composite every pixel. Returns (raw image, final transmittance, counts).

    Within a tile the loop runs Gaussian-outer over the Gaussian's box only;
    each pixel still accumulates its contributions in front-to-back order.
    """
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    image = np.empty((height, width, 3))
    final_t = np.empty((height, width))
    counts = np.zeros(height * width, dtype=np.int64)
    for t in prange(tiles_x * tiles_y):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        x0 = tx * tile
        x1 = min(x0 + tile, width)
        y0 = ty * tile
        y1 = min(y0 + tile, height)
        tw = x1 - x0
        trans = np.ones((y1 - y0) * tw)
        acc = np.zeros(((y1 - y0) * tw, 3))
        cnt = np.zeros((y1 - y0) * tw, dtype=np.int64)
        alive = (y1 - y0) * tw
        for j in range(tile_offsets[t], tile_offsets[t + 1]):
            if alive == 0:
                break
            k = tile_members[j]
            ca_ = ca[k]
            cb_ = cb[k]
            cc_ = cc[k]
            r = radius[k]
            a0, a1 = _span(mx[k], r, x0, x1)
            b0, b1 = _span(my[k], r, y0, y1)
            for row in range(b0, b1):
                dy = row + 0.5 - my[k]
                if abs(dy) > r:
                    continue
                c0, c1 = _row_span(mx[k], dy, ca_, cb_, cc_, pmin[k], a0, a1)
                for col in range(c0, c1):
                    i = (row - y0) * tw + col - x0
                    if trans[i] < T_MIN:
                        continue
                    dx = col + 0.5 - mx[k]
                    if abs(dx) > r:
                        continue
                    power = -0.5 * (ca_ * dx * dx + cc_ * dy * dy) - cb_ * dx * dy
                    if power < pmin[k]:
                        continue
                    a = opac[k] * math.exp(power)
                    if a < ALPHA_MIN:
                        continue
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    w = a * trans[i]
                    acc[i, 0] += color[k, 0] * w
                    acc[i, 1] += color[k, 1] * w
                    acc[i, 2] += color[k, 2] * w
                    cnt[i] += 1
                    trans[i] *= 1.0 - a
                    if trans[i] < T_MIN:
                        alive -= 1
        for row in range(y0, y1):
            for col in range(x0, x1):
                i = (row - y0) * tw + col - x0
                image[row, col, 0] = acc[i, 0] + trans[i] * bg[0]
                image[row, col, 1] = acc[i, 1] + trans[i] * bg[1]
                image[row, col, 2] = acc[i, 2] + trans[i] * bg[2]
                final_t[row, col] = trans[i]
                counts[row * width + col] = cnt[i]
    return image, final_t, counts


@njit(parallel=True, cache=True)
def tile_capacity(mx, my, radius, ca, cb, cc, pmin, width, height, tile, tile_offsets, tile_members):
    """Upper bound on recorded contributions per tile.

    Uses the bounding box of the ellipse ``power >= pmin`` (padded like
    ``_row_span``) inside each Gaussian's 3-sigma box, which is far smaller
    than the box itself for faint Gaussians.
    """
    tiles_x = (width + tile - 1) // tile
    n_tiles = tile_offsets.shape[0] - 1
    cap = np.zeros(n_tiles + 1, dtype=np.int64)
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        x0 = tx * tile
        x1 = min(x0 + tile, width)
        y0 = ty * tile
        y1 = min(y0 + tile, height)
        c = 0
        for j in range(tile_offsets[t], tile_offsets[t + 1]):
            k = tile_members[j]
            a0, a1 = _span(mx[k], radius[k], x0, x1)
            b0, b1 = _span(my[k], radius[k], y0, y1)
            if a1 <= a0 or b1 <= b0:
                continue
            nx = a1 - a0
            ny = b1 - b0
            det = ca[k] * cc[k] - cb[k] * cb[k]
            if det > 0.0:
                kk = max(-2.0 * pmin[k], 0.0)
                nx = min(nx, int(2.0 * math.sqrt(kk * cc[k] / det)) + 6)
                ny = min(ny, int(2.0 * math.sqrt(kk * ca[k] / det)) + 3)
            c += nx * ny
        cap[t + 1] = c
    return np.cumsum(cap)


@njit(parallel=True, cache=True)
def forward_record(mx, my, radius, ca, cb, cc, opac, pmin, color, bg, width, height, tile,
                   tile_offsets, tile_members, cap_offsets, ev_pix, ev_slot, ev_g, ev_alpha, ev_tb):
    """Forward pass that also stores every contribution.

    Contributions of tile ``t`` occupy ``cap_offsets[t] : cap_offsets[t] + n_events[t]``
    in the order they were composited (Gaussian-outer, front to back). Each entry
    holds the tile-local pixel, the slot in ``tile_members``, G, the clamped
    alpha and the transmittance in front of it. The event buffers are passed in
    (length >= ``cap_offsets[-1]``) so callers can reuse them.
    """
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_events = np.zeros(tiles_x * tiles_y, dtype=np.int64)
    image = np.empty((height, width, 3))
    final_t = np.empty((height, width))
    for t in prange(tiles_x * tiles_y):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        x0 = tx * tile
        x1 = min(x0 + tile, width)
        y0 = ty * tile
        y1 = min(y0 + tile, height)
        tw = x1 - x0
        trans = np.ones((y1 - y0) * tw)
        acc = np.zeros(((y1 - y0) * tw, 3))
        alive = (y1 - y0) * tw
        e = cap_offsets[t]
        for j in range(tile_offsets[t], tile_offsets[t + 1]):
            if alive == 0:
                break
            k = tile_members[j]
            ca_ = ca[k]
            cb_ = cb[k]
            cc_ = cc[k]
            r = radius[k]
            a0, a1 = _span(mx[k], r, x0, x1)
            b0, b1 = _span(my[k], r, y0, y1)
            for row in range(b0, b1):
                dy = row + 0.5 - my[k]
                if abs(dy) > r:
                    continue
                c0, c1 = _row_span(mx[k], dy, ca_, cb_, cc_, pmin[k], a0, a1)
                for col in range(c0, c1):
                    i = (row - y0) * tw + col - x0
                    if trans[i] < T_MIN:
                        continue
                    dx = col + 0.5 - mx[k]
                    if abs(dx) > r:
                        continue
                    power = -0.5 * (ca_ * dx * dx + cc_ * dy * dy) - cb_ * dx * dy
                    if power < pmin[k]:
                        continue
                    g = math.exp(power)
                    a = opac[k] * g
                    if a < ALPHA_MIN:
                        continue
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    tb = trans[i]
                    w = a * tb
                    acc[i, 0] += color[k, 0] * w
                    acc[i, 1] += color[k, 1] * w
                    acc[i, 2] += color[k, 2] * w
                    ev_pix[e] = i
                    ev_slot[e] = j
                    ev_g[e] = g
                    ev_alpha[e] = a
                    ev_tb[e] = tb
                    e += 1
                    trans[i] = tb * (1.0 - a)
                    if trans[i] < T_MIN:
                        alive -= 1
        n_events[t] = e - cap_offsets[t]
        for row in range(y0, y1):
            for col in range(x0, x1):
                i = (row - y0) * tw + col - x0
                image[row, col, 0] = acc[i, 0] + trans[i] * bg[0]
                image[row, col, 1] = acc[i, 1] + trans[i] * bg[1]
                image[row, col, 2] = acc[i, 2] + trans[i] * bg[2]
                final_t[row, col] = trans[i]
    return image, final_t, n_events


@njit(parallel=True, cache=True)
def backward_tiles(dl_dpix, final_t, bg, tile, tile_offsets, tile_members, cap_offsets, n_events,
                   ev_pix, ev_slot, ev_g, ev_alpha, ev_tb, mx, my, ca, cb, cc, opac, color):
    """Per-tile-slot gradients, shape (len(tile_members), 9).

    Columns: d mean_x, d mean_y, d conic_a, d conic_b, d conic_c, d opacity,
    d color r, g, b. Each tile replays its contributions back to front and
    sums into its own slots, so no two threads ever write the same row.
    """
    height, width = final_t.shape
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    out = np.zeros((tile_members.shape[0], 9))
    for t in prange(tiles_x * tiles_y):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        x0 = tx * tile
        x1 = min(x0 + tile, width)
        y0 = ty * tile
        y1 = min(y0 + tile, height)
        tw = x1 - x0
        npx = (y1 - y0) * tw
        gp = np.empty((npx, 3))
        s = np.empty((npx, 3))
        live = np.zeros(npx, dtype=np.bool_)
        for row in range(y0, y1):
            for col in range(x0, x1):
                i = (row - y0) * tw + col - x0
                tf = final_t[row, col]
                for q in range(3):
                    gp[i, q] = dl_dpix[row, col, q]
                    s[i, q] = bg[q] * tf
                live[i] = gp[i, 0] != 0.0 or gp[i, 1] != 0.0 or gp[i, 2] != 0.0
        first = cap_offsets[t]
        for e in range(first + n_events[t] - 1, first - 1, -1):
            i = ev_pix[e]
            if not live[i]:
                continue
            j = ev_slot[e]
            k = tile_members[j]
            a = ev_alpha[e]
            tb = ev_tb[e]
            w = a * tb
            g0 = gp[i, 0]
            g1 = gp[i, 1]
            g2 = gp[i, 2]
            k0 = color[k, 0]
            k1 = color[k, 1]
            k2 = color[k, 2]
            out[j, 6] += w * g0
            out[j, 7] += w * g1
            out[j, 8] += w * g2
            inv = 1.0 / (1.0 - a)
            dl_da = (g0 * (tb * k0 - s[i, 0] * inv) + g1 * (tb * k1 - s[i, 1] * inv)
                     + g2 * (tb * k2 - s[i, 2] * inv))
            s[i, 0] += k0 * w
            s[i, 1] += k1 * w
            s[i, 2] += k2 * w
            g = ev_g[e]
            if opac[k] * g > ALPHA_MAX:
                continue
            out[j, 5] += dl_da * g
            dpow = dl_da * opac[k] * g
            col = x0 + i % tw
            row = y0 + i // tw
            dx = col + 0.5 - mx[k]
            dy = row + 0.5 - my[k]
            out[j, 0] += dpow * (ca[k] * dx + cb[k] * dy)
            out[j, 1] += dpow * (cb[k] * dx + cc[k] * dy)
            out[j, 2] += -0.5 * dpow * dx * dx
            out[j, 3] += -dpow * dx * dy
            out[j, 4] += -0.5 * dpow * dy * dy
    return out


@njit(cache=True)
def reduce_slots(slot_grads, tile_members, n_sorted):
    """Sum tile-slot gradients per Gaussian in a fixed serial order."""
    grads = np.zeros((n_sorted, 9))
    for j in range(tile_members.shape[0]):
        k = tile_members[j]
        for q in range(9):
            grads[k, q] += slot_grads[j, q]
    return grads
