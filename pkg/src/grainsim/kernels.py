"""Numba-compiled kernels for the per-step hot paths.

Everything here is deterministic: constraint solving and sample selection run
serially in a fixed order, and the parallel loops (upsampling gather, ray
casting) are pure maps writing only their own output slot.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

# Cell coordinates are packed into one sortable int64 key: 21 bits per axis,
# offset so coordinates in [-2^20, 2^20) stay collision-free.
KEY_OFFSET = np.int64(1 << 20)
COORD_LIMIT = 1 << 20


@njit(cache=True, inline="always")
def _key(ix, iy, iz):
    return ((ix + KEY_OFFSET) << np.int64(42)) | ((iy + KEY_OFFSET) << np.int64(21)) | (iz + KEY_OFFSET)


@njit(cache=True)
def cell_keys(positions, inv_cell):
    n = positions.shape[0]
    keys = np.empty(n, dtype=np.int64)
    for i in range(n):
        ix = np.int64(math.floor(positions[i, 0] * inv_cell))
        iy = np.int64(math.floor(positions[i, 1] * inv_cell))
        iz = np.int64(math.floor(positions[i, 2] * inv_cell))
        keys[i] = _key(ix, iy, iz)
    return keys


@njit(cache=True)
def query_sphere(keys_sorted, order, positions, inv_cell, probe, radius):
    """Indices of all stored points within `radius` of `probe` (inclusive)."""
    r2 = radius * radius
    cx = np.int64(math.floor(probe[0] * inv_cell))
    cy = np.int64(math.floor(probe[1] * inv_cell))
    cz = np.int64(math.floor(probe[2] * inv_cell))
    out = np.empty(64, dtype=np.int64)
    m = 0
    for ox in range(-1, 2):
        for oy in range(-1, 2):
            for oz in range(-1, 2):
                key = _key(cx + ox, cy + oy, cz + oz)
                lo = np.searchsorted(keys_sorted, key, side="left")
                hi = np.searchsorted(keys_sorted, key, side="right")
                for s in range(lo, hi):
                    j = order[s]
                    dx = positions[j, 0] - probe[0]
                    dy = positions[j, 1] - probe[1]
                    dz = positions[j, 2] - probe[2]
                    if dx * dx + dy * dy + dz * dz <= r2:
                        if m == out.shape[0]:
                            grown = np.empty(out.shape[0] * 2, dtype=np.int64)
                            grown[:m] = out
                            out = grown
                        out[m] = j
                        m += 1
    return out[:m]


@njit(cache=True)
def generate_pairs(keys_sorted, order, positions, inv_cell,
                   contact_radius, inv_mass, body_id):
    """Deduplicated contact pairs (i < j) strictly closer than contact_radius.

    Pairs where both particles are immovable (inverse mass 0) or that share a
    rigid body are skipped. Emission order is fixed by particle index. Also
    returns each pair's penetration at generation time; the friction
    thresholds scale with it for the rest of the substep, so friction
    capacity follows the compression each step actually resolves.
    """
    n = positions.shape[0]
    r2 = contact_radius * contact_radius
    cap = 16 * n if n else 16
    pi = np.empty(cap, dtype=np.int64)
    pj = np.empty(cap, dtype=np.int64)
    pen = np.empty(cap, dtype=np.float64)
    m = 0
    for i in range(n):
        cx = np.int64(math.floor(positions[i, 0] * inv_cell))
        cy = np.int64(math.floor(positions[i, 1] * inv_cell))
        cz = np.int64(math.floor(positions[i, 2] * inv_cell))
        for ox in range(-1, 2):
            for oy in range(-1, 2):
                for oz in range(-1, 2):
                    key = _key(cx + ox, cy + oy, cz + oz)
                    lo = np.searchsorted(keys_sorted, key, side="left")
                    hi = np.searchsorted(keys_sorted, key, side="right")
                    for s in range(lo, hi):
                        j = order[s]
                        if j <= i:
                            continue
                        if inv_mass[i] == 0.0 and inv_mass[j] == 0.0:
                            continue
                        if body_id[i] >= 0 and body_id[i] == body_id[j]:
                            continue
                        dx = positions[j, 0] - positions[i, 0]
                        dy = positions[j, 1] - positions[i, 1]
                        dz = positions[j, 2] - positions[i, 2]
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 < r2:
                            if m == cap:
                                cap *= 2
                                gi = np.empty(cap, dtype=np.int64)
                                gj = np.empty(cap, dtype=np.int64)
                                gp = np.empty(cap, dtype=np.float64)
                                gi[:m] = pi
                                gj[:m] = pj
                                gp[:m] = pen
                                pi = gi
                                pj = gj
                                pen = gp
                            pi[m] = i
                            pj[m] = j
                            pen[m] = contact_radius - math.sqrt(d2)
                            m += 1
    return pi[:m].copy(), pj[:m].copy(), pen[:m].copy()


@njit(cache=True)
def solve_pairs(x_eval, x_pred, x_cur, scaled_inv_mass, mu_s, mu_k, pair_i, pair_j,
                pair_pen, radius, with_friction, dx_sum, count):
    """One Jacobi sweep over the contact pairs, accumulating averaged deltas.

    Contact geometry is evaluated on `x_eval`: the predicted positions during
    the main solve, the start-of-step positions during stabilization (whose
    job is removing only pre-existing overlap). Each penetrating pair
    contributes one fused contact(+friction) delta per particle. The friction
    delta acts on the relative displacement accumulated since the step
    started (x_pred + contact delta - x_cur), so tangential slip from the
    prediction is seen by the static/kinetic branches; its thresholds scale
    with `pair_pen`, the pre-solve penetration standing in for the normal
    load of the contact.
    """
    two_r = 2.0 * radius
    eps = 1e-9
    for k in range(pair_i.shape[0]):
        i = pair_i[k]
        j = pair_j[k]
        dx = x_eval[j, 0] - x_eval[i, 0]
        dy = x_eval[j, 1] - x_eval[i, 1]
        dz = x_eval[j, 2] - x_eval[i, 2]
        d2 = dx * dx + dy * dy + dz * dz
        if d2 >= two_r * two_r:
            continue
        wi = scaled_inv_mass[i]
        wj = scaled_inv_mass[j]
        wsum = wi + wj
        if wsum == 0.0:
            continue
        mi = wi / wsum
        mj = wj / wsum
        d = math.sqrt(d2)
        coincident = d < eps
        if coincident:
            # Degenerate overlap: deterministic fallback axis from the indices.
            axis = (i + j) % 3
            nx = 1.0 if axis == 0 else 0.0
            ny = 1.0 if axis == 1 else 0.0
            nz = 1.0 if axis == 2 else 0.0
            d = 0.0
        else:
            nx = dx / d
            ny = dy / d
            nz = dz / d
        overlap = two_r - d
        cix = -mi * overlap * nx
        ciy = -mi * overlap * ny
        ciz = -mi * overlap * nz
        cjx = mj * overlap * nx
        cjy = mj * overlap * ny
        cjz = mj * overlap * nz

        fix = fiy = fiz = 0.0
        fjx = fjy = fjz = 0.0
        if with_friction and not coincident:
            relx = (x_pred[i, 0] + cix - x_cur[i, 0]) - (x_pred[j, 0] + cjx - x_cur[j, 0])
            rely = (x_pred[i, 1] + ciy - x_cur[i, 1]) - (x_pred[j, 1] + cjy - x_cur[j, 1])
            relz = (x_pred[i, 2] + ciz - x_cur[i, 2]) - (x_pred[j, 2] + cjz - x_cur[j, 2])
            rn = relx * nx + rely * ny + relz * nz
            tx = relx - rn * nx
            ty = rely - rn * ny
            tz = relz - rn * nz
            t2 = tx * tx + ty * ty + tz * tz
            if t2 > 0.0:
                load = pair_pen[k]
                tlen = math.sqrt(t2)
                ms = math.sqrt(mu_s[i] * mu_s[j])
                mk = math.sqrt(mu_k[i] * mu_k[j])
                if tlen < load * ms:
                    scale = 1.0
                else:
                    scale = min(load * mk / tlen, 1.0)
                fix = -mi * scale * tx
                fiy = -mi * scale * ty
                fiz = -mi * scale * tz
                fjx = mj * scale * tx
                fjy = mj * scale * ty
                fjz = mj * scale * tz

        if wi > 0.0:
            dx_sum[i, 0] += cix + fix
            dx_sum[i, 1] += ciy + fiy
            dx_sum[i, 2] += ciz + fiz
            count[i] += 1
        if wj > 0.0:
            dx_sum[j, 0] += cjx + fjx
            dx_sum[j, 1] += cjy + fjy
            dx_sum[j, 2] += cjz + fjz
            count[j] += 1


@njit(cache=True)
def damp_approach_velocities(x, v, scaled_inv_mass, pair_i, pair_j, radius, sweeps):
    """Dissipate non-physical normal velocities of persisting contacts.

    Position projection can overshoot when several constraints push the same
    particle, leaving rebound velocities that re-excite a resting pile every
    step. Granular contact is inelastic: pairs still overlapping after the
    solve get their entire relative normal velocity removed (a closed contact
    cannot rebound), and pairs hovering just outside contact lose only their
    closing component. Removal is split by the same mass ratio as the
    position corrections, preserving the pairwise momentum balance; purely
    tangential motion is never touched.
    """
    touch2 = 4.0 * radius * radius
    near = 2.0 * radius * 1.05
    near2 = near * near
    for _ in range(sweeps):
        for k in range(pair_i.shape[0]):
            i = pair_i[k]
            j = pair_j[k]
            dx = x[j, 0] - x[i, 0]
            dy = x[j, 1] - x[i, 1]
            dz = x[j, 2] - x[i, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 >= near2 or d2 < 1e-24:
                continue
            wi = scaled_inv_mass[i]
            wj = scaled_inv_mass[j]
            ws = wi + wj
            if ws == 0.0:
                continue
            d = math.sqrt(d2)
            nx = dx / d
            ny = dy / d
            nz = dz / d
            closing = ((v[i, 0] - v[j, 0]) * nx + (v[i, 1] - v[j, 1]) * ny
                       + (v[i, 2] - v[j, 2]) * nz)
            if closing <= 0.0 and d2 >= touch2:
                continue
            fi = (wi / ws) * closing
            fj = (wj / ws) * closing
            v[i, 0] -= fi * nx
            v[i, 1] -= fi * ny
            v[i, 2] -= fi * nz
            v[j, 0] += fj * nx
            v[j, 1] += fj * ny
            v[j, 2] += fj * nz


@njit(cache=True)
def apply_average(x_pred, x_cur, dx_sum, count, also_to_x):
    """Move each touched particle by its mean accumulated delta, then reset."""
    for i in range(x_pred.shape[0]):
        c = count[i]
        if c > 0:
            f = 1.0 / c
            mx = dx_sum[i, 0] * f
            my = dx_sum[i, 1] * f
            mz = dx_sum[i, 2] * f
            x_pred[i, 0] += mx
            x_pred[i, 1] += my
            x_pred[i, 2] += mz
            if also_to_x:
                x_cur[i, 0] += mx
                x_cur[i, 1] += my
                x_cur[i, 2] += mz
            dx_sum[i, 0] = 0.0
            dx_sum[i, 1] = 0.0
            dx_sum[i, 2] = 0.0
            count[i] = 0


@njit(cache=True, parallel=True)
def hr_gather(keys_sorted, order, lr_pos, lr_vel, lr_granular, inv_cell, r_lr,
              hr_pos, out_vt, out_max_w, out_sum_w):
    """Per upsampled particle: weighted guide velocity and density weights.

    Guide particles inside the kernel support (distance < 3*r_lr) contribute;
    when none of them is granular the whole neighborhood is dropped so that
    externally moved bodies and walls cannot drag free particles along.
    """
    support2 = 9.0 * r_lr * r_lr
    for h in prange(hr_pos.shape[0]):
        px = hr_pos[h, 0]
        py = hr_pos[h, 1]
        pz = hr_pos[h, 2]
        cx = np.int64(math.floor(px * inv_cell))
        cy = np.int64(math.floor(py * inv_cell))
        cz = np.int64(math.floor(pz * inv_cell))
        sum_w = 0.0
        max_w = 0.0
        svx = 0.0
        svy = 0.0
        svz = 0.0
        any_granular = False
        for ox in range(-1, 2):
            for oy in range(-1, 2):
                for oz in range(-1, 2):
                    key = _key(cx + ox, cy + oy, cz + oz)
                    lo = np.searchsorted(keys_sorted, key, side="left")
                    hi = np.searchsorted(keys_sorted, key, side="right")
                    for s in range(lo, hi):
                        j = order[s]
                        dx = lr_pos[j, 0] - px
                        dy = lr_pos[j, 1] - py
                        dz = lr_pos[j, 2] - pz
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 < support2:
                            t = 1.0 - d2 / support2
                            w = t * t * t
                            if lr_granular[j]:
                                any_granular = True
                            sum_w += w
                            if w > max_w:
                                max_w = w
                            svx += w * lr_vel[j, 0]
                            svy += w * lr_vel[j, 1]
                            svz += w * lr_vel[j, 2]
        if any_granular and sum_w > 0.0:
            out_sum_w[h] = sum_w
            out_max_w[h] = max_w
            out_vt[h, 0] = svx / sum_w
            out_vt[h, 1] = svy / sum_w
            out_vt[h, 2] = svz / sum_w
        else:
            out_sum_w[h] = 0.0
            out_max_w[h] = 0.0
            out_vt[h, 0] = 0.0
            out_vt[h, 1] = 0.0
            out_vt[h, 2] = 0.0


# ---------------------------------------------------------------------------
# Ray-parity point containment with a 2D triangle bin over the XY plane.

@njit(cache=True, inline="always")
def _seg_dist2(px, py, qx, qy):
    """Squared distance from the 2D origin to the segment (p, q)."""
    dx = qx - px
    dy = qy - py
    len2 = dx * dx + dy * dy
    if len2 <= 0.0:
        return px * px + py * py
    t = -(px * dx + py * dy) / len2
    t = min(max(t, 0.0), 1.0)
    cx = px + t * dx
    cy = py + t * dy
    return cx * cx + cy * cy


@njit(cache=True, parallel=True)
def ray_parity_z(points, va, vb, vc, bin_start, bin_items,
                 gx0, gy0, inv_cs, nx, ny, zmax):
    """Parity of +z ray crossings per point. Returns (inside, needs_retry)."""
    n = points.shape[0]
    inside = np.zeros(n, dtype=np.uint8)
    retry = np.zeros(n, dtype=np.uint8)
    eps_par = 1e-12
    eps_t = 1e-12
    eps_b = 1e-10
    for p in prange(n):
        px = points[p, 0]
        py = points[p, 1]
        pz = points[p, 2]
        if pz > zmax:
            continue
        bx = int(math.floor((px - gx0) * inv_cs))
        by = int(math.floor((py - gy0) * inv_cs))
        if bx < 0 or by < 0 or bx >= nx or by >= ny:
            continue
        cell = by * nx + bx
        crossings = 0
        bad = False
        for s in range(bin_start[cell], bin_start[cell + 1]):
            t_idx = bin_items[s]
            ax = va[t_idx, 0] - px
            ay = va[t_idx, 1] - py
            az = va[t_idx, 2] - pz
            bx2 = vb[t_idx, 0] - px
            by2 = vb[t_idx, 1] - py
            bz2 = vb[t_idx, 2] - pz
            cx2 = vc[t_idx, 0] - px
            cy2 = vc[t_idx, 1] - py
            cz2 = vc[t_idx, 2] - pz
            # Signed areas of the XY projection: the +z ray pierces the
            # triangle iff the origin is inside the projected triangle.
            d_ab = ax * by2 - ay * bx2
            d_bc = bx2 * cy2 - by2 * cx2
            d_ca = cx2 * ay - cy2 * ax
            area2 = d_ab + d_bc + d_ca
            if abs(area2) < eps_par:
                # Projected triangle collapses to a segment for this ray;
                # the ray can only graze it if it passes through the segment.
                scale2 = max(ax * ax + ay * ay, max(bx2 * bx2 + by2 * by2,
                                                    cx2 * cx2 + cy2 * cy2))
                tol2 = 1e-18 * max(scale2, 1e-30)
                if (_seg_dist2(ax, ay, bx2, by2) < tol2
                        or _seg_dist2(bx2, by2, cx2, cy2) < tol2
                        or _seg_dist2(cx2, cy2, ax, ay) < tol2):
                    bad = True
                    break
                continue
            inv = 1.0 / area2
            u = d_bc * inv
            v = d_ca * inv
            w = d_ab * inv
            m = min(u, min(v, w))
            if m < eps_b:
                if m > -eps_b:
                    bad = True  # grazing an edge or vertex
                    break
                continue
            z_hit = u * az + v * bz2 + w * cz2
            if z_hit > eps_t:
                crossings += 1
            elif z_hit > -eps_t:
                bad = True  # point lies (numerically) on the surface
                break
        if bad:
            retry[p] = 1
        else:
            inside[p] = np.uint8(crossings & 1)
    return inside, retry


# ---------------------------------------------------------------------------
# Greedy minimum-distance sample selection on a dense occupancy grid.

@njit(cache=True)
def select_samples(cand_pts, cand_cells, cand_cell_starts, occupancy,
                   dims_x, dims_y, dims_z, min_dist, accepted, n_accepted):
    """Accept at most one candidate per grid cell, keeping pairwise distance
    >= min_dist against everything accepted so far. Cells are visited in the
    order given by cand_cell_starts; candidates within a cell in given order.

    occupancy is a flat (dims_x*dims_y*dims_z) int64 array holding accepted
    sample index + 1, and persists across chunked calls. Returns the new
    number of accepted samples.
    """
    md2 = min_dist * min_dist
    n_cells = cand_cell_starts.shape[0] - 1
    for c in range(n_cells):
        start = cand_cell_starts[c]
        stop = cand_cell_starts[c + 1]
        if start == stop:
            continue
        lin = cand_cells[start]
        czi = lin % dims_z
        cyi = (lin // dims_z) % dims_y
        cxi = lin // (dims_z * dims_y)
        if occupancy[lin] != 0:
            continue
        for s in range(start, stop):
            px = cand_pts[s, 0]
            py = cand_pts[s, 1]
            pz = cand_pts[s, 2]
            ok = True
            # Cell side is min_dist/sqrt(3), so conflicts reach two rings out.
            for ox in range(max(cxi - 2, 0), min(cxi + 3, dims_x)):
                for oy in range(max(cyi - 2, 0), min(cyi + 3, dims_y)):
                    for oz in range(max(czi - 2, 0), min(czi + 3, dims_z)):
                        other = occupancy[(ox * dims_y + oy) * dims_z + oz]
                        if other == 0:
                            continue
                        qx = accepted[other - 1, 0]
                        qy = accepted[other - 1, 1]
                        qz = accepted[other - 1, 2]
                        dx = qx - px
                        dy = qy - py
                        dz = qz - pz
                        if dx * dx + dy * dy + dz * dz < md2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                accepted[n_accepted, 0] = px
                accepted[n_accepted, 1] = py
                accepted[n_accepted, 2] = pz
                n_accepted += 1
                occupancy[lin] = n_accepted
                break
    return n_accepted


@njit(cache=True)
def count_near(occupancy, accepted, dims_x, dims_y, dims_z,
               probe, grid_min, inv_cell, radius, rings):
    """Number of accepted samples within `radius` of `probe`."""
    r2 = radius * radius
    cx = int(math.floor((probe[0] - grid_min[0]) * inv_cell))
    cy = int(math.floor((probe[1] - grid_min[1]) * inv_cell))
    cz = int(math.floor((probe[2] - grid_min[2]) * inv_cell))
    hits = 0
    for ox in range(max(cx - rings, 0), min(cx + rings + 1, dims_x)):
        for oy in range(max(cy - rings, 0), min(cy + rings + 1, dims_y)):
            for oz in range(max(cz - rings, 0), min(cz + rings + 1, dims_z)):
                other = occupancy[(ox * dims_y + oy) * dims_z + oz]
                if other == 0:
                    continue
                dx = accepted[other - 1, 0] - probe[0]
                dy = accepted[other - 1, 1] - probe[1]
                dz = accepted[other - 1, 2] - probe[2]
                if dx * dx + dy * dy + dz * dz <= r2:
                    hits += 1
    return hits
