# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: soft rasterizer and closest-point queries.

Semantics mirror ``headfit._kernels.pure`` operation for operation; see
that module for conventions. Differences between the two backends are
limited to floating-point summation order (tested to 1e-12).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, ceil, exp, fabs, floor, sqrt

cnp.import_array()

DEF DEGENERATE_AREA = 1e-14


cdef inline double _sigmoid(double t) noexcept nogil:
    cdef double e
    if t >= 0.0:
        return 1.0 / (1.0 + exp(-t))
    e = exp(t)
    return e / (1.0 + e)


cdef inline double _seg_dist(double px, double py, double ax, double ay,
                             double bx, double by, double* t_out) noexcept nogil:
    cdef double abx = bx - ax
    cdef double aby = by - ay
    cdef double den = abx * abx + aby * aby
    cdef double t, dx, dy
    if den == 0.0:
        t = 0.0
    else:
        t = ((px - ax) * abx + (py - ay) * aby) / den
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    dx = px - (ax + t * abx)
    dy = py - (ay + t * aby)
    t_out[0] = t
    return sqrt(dx * dx + dy * dy)


def raster_forward(double[:, ::1] xy, double[::1] z, cnp.int64_t[:, ::1] faces,
                   colors, int height, int width, double sigma, double pad):
    cdef bint has_color = colors is not None
    cdef double[:, ::1] cols
    if has_color:
        cols = np.ascontiguousarray(colors, dtype=np.float64)

    sil_arr = np.ones((height, width), dtype=np.float64)
    zbuf_arr = np.full((height, width), -np.inf)
    winner_arr = np.full((height, width), -1, dtype=np.int64)
    bary_arr = np.zeros((height, width, 3), dtype=np.float64)
    cdef double[:, ::1] prod = sil_arr
    cdef double[:, ::1] zbuf = zbuf_arr
    cdef cnp.int64_t[:, ::1] winner = winner_arr
    cdef double[:, :, ::1] bary = bary_arr

    cdef Py_ssize_t f, i, j, v0, v1, v2
    cdef long i_lo, i_hi, j_lo, j_hi
    cdef double ax, ay, bx, by, cx, cy, xmin, xmax, ymin, ymax
    cdef double px, py, D, Na, Nb, Nc, ba, bb, bc, zp
    cdef double d0, d1, d2, dmin, signed, sig, t0, t1, t2
    cdef bint degenerate, inside
    cdef double hw = <double> width
    cdef double hh = <double> height

    for f in range(faces.shape[0]):
        v0 = faces[f, 0]; v1 = faces[f, 1]; v2 = faces[f, 2]
        ax = xy[v0, 0]; ay = xy[v0, 1]
        bx = xy[v1, 0]; by = xy[v1, 1]
        cx = xy[v2, 0]; cy = xy[v2, 1]
        xmin = ax; xmax = ax
        if bx < xmin: xmin = bx
        if cx < xmin: xmin = cx
        if bx > xmax: xmax = bx
        if cx > xmax: xmax = cx
        ymin = ay; ymax = ay
        if by < ymin: ymin = by
        if cy < ymin: ymin = cy
        if by > ymax: ymax = by
        if cy > ymax: ymax = cy
        xmin -= pad; xmax += pad; ymin -= pad; ymax += pad
        j_lo = <long> ceil((xmin + 1.0) * 0.5 * hw - 0.5)
        j_hi = <long> floor((xmax + 1.0) * 0.5 * hw - 0.5)
        i_lo = <long> ceil((1.0 - ymax) * 0.5 * hh - 0.5)
        i_hi = <long> floor((1.0 - ymin) * 0.5 * hh - 0.5)
        if j_lo < 0: j_lo = 0
        if i_lo < 0: i_lo = 0
        if j_hi > width - 1: j_hi = width - 1
        if i_hi > height - 1: i_hi = height - 1
        if j_lo > j_hi or i_lo > i_hi:
            continue

        D = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        degenerate = fabs(D) < DEGENERATE_AREA
        for i in range(i_lo, i_hi + 1):
            py = 1.0 - (2.0 * i + 1.0) / hh
            for j in range(j_lo, j_hi + 1):
                px = -1.0 + (2.0 * j + 1.0) / hw
                Na = (bx - px) * (cy - py) - (by - py) * (cx - px)
                Nb = (cx - px) * (ay - py) - (cy - py) * (ax - px)
                Nc = (ax - px) * (by - py) - (ay - py) * (bx - px)
                if degenerate:
                    inside = False
                    ba = 0.0; bb = 0.0; bc = 0.0
                else:
                    ba = Na / D; bb = Nb / D; bc = Nc / D
                    inside = ba >= 0.0 and bb >= 0.0 and bc >= 0.0
                d0 = _seg_dist(px, py, ax, ay, bx, by, &t0)
                d1 = _seg_dist(px, py, bx, by, cx, cy, &t1)
                d2 = _seg_dist(px, py, cx, cy, ax, ay, &t2)
                dmin = d0
                if d1 < dmin: dmin = d1
                if d2 < dmin: dmin = d2
                signed = dmin if inside else -dmin
                sig = _sigmoid(signed / sigma)
                prod[i, j] *= 1.0 - sig
                if inside and not degenerate:
                    zp = ba * z[v0] + bb * z[v1] + bc * z[v2]
                    if zp > zbuf[i, j]:
                        zbuf[i, j] = zp
                        winner[i, j] = f
                        bary[i, j, 0] = ba
                        bary[i, j, 1] = bb
                        bary[i, j, 2] = bc

    sil = 1.0 - sil_arr
    depth = np.where(winner_arr >= 0, -zbuf_arr, np.inf)
    color_arr = np.zeros((height, width, 3), dtype=np.float64)
    cdef double[:, :, ::1] color = color_arr
    cdef Py_ssize_t ch, w
    if has_color:
        for i in range(height):
            for j in range(width):
                w = winner[i, j]
                if w >= 0:
                    v0 = faces[w, 0]; v1 = faces[w, 1]; v2 = faces[w, 2]
                    for ch in range(3):
                        color[i, j, ch] = (bary[i, j, 0] * cols[v0, ch]
                                           + bary[i, j, 1] * cols[v1, ch]
                                           + bary[i, j, 2] * cols[v2, ch])
    return sil, color_arr, depth, winner_arr, bary_arr


def raster_backward(double[:, ::1] xy, double[::1] z, cnp.int64_t[:, ::1] faces,
                    colors, int height, int width, double sigma, double pad,
                    double[:, ::1] sil, cnp.int64_t[:, ::1] winner,
                    double[:, :, ::1] bary, d_sil, d_color):
    cdef bint has_color = colors is not None and d_color is not None
    cdef bint has_sil = d_sil is not None
    cdef double[:, ::1] cols
    cdef double[:, ::1] dS
    cdef double[:, :, ::1] dC
    if has_color:
        cols = np.ascontiguousarray(colors, dtype=np.float64)
        dC = np.ascontiguousarray(d_color, dtype=np.float64)
    if has_sil:
        dS = np.ascontiguousarray(d_sil, dtype=np.float64)

    d_xy_arr = np.zeros((xy.shape[0], 2), dtype=np.float64)
    d_cols_arr = np.zeros((xy.shape[0], 3), dtype=np.float64)
    cdef double[:, ::1] d_xy = d_xy_arr
    cdef double[:, ::1] d_cols = d_cols_arr

    cdef Py_ssize_t f, i, j, v0, v1, v2, e, va, vb, ch
    cdef long i_lo, i_hi, j_lo, j_hi
    cdef double ax, ay, bx, by, cx, cy, xmin, xmax, ymin, ymax
    cdef double px, py, D, Na, Nb, Nc, ba, bb, bc
    cdef double d0, d1, d2, dmin, sign, sig, t0, t1, t2, t, dd, rem
    cdef double qx, qy, ux, uy, wa, wb
    cdef double eax, eay, ebx, eby
    cdef bint degenerate, inside
    cdef double hw = <double> width
    cdef double hh = <double> height
    cdef double dba, dbb, dbc, inv2
    cdef double gx, gy

    if has_sil:
        for f in range(faces.shape[0]):
            v0 = faces[f, 0]; v1 = faces[f, 1]; v2 = faces[f, 2]
            ax = xy[v0, 0]; ay = xy[v0, 1]
            bx = xy[v1, 0]; by = xy[v1, 1]
            cx = xy[v2, 0]; cy = xy[v2, 1]
            xmin = ax; xmax = ax
            if bx < xmin: xmin = bx
            if cx < xmin: xmin = cx
            if bx > xmax: xmax = bx
            if cx > xmax: xmax = cx
            ymin = ay; ymax = ay
            if by < ymin: ymin = by
            if cy < ymin: ymin = cy
            if by > ymax: ymax = by
            if cy > ymax: ymax = cy
            xmin -= pad; xmax += pad; ymin -= pad; ymax += pad
            j_lo = <long> ceil((xmin + 1.0) * 0.5 * hw - 0.5)
            j_hi = <long> floor((xmax + 1.0) * 0.5 * hw - 0.5)
            i_lo = <long> ceil((1.0 - ymax) * 0.5 * hh - 0.5)
            i_hi = <long> floor((1.0 - ymin) * 0.5 * hh - 0.5)
            if j_lo < 0: j_lo = 0
            if i_lo < 0: i_lo = 0
            if j_hi > width - 1: j_hi = width - 1
            if i_hi > height - 1: i_hi = height - 1
            if j_lo > j_hi or i_lo > i_hi:
                continue
            D = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            degenerate = fabs(D) < DEGENERATE_AREA
            for i in range(i_lo, i_hi + 1):
                py = 1.0 - (2.0 * i + 1.0) / hh
                for j in range(j_lo, j_hi + 1):
                    if dS[i, j] == 0.0:
                        continue
                    px = -1.0 + (2.0 * j + 1.0) / hw
                    if degenerate:
                        inside = False
                    else:
                        Na = (bx - px) * (cy - py) - (by - py) * (cx - px)
                        Nb = (cx - px) * (ay - py) - (cy - py) * (ax - px)
                        Nc = (ax - px) * (by - py) - (ay - py) * (bx - px)
                        ba = Na / D; bb = Nb / D; bc = Nc / D
                        inside = ba >= 0.0 and bb >= 0.0 and bc >= 0.0
                    d0 = _seg_dist(px, py, ax, ay, bx, by, &t0)
                    d1 = _seg_dist(px, py, bx, by, cx, cy, &t1)
                    d2 = _seg_dist(px, py, cx, cy, ax, ay, &t2)
                    e = 0; dmin = d0; t = t0
                    if d1 < dmin:
                        e = 1; dmin = d1; t = t1
                    if d2 < dmin:
                        e = 2; dmin = d2; t = t2
                    if dmin <= 0.0:
                        continue
                    sign = 1.0 if inside else -1.0
                    sig = _sigmoid(sign * dmin / sigma)
                    rem = 1.0 - sil[i, j]
                    dd = dS[i, j] * rem * sig / sigma * sign
                    if e == 0:
                        va = v0; vb = v1
                        eax = ax; eay = ay; ebx = bx; eby = by
                    elif e == 1:
                        va = v1; vb = v2
                        eax = bx; eay = by; ebx = cx; eby = cy
                    else:
                        va = v2; vb = v0
                        eax = cx; eay = cy; ebx = ax; eby = ay
                    qx = eax + t * (ebx - eax)
                    qy = eay + t * (eby - eay)
                    ux = (px - qx) / dmin
                    uy = (py - qy) / dmin
                    wa = dd * (1.0 - t)
                    wb = dd * t
                    d_xy[va, 0] -= wa * ux
                    d_xy[va, 1] -= wa * uy
                    d_xy[vb, 0] -= wb * ux
                    d_xy[vb, 1] -= wb * uy

    if has_color:
        for i in range(height):
            py = 1.0 - (2.0 * i + 1.0) / hh
            for j in range(width):
                f = winner[i, j]
                if f < 0:
                    continue
                if dC[i, j, 0] == 0.0 and dC[i, j, 1] == 0.0 and dC[i, j, 2] == 0.0:
                    continue
                px = -1.0 + (2.0 * j + 1.0) / hw
                v0 = faces[f, 0]; v1 = faces[f, 1]; v2 = faces[f, 2]
                ax = xy[v0, 0]; ay = xy[v0, 1]
                bx = xy[v1, 0]; by = xy[v1, 1]
                cx = xy[v2, 0]; cy = xy[v2, 1]
                dba = 0.0; dbb = 0.0; dbc = 0.0
                for ch in range(3):
                    d_cols[v0, ch] += bary[i, j, 0] * dC[i, j, ch]
                    d_cols[v1, ch] += bary[i, j, 1] * dC[i, j, ch]
                    d_cols[v2, ch] += bary[i, j, 2] * dC[i, j, ch]
                    dba += dC[i, j, ch] * cols[v0, ch]
                    dbb += dC[i, j, ch] * cols[v1, ch]
                    dbc += dC[i, j, ch] * cols[v2, ch]
                D = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
                Na = (bx - px) * (cy - py) - (by - py) * (cx - px)
                Nb = (cx - px) * (ay - py) - (cy - py) * (ax - px)
                Nc = (ax - px) * (by - py) - (ay - py) * (bx - px)
                inv2 = 1.0 / (D * D)
                # vertex a
                gx = (dba * (-Na * (by - cy))
                      + dbb * ((py - cy) * D - Nb * (by - cy))
                      + dbc * ((by - py) * D - Nc * (by - cy))) * inv2
                gy = (dba * (-Na * (cx - bx))
                      + dbb * ((cx - px) * D - Nb * (cx - bx))
                      + dbc * ((px - bx) * D - Nc * (cx - bx))) * inv2
                d_xy[v0, 0] += gx
                d_xy[v0, 1] += gy
                # vertex b
                gx = (dba * ((cy - py) * D - Na * (cy - ay))
                      + dbb * (-Nb * (cy - ay))
                      + dbc * ((py - ay) * D - Nc * (cy - ay))) * inv2
                gy = (dba * ((px - cx) * D - Na * (ax - cx))
                      + dbb * (-Nb * (ax - cx))
                      + dbc * ((ax - px) * D - Nc * (ax - cx))) * inv2
                d_xy[v1, 0] += gx
                d_xy[v1, 1] += gy
                # vertex c
                gx = (dba * ((py - by) * D - Na * (ay - by))
                      + dbb * ((ay - py) * D - Nb * (ay - by))
                      + dbc * (-Nc * (ay - by))) * inv2
                gy = (dba * ((bx - px) * D - Na * (bx - ax))
                      + dbb * ((px - ax) * D - Nb * (bx - ax))
                      + dbc * (-Nc * (bx - ax))) * inv2
                d_xy[v2, 0] += gx
                d_xy[v2, 1] += gy

    return d_xy_arr, d_cols_arr


# ---------------------------------------------------------------------------
# closest point on a triangle mesh


cdef inline double _tri_closest(double px, double py, double pz,
                                double ax, double ay, double az,
                                double bx, double by, double bz,
                                double cx, double cy, double cz,
                                double* ox, double* oy, double* oz) noexcept nogil:
    """Closest point on one triangle (Ericson region walk); returns squared distance."""
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double apx = px - ax, apy = py - ay, apz = pz - az
    cdef double d1 = abx * apx + aby * apy + abz * apz
    cdef double d2 = acx * apx + acy * apy + acz * apz
    cdef double bpx, bpy, bpz, cpx, cpy, cpz
    cdef double d3, d4, d5, d6, vc, vb, va, v, w, denom
    cdef double dxa, dya, dza, dxb, dyb, dzb, dxc, dyc, dzc
    cdef double qa, qb, qc
    if d1 <= 0.0 and d2 <= 0.0:
        ox[0] = ax; oy[0] = ay; oz[0] = az
    else:
        bpx = px - bx; bpy = py - by; bpz = pz - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0.0 and d4 <= d3:
            ox[0] = bx; oy[0] = by; oz[0] = bz
        else:
            cpx = px - cx; cpy = py - cy; cpz = pz - cz
            d5 = abx * cpx + aby * cpy + abz * cpz
            d6 = acx * cpx + acy * cpy + acz * cpz
            vc = d1 * d4 - d3 * d2
            vb = d5 * d2 - d1 * d6
            va = d3 * d6 - d5 * d4
            if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                v = d1 / (d1 - d3)
                ox[0] = ax + v * abx; oy[0] = ay + v * aby; oz[0] = az + v * abz
            elif d6 >= 0.0 and d5 <= d6:
                ox[0] = cx; oy[0] = cy; oz[0] = cz
            elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                w = d2 / (d2 - d6)
                ox[0] = ax + w * acx; oy[0] = ay + w * acy; oz[0] = az + w * acz
            elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                ox[0] = bx + w * (cx - bx); oy[0] = by + w * (cy - by); oz[0] = bz + w * (cz - bz)
            else:
                denom = va + vb + vc
                if denom != 0.0:
                    v = vb / denom
                    w = vc / denom
                    ox[0] = ax + v * abx + w * acx
                    oy[0] = ay + v * aby + w * acy
                    oz[0] = az + v * abz + w * acz
                else:
                    # fully degenerate face: nearest corner
                    dxa = px - ax; dya = py - ay; dza = pz - az
                    qa = dxa * dxa + dya * dya + dza * dza
                    dxb = px - bx; dyb = py - by; dzb = pz - bz
                    qb = dxb * dxb + dyb * dyb + dzb * dzb
                    dxc = px - cx; dyc = py - cy; dzc = pz - cz
                    qc = dxc * dxc + dyc * dyc + dzc * dzc
                    ox[0] = ax; oy[0] = ay; oz[0] = az
                    if qb < qa:
                        ox[0] = bx; oy[0] = by; oz[0] = bz
                        qa = qb
                    if qc < qa:
                        ox[0] = cx; oy[0] = cy; oz[0] = cz
    dxa = px - ox[0]; dya = py - oy[0]; dza = pz - oz[0]
    return dxa * dxa + dya * dya + dza * dza


def surface_closest_brute(double[:, ::1] points, double[:, ::1] vertices,
                          cnp.int64_t[:, ::1] faces):
    """Exact distances, closest surface points and face ids (exhaustive)."""
    dists_arr = np.empty(points.shape[0], dtype=np.float64)
    closest_arr = np.empty((points.shape[0], 3), dtype=np.float64)
    ids_arr = np.empty(points.shape[0], dtype=np.int64)
    cdef double[::1] dists = dists_arr
    cdef double[:, ::1] closest = closest_arr
    cdef cnp.int64_t[::1] ids = ids_arr
    cdef Py_ssize_t n, f, v0, v1, v2
    cdef double best, sq, ox, oy, oz
    for n in range(points.shape[0]):
        best = INFINITY
        ids[n] = -1
        for f in range(faces.shape[0]):
            v0 = faces[f, 0]; v1 = faces[f, 1]; v2 = faces[f, 2]
            sq = _tri_closest(points[n, 0], points[n, 1], points[n, 2],
                              vertices[v0, 0], vertices[v0, 1], vertices[v0, 2],
                              vertices[v1, 0], vertices[v1, 1], vertices[v1, 2],
                              vertices[v2, 0], vertices[v2, 1], vertices[v2, 2],
                              &ox, &oy, &oz)
            if sq < best:
                best = sq
                closest[n, 0] = ox; closest[n, 1] = oy; closest[n, 2] = oz
                ids[n] = f
        dists[n] = sqrt(best)
    return dists_arr, closest_arr, ids_arr


def surface_closest(double[:, ::1] points, double[:, ::1] vertices,
                    cnp.int64_t[:, ::1] faces):
    """Exact closest-point queries through a uniform spatial grid.

    Pruning uses cell AABB distances, so results match the exhaustive
    scan exactly (faces are registered in every cell their bounding box
    overlaps).
    """
    cdef Py_ssize_t F = faces.shape[0]
    cdef Py_ssize_t N = points.shape[0]
    if F == 0:
        raise ValueError("surface_closest requires a non-empty mesh")

    cdef double[3] lo
    cdef double[3] hi
    cdef double[3] cell
    cdef long[3] ncell
    cdef Py_ssize_t k, f, v0, v1, v2, n
    cdef double ext, max_ext = 0.0
    for k in range(3):
        lo[k] = INFINITY
        hi[k] = -INFINITY
    for f in range(vertices.shape[0]):
        for k in range(3):
            if vertices[f, k] < lo[k]:
                lo[k] = vertices[f, k]
            if vertices[f, k] > hi[k]:
                hi[k] = vertices[f, k]
    for k in range(3):
        ext = hi[k] - lo[k]
        if ext > max_ext:
            max_ext = ext
    cdef double base = ceil(F ** (1.0 / 3.0))
    if base > 96.0:
        base = 96.0
    for k in range(3):
        ext = hi[k] - lo[k]
        if max_ext <= 0.0 or ext <= 0.0:
            ncell[k] = 1
            cell[k] = 1.0
        else:
            ncell[k] = <long> (ext / max_ext * base + 0.5)
            if ncell[k] < 1:
                ncell[k] = 1
            cell[k] = ext / ncell[k]

    # register faces into all grid cells overlapped by their bounding box
    cdef long[3] flo
    cdef long[3] fhi
    cdef long ii, jj, kk, idx
    cdef Py_ssize_t ncells = ncell[0] * ncell[1] * ncell[2]
    counts_arr = np.zeros(ncells + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] starts = counts_arr
    cdef double fmin, fmax, val

    cdef long[:, ::1] face_lo = np.empty((F, 3), dtype=np.int_)
    cdef long[:, ::1] face_hi = np.empty((F, 3), dtype=np.int_)
    for f in range(F):
        v0 = faces[f, 0]; v1 = faces[f, 1]; v2 = faces[f, 2]
        for k in range(3):
            fmin = vertices[v0, k]
            fmax = fmin
            val = vertices[v1, k]
            if val < fmin: fmin = val
            if val > fmax: fmax = val
            val = vertices[v2, k]
            if val < fmin: fmin = val
            if val > fmax: fmax = val
            flo[k] = <long> floor((fmin - lo[k]) / cell[k])
            fhi[k] = <long> floor((fmax - lo[k]) / cell[k])
            if flo[k] < 0: flo[k] = 0
            if fhi[k] > ncell[k] - 1: fhi[k] = ncell[k] - 1
            face_lo[f, k] = flo[k]
            face_hi[f, k] = fhi[k]
        for ii in range(flo[0], fhi[0] + 1):
            for jj in range(flo[1], fhi[1] + 1):
                for kk in range(flo[2], fhi[2] + 1):
                    idx = (ii * ncell[1] + jj) * ncell[2] + kk
                    starts[idx + 1] += 1
    for idx in range(ncells):
        starts[idx + 1] += starts[idx]
    entries_arr = np.empty(starts[ncells], dtype=np.int64)
    cdef cnp.int64_t[::1] entries = entries_arr
    fill_arr = np.zeros(ncells, dtype=np.int64)
    cdef cnp.int64_t[::1] fill = fill_arr
    for f in range(F):
        for ii in range(face_lo[f, 0], face_hi[f, 0] + 1):
            for jj in range(face_lo[f, 1], face_hi[f, 1] + 1):
                for kk in range(face_lo[f, 2], face_hi[f, 2] + 1):
                    idx = (ii * ncell[1] + jj) * ncell[2] + kk
                    entries[starts[idx] + fill[idx]] = f
                    fill[idx] += 1

    dists_arr = np.empty(N, dtype=np.float64)
    closest_arr = np.empty((N, 3), dtype=np.float64)
    ids_arr = np.empty(N, dtype=np.int64)
    cdef double[::1] dists = dists_arr
    cdef double[:, ::1] closest = closest_arr
    cdef cnp.int64_t[::1] ids = ids_arr
    cdef cnp.int64_t[::1] stamp = np.full(F, -1, dtype=np.int64)

    cdef long[3] home
    cdef long ring, rmax, a_lo, a_hi, b_lo, b_hi, c_lo, c_hi
    cdef double best, sq, ox, oy, oz, qx, qy, qz
    cdef double cell_lo, cell_hi, dcell, dist_k, bound
    cdef bint on_shell
    cdef Py_ssize_t ei
    cdef cnp.int64_t face_id

    rmax = ncell[0]
    if ncell[1] > rmax: rmax = ncell[1]
    if ncell[2] > rmax: rmax = ncell[2]

    for n in range(N):
        qx = points[n, 0]; qy = points[n, 1]; qz = points[n, 2]
        for k in range(3):
            val = (points[n, k] - lo[k]) / cell[k]
            home[k] = <long> floor(val)
            if home[k] < 0: home[k] = 0
            if home[k] > ncell[k] - 1: home[k] = ncell[k] - 1
        best = INFINITY
        ox = 0.0; oy = 0.0; oz = 0.0
        ids[n] = -1
        for ring in range(rmax + 1):
            a_lo = home[0] - ring; a_hi = home[0] + ring
            b_lo = home[1] - ring; b_hi = home[1] + ring
            c_lo = home[2] - ring; c_hi = home[2] + ring
            for ii in range(a_lo, a_hi + 1):
                if ii < 0 or ii >= ncell[0]:
                    continue
                for jj in range(b_lo, b_hi + 1):
                    if jj < 0 or jj >= ncell[1]:
                        continue
                    for kk in range(c_lo, c_hi + 1):
                        if kk < 0 or kk >= ncell[2]:
                            continue
                        on_shell = (ii == a_lo or ii == a_hi or jj == b_lo
                                    or jj == b_hi or kk == c_lo or kk == c_hi)
                        if not on_shell:
                            continue
                        # squared distance from the query to this cell's box
                        sq = 0.0
                        cell_lo = lo[0] + ii * cell[0]
                        cell_hi = cell_lo + cell[0]
                        if qx < cell_lo: dist_k = cell_lo - qx
                        elif qx > cell_hi: dist_k = qx - cell_hi
                        else: dist_k = 0.0
                        sq += dist_k * dist_k
                        cell_lo = lo[1] + jj * cell[1]
                        cell_hi = cell_lo + cell[1]
                        if qy < cell_lo: dist_k = cell_lo - qy
                        elif qy > cell_hi: dist_k = qy - cell_hi
                        else: dist_k = 0.0
                        sq += dist_k * dist_k
                        cell_lo = lo[2] + kk * cell[2]
                        cell_hi = cell_lo + cell[2]
                        if qz < cell_lo: dist_k = cell_lo - qz
                        elif qz > cell_hi: dist_k = qz - cell_hi
                        else: dist_k = 0.0
                        sq += dist_k * dist_k
                        if sq > best:
                            continue
                        idx = (ii * ncell[1] + jj) * ncell[2] + kk
                        for ei in range(starts[idx], starts[idx + 1]):
                            face_id = entries[ei]
                            if stamp[face_id] == n:
                                continue
                            stamp[face_id] = n
                            v0 = faces[face_id, 0]
                            v1 = faces[face_id, 1]
                            v2 = faces[face_id, 2]
                            sq = _tri_closest(
                                qx, qy, qz,
                                vertices[v0, 0], vertices[v0, 1], vertices[v0, 2],
                                vertices[v1, 0], vertices[v1, 1], vertices[v1, 2],
                                vertices[v2, 0], vertices[v2, 1], vertices[v2, 2],
                                &dist_k, &cell_lo, &cell_hi)
                            if sq < best:
                                best = sq
                                ox = dist_k; oy = cell_lo; oz = cell_hi
                                ids[n] = face_id
            # distance to the outside of the explored box; clipped sides are safe
            bound = INFINITY
            if a_lo >= 0:
                dcell = qx - (lo[0] + a_lo * cell[0])
                if dcell < bound: bound = dcell
            if a_hi <= ncell[0] - 1:
                dcell = (lo[0] + (a_hi + 1) * cell[0]) - qx
                if dcell < bound: bound = dcell
            if b_lo >= 0:
                dcell = qy - (lo[1] + b_lo * cell[1])
                if dcell < bound: bound = dcell
            if b_hi <= ncell[1] - 1:
                dcell = (lo[1] + (b_hi + 1) * cell[1]) - qy
                if dcell < bound: bound = dcell
            if c_lo >= 0:
                dcell = qz - (lo[2] + c_lo * cell[2])
                if dcell < bound: bound = dcell
            if c_hi <= ncell[2] - 1:
                dcell = (lo[2] + (c_hi + 1) * cell[2]) - qz
                if dcell < bound: bound = dcell
            if bound * bound > best:
                break
        dists[n] = sqrt(best)
        closest[n, 0] = ox; closest[n, 1] = oy; closest[n, 2] = oz
    return dists_arr, closest_arr, ids_arr
