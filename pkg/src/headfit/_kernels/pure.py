"""Pure numpy kernels: soft rasterizer and closest-point queries.

Reference implementation of the hot loops; the compiled extension in
``_core.pyx`` mirrors these semantics operation for operation. Pixel
centers sit at x = -1 + (2j+1)/W, y = 1 - (2i+1)/H (row 0 on top), the
camera looks along -z (larger z is closer) and the reported depth is -z.

The silhouette is S = 1 - prod_f (1 - sigmoid(d_f / sigma)) over the
faces whose padded bounding box covers the pixel, where d_f is the
signed 2D distance to the projected triangle (positive inside). Color
is nearest-depth barycentric interpolation of per-vertex values.
"""

from __future__ import annotations

import numpy as np

_DEGENERATE_AREA = 1e-14


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _pixel_window(
    xs: np.ndarray, ys: np.ndarray, pad: float, height: int, width: int
) -> tuple[int, int, int, int] | None:
    xmin, xmax = xs.min() - pad, xs.max() + pad
    ymin, ymax = ys.min() - pad, ys.max() + pad
    j_lo = int(np.ceil((xmin + 1.0) * 0.5 * width - 0.5))
    j_hi = int(np.floor((xmax + 1.0) * 0.5 * width - 0.5))
    i_lo = int(np.ceil((1.0 - ymax) * 0.5 * height - 0.5))
    i_hi = int(np.floor((1.0 - ymin) * 0.5 * height - 0.5))
    j_lo, j_hi = max(j_lo, 0), min(j_hi, width - 1)
    i_lo, i_hi = max(i_lo, 0), min(i_hi, height - 1)
    if j_lo > j_hi or i_lo > i_hi:
        return None
    return i_lo, i_hi, j_lo, j_hi


def _segment_distance(
    px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Distance from grid points to segment ab, plus the clamped parameter t."""
    abx, aby = b[0] - a[0], b[1] - a[1]
    den = abx * abx + aby * aby
    if den == 0.0:
        t = np.zeros(np.broadcast(px, py).shape)
    else:
        t = np.clip(((px - a[0]) * abx + (py - a[1]) * aby) / den, 0.0, 1.0)
    dx = px - (a[0] + t * abx)
    dy = py - (a[1] + t * aby)
    return np.sqrt(dx * dx + dy * dy), t


def _face_fields(
    tri: np.ndarray, px: np.ndarray, py: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, np.ndarray]:
    """Unnormalized barycentric fields Na, Nb, Nc, the doubled area D and
    the inside mask for a pixel-grid window."""
    (ax, ay), (bx, by), (cx, cy) = tri
    D = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    Na = (bx - px) * (cy - py) - (by - py) * (cx - px)
    Nb = (cx - px) * (ay - py) - (cy - py) * (ax - px)
    Nc = (ax - px) * (by - py) - (ay - py) * (bx - px)
    if abs(D) < _DEGENERATE_AREA:
        inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    else:
        ba, bb, bc = Na / D, Nb / D, Nc / D
        inside = (ba >= 0.0) & (bb >= 0.0) & (bc >= 0.0)
    return Na, Nb, Nc, D, inside


def raster_forward(
    xy: np.ndarray,
    z: np.ndarray,
    faces: np.ndarray,
    colors: np.ndarray | None,
    height: int,
    width: int,
    sigma: float,
    pad: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Soft-rasterize projected triangles.

    Returns (silhouette, color, depth, winner, bary): winner is the
    nearest covering face per pixel (-1 for none), bary its barycentric
    coordinates, depth = -z of the winner (+inf background).
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    has_color = colors is not None

    prod = np.ones((height, width))
    zbuf = np.full((height, width), -np.inf)
    winner = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))

    xcoord = -1.0 + (2.0 * np.arange(width) + 1.0) / width
    ycoord = 1.0 - (2.0 * np.arange(height) + 1.0) / height

    for f in range(len(faces)):
        v0, v1, v2 = faces[f]
        tri = np.array([xy[v0], xy[v1], xy[v2]])
        win = _pixel_window(tri[:, 0], tri[:, 1], pad, height, width)
        if win is None:
            continue
        i_lo, i_hi, j_lo, j_hi = win
        px = xcoord[j_lo : j_hi + 1][None, :]
        py = ycoord[i_lo : i_hi + 1][:, None]
        Na, Nb, Nc, D, inside = _face_fields(tri, px, py)

        d0, _ = _segment_distance(px, py, tri[0], tri[1])
        d1, _ = _segment_distance(px, py, tri[1], tri[2])
        d2, _ = _segment_distance(px, py, tri[2], tri[0])
        dmin = np.minimum(np.minimum(d0, d1), d2)
        signed = np.where(inside, dmin, -dmin)
        sig = _sigmoid(signed / sigma)
        prod[i_lo : i_hi + 1, j_lo : j_hi + 1] *= 1.0 - sig

        if abs(D) >= _DEGENERATE_AREA:
            ba, bb, bc = Na / D, Nb / D, Nc / D
            zp = ba * z[v0] + bb * z[v1] + bc * z[v2]
            zwin = zbuf[i_lo : i_hi + 1, j_lo : j_hi + 1]
            better = inside & (zp > zwin)
            if better.any():
                zwin[better] = zp[better]
                wwin = winner[i_lo : i_hi + 1, j_lo : j_hi + 1]
                wwin[better] = f
                bwin = bary[i_lo : i_hi + 1, j_lo : j_hi + 1]
                bwin[better, 0] = ba[better]
                bwin[better, 1] = bb[better]
                bwin[better, 2] = bc[better]

    sil = 1.0 - prod
    depth = np.where(winner >= 0, -zbuf, np.inf)
    color = np.zeros((height, width, 3))
    if has_color:
        covered = winner >= 0
        if covered.any():
            tri_cols = colors[faces[winner[covered]]]  # n x 3verts x 3ch
            color[covered] = np.einsum("nv,nvc->nc", bary[covered], tri_cols)
    return sil, color, depth, winner, bary


def raster_backward(
    xy: np.ndarray,
    z: np.ndarray,
    faces: np.ndarray,
    colors: np.ndarray | None,
    height: int,
    width: int,
    sigma: float,
    pad: float,
    sil: np.ndarray,
    winner: np.ndarray,
    bary: np.ndarray,
    d_sil: np.ndarray | None,
    d_color: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass of raster_forward.

    Returns (d_xy, d_colors). Depth selection is treated as fixed, so
    gradients hold away from depth-order switches.
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    d_xy = np.zeros_like(xy)
    d_colors = np.zeros((len(xy), 3))

    xcoord = -1.0 + (2.0 * np.arange(width) + 1.0) / width
    ycoord = 1.0 - (2.0 * np.arange(height) + 1.0) / height

    if d_sil is not None and np.any(d_sil):
        remainder = 1.0 - sil  # product of all (1 - sig) factors per pixel
        for f in range(len(faces)):
            v0, v1, v2 = faces[f]
            tri = np.array([xy[v0], xy[v1], xy[v2]])
            win = _pixel_window(tri[:, 0], tri[:, 1], pad, height, width)
            if win is None:
                continue
            i_lo, i_hi, j_lo, j_hi = win
            ds_win = d_sil[i_lo : i_hi + 1, j_lo : j_hi + 1]
            if not np.any(ds_win):
                continue
            px = xcoord[j_lo : j_hi + 1][None, :]
            py = ycoord[i_lo : i_hi + 1][:, None]
            _, _, _, _, inside = _face_fields(tri, px, py)

            dists = []
            params = []
            for a, b in ((0, 1), (1, 2), (2, 0)):
                dist, t = _segment_distance(px, py, tri[a], tri[b])
                dists.append(dist)
                params.append(t)
            dists = np.stack(dists)
            which = np.argmin(dists, axis=0)
            dmin = np.take_along_axis(dists, which[None], axis=0)[0]
            sign = np.where(inside, 1.0, -1.0)
            sig = _sigmoid(sign * dmin / sigma)
            # dS/d(signed distance) = remainder * sig / sigma per pixel
            dd = ds_win * remainder[i_lo : i_hi + 1, j_lo : j_hi + 1] * sig / sigma
            dd = dd * sign  # through d = sign * dmin
            safe = np.where(dmin > 0.0, dmin, 1.0)
            for e, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
                mask = (which == e) & (dmin > 0.0)
                if not mask.any():
                    continue
                t = params[e]
                qx = tri[a][0] + t * (tri[b][0] - tri[a][0])
                qy = tri[a][1] + t * (tri[b][1] - tri[a][1])
                ux = (px - qx) * np.ones_like(py) / safe
                uy = (py - qy) * np.ones_like(px) / safe
                w = dd * mask
                wa = w * (1.0 - t)
                wb = w * t
                va, vb = faces[f][a], faces[f][b]
                d_xy[va, 0] -= np.sum(wa * ux)
                d_xy[va, 1] -= np.sum(wa * uy)
                d_xy[vb, 0] -= np.sum(wb * ux)
                d_xy[vb, 1] -= np.sum(wb * uy)

    if d_color is not None and colors is not None and np.any(d_color):
        covered = winner >= 0
        rows, cols = np.nonzero(covered)
        if len(rows):
            for f in np.unique(winner[covered]):
                sel = winner[rows, cols] == f
                rr, cc = rows[sel], cols[sel]
                v = faces[f]
                tri = np.array([xy[v[0]], xy[v[1]], xy[v[2]]])
                (axx, ayy), (bxx, byy), (cxx, cyy) = tri
                D = (bxx - axx) * (cyy - ayy) - (byy - ayy) * (cxx - axx)
                px = xcoord[cc]
                py = ycoord[rr]
                dcpix = d_color[rr, cc]  # n x 3
                b = bary[rr, cc]  # n x 3
                # d wrt vertex colors
                for k in range(3):
                    d_colors[v[k]] += (b[:, k : k + 1] * dcpix).sum(axis=0)
                # d wrt barycentric coordinates
                dba = dcpix @ colors[v[0]]
                dbb = dcpix @ colors[v[1]]
                dbc = dcpix @ colors[v[2]]
                Na = (bxx - px) * (cyy - py) - (byy - py) * (cxx - px)
                Nb = (cxx - px) * (ayy - py) - (cyy - py) * (axx - px)
                Nc = (axx - px) * (byy - py) - (ayy - py) * (bxx - px)
                gaD = np.array([byy - cyy, cxx - bxx])
                gbD = np.array([cyy - ayy, axx - cxx])
                gcD = np.array([ayy - byy, bxx - axx])
                inv2 = 1.0 / (D * D)
                # grad Na wrt b, c (zero wrt a); cyclic for Nb, Nc
                gbNa = np.stack([cyy - py, px - cxx], axis=1)
                gcNa = np.stack([py - byy, bxx - px], axis=1)
                gcNb = np.stack([ayy - py, px - axx], axis=1)
                gaNb = np.stack([py - cyy, cxx - px], axis=1)
                gaNc = np.stack([byy - py, px - bxx], axis=1)
                gbNc = np.stack([py - ayy, axx - px], axis=1)
                ga = (
                    dba[:, None] * (-Na[:, None] * gaD) * inv2
                    + dbb[:, None] * (gaNb * D - Nb[:, None] * gaD) * inv2
                    + dbc[:, None] * (gaNc * D - Nc[:, None] * gaD) * inv2
                )
                gb = (
                    dba[:, None] * (gbNa * D - Na[:, None] * gbD) * inv2
                    + dbb[:, None] * (-Nb[:, None] * gbD) * inv2
                    + dbc[:, None] * (gbNc * D - Nc[:, None] * gbD) * inv2
                )
                gc = (
                    dba[:, None] * (gcNa * D - Na[:, None] * gcD) * inv2
                    + dbb[:, None] * (gcNb * D - Nb[:, None] * gcD) * inv2
                    + dbc[:, None] * (-Nc[:, None] * gcD) * inv2
                )
                d_xy[v[0]] += ga.sum(axis=0)
                d_xy[v[1]] += gb.sum(axis=0)
                d_xy[v[2]] += gc.sum(axis=0)

    return d_xy, d_colors


# ---------------------------------------------------------------------------
# closest point on a triangle mesh


def _closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point to p on each triangle (vectorized Ericson walk)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty_like(a)
    done = np.zeros(len(a), dtype=bool)

    def claim(mask: np.ndarray, value: np.ndarray) -> None:
        nonlocal done
        take = mask & ~done
        out[take] = value[take]
        done |= take

    claim((d1 <= 0.0) & (d2 <= 0.0), a)
    claim((d3 >= 0.0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        claim((vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0), a + v_ab[:, None] * ab)
        claim((d6 >= 0.0) & (d5 <= d6), c)
        w_ac = d2 / (d2 - d6)
        claim((vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0), a + w_ac[:, None] * ac)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        claim(
            (va <= 0.0) & ((d4 - d3) >= 0.0) & ((d5 - d6) >= 0.0),
            b + w_bc[:, None] * (c - b),
        )
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        interior = a + v[:, None] * ab + w[:, None] * ac
    claim(denom != 0.0, interior)
    if not done.all():
        # fully degenerate faces: nearest of the three corners
        rest = ~done
        cand = np.stack([a[rest], b[rest], c[rest]])
        dist = np.linalg.norm(cand - p, axis=2)
        out[rest] = cand[np.argmin(dist, axis=0), np.arange(rest.sum())]
    return out


def surface_closest(
    points: np.ndarray, vertices: np.ndarray, faces: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact distances, closest surface points and face ids (exhaustive)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    a = vertices[faces[:, 0]]
    b = vertices[faces[:, 1]]
    c = vertices[faces[:, 2]]
    dists = np.empty(len(points))
    closest = np.empty((len(points), 3))
    face_ids = np.empty(len(points), dtype=np.int64)
    for i, p in enumerate(points):
        cand = _closest_on_triangles(p, a, b, c)
        dd = np.sqrt(((cand - p) ** 2).sum(axis=1))
        k = int(np.argmin(dd))
        dists[i] = dd[k]
        closest[i] = cand[k]
        face_ids[i] = k
    return dists, closest, face_ids


surface_closest_brute = surface_closest
