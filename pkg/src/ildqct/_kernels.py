"""Compiled per-window texture kernels.

Everything here works on ``(z, y, x)`` ordered arrays. Gray levels passed to
the co-occurrence and run-length kernels are 0-based; the feature formulas
index levels from 1.
"""
import math

import numpy as np
from numba import njit

N_HIST = 12
N_GLCM = 7
N_RLM = 7
N_FEATURES = N_HIST + N_GLCM + N_RLM

# point status codes from map_features
OK = 0
LOW_OCCUPANCY = 1
DEGENERATE = 2


def unique_offsets() -> np.ndarray:
    """The 13 unique unit offsets of the 26-neighbourhood, as (dz, dy, dx)."""
    out = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                v = (dz, dy, dx)
                first = next((c for c in v if c != 0), 0)
                if first > 0:
                    out.append(v)
    return np.array(out, dtype=np.int64)


OFFSETS_13 = unique_offsets()


@njit(cache=True, nogil=True)
def quantize_value(v, levels, lo, hi):
    c = v
    if c < lo:
        c = lo
    if c > hi:
        c = hi
    q = int(math.floor(levels * (c - lo) / (hi - lo)))
    if q > levels - 1:
        q = levels - 1
    return q


@njit(cache=True, nogil=True)
def quantize_box(vol, z0, z1, y0, y1, x0, x1, levels, lo, hi):
    q = np.empty((z1 - z0, y1 - y0, x1 - x0), dtype=np.int64)
    for z in range(z0, z1):
        for y in range(y0, y1):
            for x in range(x0, x1):
                q[z - z0, y - y0, x - x0] = quantize_value(float(vol[z, y, x]), levels, lo, hi)
    return q


@njit(cache=True, nogil=True)
def glcm_counts(q, m, levels, offsets, distance):
    """Symmetric pair counts over all offsets; pairs need both voxels masked."""
    nz, ny, nx = q.shape
    counts = np.zeros((levels, levels), dtype=np.int64)
    for k in range(offsets.shape[0]):
        dz = offsets[k, 0] * distance
        dy = offsets[k, 1] * distance
        dx = offsets[k, 2] * distance
        for z in range(max(0, -dz), min(nz, nz - dz)):
            for y in range(max(0, -dy), min(ny, ny - dy)):
                for x in range(max(0, -dx), min(nx, nx - dx)):
                    if m[z, y, x] and m[z + dz, y + dy, x + dx]:
                        a = q[z, y, x]
                        b = q[z + dz, y + dy, x + dx]
                        counts[a, b] += 1
                        counts[b, a] += 1
    return counts


@njit(cache=True, nogil=True)
def rlm_counts(q, m, levels, offsets):
    """Run counts summed over directions; unmasked voxels terminate runs.

    Returns an array of shape (levels, max_len + 1); column j holds runs of
    length j, column 0 is always empty.
    """
    nz, ny, nx = q.shape
    max_len = max(nz, max(ny, nx))
    runs = np.zeros((levels, max_len + 1), dtype=np.int64)
    for k in range(offsets.shape[0]):
        dz = offsets[k, 0]
        dy = offsets[k, 1]
        dx = offsets[k, 2]
        for z0 in range(nz):
            for y0 in range(ny):
                for x0 in range(nx):
                    pz = z0 - dz
                    py = y0 - dy
                    px = x0 - dx
                    if 0 <= pz < nz and 0 <= py < ny and 0 <= px < nx:
                        continue  # not a line start
                    z = z0
                    y = y0
                    x = x0
                    cur = -1
                    length = 0
                    while 0 <= z < nz and 0 <= y < ny and 0 <= x < nx:
                        if m[z, y, x]:
                            g = q[z, y, x]
                            if g == cur:
                                length += 1
                            else:
                                if length > 0:
                                    runs[cur, length] += 1
                                cur = g
                                length = 1
                        else:
                            if length > 0:
                                runs[cur, length] += 1
                            cur = -1
                            length = 0
                        z += dz
                        y += dy
                        x += dx
                    if length > 0:
                        runs[cur, length] += 1
    return runs


@njit(cache=True, nogil=True)
def hist_features(values, counts, out, start):
    """12 first-order features from distinct ascending values and their counts."""
    nb = values.shape[0]
    total = 0
    for b in range(nb):
        total += counts[b]
    n = float(total)
    s = 0.0
    for b in range(nb):
        s += values[b] * counts[b]
    mean = s / n

    p5_idx = nb - 1
    p95_idx = nb - 1
    cum = 0
    found5 = False
    found95 = False
    for b in range(nb):
        cum += counts[b]
        if not found5 and cum * 100 >= 5 * total:
            p5_idx = b
            found5 = True
        if not found95 and cum * 100 >= 95 * total:
            p95_idx = b
            found95 = True
    low_s = 0.0
    low_n = 0
    for b in range(p5_idx + 1):
        low_s += values[b] * counts[b]
        low_n += counts[b]
    high_s = 0.0
    high_n = 0
    for b in range(p95_idx, nb):
        high_s += values[b] * counts[b]
        high_n += counts[b]

    m2 = 0.0
    m3 = 0.0
    m4 = 0.0
    ent = 0.0
    for b in range(nb):
        g = counts[b] / n
        d = values[b] - mean
        m2 += d * d * g
        m3 += d * d * d * g
        m4 += d * d * d * d * g
        if g > 0:
            ent -= g * math.log(g)
    sigma = math.sqrt(m2)
    if sigma > 0:
        kurt = m4 / sigma**4
        skew = m3 / sigma**3
    else:
        kurt = 0.0
        skew = 0.0

    out[start + 0] = mean
    out[start + 1] = values[0]
    out[start + 2] = values[nb - 1]
    out[start + 3] = values[p5_idx]
    out[start + 4] = low_s / low_n
    out[start + 5] = values[p95_idx]
    out[start + 6] = high_s / high_n
    out[start + 7] = s
    out[start + 8] = sigma
    out[start + 9] = ent
    out[start + 10] = kurt
    out[start + 11] = skew


@njit(cache=True, nogil=True)
def glcm_marginals(counts):
    G = counts.shape[0]
    total = 0.0
    for i in range(G):
        for j in range(G):
            total += counts[i, j]
    mu_i = 0.0
    mu_j = 0.0
    for i in range(G):
        for j in range(G):
            f = counts[i, j] / total
            mu_i += (i + 1) * f
            mu_j += (j + 1) * f
    var_i = 0.0
    var_j = 0.0
    for i in range(G):
        for j in range(G):
            f = counts[i, j] / total
            var_i += (i + 1 - mu_i) ** 2 * f
            var_j += (j + 1 - mu_j) ** 2 * f
    return total, mu_i, mu_j, math.sqrt(var_i), math.sqrt(var_j)


@njit(cache=True, nogil=True)
def glcm_features(counts, out, start):
    G = counts.shape[0]
    total, mu_i, mu_j, sd_i, sd_j = glcm_marginals(counts)
    shade = 0.0
    cov = 0.0
    eij = 0.0
    energy = 0.0
    ent = 0.0
    inertia = 0.0
    idm = 0.0
    for i in range(G):
        for j in range(G):
            c = counts[i, j]
            if c == 0:
                continue
            f = c / total
            a = i + 1 - mu_i
            b = j + 1 - mu_j
            shade += (a + b) ** 3 * f
            cov += a * b * f
            eij += (i + 1) * (j + 1) * f
            energy += f * f
            ent -= f * math.log(f)
            d2 = float((i - j) * (i - j))
            inertia += d2 * f
            idm += f / (1.0 + d2)
    denom = sd_i * sd_j
    out[start + 0] = shade
    if denom > 0:
        out[start + 1] = cov / denom
        out[start + 2] = (eij - mu_i * mu_j) / denom
    else:
        out[start + 1] = 0.0
        out[start + 2] = 0.0
    out[start + 3] = energy
    out[start + 4] = ent
    out[start + 5] = inertia
    out[start + 6] = idm


@njit(cache=True, nogil=True)
def rlm_features(runs, out, start):
    M = runs.shape[0]
    N = runs.shape[1]
    n_r = 0.0
    pixels = 0.0
    gln = 0.0
    hgl = 0.0
    lre = 0.0
    lgl = 0.0
    sre = 0.0
    for i in range(M):
        row = 0.0
        gi = float(i + 1)
        for j in range(1, N):
            r = float(runs[i, j])
            if r == 0.0:
                continue
            row += r
            n_r += r
            pixels += j * r
            hgl += r * gi * gi
            lgl += r / (gi * gi)
            lre += r * j * j
            sre += r / float(j * j)
        gln += row * row
    rln = 0.0
    for j in range(1, N):
        col = 0.0
        for i in range(M):
            col += runs[i, j]
        rln += col * col
    out[start + 0] = gln / n_r
    out[start + 1] = hgl / n_r
    out[start + 2] = lre / n_r
    out[start + 3] = lgl / n_r
    out[start + 4] = rln / n_r
    out[start + 5] = n_r / pixels
    out[start + 6] = sre / n_r


@njit(cache=True, nogil=True)
def _masked_histogram(vol, mask, z0, z1, y0, y1, x0, x1):
    n = 0
    for z in range(z0, z1):
        for y in range(y0, y1):
            for x in range(x0, x1):
                if mask[z, y, x]:
                    n += 1
    vals = np.empty(n, dtype=np.int64)
    k = 0
    for z in range(z0, z1):
        for y in range(y0, y1):
            for x in range(x0, x1):
                if mask[z, y, x]:
                    vals[k] = vol[z, y, x]
                    k += 1
    vals.sort()
    nb = 0
    for t in range(n):
        if t == 0 or vals[t] != vals[t - 1]:
            nb += 1
    levels = np.empty(nb, dtype=np.float64)
    counts = np.zeros(nb, dtype=np.int64)
    b = -1
    for t in range(n):
        if t == 0 or vals[t] != vals[t - 1]:
            b += 1
            levels[b] = vals[t]
        counts[b] += 1
    return levels, counts


@njit(cache=True, nogil=True)
def box_features(vol, mask, z0, z1, y0, y1, x0, x1, levels, lo, hi, offsets, distance, out):
    """Fill ``out`` with the 26 features of the masked voxels in the box.

    Returns False when the box has no masked voxel pair (degenerate window).
    """
    q = quantize_box(vol, z0, z1, y0, y1, x0, x1, levels, lo, hi)
    m = mask[z0:z1, y0:y1, x0:x1]
    counts = glcm_counts(q, m, levels, offsets, distance)
    if counts.sum() == 0:
        return False
    hv, hc = _masked_histogram(vol, mask, z0, z1, y0, y1, x0, x1)
    hist_features(hv, hc, out, 0)
    glcm_features(counts, out, N_HIST)
    runs = rlm_counts(q, m, levels, offsets)
    rlm_features(runs, out, N_HIST + N_GLCM)
    return True


@njit(cache=True, nogil=True)
def map_features(vol, mask, centers, sides, min_fraction, levels, lo, hi, offsets, distance,
                 feats, occupancy, status):
    """Features for every lattice centre (z, y, x); rows are independent."""
    nz, ny, nx = vol.shape
    for p in range(centers.shape[0]):
        cz = centers[p, 0]
        cy = centers[p, 1]
        cx = centers[p, 2]
        z0 = max(0, cz - sides[0] // 2)
        y0 = max(0, cy - sides[1] // 2)
        x0 = max(0, cx - sides[2] // 2)
        z1 = min(nz, cz - sides[0] // 2 + sides[0])
        y1 = min(ny, cy - sides[1] // 2 + sides[1])
        x1 = min(nx, cx - sides[2] // 2 + sides[2])
        inside = 0
        for z in range(z0, z1):
            for y in range(y0, y1):
                for x in range(x0, x1):
                    if mask[z, y, x]:
                        inside += 1
        occ = inside / float((z1 - z0) * (y1 - y0) * (x1 - x0))
        occupancy[p] = occ
        if occ < min_fraction:
            status[p] = LOW_OCCUPANCY
            continue
        row = feats[p]
        if box_features(vol, mask, z0, z1, y0, y1, x0, x1, levels, lo, hi, offsets, distance, row):
            status[p] = OK
        else:
            status[p] = DEGENERATE
