"""Hot inner loops.

Every kernel has a loop implementation compiled with numba and a vectorized
numpy twin. The public names dispatch on ``CROSSVIEW_NUMBA``; both variants
stay importable so tests and the benchmark can compare them directly.
"""
import numpy as np

from ._accel import njit, pick

# ---------------------------------------------------------------- assignment


@njit
def _hungarian_loop(cost):
    # rectangular min-cost assignment, rows <= cols; potentials formulation
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    out = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            out[p[j] - 1] = j - 1
    return out


def _hungarian_np(cost):
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = np.flatnonzero(~used)
            cur = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = cur < minv[free]
            minv[free[better]] = cur[better]
            way[free[better]] = j0
            k = int(np.argmin(minv[free]))
            delta = minv[free[k]]
            j1 = free[k]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    out = np.full(n, -1, dtype=np.int64)
    cols = np.flatnonzero(p[1:])
    out[p[1:][cols] - 1] = cols
    return out


def hungarian_min(cost):
    """Row -> column indices of a minimum-cost assignment (rows <= cols)."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.shape[0] > cost.shape[1]:
        raise ValueError(f"need rows <= cols, got {cost.shape}")
    if cost.size == 0:
        return np.full(cost.shape[0], -1, dtype=np.int64)
    return pick(_hungarian_loop, _hungarian_np)(cost)


@njit
def _greedy_loop(score):
    n, m = score.shape
    out = np.full(n, -1, dtype=np.int64)
    row_used = np.zeros(n, dtype=np.bool_)
    col_used = np.zeros(m, dtype=np.bool_)
    for _ in range(min(n, m)):
        best = -np.inf
        bi = -1
        bj = -1
        # row-major scan with strict '>' keeps the lowest (row, col) on ties
        for i in range(n):
            if row_used[i]:
                continue
            for j in range(m):
                if not col_used[j] and score[i, j] > best:
                    best = score[i, j]
                    bi = i
                    bj = j
        if bi < 0:
            break
        out[bi] = bj
        row_used[bi] = True
        col_used[bj] = True
    return out


def _greedy_np(score):
    n, m = score.shape
    out = np.full(n, -1, dtype=np.int64)
    rows, cols = np.divmod(np.arange(n * m), m)
    order = np.lexsort((cols, rows, -score.ravel()))
    row_used = np.zeros(n, dtype=bool)
    col_used = np.zeros(m, dtype=bool)
    left = min(n, m)
    for idx in order:
        i, j = rows[idx], cols[idx]
        if row_used[i] or col_used[j]:
            continue
        out[i] = j
        row_used[i] = col_used[j] = True
        left -= 1
        if left == 0:
            break
    return out


def greedy_max(score):
    """Repeatedly take the global maximum over unmatched rows and columns."""
    score = np.ascontiguousarray(score, dtype=np.float64)
    if score.size == 0:
        return np.full(score.shape[0], -1, dtype=np.int64)
    return pick(_greedy_loop, _greedy_np)(score)


# ------------------------------------------------------------- rasterization


def convex_hull(points):
    """Counter-clockwise hull (in x-right, y-down pixel frame) via monotone chain."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


@njit
def _raster_loop(hull, height, width):
    out = np.zeros((height, width), dtype=np.uint8)
    n = hull.shape[0]
    if n < 3:
        return out
    x0 = max(0, int(np.floor(hull[:, 0].min())))
    x1 = min(width, int(np.ceil(hull[:, 0].max())) + 1)
    y0 = max(0, int(np.floor(hull[:, 1].min())))
    y1 = min(height, int(np.ceil(hull[:, 1].max())) + 1)
    for y in range(y0, y1):
        py = y + 0.5
        for x in range(x0, x1):
            px = x + 0.5
            inside = True
            for k in range(n):
                ax = hull[k, 0]
                ay = hull[k, 1]
                bx = hull[(k + 1) % n, 0]
                by = hull[(k + 1) % n, 1]
                if (bx - ax) * (py - ay) - (by - ay) * (px - ax) < 0.0:
                    inside = False
                    break
            if inside:
                out[y, x] = 1
    return out


def _raster_np(hull, height, width):
    out = np.zeros((height, width), dtype=np.uint8)
    if hull.shape[0] < 3:
        return out
    x0 = max(0, int(np.floor(hull[:, 0].min())))
    x1 = min(width, int(np.ceil(hull[:, 0].max())) + 1)
    y0 = max(0, int(np.floor(hull[:, 1].min())))
    y1 = min(height, int(np.ceil(hull[:, 1].max())) + 1)
    if x0 >= x1 or y0 >= y1:
        return out
    py, px = np.mgrid[y0:y1, x0:x1] + 0.5
    inside = np.ones(py.shape, dtype=bool)
    a = hull
    b = np.roll(hull, -1, axis=0)
    for k in range(hull.shape[0]):
        inside &= (b[k, 0] - a[k, 0]) * (py - a[k, 1]) - (b[k, 1] - a[k, 1]) * (px - a[k, 0]) >= 0.0
    out[y0:y1, x0:x1] = inside
    return out


def rasterize_convex(hull, height, width):
    """Fill pixels whose centers fall inside a CCW convex polygon."""
    hull = np.ascontiguousarray(hull, dtype=np.float64).reshape(-1, 2)
    return pick(_raster_loop, _raster_np)(hull, int(height), int(width))


@njit
def _zbuffer_loop(masks, depths):
    n, h, w = masks.shape
    owner = np.full((h, w), -1, dtype=np.int64)
    for y in range(h):
        for x in range(w):
            best = np.inf
            for k in range(n):
                # strict '<' keeps the lower index on exact depth ties
                if masks[k, y, x] and depths[k] < best:
                    best = depths[k]
                    owner[y, x] = k
    return owner


def _zbuffer_np(masks, depths):
    n, h, w = masks.shape
    if n == 0:
        return np.full((h, w), -1, dtype=np.int64)
    z = np.where(masks.astype(bool), depths[:, None, None], np.inf)
    owner = np.argmin(z, axis=0).astype(np.int64)
    owner[~masks.astype(bool).any(axis=0)] = -1
    return owner


def zbuffer(masks, depths):
    """Per-pixel index of the nearest covering mask, -1 where none."""
    masks = np.ascontiguousarray(masks, dtype=np.uint8)
    depths = np.ascontiguousarray(depths, dtype=np.float64)
    return pick(_zbuffer_loop, _zbuffer_np)(masks, depths)


# ------------------------------------------------------------------- k-means


@njit
def _assign_loop(points, centroids):
    n, d = points.shape
    k = centroids.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    dist = np.empty(n)
    for i in range(n):
        best = np.inf
        for c in range(k):
            acc = 0.0
            for t in range(d):
                diff = points[i, t] - centroids[c, t]
                acc += diff * diff
            if acc < best:
                best = acc
                labels[i] = c
        dist[i] = best
    return labels, dist


def _assign_np(points, centroids):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    labels = np.argmin(d2, axis=1).astype(np.int64)
    return labels, d2[np.arange(points.shape[0]), labels]


def nearest_centroid(points, centroids):
    """Labels and squared distances of each point to its nearest centroid."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    return pick(_assign_loop, _assign_np)(points, centroids)
