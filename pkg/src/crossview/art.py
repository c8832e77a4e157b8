"""Adaptive region tokenizer: crop, rescale, position-embed, keep masked cells,
cluster, project."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import EmptyRegionError
from .numcore import Tensor, add_mlp, concat, matmul, mlp_forward, reshape, take


@dataclass
class ArtConfig:
    K: int = 10
    P: int = 14
    pad: int = 14
    s_max: int = 8
    kmeans_iters: int = 10
    grid: int = 16
    hidden: int = 128

    def __post_init__(self):
        if self.K < 1 or self.P < 1 or self.s_max < 1:
            raise ValueError(f"invalid ArtConfig {self}")


@dataclass
class CropGeometry:
    box: tuple  # padded (t, l, b, r), b and r exclusive
    s: int
    h_r: int
    w_r: int


@dataclass
class RegionCells:
    """Everything about one region that does not depend on trainable parameters."""
    features: np.ndarray  # (n, D) resampled feature cells inside the mask
    pos_weights: np.ndarray  # (n, G*G) bilinear weights into the position table
    coords: np.ndarray  # (n, 2) cell (row, col) in the resized crop grid
    geometry: CropGeometry
    seed: int


@dataclass
class ObjectTokens:
    tokens: object  # Tensor (K, D)
    validity: np.ndarray
    source: tuple = None

    @property
    def n_valid(self):
        return int(self.validity.sum())


def init_params(ps, d_v, cfg, rng):
    ps.add("art.pos", rng.normal(scale=0.02, size=(cfg.grid * cfg.grid, d_v)))
    add_mlp(ps, "art.mlp", d_v, cfg.hidden, d_v, rng)


def _ceil_div(a, b):
    return -(-a // b)


def scale_factor(area, K, P, s_max=None):
    """Smallest integer s with s^2 * area >= K * P^2, optionally capped."""
    if area <= 0:
        raise EmptyRegionError("empty mask")
    target = K * P * P
    s = max(1, int(np.floor(np.sqrt(target / area))))
    while s * s * area < target:
        s += 1
    while s > 1 and (s - 1) * (s - 1) * area >= target:
        s -= 1
    return s if s_max is None else min(s, s_max)


def geometry_from_box(box, area, cfg, capped=True):
    t, l, b, r = box
    s = scale_factor(area, cfg.K, cfg.P, cfg.s_max if capped else None)
    h_r = _ceil_div((b - t) * s, cfg.P) * cfg.P
    w_r = _ceil_div((r - l) * s, cfg.P) * cfg.P
    return CropGeometry(box, s, h_r, w_r)


def compute_crop_geometry(mask, cfg, capped=True):
    mask = np.asarray(mask)
    area = int(mask.sum())
    if area == 0:
        raise EmptyRegionError("empty mask")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    box = (max(0, int(rows[0]) - cfg.pad), max(0, int(cols[0]) - cfg.pad),
           min(h, int(rows[-1]) + 1 + cfg.pad), min(w, int(cols[-1]) + 1 + cfg.pad))
    return geometry_from_box(box, area, cfg, capped)


def bilinear(coord_y, coord_x, h, w):
    """Corner indices (n, 4) into a row-major h*w grid and their weights (n, 4).

    Coordinates are fractional grid indices; sampling clamps at the border.
    """
    y = np.clip(coord_y, 0.0, h - 1.0)
    x = np.clip(coord_x, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
    wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=-1)
    return idx, wts


def _sample(values, idx, wts):
    return (values[idx] * wts[..., None]).sum(axis=-2) if values.ndim == 2 else (values[idx] * wts).sum(axis=-1)


def prepare_region(fmap, mask, cfg, seed=0, capped=True):
    """Resample the padded crop onto the rescaled cell grid and keep cells inside the mask."""
    geo = compute_crop_geometry(mask, cfg, capped)
    grid = fmap.grid
    hv, wv, d = grid.shape
    P = fmap.patch
    t, l, b, r = geo.box
    nr, nc = geo.h_r // cfg.P, geo.w_r // cfg.P
    ii, jj = np.meshgrid(np.arange(nr), np.arange(nc), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    # half-pixel-centre mapping from resized cells back to image pixels
    py = t + (ii + 0.5) * (b - t) / nr
    px = l + (jj + 0.5) * (r - l) / nc
    m = np.asarray(mask, dtype=np.float64)
    midx, mw = bilinear(py - 0.5, px - 0.5, m.shape[0], m.shape[1])
    keep = _sample(m.ravel(), midx, mw) >= 0.5
    if not keep.any():
        raise EmptyRegionError("no cells survive the resized mask")
    fidx, fw = bilinear(py[keep] / P - 0.5, px[keep] / P - 0.5, hv, wv)
    feats = _sample(grid.reshape(hv * wv, d), fidx, fw)
    G = cfg.grid
    gidx, gw = bilinear((ii[keep] + 0.5) / nr * G - 0.5, (jj[keep] + 0.5) / nc * G - 0.5, G, G)
    pos_w = np.zeros((int(keep.sum()), G * G))
    np.add.at(pos_w, (np.arange(pos_w.shape[0])[:, None], gidx), gw)
    return RegionCells(feats, pos_w, np.stack([ii[keep], jj[keep]], axis=1), geo, int(seed))


# ------------------------------------------------------------------- k-means


def _fix_empty(points, labels, dist, k):
    labels = labels.copy()
    dist = dist.copy()
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        # move the worst-fitting point out of a cluster that can spare it
        order = np.argsort(-dist, kind="stable")
        for p in order:
            if counts[labels[p]] > 1:
                counts[labels[p]] -= 1
                labels[p] = j
                counts[j] = 1
                dist[p] = 0.0
                break
    return labels


def _means(points, labels, k):
    c = np.zeros((k, points.shape[1]))
    np.add.at(c, labels, points)
    return c / np.bincount(labels, minlength=k)[:, None]


def _inertia(points, labels, centroids):
    diff = points - centroids[labels]
    return float((diff * diff).sum())


def kmeans(points, k, iters=10, seed=0):
    """k-means++ seeding then Lloyd steps.

    Returns ``(centroids, labels, inertia_history)``. Every cluster ends
    non-empty (empty ones take the farthest point), so each centroid is the mean
    of its labelled points.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k-means needs 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        nxt = int(rng.integers(n)) if tot <= 0 else int(rng.choice(n, p=d2 / tot))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    cent = points[chosen].copy()
    labels, dist = kernels.nearest_centroid(points, cent)
    history = [float(dist.sum())]
    for _ in range(iters):
        labels = _fix_empty(points, labels, dist, k)
        cent = _means(points, labels, k)
        history.append(_inertia(points, labels, cent))
        new, dist = kernels.nearest_centroid(points, cent)
        history.append(float(dist.sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    labels = _fix_empty(points, labels, dist, k)
    cent = _means(points, labels, k)
    history.append(_inertia(points, labels, cent))
    return cent, labels, history


def averaging_matrix(labels, k):
    a = np.zeros((k, labels.shape[0]))
    a[labels, np.arange(labels.shape[0])] = 1.0
    return a / a.sum(axis=1, keepdims=True)


# ------------------------------------------------------------------ tokens


def tokenize_cells(cells_list, cfg, params):
    """Batched tokenisation of prepared regions.

    Returns ``(tokens, validity)`` with tokens a Tensor (M, K, D) whose invalid
    slots are exactly zero. Centroid gradients spread evenly over the cells
    assigned to them.
    """
    pos = params["art.pos"]
    d = pos.shape[1]
    K = cfg.K
    M = len(cells_list)
    validity = np.zeros((M, K), dtype=bool)
    if M == 0:
        return Tensor(np.zeros((0, K, d))), validity
    const_rows, weight_rows = [], []
    slot_index = np.full(M * K, -1, dtype=np.int64)
    row = 0
    for m, cells in enumerate(cells_list):
        table = pos.data
        pts = cells.features + cells.pos_weights @ table
        k = min(K, pts.shape[0])
        _, labels, _ = kmeans(pts, k, cfg.kmeans_iters, cells.seed)
        avg = averaging_matrix(labels, k)
        const_rows.append(avg @ cells.features)
        weight_rows.append(avg @ cells.pos_weights)
        validity[m, :k] = True
        slot_index[m * K:m * K + k] = np.arange(row, row + k)
        row += k
    centroids = Tensor(np.concatenate(const_rows)) + matmul(Tensor(np.concatenate(weight_rows)), pos)
    projected = mlp_forward(centroids, params.scope("art.mlp"))
    padded = concat([projected, Tensor(np.zeros((1, d)))], axis=0)
    slot_index[slot_index < 0] = row
    tokens = take(padded, slot_index)
    return reshape(tokens, (M, K, d)), validity


def tokenize_region(fmap, mask, cfg, params, seed=0, source=None):
    cells = prepare_region(fmap, mask, cfg, seed)
    tokens, validity = tokenize_cells([cells], cfg, params)
    return ObjectTokens(reshape(tokens, tokens.shape[1:]), validity[0], source)
