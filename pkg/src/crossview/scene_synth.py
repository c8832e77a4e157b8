"""Procedural multi-view cuboid scenes with masks, occlusion, relations and
synthetic per-view feature maps."""
import itertools
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, GenerationError

NEAR = 0.05
CONTACT_TOL = 1e-6
STREAM_SCENE, STREAM_RENDER, STREAM_ENCODER = 11, 23, 37


@dataclass
class SceneConfig:
    min_objects: int = 4
    max_objects: int = 7
    n_views: int = 3
    world_half: float = 1.5
    half_extent_min: float = 0.25
    half_extent_max: float = 0.6
    image_h: int = 168
    image_w: int = 168
    patch: int = 14
    focal: float = 150.0
    cam_radius_min: float = 3.5
    cam_radius_max: float = 5.0
    cam_height_min: float = 1.5
    cam_height_max: float = 3.0
    contact_prob: float = 0.35
    overlap_budget: float = 0.0
    max_retries: int = 200
    min_visible_pixels: int = 8
    d_app: int = 16
    orthogonal_appearance: bool = False

    def validate(self):
        if self.n_views < 2:
            raise ConfigError("need at least 2 views")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(f"image {self.image_h}x{self.image_w} is not a multiple of patch {self.patch}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("bad object-count range")
        if self.orthogonal_appearance and self.max_objects > self.d_app:
            raise ConfigError("orthogonal appearance needs max_objects <= d_app")


@dataclass
class EncoderConfig:
    d_v: int = 64
    noise: float = 0.0
    seed: int = 1234
    nuisance_rank: int = 8
    cell_jitter: float = 0.15
    background_scale: float = 1.0


@dataclass
class ObjectInstance:
    track_id: int
    center: np.ndarray
    half_extents: np.ndarray
    appearance: np.ndarray
    category: str

    def corners(self):
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
        return self.center + signs * self.half_extents


@dataclass
class CameraView:
    view_id: int
    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    height: int
    width: int

    def to_camera(self, pts):
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, pts):
        """Pixel (u, v) and camera depth for world points."""
        c = self.to_camera(pts)
        z = c[..., 2]
        u = self.focal * c[..., 0] / z + self.width / 2.0
        v = self.focal * c[..., 1] / z + self.height / 2.0
        return u, v, z


@dataclass
class ProjectedInstance:
    track_id: int
    mask: np.ndarray
    bbox: tuple
    mean_depth: float
    visible_fraction: float
    occluder_ids: list
    raw_pixels: int = 0
    stolen: dict = field(default_factory=dict)
    center2d: tuple = (0.0, 0.0)

    @property
    def area(self):
        return int(self.mask.sum())


@dataclass
class FeatureMap:
    view_id: int
    grid: np.ndarray
    patch: int


@dataclass
class Scene:
    scene_id: str
    seed: int
    config: SceneConfig
    objects: list
    views: list
    projections: dict
    correspondences: list
    overlaps: dict
    owner: dict
    features: dict = field(default_factory=dict)

    def object(self, track_id):
        for o in self.objects:
            if o.track_id == track_id:
                return o
        raise KeyError(track_id)

    def index_of(self, view_id, track_id):
        for i, p in enumerate(self.projections[view_id]):
            if p.track_id == track_id:
                return i
        return None

    def view_pairs(self):
        ids = [v.view_id for v in self.views]
        return list(itertools.combinations(ids, 2))


# ------------------------------------------------------------------ geometry


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation and translation (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ eye


def mirrored(view, view_id=None):
    """The same camera with its horizontal image axis reflected."""
    flip = np.diag([-1.0, 1.0, 1.0])
    return CameraView(view.view_id if view_id is None else view_id, flip @ view.rotation,
                      flip @ view.translation, view.focal, view.height, view.width)


def _bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return (0, 0, 0, 0)
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def project_object(view, obj):
    """Pre-occlusion projection of a cuboid; empty if any corner is behind the near plane."""
    u, v, z = view.project(obj.corners())
    cu, cv, cz = view.project(obj.center[None, :])
    mask = np.zeros((view.height, view.width), dtype=np.uint8)
    if z.min() > NEAR:
        hull = kernels.convex_hull(np.stack([u, v], axis=1))
        mask = kernels.rasterize_convex(hull, view.height, view.width)
    n = int(mask.sum())
    return ProjectedInstance(
        track_id=obj.track_id, mask=mask, bbox=_bbox(mask), mean_depth=float(cz[0]),
        visible_fraction=1.0 if n else 0.0, occluder_ids=[], raw_pixels=n,
        center2d=(float(cu[0]), float(cv[0])))


def resolve_occlusion(raw, depths=None):
    """Nearest-depth-wins pixel ownership; exact ties go to the lower track id.

    Returns ``(instances, owner)`` where ``owner`` holds the index into ``raw``
    of each pixel's owner (-1 for background).
    """
    if not raw:
        return [], None
    order = np.argsort([p.track_id for p in raw], kind="stable")
    raw_sorted = [raw[i] for i in order]
    if depths is None:
        depths = [p.mean_depth for p in raw_sorted]
    else:
        depths = [depths[i] for i in order]
    masks = np.stack([p.mask for p in raw_sorted])
    owner_sorted = kernels.zbuffer(masks, np.asarray(depths, dtype=np.float64))
    out = []
    flat_owner = owner_sorted.ravel()
    for k, p in enumerate(raw_sorted):
        raw_mask = p.mask.astype(bool)
        mine = owner_sorted == k
        vis = int(mine.sum())
        takers = flat_owner[raw_mask.ravel()]
        takers = takers[(takers != k) & (takers >= 0)]
        ids, counts = np.unique(takers, return_counts=True)
        stolen = {int(raw_sorted[i].track_id): int(c) for i, c in zip(ids, counts)}
        out.append(ProjectedInstance(
            track_id=p.track_id, mask=mine.astype(np.uint8), bbox=_bbox(mine), mean_depth=p.mean_depth,
            visible_fraction=vis / p.raw_pixels if p.raw_pixels else 0.0,
            occluder_ids=sorted(stolen), raw_pixels=p.raw_pixels, stolen=stolen, center2d=p.center2d))
    owner = np.full(owner_sorted.shape, -1, dtype=np.int64)
    hit = owner_sorted >= 0
    owner[hit] = order[owner_sorted[hit]]
    back = np.argsort(order)
    return [out[i] for i in back], owner


def boxes_touch(a, b, tol=CONTACT_TOL):
    """Cuboids intersect or touch within ``tol``."""
    return bool(np.all(np.abs(a.center - b.center) <= a.half_extents + b.half_extents + tol))


def _interpenetration(a, b):
    ov = a.half_extents + b.half_extents - np.abs(a.center - b.center)
    if np.all(ov > 1e-9):
        return float(np.prod(ov * 2)) / float(min(np.prod(a.half_extents * 2), np.prod(b.half_extents * 2)))
    return 0.0


def _category(h):
    hx, hy, hz = h
    if hz > 1.5 * max(hx, hy):
        return "pillar"
    if hz < 0.6 * min(hx, hy):
        return "slab"
    if max(h) < 1.25 * min(h):
        return "cube"
    return "box"


def _appearances(rng, n, d, orthogonal):
    if n == 0:
        return np.zeros((0, d))
    if orthogonal:
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        return q[:, :n].T.copy()
    a = rng.normal(size=(n, d))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _place_objects(cfg, rng):
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    apps = _appearances(rng, n, cfg.d_app, cfg.orthogonal_appearance)
    objs = []
    for k in range(n):
        h = rng.uniform(cfg.half_extent_min, cfg.half_extent_max, size=3)
        for _ in range(cfg.max_retries):
            if objs and rng.random() < cfg.contact_prob:
                nb = objs[int(rng.integers(len(objs)))]
                axis = int(rng.integers(2))
                side = 1.0 if rng.random() < 0.5 else -1.0
                c = nb.center.copy()
                c[axis] = nb.center[axis] + side * (nb.half_extents[axis] + h[axis])
                other = 1 - axis
                slack = nb.half_extents[other] + h[other]
                c[other] = nb.center[other] + rng.uniform(-0.8, 0.8) * slack
                c[2] = h[2]
            else:
                lim = cfg.world_half
                c = np.array([rng.uniform(-lim, lim), rng.uniform(-lim, lim), h[2]])
            cand = ObjectInstance(k + 1, c, h, apps[k], _category(h))
            if all(_interpenetration(cand, o) <= cfg.overlap_budget for o in objs):
                objs.append(cand)
                break
        else:
            raise GenerationError(f"could not place object {k + 1} after {cfg.max_retries} tries")
    return objs


def _place_cameras(cfg, rng):
    views = []
    for vid in range(cfg.n_views):
        az = rng.uniform(0.0, 2 * np.pi)
        r = rng.uniform(cfg.cam_radius_min, cfg.cam_radius_max)
        eye = (r * np.cos(az), r * np.sin(az), rng.uniform(cfg.cam_height_min, cfg.cam_height_max))
        target = (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0.3)
        rot, t = look_at(eye, target)
        views.append(CameraView(vid, rot, t, cfg.focal, cfg.image_h, cfg.image_w))
    return views


def render_views(scene_id, seed, cfg, objects, views):
    """Project, resolve occlusion, drop tiny instances and build C."""
    projections, overlaps, owner_maps = {}, {}, {}
    for view in views:
        raw = [project_object(view, o) for o in objects]
        final, owner = resolve_occlusion(raw)
        pairs = []
        for i, j in itertools.combinations(range(len(raw)), 2):
            if raw[i].raw_pixels and raw[j].raw_pixels and np.any(raw[i].mask & raw[j].mask):
                pairs.append((raw[i].track_id, raw[j].track_id))
        overlaps[view.view_id] = pairs
        kept = sorted((p for p in final if p.mask.sum() >= cfg.min_visible_pixels), key=lambda p: p.track_id)
        projections[view.view_id] = kept
        lab = np.zeros((view.height, view.width), dtype=np.int64)
        if owner is not None:
            tid_of = np.array([p.track_id for p in final])
            occupied = owner >= 0
            lab[occupied] = tid_of[owner[occupied]]
        owner_maps[view.view_id] = lab
    corr = correspondence_set(projections)
    return Scene(scene_id, seed, cfg, objects, views, projections, corr, overlaps, owner_maps)


def correspondence_set(projections):
    corr = []
    for a, b in itertools.permutations(sorted(projections), 2):
        for i, pa in enumerate(projections[a]):
            for j, pb in enumerate(projections[b]):
                if pa.track_id == pb.track_id:
                    corr.append((i, a, j, b))
    return corr


def generate_scene(config, seed, scene_id=None):
    config.validate()
    rng = np.random.default_rng([int(seed), STREAM_SCENE])
    objects = _place_objects(config, rng)
    views = _place_cameras(config, rng)
    return render_views(scene_id or f"scene_{int(seed):06d}", int(seed), config, objects, views)


# ------------------------------------------------------------------ features


def encoder_bases(enc, d_app):
    """Frozen lifting map (orthonormal rows) and nuisance basis."""
    rng = np.random.default_rng([enc.seed, STREAM_ENCODER])
    q, _ = np.linalg.qr(rng.normal(size=(enc.d_v, enc.d_v)))
    lift = q[:, :d_app].T.copy()
    nuis = q[:, d_app:d_app + enc.nuisance_rank].T.copy()
    return lift, nuis


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def render_feature_map(view, objects, owner, enc, seed, patch):
    """Cells take the lifted appearance of the object owning their center pixel.

    Object cells get a per-(view, object) nuisance offset plus small per-cell
    jitter, together bounded in norm by ``enc.noise``; background cells get a
    seeded texture.
    """
    hv, wv = view.height // patch, view.width // patch
    d_app = objects[0].appearance.shape[0] if objects else 16
    lift, nuis = encoder_bases(enc, d_app)
    rng = np.random.default_rng([int(seed), STREAM_RENDER, int(view.view_id)])
    bg = rng.normal(size=(hv, wv, enc.d_v)) * (enc.background_scale / np.sqrt(enc.d_v))
    n_obj = len(objects)
    obj_dir = _unit(rng, max(n_obj, 1), enc.nuisance_rank) @ nuis
    obj_mag = rng.uniform(0.6, 1.0, size=max(n_obj, 1))
    cell_dir = _unit(rng, hv * wv, enc.d_v).reshape(hv, wv, enc.d_v)
    cell_mag = rng.uniform(0.0, 1.0, size=(hv, wv))
    centers = owner[patch // 2::patch, patch // 2::patch][:hv, :wv]
    index = {o.track_id: k for k, o in enumerate(objects)}
    grid = bg.copy()
    share = 1.0 - enc.cell_jitter
    for r in range(hv):
        for c in range(wv):
            tid = int(centers[r, c])
            if tid <= 0:
                continue
            k = index[tid]
            f = objects[k].appearance @ lift
            if enc.noise > 0:
                f = f + enc.noise * (share * obj_mag[k] * obj_dir[k]
                                     + enc.cell_jitter * cell_mag[r, c] * cell_dir[r, c])
            grid[r, c] = f
    return FeatureMap(view.view_id, grid, patch)


def render_scene_features(scene, enc):
    for view in scene.views:
        scene.features[view.view_id] = render_feature_map(
            view, scene.objects, scene.owner[view.view_id], enc, scene.seed, scene.config.patch)
    return scene


# ----------------------------------------------------------------- relations


@dataclass
class Relations:
    nearest: dict
    scale: dict
    completeness: dict
    left_of: dict
    flip: dict
    displacement: dict
    nearer: dict
    depth_consistent: dict
    scale_growth: dict
    contact: dict
    overlap: dict


def _scale(p):
    return float(np.sqrt(p.raw_pixels))


def geometric_relations(scene):
    """Pairwise geometric supervision from scene ground truth.

    Keys are track ids; per-view dicts are keyed by view id and per-pair dicts by
    ``(a, b)`` view tuples with ``a < b``. Undefined relations are left out.
    """
    nearest, completeness, left_of, nearer = {}, {}, {}, {}
    by_view = {v: {p.track_id: p for p in ps} for v, ps in scene.projections.items()}
    for v, ps in by_view.items():
        completeness[v] = {t: p.visible_fraction for t, p in ps.items()}
        if len(ps) >= 2:
            nn = {}
            for t, p in ps.items():
                best = min((np.hypot(p.center2d[0] - q.center2d[0], p.center2d[1] - q.center2d[1]), s)
                           for s, q in ps.items() if s != t)
                nn[t] = best[1]
            nearest[v] = nn
        lo, nr = {}, {}
        for s, t in itertools.permutations(sorted(ps), 2):
            if ps[s].center2d[0] != ps[t].center2d[0]:
                lo[(s, t)] = ps[s].center2d[0] < ps[t].center2d[0]
            if ps[s].mean_depth != ps[t].mean_depth:
                nr[(s, t)] = ps[s].mean_depth < ps[t].mean_depth
        left_of[v], nearer[v] = lo, nr

    scale, flip, disp, consistent, growth = {}, {}, {}, {}, {}
    for a, b in scene.view_pairs():
        shared = sorted(set(by_view[a]) & set(by_view[b]))
        scale[(a, b)] = {t: _scale(by_view[b][t]) / _scale(by_view[a][t]) for t in shared}
        disp[(a, b)] = {t: float(np.hypot(by_view[b][t].center2d[0] - by_view[a][t].center2d[0],
                                          by_view[b][t].center2d[1] - by_view[a][t].center2d[1]))
                        for t in shared}
        fl, dc, gr = {}, {}, {}
        for s, t in itertools.permutations(shared, 2):
            if (s, t) in left_of[a] and (s, t) in left_of[b]:
                fl[(s, t)] = left_of[a][(s, t)] != left_of[b][(s, t)]
            if (s, t) in nearer[a] and (s, t) in nearer[b]:
                dc[(s, t)] = nearer[a][(s, t)] == nearer[b][(s, t)]
            rs, rt = scale[(a, b)][s], scale[(a, b)][t]
            if rs != rt:
                gr[(s, t)] = rs > rt
        flip[(a, b)], consistent[(a, b)], growth[(a, b)] = fl, dc, gr

    contact, overlap = {}, {}
    for o1, o2 in itertools.combinations(scene.objects, 2):
        contact[(o1.track_id, o2.track_id)] = boxes_touch(o1, o2)
    for v, pairs in scene.overlaps.items():
        overlap[v] = set(pairs)
    return Relations(nearest, scale, completeness, left_of, flip, disp, nearer, consistent, growth,
                     contact, overlap)


def in_contact(rel, s, t):
    return rel.contact[(min(s, t), max(s, t))]


# -------------------------------------------------------------------- bundle


def _cfg_dict(cfg):
    return asdict(cfg)


def scene_record(scene):
    return {
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "config": _cfg_dict(scene.config),
        "objects": [{"track_id": o.track_id, "center": o.center.tolist(), "half_extents": o.half_extents.tolist(),
                     "appearance": o.appearance.tolist(), "category": o.category} for o in scene.objects],
        "views": [{"view_id": v.view_id, "rotation": v.rotation.tolist(), "translation": v.translation.tolist(),
                   "focal": v.focal, "height": v.height, "width": v.width,
                   "mask_file": f"{scene.scene_id}/view{v.view_id}.mask",
                   "feature_file": f"{scene.scene_id}/view{v.view_id}.f64",
                   "feature_shape": list(scene.features[v.view_id].grid.shape) if scene.features else None,
                   "projections": [{"track_id": p.track_id, "bbox": list(p.bbox), "mean_depth": p.mean_depth,
                                    "visible_fraction": p.visible_fraction, "occluder_ids": p.occluder_ids,
                                    "raw_pixels": p.raw_pixels,
                                    "stolen": {str(k): c for k, c in sorted(p.stolen.items())},
                                    "center2d": list(p.center2d)} for p in scene.projections[v.view_id]],
                   "overlaps": [list(x) for x in scene.overlaps[v.view_id]]}
                  for v in scene.views],
        "correspondences": [list(c) for c in scene.correspondences],
    }


def save_bundle(scenes, root):
    """Write ``scenes.jsonl`` plus per-view label rasters (uint8) and float64 feature blobs."""
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "scenes.jsonl"), "w", encoding="utf-8") as fh:
        for s in scenes:
            os.makedirs(os.path.join(root, s.scene_id), exist_ok=True)
            for v in s.views:
                lab = s.owner[v.view_id]
                if lab.max(initial=0) > 254:
                    raise GenerationError("track ids above 254 do not fit the mask raster")
                with open(os.path.join(root, s.scene_id, f"view{v.view_id}.mask"), "wb") as mf:
                    mf.write(lab.astype(np.uint8).tobytes())
                with open(os.path.join(root, s.scene_id, f"view{v.view_id}.f64"), "wb") as ff:
                    ff.write(np.ascontiguousarray(s.features[v.view_id].grid, dtype="<f8").tobytes())
            fh.write(json.dumps(scene_record(s), sort_keys=True) + "\n")


def _scene_from_record(rec, root):
    cfg = SceneConfig(**rec["config"])
    objects = [ObjectInstance(o["track_id"], np.array(o["center"]), np.array(o["half_extents"]),
                              np.array(o["appearance"]), o["category"]) for o in rec["objects"]]
    views, projections, overlaps, owner, features = [], {}, {}, {}, {}
    for vr in rec["views"]:
        v = CameraView(vr["view_id"], np.array(vr["rotation"]), np.array(vr["translation"]), vr["focal"],
                       vr["height"], vr["width"])
        views.append(v)
        with open(os.path.join(root, vr["mask_file"]), "rb") as mf:
            lab = np.frombuffer(mf.read(), dtype=np.uint8).reshape(v.height, v.width).astype(np.int64)
        owner[v.view_id] = lab
        with open(os.path.join(root, vr["feature_file"]), "rb") as ff:
            grid = np.frombuffer(ff.read(), dtype="<f8").reshape(vr["feature_shape"]).astype(np.float64)
        features[v.view_id] = FeatureMap(v.view_id, grid, cfg.patch)
        projections[v.view_id] = [
            ProjectedInstance(p["track_id"], (lab == p["track_id"]).astype(np.uint8), tuple(p["bbox"]),
                              p["mean_depth"], p["visible_fraction"], p["occluder_ids"], p["raw_pixels"],
                              {int(k): c for k, c in p["stolen"].items()}, tuple(p["center2d"]))
            for p in vr["projections"]]
        overlaps[v.view_id] = [tuple(x) for x in vr["overlaps"]]
    corr = [tuple(c) for c in rec["correspondences"]]
    return Scene(rec["scene_id"], rec["seed"], cfg, objects, views, projections, corr, overlaps, owner, features)


def load_bundle(root, scene_ids=None):
    """Scenes keyed by id; ``scene_ids`` restricts which records are materialised."""
    wanted = None if scene_ids is None else set(scene_ids)
    out = {}
    with open(os.path.join(root, "scenes.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if wanted is None or rec["scene_id"] in wanted:
                out[rec["scene_id"]] = _scene_from_record(rec, root)
    return out
