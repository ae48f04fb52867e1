"""Synthetic scenes with exact ground truth, a ray-cast renderer and dataset I/O.

Ground truth lives in the rig frame and does not depend on the cameras;
images are regenerated from seeds whenever they are needed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import Point, Polygon, box
from shapely.ops import unary_union

from .geometry import CameraRig, angle_diff, rig_from_dict
from .heads import (
    FREESPACE_CLASSES,
    OBSTACLE_CLASSES,
    PARKING_PROFILES,
    Cuboid,
    ObstaclePrediction,
    ParkingSpace,
    RadialDistanceMap,
    rdm_from_polygon,
)

SCHEMA_NAME = "polarbev-scenes"
SCHEMA_VERSION = 1
SUPERSAMPLE = 2

# length, width, height in meters
CLASS_DIMS = {
    "Vehicle": (4.5, 1.9, 1.6),
    "Truck": (8.0, 2.5, 3.2),
    "Person": (0.6, 0.6, 1.75),
    "BikeRider": (1.8, 0.7, 1.7),
}
DIM_JITTER = 0.10
CLASS_COLORS = np.array([
    [0.85, 0.20, 0.15],
    [0.15, 0.30, 0.85],
    [0.95, 0.85, 0.10],
    [0.20, 0.80, 0.30],
])
FACE_SHADE = np.array([0.95, 0.70, 0.85, 0.60, 1.00, 0.40])  # +x, -x, +y, -y, top, bottom
SKY = np.array([0.60, 0.75, 0.95])
ROAD = np.array([0.38, 0.38, 0.40])
OFFROAD = np.array([0.30, 0.45, 0.25])
PARKING_PAINT = np.array([[0.80, 0.80, 0.55], [0.85, 0.85, 0.85], [0.70, 0.80, 0.90]])
# length, width per parking profile
PARKING_DIMS = {"angled": (5.0, 2.6), "parallel": (6.0, 2.4), "perpendicular": (5.0, 2.5)}
BAND_WIDTH = 2.0


class SceneError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


def freespace_class(label: int) -> int:
    """Obstacle label to boundary class: cars and trucks are Vehicle, the rest VRU."""
    return FREESPACE_CLASSES.index("Vehicle" if OBSTACLE_CLASSES[label] in ("Vehicle", "Truck") else "VRU")


# ---------------------------------------------------------------------------
# rig presets
# ---------------------------------------------------------------------------

def _pinhole(name, w, h, hfov_deg, yaw, pitch, xyz, max_range=60.0, group="default"):
    fx = (w / 2) / math.tan(math.radians(hfov_deg) / 2)
    return dict(name=name, model="pinhole", fx=fx, fy=fx, cx=w / 2 - 0.5, cy=h / 2 - 0.5,
                width=w, height=h, distortion=[], yaw=yaw, pitch=pitch, roll=0.0,
                xyz=list(xyz), max_range=max_range, group=group)


def _fisheye(name, w, h, yaw, pitch, xyz, max_range=30.0):
    f = (w / 2) / math.radians(95.0)
    return dict(name=name, model="fisheye", fx=f, fy=f, cx=w / 2 - 0.5, cy=h / 2 - 0.5,
                width=w, height=h, distortion=[0.02], yaw=yaw, pitch=pitch, roll=0.0,
                xyz=list(xyz), max_range=max_range, group="surround")


def rig_preset_doc(name: str, width: int = 128, height: int = 64) -> dict:
    """Rig documents in the YAML rig-file schema.

    ``car2`` and ``truck2`` share intrinsics but differ in mount height,
    position and pitch; ``car8`` is a full surround layout.
    """
    if name == "car2":
        cams = [_pinhole("front", width, height, 60.0, 0.0, 10.0, (1.5, 0.0, 1.5)),
                _pinhole("rear", width, height, 60.0, 180.0, 10.0, (-1.0, 0.0, 1.5))]
    elif name == "truck2":
        cams = [_pinhole("front", width, height, 60.0, 0.0, 14.0, (2.5, 0.3, 2.3)),
                _pinhole("rear", width, height, 60.0, 180.0, 12.0, (-5.0, 0.0, 2.0))]
    elif name == "car8":
        cams = [_pinhole("front_narrow", width, height, 30.0, 0.0, 3.0, (1.8, 0.0, 1.4), 200.0, "front"),
                _pinhole("front_wide", width, height, 120.0, 0.0, 8.0, (1.8, 0.0, 1.4), 60.0, "front"),
                _pinhole("rear", width, height, 60.0, 180.0, 8.0, (-1.0, 0.0, 1.2), 100.0, "rear"),
                _pinhole("left", width, height, 100.0, 90.0, 10.0, (0.5, 0.9, 1.0), 60.0, "side"),
                _fisheye("fish_front", width, width, 0.0, 30.0, (2.2, 0.0, 0.6)),
                _fisheye("fish_rear", width, width, 180.0, 30.0, (-1.1, 0.0, 0.8)),
                _fisheye("fish_left", width, width, 90.0, 40.0, (0.9, 1.0, 1.0)),
                _fisheye("fish_right", width, width, -90.0, 40.0, (0.9, -1.0, 1.0))]
    else:
        raise KeyError(f"unknown rig preset {name!r}; choose from {RIG_PRESETS}")
    return {"name": name, "cameras": cams}


RIG_PRESETS = ("car2", "truck2", "car8")


def rig_preset(name: str, width: int = 128, height: int = 64) -> CameraRig:
    return rig_from_dict(rig_preset_doc(name, width, height))


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneConfig:
    """Sampling ranges for :func:`generate_scene`.

    ``sectors`` lists ``(center, half_width)`` azimuth windows in degrees
    that obstacle centers are drawn from.  ``base_height`` is the range of
    the box bottom above the ground (zero for ground-resting objects).
    """

    obstacles: tuple[int, int] = (1, 4)
    classes: tuple[str, ...] = OBSTACLE_CLASSES
    radius: tuple[float, float] = (5.0, 15.0)
    sectors: tuple[tuple[float, float], ...] = ((0.0, 24.0), (180.0, 24.0))
    min_gap_deg: float = 8.0
    yaw_deg: tuple[float, float] = (-180.0, 180.0)
    base_height: tuple[float, float] = (0.0, 0.0)
    road: tuple[float, float, float, float] = (-40.0, 40.0, -8.0, 8.0)
    parking: tuple[int, int] = (0, 2)
    parking_band: tuple[float, float] = (4.0, 7.0)
    parking_x: tuple[float, float] = (6.0, 14.0)
    clearance: float = 0.5
    max_tries: int = 200

    def __post_init__(self):
        self.obstacles = tuple(int(v) for v in self.obstacles)
        self.classes = tuple(self.classes)
        self.radius = tuple(float(v) for v in self.radius)
        self.sectors = tuple(tuple(float(x) for x in s) for s in self.sectors)
        self.yaw_deg = tuple(float(v) for v in self.yaw_deg)
        self.base_height = tuple(float(v) for v in self.base_height)
        self.road = tuple(float(v) for v in self.road)
        self.parking = tuple(int(v) for v in self.parking)
        self.parking_band = tuple(float(v) for v in self.parking_band)
        self.parking_x = tuple(float(v) for v in self.parking_x)
        for c in self.classes:
            if c not in CLASS_DIMS:
                raise ValueError(f"unknown obstacle class {c!r}")
        if self.obstacles[0] < 0 or self.obstacles[0] > self.obstacles[1]:
            raise ValueError("obstacles must be an ordered (min, max) count")
        if not 0 < self.radius[0] < self.radius[1]:
            raise ValueError("radius must be an ordered positive range")
        x0, x1, y0, y1 = self.road
        if not (x0 < 0 < x1 and y0 < 0 < y1):
            raise ValueError("road rectangle must contain the origin")


@dataclass
class Scene:
    scene_id: int
    seed: int
    obstacles: tuple[Cuboid, ...]
    polygon: np.ndarray
    edge_classes: np.ndarray
    parking: tuple[ParkingSpace, ...] = ()
    road: tuple[float, float, float, float] = (-40.0, 40.0, -8.0, 8.0)

    def rdm(self, n_bins: int, r_max: float = math.inf) -> RadialDistanceMap:
        return rdm_from_polygon(self.polygon, self.edge_classes, n_bins, r_max)


def _boundary_segments(road, obstacles):
    """Segments bounding ``road - footprints`` with their boundary class."""
    x0, x1, y0, y1 = road
    road_poly = box(x0, y0, x1, y1)
    feet = [Polygon(o.footprint()) for o in obstacles]
    region = road_poly.difference(unary_union(feet)) if feet else road_poly
    polys = [region] if region.geom_type == "Polygon" else list(region.geoms)
    segs, classes = [], []
    other = FREESPACE_CLASSES.index("Other")
    for poly in polys:
        for ring in [poly.exterior, *poly.interiors]:
            pts = np.asarray(ring.coords)
            for p, q in zip(pts[:-1], pts[1:]):
                if np.allclose(p, q):
                    continue
                mid = (p + q) / 2
                cls = other
                if road_poly.exterior.distance(_point(mid)) > 1e-9:
                    dists = [f.exterior.distance(_point(mid)) for f in feet]
                    cls = freespace_class(obstacles[int(np.argmin(dists))].label)
                segs.append((p, q))
                classes.append(cls)
    return np.array(segs, dtype=float), np.array(classes, dtype=np.int64)


def _point(p):
    return Point(float(p[0]), float(p[1]))


def cast_segments(segs: np.ndarray, angles: np.ndarray):
    """Nearest hit of origin rays against a segment soup: ``(distance, segment index)``."""
    p, q = segs[:, 0], segs[:, 1]
    e = q - p
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    den = dx * e[None, :, 1] - dy * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p[None, :, 0] * e[None, :, 1] - p[None, :, 1] * e[None, :, 0]) / den
        s = (p[None, :, 0] * dy - p[None, :, 1] * dx) / den
    ok = (np.abs(den) > 1e-15) & (t > 0) & (s >= -1e-12) & (s <= 1 + 1e-12)
    t = np.where(ok, t, np.inf)
    k = np.argmin(t, axis=1)
    return t[np.arange(len(angles)), k], k


def _hit_on(seg, angle):
    p, q = seg
    e = q - p
    dx, dy = math.cos(angle), math.sin(angle)
    den = dx * e[1] - dy * e[0]
    t = (p[0] * e[1] - p[1] * e[0]) / den
    return np.array([t * dx, t * dy])


def visibility_polygon(segs: np.ndarray, classes: np.ndarray):
    """Star polygon of everything visible from the origin.

    Between consecutive vertex directions the nearest segment cannot
    change, so each angular interval contributes one piece of one segment.
    Jumps between intervals become radial shadow edges labelled with the
    class of the nearer side.
    """
    ang = np.unique(np.mod(np.arctan2(segs[..., 1], segs[..., 0]).ravel(), 2 * math.pi))
    ang = np.append(ang, ang[0] + 2 * math.pi)
    mids = (ang[:-1] + ang[1:]) / 2
    dist, seg_idx = cast_segments(segs, mids)
    if not np.all(np.isfinite(dist)):
        raise SceneError("freespace region does not enclose the origin")
    verts = []
    for k, s in enumerate(seg_idx):
        verts += [_hit_on(segs[s], ang[k]), _hit_on(segs[s], ang[k + 1])]
    n = len(seg_idx)
    out_v, out_c = [], []
    for k in range(n):
        a, b = verts[2 * k], verts[2 * k + 1]
        nxt = verts[(2 * k + 2) % (2 * n)]
        out_v.append(a)
        out_c.append(int(classes[seg_idx[k]]))
        out_v.append(b)
        # shadow edge from b to the start of the next interval
        near = seg_idx[k] if np.hypot(*b) <= np.hypot(*nxt) else seg_idx[(k + 1) % n]
        out_c.append(int(classes[near]))
    v = np.array(out_v)
    c = np.array(out_c)
    keep = np.linalg.norm(v - np.roll(v, -1, axis=0), axis=1) > 1e-9
    return v[keep], c[keep]


def _too_close(a, others, min_gap):
    return any(abs(float(angle_diff(a, b))) < min_gap for b in others)


def generate_scene(cfg: SceneConfig, seed: int, scene_id: int = 0) -> Scene:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.obstacles[0], cfg.obstacles[1] + 1))
    obstacles, feet = [], []
    tries = 0
    while len(obstacles) < n:
        tries += 1
        if tries > cfg.max_tries:
            raise SceneError(f"could not place {n} obstacles in {cfg.max_tries} tries")
        label_name = cfg.classes[int(rng.integers(len(cfg.classes)))]
        label = OBSTACLE_CLASSES.index(label_name)
        base = np.array(CLASS_DIMS[label_name])
        dims = base * (1 + rng.uniform(-DIM_JITTER, DIM_JITTER, 3))
        center, half = cfg.sectors[int(rng.integers(len(cfg.sectors)))]
        a = math.radians(center + rng.uniform(-half, half))
        r = rng.uniform(*cfg.radius)
        yaw = math.radians(rng.uniform(*cfg.yaw_deg))
        e = rng.uniform(*cfg.base_height) + dims[2] / 2
        cub = Cuboid.from_euler(r, a, e, dims, yaw, label=label)
        foot = Polygon(cub.footprint())
        if foot.buffer(cfg.clearance).contains(_point((0.0, 0.0))):
            continue
        if _too_close(cub.a, [o.a for o in obstacles], math.radians(cfg.min_gap_deg)):
            continue
        if any(foot.distance(f) < cfg.clearance for f in feet):
            continue
        obstacles.append(cub)
        feet.append(foot)
    parking = []
    n_park = int(rng.integers(cfg.parking[0], cfg.parking[1] + 1))
    tries = 0
    while len(parking) < n_park:
        tries += 1
        if tries > cfg.max_tries:
            raise SceneError(f"could not place {n_park} parking spaces in {cfg.max_tries} tries")
        prof = int(rng.integers(len(PARKING_PROFILES)))
        length, width = PARKING_DIMS[PARKING_PROFILES[prof]]
        theta = {0: math.radians(rng.choice([45.0, 135.0])), 1: 0.0, 2: math.pi / 2}[prof]
        side = 1.0 if rng.random() < 0.5 else -1.0
        sx = 1.0 if rng.random() < 0.5 else -1.0
        cx = sx * rng.uniform(*cfg.parking_x)
        cy = side * rng.uniform(*cfg.parking_band)
        ps = ParkingSpace(cx, cy, length, width, theta, prof)
        poly = Polygon(ps.corners())
        if any(poly.distance(f) < cfg.clearance for f in feet):
            continue
        if any(poly.intersects(Polygon(p.corners())) for p in parking):
            continue
        parking.append(ps)
    segs, classes = _boundary_segments(cfg.road, obstacles)
    verts, edge_cls = visibility_polygon(segs, classes)
    return Scene(scene_id, int(seed), tuple(obstacles), verts, edge_cls, tuple(parking), cfg.road)


def scene_seed(dataset_seed: int, index: int) -> int:
    """Independent per-scene stream derived from (dataset seed, index)."""
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1, np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _ray_box(origin, dirs, cub: Cuboid):
    """Entry distance and face id (0..5) of rays against an oriented box; ``inf`` on a miss."""
    center = np.array([cub.x, cub.y, cub.e])
    rot = cub.rotation
    o = rot.T @ (origin - center)
    d = dirs @ rot
    d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    half = np.asarray(cub.dims) / 2
    t1 = (-half - o) / d
    t2 = (half - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    axis = lo.argmax(axis=-1)
    # entering through the face whose outward normal opposes the ray
    neg = np.take_along_axis(d, axis[..., None], -1)[..., 0] > 0
    face = np.where(axis == 2, np.where(neg, 5, 4), 2 * axis + neg)
    return np.where(hit, t_near, np.inf), face


def _in_rect(x, y, ps: ParkingSpace):
    c, s = math.cos(ps.theta), math.sin(ps.theta)
    lx = (x - ps.cx) * c + (y - ps.cy) * s
    ly = -(x - ps.cx) * s + (y - ps.cy) * c
    return (np.abs(lx) <= ps.l / 2) & (np.abs(ly) <= ps.w / 2)


def render_camera(scene: Scene, camera, index: int = 0, supersample: int = SUPERSAMPLE,
                  noise: float = 0.02) -> np.ndarray:
    """Render one view as ``float32 (3, H, W)`` in [0, 1]."""
    intr = camera.intrinsics
    ss = supersample
    off = (np.arange(ss) + 0.5) / ss - 0.5
    us = (np.arange(intr.width)[:, None] + off[None, :]).ravel()
    vs = (np.arange(intr.height)[:, None] + off[None, :]).ravel()
    uv = np.stack(np.meshgrid(us, vs, indexing="xy"), axis=-1)
    rays = intr.unproject(uv, check=False)
    valid = np.all(np.isfinite(rays), axis=-1)
    rays = np.where(valid[..., None], rays, [0.0, 0.0, 1.0])
    dirs = rays @ camera.pose.rotation.T
    origin = camera.pose.translation
    img = np.broadcast_to(SKY, dirs.shape).copy()
    img *= (1.0 - 0.2 * np.clip(dirs[..., 2], 0, 1))[..., None]
    depth = np.full(dirs.shape[:2], np.inf)
    dz = dirs[..., 2]
    ground = dz < -1e-9
    tg = np.where(ground, -origin[2] / np.where(ground, dz, -1.0), np.inf)
    t0 = np.where(ground, tg, 0.0)
    gx = origin[0] + t0 * dirs[..., 0]
    gy = origin[1] + t0 * dirs[..., 1]
    x0, x1, y0, y1 = scene.road
    on_road = (gx >= x0) & (gx <= x1) & (gy >= y0) & (gy <= y1)
    col = np.where(on_road[..., None], ROAD, OFFROAD)
    band = np.floor(np.hypot(gx, gy) / BAND_WIDTH) % 2
    col = col * (0.9 + 0.2 * band)[..., None]
    for ps in scene.parking:
        inside = _in_rect(gx, gy, ps)
        col = np.where(inside[..., None], PARKING_PAINT[ps.profile], col)
    img = np.where(ground[..., None], col, img)
    depth = np.where(ground, tg, depth)
    for cub in scene.obstacles:
        t, face = _ray_box(origin, dirs, cub)
        closer = t < depth
        shade = CLASS_COLORS[cub.label] * FACE_SHADE[face][..., None]
        img = np.where(closer[..., None], shade, img)
        depth = np.where(closer, t, depth)
    img = np.where(valid[..., None], img, 0.0)
    h, w = intr.height, intr.width
    img = img.reshape(h, ss, w, ss, 3).mean(axis=(1, 3))
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, index, 7]))
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def render_views(scene: Scene, rig: CameraRig, **kw) -> list[np.ndarray]:
    return [render_camera(scene, cam, i, **kw) for i, cam in enumerate(rig.cameras)]


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def _cuboid_record(c: Cuboid) -> dict:
    return {"label": c.label, "r": c.r, "a": c.a, "e": c.e, "dims": list(c.dims),
            "rotation": c.rotation.ravel().tolist()}


def _cuboid_from(rec: dict) -> Cuboid:
    return Cuboid(float(rec["r"]), float(rec["a"]), float(rec["e"]), tuple(rec["dims"]),
                  np.array(rec["rotation"], dtype=float).reshape(3, 3), int(rec["label"]))


def scene_record(scene: Scene) -> dict:
    return {
        "id": scene.scene_id,
        "seed": scene.seed,
        "road": list(scene.road),
        "obstacles": [_cuboid_record(c) for c in scene.obstacles],
        "polygon": scene.polygon.tolist(),
        "edge_classes": scene.edge_classes.tolist(),
        "parking": [{"cx": p.cx, "cy": p.cy, "l": p.l, "w": p.w, "theta": p.theta, "profile": p.profile}
                    for p in scene.parking],
    }


def scene_from_record(rec: dict) -> Scene:
    return Scene(
        int(rec["id"]), int(rec["seed"]),
        tuple(_cuboid_from(o) for o in rec["obstacles"]),
        np.array(rec["polygon"], dtype=float).reshape(-1, 2),
        np.array(rec["edge_classes"], dtype=np.int64),
        tuple(ParkingSpace(p["cx"], p["cy"], p["l"], p["w"], p["theta"], int(p["profile"]))
              for p in rec["parking"]),
        tuple(float(v) for v in rec["road"]),
    )


@dataclass
class Dataset:
    rig: str
    seed: int
    scenes: list[Scene]
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scenes)

    def split(self, n_val: int):
        """Leading scenes train, trailing ``n_val`` scenes validate."""
        return self.scenes[: len(self.scenes) - n_val], self.scenes[len(self.scenes) - n_val:]


def generate_dataset(cfg: SceneConfig, n: int, seed: int, rig: str = "car2") -> Dataset:
    scenes = [generate_scene(cfg, scene_seed(seed, i), i) for i in range(n)]
    return Dataset(rig, seed, scenes, asdict(cfg))


def save_dataset(ds: Dataset, path) -> None:
    """One JSON header line, then one scene per line."""
    header = {"schema": SCHEMA_NAME, "version": SCHEMA_VERSION, "rig": ds.rig, "seed": ds.seed,
              "count": len(ds.scenes), "scene_config": ds.config}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(scene_record(s), sort_keys=True) for s in ds.scenes]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text:
        raise DatasetError(f"{path}: empty dataset file")
    try:
        header = json.loads(text[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:1: bad header ({exc.msg})") from None
    if header.get("schema") != SCHEMA_NAME:
        raise DatasetError(f"{path}:1: not a {SCHEMA_NAME} file")
    if header.get("version") != SCHEMA_VERSION:
        raise DatasetError(
            f"{path}: schema version {header.get('version')} does not match supported version {SCHEMA_VERSION}")
    scenes = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        try:
            scenes.append(scene_from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: corrupt scene record ({exc})") from None
    if len(scenes) != header.get("count", len(scenes)):
        raise DatasetError(f"{path}: header promises {header['count']} scenes, found {len(scenes)}")
    return Dataset(header["rig"], int(header["seed"]), scenes, header.get("scene_config", {}))


def oracle_predictions(scene: Scene):
    """Detections that echo the ground truth with confidence 1."""
    out = []
    for i, c in enumerate(scene.obstacles):
        probs = np.zeros(len(OBSTACLE_CLASSES))
        probs[c.label] = 1.0
        out.append(ObstaclePrediction(i, 1.0, probs, c, np.ones(5)))
    return out
