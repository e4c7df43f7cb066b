"""Procedural straight-road traffic scenes, rendering and PV/BEV annotation.

Roads are straight multi-lane rings of length ``road_length_m`` running along
the world ``y`` axis. All vehicles in a lane share that lane's speed, so
advancing time is a rigid per-lane translation and never creates overlaps.
"""

from __future__ import annotations

import colorsys
import functools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional

import numpy as np

from .geometry import (
    BevBox,
    BevGrid,
    Box3,
    CameraModel,
    Pose2,
    PvBox,
    box_corners,
    footprints_bev,
    project_boxes_pv,
)

log = logging.getLogger(__name__)

FAR_PLANE_M = 1000.0
ANNOTATION_RADIUS_M = 50.0
FPS = 30.0

LEVELS = {"Low": 0.2, "Medium": 0.5, "High": 0.8}


@dataclass(frozen=True)
class WeatherPreset:
    name: str
    cloudiness: float
    precipitation: float
    wind: float
    sun_altitude_deg: float


def _preset(name, cloud, rain, wind, sun):
    return WeatherPreset(name, LEVELS[cloud], LEVELS[rain], LEVELS[wind], sun)


WEATHER_PRESETS = (
    _preset("Morning", "Low", "High", "Medium", 30.0),
    _preset("Midday", "Medium", "Low", "Medium", 80.0),
    _preset("Afternoon", "High", "Low", "Medium", 320.0),
    _preset("Night", "Medium", "Medium", "Medium", 300.0),
    _preset("Default", "Low", "Low", "Low", 0.0),
)


@dataclass(frozen=True)
class VehicleType:
    type_id: int
    name: str
    length_m: float
    width_m: float
    height_m: float
    color: tuple


def _build_vehicle_types(n=26, seed=26):
    rng = np.random.default_rng(seed)
    types = []
    for k in range(n):
        length = float(rng.uniform(3.5, 5.5))
        width = float(rng.uniform(1.6, 2.2))
        height = float(rng.uniform(1.4, 2.0))
        if height > 1.8:
            body = "van" if length > 4.6 else "suv"
        elif length < 4.2:
            body = "compact"
        else:
            body = "sedan"
        hue = (k * 0.61803398875) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.75, 0.9)
        color = (int(r * 255), int(g * 255), int(b * 255))
        types.append(VehicleType(k, f"vehicle.{body}.m{k:02d}", length, width, height, color))
    return tuple(types)


VEHICLE_TYPES = _build_vehicle_types()


@dataclass(frozen=True)
class SceneConfig:
    num_background_vehicles: int = 100
    num_lanes: int = 4
    lane_width_m: float = 3.5
    road_length_m: float = 1000.0
    vehicle_type_count: int = 26
    camera: CameraModel = field(default_factory=CameraModel)
    grid: BevGrid = field(default_factory=BevGrid)
    seed: int = 0
    speed_range_mps: tuple = (8.0, 16.0)
    lateral_jitter_m: float = 0.25
    yaw_jitter_deg: float = 3.0
    min_gap_m: float = 1.0

    def __post_init__(self):
        if self.num_background_vehicles < 0:
            raise ValueError("num_background_vehicles must be >= 0")
        if self.num_lanes < 1 or self.lane_width_m <= 0 or self.road_length_m <= 0:
            raise ValueError("lane geometry must be positive")
        if not 1 <= self.vehicle_type_count <= len(VEHICLE_TYPES):
            raise ValueError(f"vehicle_type_count must be in [1, {len(VEHICLE_TYPES)}]")
        widest = max(t.width_m for t in VEHICLE_TYPES[: self.vehicle_type_count])
        longest = max(t.length_m for t in VEHICLE_TYPES[: self.vehicle_type_count])
        reach = widest / 2 + self.lateral_jitter_m + longest / 2 * math.sin(
            math.radians(self.yaw_jitter_deg)
        )
        if reach >= self.lane_width_m / 2:
            raise ValueError("lane too narrow for the vehicle fleet")

    def lane_center(self, lane):
        return (lane - (self.num_lanes - 1) / 2.0) * self.lane_width_m

    def lane_heading(self, lane):
        # right-hand traffic: lanes right of the road center drive toward +y
        return math.pi / 2 if lane >= self.num_lanes // 2 else -math.pi / 2


@dataclass(frozen=True)
class Vehicle:
    id: int
    type_id: int
    lane: int
    box: Box3
    speed: float

    @property
    def name(self):
        return VEHICLE_TYPES[self.type_id].name


@dataclass(frozen=True, eq=False)
class Fleet:
    """Background vehicles as parallel arrays (world frame)."""

    ids: np.ndarray
    type_ids: np.ndarray
    lanes: np.ndarray
    centers: np.ndarray  # (N, 3)
    yaws: np.ndarray
    dims: np.ndarray  # (N, 3) length, width, height
    speeds: np.ndarray

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_vehicles(cls, vehicles):
        return cls(
            ids=np.array([v.id for v in vehicles], dtype=np.int64),
            type_ids=np.array([v.type_id for v in vehicles], dtype=np.int64),
            lanes=np.array([v.lane for v in vehicles], dtype=np.int64),
            centers=np.array([v.box.center for v in vehicles], dtype=np.float64).reshape(-1, 3),
            yaws=np.array([v.box.yaw_rad for v in vehicles], dtype=np.float64),
            dims=np.array([v.box.dims for v in vehicles], dtype=np.float64).reshape(-1, 3),
            speeds=np.array([v.speed for v in vehicles], dtype=np.float64),
        )

    def vehicle(self, k):
        box = Box3(tuple(self.centers[k]), float(self.yaws[k]), *self.dims[k])
        return Vehicle(int(self.ids[k]), int(self.type_ids[k]), int(self.lanes[k]), box, float(self.speeds[k]))


@dataclass(frozen=True, eq=False)
class Scene:
    ego: Vehicle
    fleet: Fleet
    weather: WeatherPreset
    timestamp: float
    road_length_m: float
    num_lanes: int
    lane_width_m: float
    noise_seed: int = 0
    saturated: bool = False

    @property
    def others(self):
        return tuple(self.fleet.vehicle(k) for k in range(len(self.fleet)))

    @property
    def ego_pose(self):
        c = self.ego.box.center
        return Pose2(c[0], c[1], self.ego.box.yaw_rad)

    def _relative_xy(self):
        # nearest ring copy of every vehicle relative to the ego
        L = self.road_length_m
        d = self.fleet.centers[:, :2] - np.array(self.ego.box.center[:2])
        d[:, 1] = (d[:, 1] + L / 2) % L - L / 2
        return d

    def map_distances(self):
        return np.hypot(*self._relative_xy().T)

    def ego_frame(self):
        """(centers, yaws) of the fleet in the ego frame."""
        pose = self.ego_pose
        d = self._relative_xy()
        centers = np.column_stack([d @ pose.right, d @ pose.forward, self.fleet.centers[:, 2]])
        yaws = (self.fleet.yaws - pose.yaw_rad + math.pi / 2 + math.pi) % (2 * math.pi) - math.pi
        return centers, yaws

    def ego_frame_boxes(self):
        centers, yaws = self.ego_frame()
        return [
            Box3(tuple(c), float(y), *dims) for c, y, dims in zip(centers, yaws, self.fleet.dims)
        ]

    def advance(self, ticks, fps=FPS):
        """Scene after ``ticks`` simulation steps; vehicles follow their lanes."""
        dt = ticks / fps
        L = self.road_length_m

        def moved_y(y, yaw, speed):
            direction = np.where(np.sin(yaw) > 0, 1.0, -1.0)
            return (y + direction * speed * dt + L / 2) % L - L / 2

        f = self.fleet
        centers = f.centers.copy()
        centers[:, 1] = moved_y(centers[:, 1], f.yaws, f.speeds)
        c = self.ego.box.center
        ey = float(moved_y(np.array(c[1]), self.ego.box.yaw_rad, self.ego.speed))
        ego = replace(self.ego, box=replace(self.ego.box, center=(c[0], ey, c[2])))
        return replace(
            self, ego=ego, fleet=replace(f, centers=centers), timestamp=self.timestamp + dt
        )


@dataclass
class SceneRecord:
    id: int
    name: str
    distance_m: float
    timestamp: float
    rgb: Optional[np.ndarray]
    depth: Optional[np.ndarray]
    bbox_rgb: PvBox
    bbox_bev: BevBox
    ego_speed: float


def _footprints_overlap(a, b, gap):
    """Separating-axis test for two convex quads, inflated by ``gap``."""
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            axis /= np.linalg.norm(axis)
            pa, pb = a @ axis, b @ axis
            if pa.max() + gap <= pb.min() or pb.max() + gap <= pa.min():
                return False
    return True


def _spawn(cfg, rng, vid, lane=None, speeds=None):
    t = VEHICLE_TYPES[int(rng.integers(cfg.vehicle_type_count))]
    if lane is None:
        lane = int(rng.integers(cfg.num_lanes))
    x = cfg.lane_center(lane) + rng.uniform(-cfg.lateral_jitter_m, cfg.lateral_jitter_m)
    y = rng.uniform(-cfg.road_length_m / 2, cfg.road_length_m / 2)
    yaw = cfg.lane_heading(lane) + math.radians(
        rng.uniform(-cfg.yaw_jitter_deg, cfg.yaw_jitter_deg)
    )
    box = Box3((x, y, t.height_m / 2), yaw, t.length_m, t.width_m, t.height_m)
    return Vehicle(vid, t.type_id, lane, box, float(speeds[lane]))


def sample_scene(cfg: SceneConfig, rng: np.random.Generator, weather=None) -> Scene:
    """Place the ego and ``cfg.num_background_vehicles`` footprint-disjoint vehicles.

    Placement is rejection sampling; after ``10 * num_background_vehicles``
    rejections the scene keeps what was placed and sets ``saturated``.
    """
    speeds = rng.uniform(*cfg.speed_range_mps, size=cfg.num_lanes)
    ego = _spawn(cfg, rng, 0, speeds=speeds)
    L = cfg.road_length_m

    placed = [ego]
    prints = [ego.box.footprint()]
    rejections = 0
    budget = 10 * cfg.num_background_vehicles
    saturated = False
    while len(placed) - 1 < cfg.num_background_vehicles:
        cand = _spawn(cfg, rng, len(placed), speeds=speeds)
        fp = cand.box.footprint()
        clash = False
        for other in prints:
            # compare against the ring copy nearest to the candidate
            dy = other[:, 1].mean() - fp[:, 1].mean()
            shift = dy - ((dy + L / 2) % L - L / 2)
            if abs(dy - shift) > 12.0:
                continue
            if _footprints_overlap(fp, other - np.array([0.0, shift]), cfg.min_gap_m):
                clash = True
                break
        if clash:
            rejections += 1
            if rejections > budget:
                saturated = True
                log.warning(
                    "placement saturated: %d of %d vehicles placed",
                    len(placed) - 1,
                    cfg.num_background_vehicles,
                )
                break
            continue
        placed.append(cand)
        prints.append(fp)

    return Scene(
        ego=ego,
        fleet=Fleet.from_vehicles(placed[1:]),
        weather=weather if weather is not None else WEATHER_PRESETS[-1],
        timestamp=0.0,
        road_length_m=L,
        num_lanes=cfg.num_lanes,
        lane_width_m=cfg.lane_width_m,
        noise_seed=int(rng.integers(2**63)),
        saturated=saturated,
    )


# ---------------------------------------------------------------- rendering


@dataclass
class Raster:
    """Per-pixel buffers from one ray-casting pass."""

    vehicle: np.ndarray  # index into scene.others, -1 for background (painter order)
    normal: np.ndarray  # ego-frame surface normal of the painted vehicle face
    dist: np.ndarray  # metres to the nearest surface, inf for sky
    rays: np.ndarray


def _ray_box(origin, rays, center, yaw, dims):
    """Slab test; returns (t_hit, ego-frame face normal) with t = inf on a miss."""
    c, s = math.cos(yaw), math.sin(yaw)
    # rotate into box frame (x along heading)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot @ (origin - center)
    d = rays @ rot.T
    half = np.asarray(dims) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    axis = tmin.argmax(axis=-1)
    sign = -np.sign(np.take_along_axis(d, axis[..., None], axis=-1)[..., 0])
    n_local = np.zeros(d.shape)
    np.put_along_axis(n_local, axis[..., None], sign[..., None], axis=-1)
    return np.where(hit, t_near, np.inf), n_local @ rot


@functools.lru_cache(maxsize=8)
def _pixel_center_rays(cam: CameraModel):
    vv, uu = np.meshgrid(np.arange(cam.height_px) + 0.5, np.arange(cam.width_px) + 0.5, indexing="ij")
    rays = cam.pixel_rays(uu, vv)
    rays.flags.writeable = False
    return rays


def rasterize(scene: Scene, cam: CameraModel) -> Raster:
    H, W = cam.height_px, cam.width_px
    rays = _pixel_center_rays(cam)
    origin = cam.center

    with np.errstate(divide="ignore"):
        t_ground = np.where(rays[..., 2] < 0, cam.cam_height_m / -rays[..., 2], np.inf)
    dist = t_ground.copy()
    vehicle = np.full((H, W), -1, dtype=np.int32)
    normal = np.zeros((H, W, 3))

    centers, yaws = scene.ego_frame()
    dims = scene.fleet.dims
    hulls = project_boxes_pv(cam, box_corners(centers, yaws, dims))
    d = scene.map_distances()
    # painter's algorithm: farthest first, nearer vehicles overwrite
    for k in np.argsort(-d, kind="stable"):
        if np.isnan(hulls[k, 0]) or d[k] > FAR_PLANE_M:
            continue
        u0, v0 = np.floor(hulls[k, :2] - 0.5).astype(int) + 1
        u1, v1 = np.ceil(hulls[k, 2:] - 0.5).astype(int)
        if u1 <= u0 or v1 <= v0:
            continue  # no pixel center inside the hull
        t, n = _ray_box(origin, rays[v0:v1, u0:u1], centers[k], yaws[k], dims[k])
        hit = np.isfinite(t)
        if not hit.any():
            continue
        vehicle[v0:v1, u0:u1][hit] = k
        normal[v0:v1, u0:u1][hit] = n[hit]
        win = dist[v0:v1, u0:u1]
        win[hit] = np.minimum(win[hit], t[hit])
    return Raster(vehicle, normal, dist, rays)


SKY_TOP = np.array([95.0, 145.0, 225.0])
SKY_HORIZON = np.array([205.0, 222.0, 240.0])
ROAD = np.array([88.0, 88.0, 94.0])
GRASS = np.array([72.0, 112.0, 60.0])
PAINT = np.array([232.0, 232.0, 225.0])


def _ground_colors(scene: Scene, cam: CameraModel, rays, t):
    pts = cam.center + rays * t[..., None]
    world = scene.ego_pose.ego_to_world(pts[..., :2])
    x, y = world[..., 0], world[..., 1]
    half_road = scene.num_lanes * scene.lane_width_m / 2.0
    color = np.where((np.abs(x) <= half_road)[..., None], ROAD, GRASS)
    edges = (np.arange(scene.num_lanes + 1) - scene.num_lanes / 2.0) * scene.lane_width_m
    off = np.abs(x[..., None] - edges).min(axis=-1)
    nearest = np.abs(x[..., None] - edges).argmin(axis=-1)
    outer = (nearest == 0) | (nearest == scene.num_lanes)
    dashed = (y % 9.0) < 3.0
    line = (off < 0.08) & (outer | dashed)
    return np.where(line[..., None], PAINT, color)


def _sun_direction(weather: WeatherPreset):
    alt = math.radians(weather.sun_altitude_deg)
    az = math.radians(35.0)
    return np.array([math.cos(alt) * math.sin(az), math.cos(alt) * math.cos(az), math.sin(alt)])


def shade(scene: Scene, cam: CameraModel, r: Raster) -> np.ndarray:
    H, W = cam.height_px, cam.width_px
    img = np.empty((H, W, 3))
    sky = ~np.isfinite(r.dist)
    elev = np.clip(r.rays[..., 2] * 3.0, 0.0, 1.0)[..., None]
    img[:] = SKY_HORIZON + (SKY_TOP - SKY_HORIZON) * elev
    ground = ~sky & (r.vehicle < 0)
    if ground.any():
        img[ground] = _ground_colors(scene, cam, r.rays[ground], r.dist[ground])

    w = scene.weather
    sun = _sun_direction(w)
    painted = r.vehicle >= 0
    if painted.any():
        palette = np.array([t.color for t in VEHICLE_TYPES], float)[scene.fleet.type_ids]
        base = palette[r.vehicle[painted]]
        lambert = np.clip(r.normal[painted] @ sun, 0.0, 1.0)
        top = r.normal[painted][:, 2] > 0.5
        img[painted] = base * (0.55 + 0.35 * lambert + 0.1 * top)[:, None]

    brightness = (0.45 + 0.55 * max(0.0, math.sin(math.radians(w.sun_altitude_deg))))
    brightness *= 1.0 - 0.35 * w.cloudiness
    img *= brightness
    if w.name == "Night":
        img *= np.array([0.55, 0.65, 1.0])
    rng = np.random.default_rng(scene.noise_seed)
    speckle = rng.random((H, W)) < 0.05 * w.precipitation
    img[speckle] += 90.0 * w.precipitation
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render(scene: Scene, cam: CameraModel):
    """RGB image (H, W, 3) uint8 and normalized float32 depth (H, W)."""
    r = rasterize(scene, cam)
    depth = np.clip(r.dist / FAR_PLANE_M, 0.0, 1.0).astype(np.float32)
    return shade(scene, cam, r), depth


def render_pv(scene: Scene, cam: CameraModel) -> np.ndarray:
    return shade(scene, cam, rasterize(scene, cam))


def render_depth(scene: Scene, cam: CameraModel) -> np.ndarray:
    r = rasterize(scene, cam)
    return np.clip(r.dist / FAR_PLANE_M, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------- annotation


def annotate(scene: Scene, cam: CameraModel, grid: BevGrid, rgb=None, depth=None) -> List[SceneRecord]:
    """One record per vehicle within the annotation radius that projects into both views.

    Occluded vehicles are kept: visibility in the rendered image is not checked.
    """
    dist = scene.map_distances()
    near = np.flatnonzero(dist <= ANNOTATION_RADIUS_M)
    if near.size == 0:
        return []
    centers, yaws = scene.ego_frame()
    corners = box_corners(centers[near], yaws[near], scene.fleet.dims[near])
    pv = project_boxes_pv(cam, corners)
    bev = footprints_bev(grid, corners)
    f = scene.fleet
    records = []
    for j, k in enumerate(near):
        if np.isnan(pv[j, 0]) or np.isnan(bev[j, 0]):
            continue
        records.append(
            SceneRecord(
                id=int(f.ids[k]),
                name=VEHICLE_TYPES[f.type_ids[k]].name,
                distance_m=float(dist[k]),
                timestamp=scene.timestamp,
                rgb=rgb,
                depth=depth,
                bbox_rgb=PvBox(*(float(c) for c in pv[j])),
                bbox_bev=BevBox(*(float(c) for c in bev[j])),
                ego_speed=scene.ego.speed,
            )
        )
    return records


def validate_record(rec: SceneRecord, cam: CameraModel, grid: BevGrid):
    """Raise ValueError if ``rec`` violates the record invariants."""
    if not rec.distance_m <= ANNOTATION_RADIUS_M:
        raise ValueError(f"record {rec.id}: distance {rec.distance_m} beyond radius")
    p, b = rec.bbox_rgb, rec.bbox_bev
    if not (0 <= p.u_min <= p.u_max <= cam.width_px and 0 <= p.v_min <= p.v_max <= cam.height_px):
        raise ValueError(f"record {rec.id}: PV box {tuple(p)} outside image")
    n = grid.size_px
    if not (0 <= b.u_min <= b.u_max <= n and 0 <= b.v_min <= b.v_max <= n):
        raise ValueError(f"record {rec.id}: BEV box {tuple(b)} outside grid")


# -------------------------------------------------------------- acquisition


@dataclass(frozen=True)
class AcquisitionProtocol:
    maps: int = 6
    egos_per_map: int = 20
    frames_per_ego: int = 20
    weathers: int = 5
    skip: int = 5

    def __post_init__(self):
        if min(self.maps, self.egos_per_map, self.frames_per_ego, self.weathers) < 1:
            raise ValueError("protocol counts must be positive")
        if self.weathers > len(WEATHER_PRESETS):
            raise ValueError(f"at most {len(WEATHER_PRESETS)} weather presets")
        if self.skip < 0:
            raise ValueError("skip must be >= 0")

    @property
    def total_frames(self):
        return self.maps * self.egos_per_map * self.frames_per_ego * self.weathers


@dataclass
class Frame:
    index: int
    map_idx: int
    ego_idx: int
    weather_idx: int
    frame_idx: int
    scene: Scene
    rgb: np.ndarray
    depth: np.ndarray
    records: list


def frame_rng(seed, map_idx, ego_idx, frame_idx, weather_idx):
    return np.random.default_rng([seed, map_idx, ego_idx, frame_idx, weather_idx])


def _capture(cfg, protocol, episode, m, e, w, f):
    tick = (w * protocol.frames_per_ego + f) * (protocol.skip + 1)
    noise = int(frame_rng(cfg.seed, m, e, f, w).integers(2**63))
    scene = replace(episode.advance(tick), weather=WEATHER_PRESETS[w], noise_seed=noise)
    rgb, depth = render(scene, cfg.camera)
    records = annotate(scene, cfg.camera, cfg.grid, rgb, depth)
    index = ((m * protocol.egos_per_map + e) * protocol.weathers + w) * protocol.frames_per_ego + f
    return Frame(index, m, e, w, f, scene, rgb, depth, records)


def episode_scene(cfg: SceneConfig, map_idx, ego_idx):
    return sample_scene(cfg, np.random.default_rng([cfg.seed, map_idx, ego_idx]))


def make_frame(cfg: SceneConfig, protocol: AcquisitionProtocol, map_idx, ego_idx, weather_idx, frame_idx):
    """Build one frame from its indices alone; frames can be produced in any order."""
    episode = episode_scene(cfg, map_idx, ego_idx)
    return _capture(cfg, protocol, episode, map_idx, ego_idx, weather_idx, frame_idx)


def run_acquisition(cfg: SceneConfig, protocol: AcquisitionProtocol) -> Iterator[Frame]:
    """Yield ``protocol.total_frames`` frames in (map, ego, weather, frame) order.

    Each (map, ego) episode is sampled once; stored frames are ``skip + 1``
    ticks apart and successive weathers continue the same episode in time.
    """
    for m in range(protocol.maps):
        for e in range(protocol.egos_per_map):
            episode = episode_scene(cfg, m, e)
            for w in range(protocol.weathers):
                for f in range(protocol.frames_per_ego):
                    yield _capture(cfg, protocol, episode, m, e, w, f)
