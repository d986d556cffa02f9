""" synth.py
    Deterministic synthetic street scenes, ray-cast with the range-image beam
    model. Every point carries its true class and object, which is what
    the pre-segmentation, projection and evaluation oracles compare against.

    Scene layout, sensor frame (x forward, z up, sensor 1.73 m above ground):
        |y| <  road_half_width                    road
        |y| <  road_half_width + sidewalk_width   sidewalk
        otherwise                                 terrain
    cars are boxes on the road, walls are thin boxes and vegetation is
    ellipsoids beside it. Objects float a little above the ground so that
    no object point is a ground inlier.

    One ray per range-image pixel, through the pixel center, so a scan
    projects back without collisions. Range noise is applied along the ray.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from typeguard import typechecked

from udma import taxonomy
from udma.dataio import PointCloud, SourceSample
from udma.errors import ConfigError
from udma.preseg import ComponentMap, GroundModel, component_stats, dense_first_seen
from udma.projection import ProjectionConfig, build_range_image, pixel_center_angles

logger = logging.getLogger(__name__)

KIND_CLASS = {'car': taxonomy.CAR, 'wall': taxonomy.BUILDING, 'vegetation': taxonomy.VEGETATION}
KIND_CATEGORY = {'car': 'car', 'wall': 'wall', 'vegetation': 'wall'}
CLASS_INTENSITY = {
    taxonomy.ROAD: 0.2,
    taxonomy.SIDEWALK: 0.3,
    taxonomy.TERRAIN: 0.45,
    taxonomy.BUILDING: 0.5,
    taxonomy.VEGETATION: 0.65,
    taxonomy.CAR: 0.8,
}
INTENSITY_NOISE = 0.03
OBJECT_GAP = 2.0


@dataclass(frozen=True)
class SceneObject:
    kind: str                 # car | wall | vegetation
    center: tuple             # (x, y, z)
    half_size: tuple          # box half extents, or ellipsoid semi-axes

    @property
    def class_id(self) -> int:
        return KIND_CLASS[self.kind]

    def footprint(self):
        (x, y, _), (hx, hy, _) = self.center, self.half_size
        return x - hx, x + hx, y - hy, y + hy


@dataclass
class SceneSpec:
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    sensor_height: float = 1.73
    ground_slope: tuple = (0.0, 0.0)      # dz/dx, dz/dy
    road_half_width: float = 5.0
    sidewalk_width: float = 2.0
    objects: list = field(default_factory=list)
    noise: float = 0.01
    max_range: float = 40.0
    range_scale: float = 0.02
    shift_offset: float = 0.5
    shift_scale: float = 2.0
    shift_channels: tuple = (0, 1, 2)

    def ground_model(self, inlier_threshold=0.15) -> GroundModel:
        slope_x, slope_y = self.ground_slope
        normal = np.array([-slope_x, -slope_y, 1.0])
        length = np.linalg.norm(normal)
        return GroundModel(normal / length, -self.sensor_height / length, inlier_threshold)

    def ground_height(self, x, y) -> float:
        return -self.sensor_height + self.ground_slope[0] * x + self.ground_slope[1] * y

    def validate(self):
        if self.sensor_height <= 0 or self.projection.fov_down <= 0:
            msg = (f"scene has no ground in view: sensor_height={self.sensor_height}, "
                   f"fov_down={math.degrees(self.projection.fov_down):.2f} deg")
            raise ConfigError(msg)
        for index, obj in enumerate(self.objects):
            if obj.kind not in KIND_CLASS:
                msg = f"scene object {index} has unknown kind {obj.kind}"
                raise ConfigError(msg)
            for other in self.objects[index + 1:]:
                if footprints_overlap(obj.footprint(), other.footprint(), 0.0):
                    msg = f"scene objects overlap: {obj} and {other}"
                    raise ConfigError(msg)
        return self


def footprints_overlap(a, b, gap) -> bool:
    return not (a[1] + gap <= b[0] or b[1] + gap <= a[0] or a[3] + gap <= b[2] or b[3] + gap <= a[2])


def ray_directions(cfg: ProjectionConfig) -> np.ndarray:
    """ (V * U, 3) unit rays through every pixel center, row-major """
    rows, cols = np.meshgrid(np.arange(cfg.height), np.arange(cfg.width), indexing='ij')
    azimuth, elevation = pixel_center_angles(cols.reshape(-1), rows.reshape(-1), cfg)
    return np.stack([np.cos(elevation) * np.cos(azimuth),
                     np.cos(elevation) * np.sin(azimuth),
                     np.sin(elevation)], axis=1)


def hit_plane(directions, ground: GroundModel) -> np.ndarray:
    facing = directions @ ground.normal
    t = np.full(len(directions), np.inf)
    down = facing < 0
    t[down] = ground.offset / facing[down]
    t[t <= 0] = np.inf
    return t


def hit_box(directions, obj: SceneObject) -> np.ndarray:
    low = np.asarray(obj.center) - np.asarray(obj.half_size)
    high = np.asarray(obj.center) + np.asarray(obj.half_size)
    with np.errstate(divide='ignore', invalid='ignore'):
        t_low = low / directions
        t_high = high / directions
    near = np.nanmax(np.minimum(t_low, t_high), axis=1)
    far = np.nanmin(np.maximum(t_low, t_high), axis=1)
    return np.where((near <= far) & (near > 0), near, np.inf)


def hit_ellipsoid(directions, obj: SceneObject) -> np.ndarray:
    axes = np.asarray(obj.half_size)
    start = -np.asarray(obj.center) / axes
    step = directions / axes
    a = (step ** 2).sum(axis=1)
    b = 2.0 * step @ start
    c = start @ start - 1.0
    discriminant = b ** 2 - 4.0 * a * c
    t = np.full(len(directions), np.inf)
    hit = discriminant >= 0
    t[hit] = (-b[hit] - np.sqrt(discriminant[hit])) / (2.0 * a[hit])
    t[t <= 0] = np.inf
    return t


def ground_class(y, spec: SceneSpec) -> np.ndarray:
    width = np.abs(y)
    classes = np.full(len(y), taxonomy.TERRAIN, dtype=np.int64)
    classes[width < spec.road_half_width + spec.sidewalk_width] = taxonomy.SIDEWALK
    classes[width < spec.road_half_width] = taxonomy.ROAD
    return classes


@typechecked
def generate_scan(spec: SceneSpec, seed: int) -> tuple[PointCloud, ComponentMap]:
    """ Labeled scan and its true components: ground is component 0, then
        one component per visible object in order of first appearance.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    directions = ray_directions(spec.projection)
    ground = spec.ground_model()

    nearest = hit_plane(directions, ground)
    hit_object = np.full(len(directions), -1, dtype=np.int64)
    for index, obj in enumerate(spec.objects):
        t = hit_ellipsoid(directions, obj) if obj.kind == 'vegetation' else hit_box(directions, obj)
        closer = t < nearest
        nearest[closer] = t[closer]
        hit_object[closer] = index

    range_noise = rng.normal(0.0, spec.noise, size=len(directions))
    intensity_noise = rng.normal(0.0, INTENSITY_NOISE, size=len(directions))
    hits = np.flatnonzero(nearest <= spec.max_range)
    distance = nearest[hits] + range_noise[hits]
    xyz = directions[hits] * distance[:, None]

    labels = ground_class(xyz[:, 1], spec)
    object_of_hit = hit_object[hits]
    on_object = object_of_hit >= 0
    object_classes = np.array([obj.class_id for obj in spec.objects] + [taxonomy.IGNORE_ID], dtype=np.int64)
    labels[on_object] = object_classes[object_of_hit[on_object]]
    means = np.array([CLASS_INTENSITY[c] for c in range(taxonomy.NUM_CLASSES)])
    intensity = np.clip(means[labels] + intensity_noise[hits], 0.0, 1.0)
    cloud = PointCloud(np.column_stack([xyz, intensity]), labels)

    component_id = np.zeros(len(hits), dtype=np.int64)
    categories = ['ground']
    if np.any(on_object):
        component_id[on_object] = dense_first_seen(object_of_hit[on_object]) + 1
        first_seen = {}
        for object_index, comp in zip(object_of_hit[on_object], component_id[on_object]):
            first_seen.setdefault(int(comp), int(object_index))
        categories += [KIND_CATEGORY[spec.objects[first_seen[k]].kind] for k in sorted(first_seen)]
    if not np.any(~on_object):
        logger.warning(f"scene seed {seed}: no ray reached the ground")
    stats = component_stats(xyz, component_id, len(categories))
    truth = ComponentMap(component_id, stats, 0, ground.signed_distance(xyz), categories)
    logger.info(f"generate_scan seed {seed}: {len(hits)} points, {len(spec.objects)} objects, "
                f"{len(categories) - 1} visible")
    return cloud, truth


@typechecked
def generate_source(spec: SceneSpec, seed: int) -> SourceSample:
    """ dense (H, W, 3) rendering of the scene with the affine domain shift
        shift_scale * x + shift_offset applied to the channels in shift_channels;
        pixels with no return are labeled ignore
    """
    cloud, truth = generate_scan(spec, seed)
    image = build_range_image(cloud, truth, spec.projection)
    rendering = image.network_input(spec.range_scale)
    shifted = rendering.copy()
    channels = list(spec.shift_channels)
    shifted[channels] = spec.shift_scale * rendering[channels] + spec.shift_offset
    return SourceSample(shifted.transpose(1, 2, 0), image.pixel_labels(cloud.labels))


def lift_for(half_size, slope) -> float:
    """ base clearance so the lowest corner still clears the inlier band on sloped ground """
    return 0.3 + slope * math.hypot(half_size[0], half_size[1])


def random_scene_spec(seed, projection: ProjectionConfig = None, noise=0.01, max_range=40.0,
                      range_scale=0.02, shift_offset=0.5, shift_scale=2.0, shift_channels=(0, 1, 2)) -> SceneSpec:
    """ 1-3 cars on the road, 1-2 walls and 1-2 hedges beside it, at least
        OBJECT_GAP apart, ground slope under one degree
    """
    rng = np.random.default_rng(seed)
    projection = projection if projection is not None else ProjectionConfig()
    max_slope = math.tan(math.radians(1.0))
    slope = tuple(rng.uniform(-max_slope, max_slope, size=2) / math.sqrt(2.0))
    spec = SceneSpec(projection=projection, ground_slope=slope, noise=noise, max_range=max_range,
                     range_scale=range_scale, shift_offset=shift_offset, shift_scale=shift_scale,
                     shift_channels=tuple(shift_channels))
    worst_slope = math.hypot(*slope)

    def draw(kind):
        side = rng.choice([-1.0, 1.0])
        if kind == 'car':
            half = (rng.uniform(1.9, 2.3), rng.uniform(0.8, 0.95), rng.uniform(0.7, 0.8))
            x = rng.choice([-1.0, 1.0]) * rng.uniform(6.0, 22.0)
            y = side * rng.uniform(1.5, 4.0)
        elif kind == 'wall':
            half = (rng.uniform(5.0, 8.0), 0.2, rng.uniform(2.0, 3.0))
            x = rng.uniform(-10.0, 15.0)
            y = side * rng.uniform(9.0, 13.0)
        else:
            half = (rng.uniform(5.0, 7.0), rng.uniform(1.0, 1.5), rng.uniform(1.5, 2.2))
            x = rng.uniform(-10.0, 15.0)
            y = side * rng.uniform(8.5, 13.0)
        z = spec.ground_height(x, y) + lift_for(half, worst_slope) + half[2]
        return SceneObject(kind, (float(x), float(y), float(z)), tuple(float(h) for h in half))

    counts = {'car': rng.integers(1, 4), 'wall': rng.integers(1, 3), 'vegetation': rng.integers(1, 3)}
    for kind, count in counts.items():
        for _ in range(int(count)):
            for _attempt in range(100):
                candidate = draw(kind)
                if not any(footprints_overlap(candidate.footprint(), other.footprint(), OBJECT_GAP)
                           for other in spec.objects):
                    spec.objects.append(candidate)
                    break
    return spec.validate()


def scene_spec_from_config(run_config, seed) -> SceneSpec:
    return random_scene_spec(seed, ProjectionConfig.from_run_config(run_config), run_config['synth_noise'],
                             run_config['synth_max_range'], run_config['input_range_scale'],
                             run_config['synth_shift_offset'], run_config['synth_shift_scale'],
                             run_config.shift_channels())
