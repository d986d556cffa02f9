""" projection.py
    Spherical projection of a sweep onto a V x U range image and the way back.

        u = floor(0.5 * (1 - atan2(y, x) / pi) * U)          clamped to [0, U-1]
        v = floor((1 - (asin(z / r) + f_down) / f) * V)      out of fov unless 0 <= v_raw < V

    Column u = 0 looks backwards (azimuth +pi) and u = U/2 straight ahead
    along +x. Row 0 is the top of the field of view.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from typeguard import typechecked

from udma import taxonomy
from udma.dataio import PointCloud
from udma.errors import ConfigError, DegeneratePointError, FormatError, ShapeError

logger = logging.getLogger(__name__)

RANGE_IMAGE_MAGIC = int.from_bytes(b'UDMR', 'little')
RANGE_IMAGE_PLANES = ('range', 'intensity', 'point_index', 'component_id', 'valid')


@dataclass(frozen=True)
class ProjectionConfig:
    width: int = 2048
    height: int = 64
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(25.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            msg = f"range image must be at least 1x1, got U={self.width} V={self.height}"
            raise ConfigError(msg)
        if self.fov_down < 0 or self.fov <= 0:
            msg = f"need f_down >= 0 and f_up + f_down > 0, got f_up={self.fov_up} f_down={self.fov_down}"
            raise ConfigError(msg)

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down

    @classmethod
    def from_run_config(cls, cfg):
        return cls(cfg['range_width'], cfg['range_height'],
                   math.radians(cfg['fov_up_deg']), math.radians(cfg['fov_down_deg']))


@dataclass
class RangeImage:
    range: np.ndarray          # (V, U) meters, 0 where empty
    intensity: np.ndarray      # (V, U)
    point_index: np.ndarray    # (V, U) backpointer, -1 where empty
    component_id: np.ndarray   # (V, U) -1 where empty or unknown
    valid: np.ndarray          # (V, U) bool
    cfg: ProjectionConfig

    @property
    def shape(self) -> tuple[int, int]:
        return self.range.shape

    def network_input(self, range_scale=1.0) -> np.ndarray:
        """ (3, V, U) channels (r, r, i); empty pixels are zero """
        scaled = self.range * range_scale
        return np.stack([scaled, scaled, self.intensity])

    def pixel_categories(self, categories) -> np.ndarray:
        """ per-pixel category code from per-component category names """
        codes = np.array([taxonomy.CATEGORY_CODES[c] for c in categories] +
                         [taxonomy.CATEGORY_CODES[taxonomy.UNKNOWN]], dtype=np.int64)
        return codes[self.component_id]

    def pixel_labels(self, point_labels) -> np.ndarray:
        """ gathers per-point labels through the backpointer, ignore where empty """
        labels = np.full(self.shape, taxonomy.IGNORE_ID, dtype=np.int64)
        labels[self.valid] = np.asarray(point_labels)[self.point_index[self.valid]]
        return labels


def project_points(xyz, cfg: ProjectionConfig):
    """ vectorized projection: (u, v, v_raw, in_fov, r); r == 0 points are never in fov """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(xyz, axis=1)
    nonzero = r > 0
    azimuth = np.arctan2(xyz[:, 1], xyz[:, 0])
    elevation = np.zeros_like(r)
    elevation[nonzero] = np.arcsin(np.clip(xyz[nonzero, 2] / r[nonzero], -1.0, 1.0))
    u = np.floor(0.5 * (1.0 - azimuth / np.pi) * cfg.width).astype(np.int64)
    u = np.clip(u, 0, cfg.width - 1)
    v_raw = (1.0 - (elevation + cfg.fov_down) / cfg.fov) * cfg.height
    in_fov = nonzero & (v_raw >= 0) & (v_raw < cfg.height)
    v = np.floor(v_raw).astype(np.int64)
    return u, v, v_raw, in_fov, r


@typechecked
def project_point(p: tuple | list | np.ndarray, cfg: ProjectionConfig) -> tuple[int, int] | None:
    """ (u, v) of one point, None when it falls outside the vertical field of view """
    x, y, z = (float(c) for c in p)
    if x == 0.0 and y == 0.0 and z == 0.0:
        msg = f"cannot project point ({x}, {y}, {z}) at range 0"
        raise DegeneratePointError(msg)
    u, v, _, in_fov, _ = project_points(np.array([[x, y, z]]), cfg)
    if not in_fov[0]:
        return None
    return int(u[0]), int(v[0])


def pixel_center_angles(u, v, cfg: ProjectionConfig):
    """ (azimuth, elevation) of the ray through the center of pixel (u, v) """
    azimuth = np.pi * (1.0 - 2.0 * (np.asarray(u) + 0.5) / cfg.width)
    elevation = cfg.fov_up - (np.asarray(v) + 0.5) * cfg.fov / cfg.height
    return azimuth, elevation


def empty_range_image(cfg: ProjectionConfig) -> RangeImage:
    shape = (cfg.height, cfg.width)
    return RangeImage(np.zeros(shape), np.zeros(shape), np.full(shape, -1, dtype=np.int64),
                      np.full(shape, -1, dtype=np.int64), np.zeros(shape, dtype=bool), cfg)


@typechecked
def build_range_image(cloud: PointCloud, components, cfg: ProjectionConfig) -> RangeImage:
    """ Every in-fov point lands at its (u, v). On a collision the nearest
        point wins; equal ranges go to the lower point index.
        components is a ComponentMap or None.
    """
    image = empty_range_image(cfg)
    if components is not None and len(components) != len(cloud):
        msg = f"component map has {len(components)} entries for a cloud of {len(cloud)} points"
        raise ShapeError(msg)
    if len(cloud) == 0:
        return image

    u, v, _, in_fov, r = project_points(cloud.xyz, cfg)
    index = np.flatnonzero(in_fov)
    pixel = v[index] * cfg.width + u[index]
    order = np.lexsort((index, r[index], pixel))
    pixel_sorted = pixel[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pixel_sorted[1:] != pixel_sorted[:-1]
    winners = index[order[first]]
    rows, cols = v[winners], u[winners]

    image.range[rows, cols] = r[winners]
    image.intensity[rows, cols] = cloud.intensity[winners]
    image.point_index[rows, cols] = winners
    image.valid[rows, cols] = True
    if components is not None:
        image.component_id[rows, cols] = components.component_id[winners]
    logger.info(f"build_range_image: {len(cloud)} points, {len(index)} in fov, {len(winners)} pixels filled")
    return image


@typechecked
def unproject_labels(img: RangeImage, pixel_labels: np.ndarray, cloud: PointCloud) -> np.ndarray:
    """ Per-point labels from per-pixel labels.

        in fov:      the label of the pixel the point projects to
        out of fov:  the nearest valid pixel in the point's column, i.e. the
                     topmost valid row for points above the fov and the
                     bottommost for points below; ignore if the column is empty
        range 0:     ignore
    """
    if pixel_labels.shape != img.shape:
        msg = f"pixel labels {pixel_labels.shape} do not match range image {img.shape}"
        raise ShapeError(msg)
    labels = np.full(len(cloud), taxonomy.IGNORE_ID, dtype=np.int64)
    if len(cloud) == 0:
        return labels
    height = img.shape[0]
    u, v, v_raw, in_fov, r = project_points(cloud.xyz, img.cfg)
    labels[in_fov] = pixel_labels[v[in_fov], u[in_fov]]

    has_valid = img.valid.any(axis=0)
    top_row = np.argmax(img.valid, axis=0)
    bottom_row = height - 1 - np.argmax(img.valid[::-1], axis=0)
    above = (r > 0) & (v_raw < 0)
    below = (r > 0) & (v_raw >= height)
    for side, rows in ((above, top_row), (below, bottom_row)):
        usable = side & has_valid[u]
        labels[usable] = pixel_labels[rows[u[usable]], u[usable]]
    return labels


def save_range_image(path, image: RangeImage):
    """ 16-byte int32 header (magic, V, U, planes) then float64 planes """
    height, width = image.shape
    header = np.array([RANGE_IMAGE_MAGIC, height, width, len(RANGE_IMAGE_PLANES)], dtype='<i4')
    planes = np.stack([image.range, image.intensity, image.point_index.astype(np.float64),
                       image.component_id.astype(np.float64), image.valid.astype(np.float64)])
    with open(path, 'wb') as image_file:
        image_file.write(header.tobytes())
        image_file.write(planes.astype('<f8').tobytes())


def load_range_image(path, cfg: ProjectionConfig | None = None) -> RangeImage:
    with open(path, 'rb') as image_file:
        payload = image_file.read()
    if len(payload) < 16:
        msg = f"range image {path} is {len(payload)} bytes, shorter than its 16-byte header"
        raise FormatError(msg)
    magic, height, width, n_planes = (int(x) for x in np.frombuffer(payload[:16], dtype='<i4'))
    if magic != RANGE_IMAGE_MAGIC or n_planes != len(RANGE_IMAGE_PLANES):
        msg = f"range image {path} has magic {magic:#x} and {n_planes} planes"
        raise FormatError(msg)
    expected = 16 + 8 * n_planes * height * width
    if len(payload) != expected:
        msg = f"range image {path} is {len(payload)} bytes, header implies {expected}"
        raise FormatError(msg)
    planes = np.frombuffer(payload[16:], dtype='<f8').reshape(n_planes, height, width)
    if cfg is None:
        cfg = ProjectionConfig(width, height)
    elif (cfg.height, cfg.width) != (height, width):
        msg = f"range image {path} is {height}x{width}, config expects {cfg.height}x{cfg.width}"
        raise ShapeError(msg)
    return RangeImage(planes[0].copy(), planes[1].copy(), planes[2].astype(np.int64),
                      planes[3].astype(np.int64), planes[4] > 0.5, cfg)
