""" preseg.py
    Training-free pre-segmentation of a LiDAR sweep.

    1. fit_ground: RANSAC plane with a tilt limit.
    2. cluster_components: ground inliers become one component, the rest
       are joined by single linkage with a range-adaptive threshold
           connect(p, q)  <=>  |p - q| <= t0 + alpha * min(r_p, r_q)
    3. assign_prior_categories: per-component statistics to car / ground /
       wall / unknown, precedence ground > car > wall.
"""
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from typeguard import typechecked

from udma import taxonomy
from udma.dataio import PointCloud
from udma.errors import FormatError, NoGroundError, ShapeError

logger = logging.getLogger(__name__)

# Column types for the per-component statistics table, imposed rather than
# guessed so the sidecar CSV reads back the same way.
component_stats_column_types = {
    "component_id": np.int64,
    "category": str,
    "count": np.int64,
    "mean_x": np.float64, "mean_y": np.float64, "mean_z": np.float64,
    "std_x": np.float64, "std_y": np.float64, "std_z": np.float64,
    "min_x": np.float64, "min_y": np.float64, "min_z": np.float64,
    "max_x": np.float64, "max_y": np.float64, "max_z": np.float64,
    "extent_x": np.float64, "extent_y": np.float64, "extent_z": np.float64,
    "eig_0": np.float64, "eig_1": np.float64, "eig_2": np.float64,
}
AXES = ('x', 'y', 'z')


@dataclass
class GroundModel:
    normal: np.ndarray
    offset: float
    inlier_threshold: float

    def signed_distance(self, xyz) -> np.ndarray:
        return xyz @ self.normal - self.offset

    def inlier_mask(self, xyz) -> np.ndarray:
        return np.abs(self.signed_distance(xyz)) <= self.inlier_threshold

    def tilt(self) -> float:
        return math.acos(min(1.0, float(self.normal[2])))


@dataclass
class RansacConfig:
    iterations: int = 200
    threshold: float = 0.15
    max_tilt: float = math.radians(8.0)
    seed: int = 0

    @classmethod
    def from_run_config(cls, cfg):
        return cls(cfg['ransac_iterations'], cfg['ransac_threshold'],
                   math.radians(cfg['ransac_max_tilt_deg']), cfg['seed'])


@dataclass
class ClusterConfig:
    base_threshold: float = 0.5
    range_coeff: float = 0.01

    @classmethod
    def from_run_config(cls, cfg):
        return cls(cfg['cluster_base_threshold'], cfg['cluster_range_coeff'])


@dataclass
class CategoryConfig:
    wall_min_height: float = 2.5
    wall_min_spread: float = 4.0
    car_box: tuple = (6.0, 3.0, 2.5)
    car_min_points: int = 20
    car_min_height: float = 0.3

    @classmethod
    def from_run_config(cls, cfg):
        return cls(cfg['wall_min_height'], cfg['wall_min_spread'],
                   (cfg['car_box_length'], cfg['car_box_width'], cfg['car_box_height']),
                   cfg['car_min_points'], cfg['car_min_height'])


@dataclass
class ComponentMap:
    component_id: np.ndarray                     # (N,) int64, -1 unassigned
    stats: pd.DataFrame                          # one row per component, component_id order
    ground_component: int = -1
    heights: np.ndarray | None = None            # (N,) height above the ground plane
    categories: list = field(default_factory=list)

    def __post_init__(self):
        self.component_id = np.asarray(self.component_id, dtype=np.int64)
        if not self.categories:
            self.categories = [taxonomy.UNKNOWN] * self.num_components

    @property
    def num_components(self) -> int:
        return len(self.stats)

    def __len__(self):
        return len(self.component_id)

    def point_categories(self) -> np.ndarray:
        """ per-point category code (taxonomy.CATEGORY_CODES), unknown for unassigned """
        codes = np.array([taxonomy.CATEGORY_CODES[c] for c in self.categories] +
                         [taxonomy.CATEGORY_CODES[taxonomy.UNKNOWN]], dtype=np.int64)
        return codes[self.component_id]   # -1 picks the trailing unknown

    def category_table(self) -> pd.DataFrame:
        table = self.stats.copy()
        table.insert(1, 'category', self.categories)
        return table


def plane_from_triples(a, b, c):
    """ unit normals (oriented +z) and offsets of the planes through a[i], b[i], c[i] """
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-12
    normals[ok] = normals[ok] / norms[ok, None]
    normals[ok & (normals[:, 2] < 0)] *= -1.0
    offsets = np.einsum('ij,ij->i', normals, a)
    return normals, offsets, ok


@typechecked
def fit_ground(cloud: PointCloud, cfg: RansacConfig) -> GroundModel:
    """ Best-inlier RANSAC plane among candidates within cfg.max_tilt of
        horizontal. The first candidate reaching the best count is kept.
        Candidates are drawn from np.random.default_rng(cfg.seed).
    """
    n_points = len(cloud)
    if n_points < 3:
        msg = f"fit_ground needs at least 3 points, got {n_points}"
        raise NoGroundError(msg)
    xyz = cloud.xyz
    rng = np.random.default_rng(cfg.seed)
    triples = np.stack([rng.choice(n_points, 3, replace=False) for _ in range(cfg.iterations)])
    normals, offsets, ok = plane_from_triples(xyz[triples[:, 0]], xyz[triples[:, 1]], xyz[triples[:, 2]])
    min_nz = math.cos(cfg.max_tilt)
    candidates = np.flatnonzero(ok & (normals[:, 2] >= min_nz - 1e-12))
    if len(candidates) == 0:
        msg = (f"no RANSAC candidate within {math.degrees(cfg.max_tilt):.2f} deg of horizontal "
               f"after {cfg.iterations} iterations on {n_points} points")
        raise NoGroundError(msg)

    best, best_count = -1, -1
    for index in candidates:
        count = int(np.count_nonzero(np.abs(xyz @ normals[index] - offsets[index]) <= cfg.threshold))
        if count > best_count:
            best, best_count = index, count
    ground = GroundModel(normals[best].copy(), float(offsets[best]), cfg.threshold)
    logger.info(f"fit_ground: {best_count} of {n_points} inliers, tilt {math.degrees(ground.tilt()):.3f} deg, "
                f"{len(candidates)} of {cfg.iterations} candidates in tilt range")
    return ground


def adaptive_edges(xyz, ranges, cfg: ClusterConfig):
    """ all pairs (i < j) with |p_i - p_j| <= t0 + alpha * min(r_i, r_j) """
    if len(xyz) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    max_radius = cfg.base_threshold + cfg.range_coeff * float(ranges.max())
    tree = cKDTree(xyz)
    pairs = tree.query_pairs(max_radius * (1.0 + 1e-9), output_type='ndarray')
    if len(pairs) == 0:
        return pairs.reshape(0, 2).astype(np.int64)
    distance = np.linalg.norm(xyz[pairs[:, 0]] - xyz[pairs[:, 1]], axis=1)
    limit = cfg.base_threshold + cfg.range_coeff * np.minimum(ranges[pairs[:, 0]], ranges[pairs[:, 1]])
    return pairs[distance <= limit].astype(np.int64)


def dense_first_seen(labels) -> np.ndarray:
    """ relabels so ids count up in order of first appearance """
    _, first_index, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(first_index, kind='stable')
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank[inverse]


def component_stats(xyz, component_id, num_components) -> pd.DataFrame:
    """ count, mean, population std, bounding box and ascending covariance eigenvalues """
    rows = []
    order = np.argsort(component_id, kind='stable')
    bounds = np.searchsorted(component_id[order], np.arange(num_components + 1))
    for k in range(num_components):
        members = xyz[order[bounds[k]:bounds[k + 1]]]
        row = {"component_id": k, "count": len(members)}
        mean = members.mean(axis=0)
        std = members.std(axis=0)
        low, high = members.min(axis=0), members.max(axis=0)
        centered = members - mean
        eigenvalues = np.linalg.eigvalsh(centered.T @ centered / len(members))
        for axis, name in enumerate(AXES):
            row[f"mean_{name}"] = mean[axis]
            row[f"std_{name}"] = std[axis]
            row[f"min_{name}"] = low[axis]
            row[f"max_{name}"] = high[axis]
            row[f"extent_{name}"] = high[axis] - low[axis]
        for axis in range(3):
            row[f"eig_{axis}"] = max(0.0, eigenvalues[axis])
        rows.append(row)
    columns = [c for c in component_stats_column_types if c != 'category']
    stats_df = pd.DataFrame(rows, columns=columns)
    return stats_df.astype({c: component_stats_column_types[c] for c in columns})


@typechecked
def cluster_components(cloud: PointCloud, ground: GroundModel, cfg: ClusterConfig) -> ComponentMap:
    xyz = cloud.xyz
    n_points = len(cloud)
    heights = ground.signed_distance(xyz) if n_points > 0 else np.zeros(0)
    is_ground = np.abs(heights) <= ground.inlier_threshold
    component_id = np.full(n_points, -1, dtype=np.int64)

    ground_component = 0 if np.any(is_ground) else -1
    next_id = 0
    if ground_component == 0:
        component_id[is_ground] = 0
        next_id = 1

    rest = np.flatnonzero(~is_ground)
    if len(rest) > 0:
        rest_xyz = xyz[rest]
        edges = adaptive_edges(rest_xyz, np.linalg.norm(rest_xyz, axis=1), cfg)
        graph = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(len(rest), len(rest)))
        _, labels = connected_components(graph, directed=False)
        component_id[rest] = dense_first_seen(labels) + next_id
        logger.info(f"cluster_components: {len(rest)} non-ground points, {len(edges)} edges, "
                    f"{labels.max() + 1} components")

    num_components = int(component_id.max()) + 1 if n_points > 0 else 0
    stats = component_stats(xyz, component_id, num_components)
    return ComponentMap(component_id, stats, ground_component, heights)


@typechecked
def assign_prior_categories(component_map: ComponentMap, cfg: CategoryConfig) -> ComponentMap:
    stats = component_map.stats
    num_components = component_map.num_components
    if component_map.heights is None:
        high_points = np.zeros(num_components, dtype=np.int64)
    else:
        tall = component_map.heights >= cfg.car_min_height
        assigned = component_map.component_id >= 0
        high_points = np.bincount(component_map.component_id[tall & assigned], minlength=num_components)

    car_long, car_short, car_height = cfg.car_box
    categories = []
    for k, row in stats.iterrows():
        horizontal = sorted((row['extent_x'], row['extent_y']), reverse=True)
        fits_car_box = horizontal[0] <= car_long and horizontal[1] <= car_short and row['extent_z'] <= car_height
        if k == component_map.ground_component:
            categories.append('ground')
        elif fits_car_box and high_points[k] >= cfg.car_min_points:
            categories.append('car')
        elif row['extent_z'] >= cfg.wall_min_height or row['eig_2'] >= cfg.wall_min_spread:
            categories.append('wall')
        else:
            categories.append(taxonomy.UNKNOWN)

    counts = pd.Series(categories, dtype=str).value_counts().to_dict()
    logger.info(f"assign_prior_categories: {counts}")
    return ComponentMap(component_map.component_id, stats, component_map.ground_component,
                        component_map.heights, categories)


def presegment(cloud, run_config) -> tuple[GroundModel, ComponentMap]:
    """ fit_ground -> cluster_components -> assign_prior_categories with RunConfig values """
    ground = fit_ground(cloud, RansacConfig.from_run_config(run_config))
    component_map = cluster_components(cloud, ground, ClusterConfig.from_run_config(run_config))
    return ground, assign_prior_categories(component_map, CategoryConfig.from_run_config(run_config))


def write_component_map(path, component_map: ComponentMap):
    """ int32 per point, plus <path>.csv with one row of category and stats per component """
    with open(path, 'wb') as map_file:
        map_file.write(component_map.component_id.astype('<i4').tobytes())
    component_map.category_table().to_csv(f"{path}.csv", index=False)


def read_component_map(path, n_points=None) -> ComponentMap:
    with open(path, 'rb') as map_file:
        payload = map_file.read()
    if len(payload) % 4 != 0:
        msg = f"component map {path} is {len(payload)} bytes, not a multiple of 4"
        raise FormatError(msg)
    component_id = np.frombuffer(payload, dtype='<i4').astype(np.int64)
    if n_points is not None and len(component_id) != n_points:
        msg = f"component map {path}: expected {n_points} records, found {len(component_id)}"
        raise FormatError(msg)
    sidecar = f"{path}.csv"
    if not os.path.exists(sidecar):
        msg = f"component map {path} has no sidecar {sidecar}"
        raise FormatError(msg)
    table = pd.read_csv(sidecar, dtype=component_stats_column_types, keep_default_na=False)
    categories = list(table.pop('category'))
    if len(component_id) > 0 and component_id.max() >= len(table):
        msg = f"component map {path} refers to component {component_id.max()} but sidecar lists {len(table)}"
        raise ShapeError(msg)
    ground = categories.index('ground') if 'ground' in categories else -1
    return ComponentMap(component_id, table, ground, None, categories)
