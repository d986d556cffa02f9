""" dataio.py
    Readers and writers for the on-disk formats, and the two data
    contracts every other module consumes: PointCloud and SourceSample.

    Scan file:   little-endian float32 records (x, y, z, i), 16 bytes each
    Label file:  little-endian uint32 per point, lower 16 bits semantic id
    Source file: 16-byte header of little-endian int32 (magic, H, W, channels)
                 followed by H*W*channels float32 values, row-major (H, W, channels).
                 Its labels use the label-file convention, one record per pixel.

    Everything read is promoted to float64 / int64.
"""
import logging
import os
from dataclasses import dataclass

import numpy as np
from typeguard import typechecked

from udma import config
from udma import taxonomy
from udma.errors import FormatError, LabelRangeError, ShapeError

logger = logging.getLogger(__name__)

SCAN_DTYPE = np.dtype('<f4')
LABEL_DTYPE = np.dtype('<u4')
HEADER_DTYPE = np.dtype('<i4')
SCAN_RECORD_BYTES = 4 * SCAN_DTYPE.itemsize
SOURCE_MAGIC = int.from_bytes(b'UDMS', 'little')


@dataclass
class PointCloud:
    points: np.ndarray              # (N, 4) x, y, z, i
    labels: np.ndarray | None = None  # (N,) train ids, IGNORE_ID allowed

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(self.points)):
            bad = int(np.count_nonzero(~np.isfinite(self.points).all(axis=1)))
            msg = f"point cloud has {bad} points with non-finite values"
            raise FormatError(msg)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                msg = f"point cloud has {len(self.points)} points but {len(self.labels)} labels"
                raise ShapeError(msg)
            check_label_ids(self.labels, "point cloud labels")

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.xyz, axis=1)

    def subset(self, index):
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.points[index], labels)


@dataclass
class SourceSample:
    image: np.ndarray   # (H, W, 3)
    labels: np.ndarray  # (H, W) train ids, IGNORE_ID allowed

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            msg = f"source image must be (H, W, 3), got {self.image.shape}"
            raise ShapeError(msg)
        if self.labels.shape != self.image.shape[:2]:
            msg = f"source labels {self.labels.shape} do not match image {self.image.shape[:2]}"
            raise ShapeError(msg)
        check_label_ids(self.labels, "source labels")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def network_input(self) -> np.ndarray:
        """ channels first, (3, H, W) """
        return np.ascontiguousarray(self.image.transpose(2, 0, 1))


def check_label_ids(labels, what):
    bad = (labels < 0) | (labels > taxonomy.IGNORE_ID)
    if np.any(bad):
        msg = (f"{what}: {int(np.count_nonzero(bad))} ids outside [0, {taxonomy.NUM_CLASSES}) "
               f"and not ignore ({taxonomy.IGNORE_ID}), first is {int(labels[bad].flat[0])}")
        raise LabelRangeError(msg)


@typechecked
def read_scan(path: str | os.PathLike) -> PointCloud:
    with open(path, 'rb') as scan_file:
        payload = scan_file.read()
    if len(payload) % SCAN_RECORD_BYTES != 0:
        msg = f"scan {path} is {len(payload)} bytes, not a multiple of {SCAN_RECORD_BYTES}"
        raise FormatError(msg)
    points = np.frombuffer(payload, dtype=SCAN_DTYPE).astype(np.float64).reshape(-1, 4)
    logger.info(f"read_scan {path} {len(points)} points")
    return PointCloud(points)


@typechecked
def write_scan(path: str | os.PathLike, cloud: PointCloud):
    with open(path, 'wb') as scan_file:
        scan_file.write(cloud.points.astype(SCAN_DTYPE).tobytes())


@typechecked
def read_labels(path: str | os.PathLike, n_points: int, label_map: dict | None = None) -> np.ndarray:
    """ Reads raw labels and maps the lower 16 bits through label_map.
        Raw ids missing from the map come back as IGNORE_ID.
    """
    if label_map is None:
        label_map = taxonomy.DEFAULT_LABEL_MAP
    with open(path, 'rb') as label_file:
        payload = label_file.read()
    if len(payload) % LABEL_DTYPE.itemsize != 0:
        msg = f"label file {path} is {len(payload)} bytes, not a multiple of {LABEL_DTYPE.itemsize}"
        raise FormatError(msg)
    raw = np.frombuffer(payload, dtype=LABEL_DTYPE)
    if len(raw) != n_points:
        msg = f"label file {path}: expected {n_points} records, found {len(raw)}"
        raise FormatError(msg)
    table = taxonomy.build_lookup_table(label_map)
    train_ids = table[raw & 0xFFFF]
    unmapped = int(np.count_nonzero(train_ids == taxonomy.IGNORE_ID))
    if unmapped > 0:
        logger.info(f"read_labels {path}: {unmapped} of {n_points} points map to ignore")
    return train_ids


@typechecked
def write_labels(path: str | os.PathLike, train_ids: np.ndarray):
    """ writes train ids as raw ids (one representative per class); ignore becomes "unlabeled" """
    raw = np.full(len(train_ids), taxonomy.RAW_IGNORE, dtype=LABEL_DTYPE)
    for train_id, raw_id in taxonomy.TRAIN_TO_RAW.items():
        raw[np.asarray(train_ids) == train_id] = raw_id
    with open(path, 'wb') as label_file:
        label_file.write(raw.tobytes())


@typechecked
def read_source_sample(image_path: str | os.PathLike, label_path: str | os.PathLike,
                       label_map: dict | None = None) -> SourceSample:
    with open(image_path, 'rb') as image_file:
        payload = image_file.read()
    header_bytes = 4 * HEADER_DTYPE.itemsize
    if len(payload) < header_bytes:
        msg = f"source image {image_path} is {len(payload)} bytes, shorter than its {header_bytes}-byte header"
        raise FormatError(msg)
    magic, height, width, channels = (int(v) for v in np.frombuffer(payload[:header_bytes], dtype=HEADER_DTYPE))
    if magic != SOURCE_MAGIC:
        msg = f"source image {image_path} has magic {magic:#x}, expected {SOURCE_MAGIC:#x}"
        raise FormatError(msg)
    if channels != 3 or height < 1 or width < 1:
        msg = f"source image {image_path} header has H={height} W={width} channels={channels}"
        raise FormatError(msg)
    expected = header_bytes + height * width * channels * SCAN_DTYPE.itemsize
    if len(payload) != expected:
        msg = f"source image {image_path} is {len(payload)} bytes, header implies {expected}"
        raise FormatError(msg)
    image = np.frombuffer(payload[header_bytes:], dtype=SCAN_DTYPE).astype(np.float64)
    image = image.reshape(height, width, channels)
    labels = read_labels(label_path, height * width, label_map).reshape(height, width)
    return SourceSample(image, labels)


@typechecked
def write_source_sample(image_path: str | os.PathLike, label_path: str | os.PathLike, sample: SourceSample):
    header = np.array([SOURCE_MAGIC, sample.height, sample.width, 3], dtype=HEADER_DTYPE)
    with open(image_path, 'wb') as image_file:
        image_file.write(header.tobytes())
        image_file.write(sample.image.astype(SCAN_DTYPE).tobytes())
    write_labels(label_path, sample.labels.reshape(-1))


@typechecked
def load_config(path: str | os.PathLike) -> config.RunConfig:
    with open(path, 'r', encoding='utf-8') as config_file:
        text = config_file.read()
    return config.parse_config_text(text, str(path))
