""" viz.py
    Raster output for range images and label maps.

    Grayscale range: 8-bit, range normalized by the image's max range,
    empty pixels black. Label maps: RGB from taxonomy.CLASS_COLORS.
    The file format follows the extension: .pgm / .ppm (portable pixmap)
    or .png. Images are U wide and V high.
"""
import logging
import os

import numpy as np
from PIL import Image

from udma import taxonomy
from udma.errors import ConfigError, LabelRangeError
from udma.projection import RangeImage

logger = logging.getLogger(__name__)

RASTER_FORMATS = {'.pgm': 'PPM', '.ppm': 'PPM', '.png': 'PNG'}


def raster_format(path) -> str:
    extension = os.path.splitext(str(path))[1].lower()
    if extension not in RASTER_FORMATS:
        msg = f"unsupported image extension '{extension}' for {path}, expected one of {sorted(RASTER_FORMATS)}"
        raise ConfigError(msg)
    return RASTER_FORMATS[extension]


def range_to_gray(image: RangeImage) -> np.ndarray:
    """ (V, U) uint8 """
    ranges = np.where(image.valid, image.range, 0.0)
    peak = ranges.max() if ranges.size else 0.0
    if peak <= 0:
        return np.zeros(ranges.shape, dtype=np.uint8)
    return np.round(255.0 * ranges / peak).astype(np.uint8)


def labels_to_rgb(labels) -> np.ndarray:
    """ (V, U) class ids -> (V, U, 3) uint8 """
    labels = np.asarray(labels, dtype=np.int64)
    palette = np.zeros((taxonomy.IGNORE_ID + 1, 3), dtype=np.uint8)
    for class_id, color in taxonomy.CLASS_COLORS.items():
        palette[class_id] = color
    bad = (labels < 0) | (labels > taxonomy.IGNORE_ID)
    if np.any(bad):
        msg = f"label id {int(labels[bad][0])} has no color"
        raise LabelRangeError(msg)
    return palette[labels]


def save_gray(path, gray: np.ndarray):
    Image.fromarray(np.ascontiguousarray(gray, dtype=np.uint8)).save(path, format=raster_format(path))
    logger.info(f"wrote {gray.shape[1]}x{gray.shape[0]} grayscale image {path}")


def save_rgb(path, rgb: np.ndarray):
    fmt = raster_format(path)
    if fmt == 'PPM' and str(path).lower().endswith('.pgm'):
        msg = f"color image {path} needs a .ppm or .png extension"
        raise ConfigError(msg)
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format=fmt)
    logger.info(f"wrote {rgb.shape[1]}x{rgb.shape[0]} color image {path}")


def save_range_raster(path, image: RangeImage):
    save_gray(path, range_to_gray(image))


def save_label_image(path, labels):
    save_rgb(path, labels_to_rgb(labels))
