""" taxonomy.py
    The class table shared by every module: six evaluation classes, the
    three prior categories that pre-segmentation can recognize, and the
    raw-id to train-id crosswalk for label files.

    Layout of the prior categories:
        car    -> {car}
        ground -> {road, sidewalk, terrain}
        wall   -> {building, vegetation}
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from typeguard import typechecked

from udma.errors import ConfigError

logger = logging.getLogger(__name__)


CLASS_NAMES = ('road', 'sidewalk', 'building', 'vegetation', 'terrain', 'car')
NUM_CLASSES = len(CLASS_NAMES)
IGNORE_ID = NUM_CLASSES

ROAD, SIDEWALK, BUILDING, VEGETATION, TERRAIN, CAR = range(NUM_CLASSES)

PRIOR_NAMES = ('car', 'ground', 'wall')
UNKNOWN = 'unknown'
CATEGORY_CODES = {'car': 0, 'ground': 1, 'wall': 2, UNKNOWN: 3}

PRIOR_CATEGORIES = {
    'car': frozenset({CAR}),
    'ground': frozenset({ROAD, SIDEWALK, TERRAIN}),
    'wall': frozenset({BUILDING, VEGETATION}),
}

# SemanticKITTI raw ids for the evaluation classes. The 2xx ids are the
# moving-object variants of the same class.
DEFAULT_LABEL_MAP = {
    40: ROAD,
    44: ROAD,       # parking
    48: SIDEWALK,
    50: BUILDING,
    70: VEGETATION,
    71: VEGETATION,  # trunk
    72: TERRAIN,
    10: CAR,
    252: CAR,
}

# inverse used when writing synthetic labels, one raw id per class
TRAIN_TO_RAW = {ROAD: 40, SIDEWALK: 48, BUILDING: 50, VEGETATION: 70, TERRAIN: 72, CAR: 10}
RAW_IGNORE = 0  # "unlabeled"

CLASS_COLORS = {
    ROAD: (255, 0, 255),
    SIDEWALK: (75, 0, 75),
    BUILDING: (255, 200, 0),
    VEGETATION: (0, 175, 0),
    TERRAIN: (150, 240, 80),
    CAR: (100, 150, 245),
    IGNORE_ID: (0, 0, 0),
}


@dataclass(frozen=True)
class ClassTaxonomy:
    classes: tuple = CLASS_NAMES
    prior_categories: dict = field(default_factory=lambda: dict(PRIOR_CATEGORIES))
    ignore_id: int = IGNORE_ID

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_id(self, name) -> int:
        return self.classes.index(name)

    def class_to_category_table(self) -> np.ndarray:
        """ lookup array indexed by class id (ignore included) giving the
            category code, UNKNOWN for ignore
        """
        table = np.full(self.num_classes + 1, CATEGORY_CODES[UNKNOWN], dtype=np.int64)
        for name, members in self.prior_categories.items():
            for class_id in members:
                table[class_id] = CATEGORY_CODES[name]
        return table

    def validate(self):
        for name in ('road', 'sidewalk', 'building', 'vegetation', 'terrain', 'car'):
            if name not in self.classes:
                msg = f"taxonomy is missing evaluation class {name}"
                raise ConfigError(msg)
        if self.ignore_id != len(self.classes):
            msg = f"ignore_id must be {len(self.classes)} (one past the last class), got {self.ignore_id}"
            raise ConfigError(msg)
        seen = set()
        for name, members in self.prior_categories.items():
            if seen & set(members):
                msg = f"prior category {name} overlaps another category on {sorted(seen & set(members))}"
                raise ConfigError(msg)
            seen |= set(members)
        expected = {
            'ground': {self.class_id('road'), self.class_id('sidewalk'), self.class_id('terrain')},
            'wall': {self.class_id('building'), self.class_id('vegetation')},
            'car': {self.class_id('car')},
        }
        for name, members in expected.items():
            if set(self.prior_categories.get(name, ())) != members:
                msg = f"prior category {name} must map to {sorted(members)}, got {self.prior_categories.get(name)}"
                raise ConfigError(msg)
        return self


DEFAULT_TAXONOMY = ClassTaxonomy().validate()


def create_label_map_dict(label_map_df) -> dict[int, int]:
    """ Builds the raw-id -> train-id dictionary from a dataframe with
        columns raw_id and train_id. Train ids outside the class table
        are rejected rather than silently mapped.
    """
    logger.info(f"create_label_map_dict {type(label_map_df)} {len(label_map_df)}")
    label_map = {}
    for _, row in label_map_df.iterrows():
        raw_id = int(row['raw_id'])
        train_id = int(row['train_id'])
        if train_id < 0 or train_id > IGNORE_ID:
            msg = f"label map row raw_id:{raw_id} has train_id:{train_id} outside [0, {IGNORE_ID}]"
            raise ConfigError(msg)
        if raw_id in label_map and label_map[raw_id] != train_id:
            logger.warning(f"label map raw_id:{raw_id} listed twice, keeping {label_map[raw_id]}")
            continue
        label_map[raw_id] = train_id
    return label_map


def read_label_map_csv(path) -> dict[int, int]:
    label_map_df = pd.read_csv(path)
    for column in ('raw_id', 'train_id'):
        if column not in label_map_df.columns:
            msg = f"label map file {path} has no column {column}, columns are {list(label_map_df.columns)}"
            raise ConfigError(msg)
    return create_label_map_dict(label_map_df)


@typechecked
def parse_label_map(text: str) -> dict[int, int]:
    """ parses the config form "40:0, 48:1, ..." """
    label_map = {}
    if text.strip() == '':
        return label_map
    for item in text.split(','):
        item = item.strip()
        if item == '':
            continue
        try:
            raw_text, train_text = item.split(':')
            raw_id, train_id = int(raw_text), int(train_text)
        except ValueError:
            msg = f"label_map entry \"{item}\" is not of the form raw:train"
            raise ConfigError(msg)
        if raw_id < 0 or raw_id > 0xFFFF:
            msg = f"label_map raw id {raw_id} outside [0, 65535]"
            raise ConfigError(msg)
        if train_id < 0 or train_id > IGNORE_ID:
            msg = f"label_map train id {train_id} outside [0, {IGNORE_ID}]"
            raise ConfigError(msg)
        label_map[raw_id] = train_id
    return label_map


def format_label_map(label_map) -> str:
    return ','.join(f"{raw_id}:{train_id}" for raw_id, train_id in sorted(label_map.items()))


def build_lookup_table(label_map, ignore_id=IGNORE_ID) -> np.ndarray:
    """ dense table over every 16-bit semantic id, so remapping is total """
    table = np.full(0x10000, ignore_id, dtype=np.int64)
    for raw_id, train_id in label_map.items():
        table[raw_id & 0xFFFF] = train_id
    return table
