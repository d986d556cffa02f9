""" losses.py
    Training objectives as autodiff expressions.

    ce_loss              -sum over labeled pixels of log p(true class), averaged unless literal_sum
    scene_adv_losses     generator -log D(T); discriminator -log D(S) - log(1 - D(T))
    instance_adv_losses  the same per prior category, gated by presence on each side
    weak_label_loss      -(1/n_e) sum log(1 - forbidden probability mass)

    Every log has a 1e-12 floor; clamps are counted in diagnostics.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from udma import autodiff as ad
from udma import taxonomy
from udma.errors import EmptyCategoryError, NumericError, ShapeError

logger = logging.getLogger(__name__)

P_MIN = 1e-12


@dataclass
class WeakLabelSpec:
    allowed: dict = field(default_factory=lambda: {
        'ground': frozenset(taxonomy.PRIOR_CATEGORIES['ground']),
        'wall': frozenset(taxonomy.PRIOR_CATEGORIES['wall']),
    })

    def forbidden_row(self, category) -> np.ndarray:
        row = np.ones((1, taxonomy.NUM_CLASSES))
        row[0, sorted(self.allowed[category])] = 0.0
        return row


@dataclass
class PriorPixelSets:
    """ per prior category, the pixels carrying that tag; y = 1 iff nonempty """
    masks: dict

    def __post_init__(self):
        names = list(self.masks)
        for i, first in enumerate(names):
            for second in names[i + 1:]:
                if np.any(self.masks[first] & self.masks[second]):
                    msg = f"prior pixel sets {first} and {second} overlap"
                    raise ShapeError(msg)

    def present(self, category) -> bool:
        return bool(np.any(self.masks.get(category, False)))

    def flags(self) -> dict[str, int]:
        return {category: int(self.present(category)) for category in taxonomy.PRIOR_NAMES}

    @classmethod
    def from_category_codes(cls, codes, valid):
        """ target side: pixel category codes from pre-segmentation """
        codes, valid = np.asarray(codes), np.asarray(valid, dtype=bool)
        return cls({name: valid & (codes == taxonomy.CATEGORY_CODES[name]) for name in taxonomy.PRIOR_NAMES})

    @classmethod
    def from_labels(cls, labels):
        """ source side: ground-truth classes mapped through the prior categories """
        codes = taxonomy.DEFAULT_TAXONOMY.class_to_category_table()[np.asarray(labels)]
        return cls({name: codes == taxonomy.CATEGORY_CODES[name] for name in taxonomy.PRIOR_NAMES})


def zero() -> ad.Tensor:
    return ad.Tensor(0.0)


def picked_probabilities(probabilities: ad.Tensor, labels, mask) -> tuple[ad.Tensor, int]:
    """ p(labels) at every pixel of mask whose label is not ignore: (n,) and n """
    labels = np.asarray(labels)
    if labels.shape != probabilities.shape[1:]:
        msg = f"labels {labels.shape} do not match probabilities {probabilities.shape}"
        raise ShapeError(msg)
    mask = (labels != taxonomy.IGNORE_ID) & (labels >= 0) & np.asarray(mask, dtype=bool)
    count = int(np.count_nonzero(mask))
    if count == 0:
        return None, 0
    num_classes = probabilities.shape[0]
    one_hot = np.zeros((num_classes, count))
    one_hot[labels[mask], np.arange(count)] = 1.0
    picked = ad.mul(ad.gather_mask(probabilities, mask), one_hot)            # (C, n)
    return ad.reshape(ad.matmul(np.ones((1, num_classes)), picked), (count,)), count


def ce_loss(probabilities: ad.Tensor, labels, valid=None, literal_sum=False) -> ad.Tensor:
    """ pixels labeled ignore or outside valid are excluded; no labeled pixels -> 0 """
    if valid is None:
        valid = np.ones(probabilities.shape[1:], dtype=bool)
    picked, count = picked_probabilities(probabilities, labels, valid)
    if count == 0:
        return zero()
    log_picked = ad.log(picked, floor=P_MIN, name='ce_log')
    scale = -1.0 if literal_sum else -1.0 / count
    return ad.total(log_picked) * scale


def check_probability(name, value):
    value = float(value.item() if isinstance(value, ad.Tensor) else value)
    if not (0.0 < value < 1.0):
        msg = f"{name} output {value} is outside (0, 1)"
        logger.error(msg)
        raise NumericError(msg)


def scene_adv_losses(d_target: ad.Tensor, d_source: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """ (L_gen, L_disc); D is read as P(source), so the generator wants D(T) -> 1 """
    check_probability('scene discriminator (target)', d_target)
    check_probability('scene discriminator (source)', d_source)
    generator = -ad.log(d_target, floor=P_MIN, name='adv_log')
    discriminator = -ad.log(d_source, floor=P_MIN, name='adv_log') \
        - ad.log(1.0 - d_target, floor=P_MIN, name='adv_log')
    return generator, discriminator


def instance_adv_losses(d_source: dict, d_target: dict) -> tuple[ad.Tensor, ad.Tensor]:
    """ d_source / d_target map category -> D^e output, None when the category
        is absent on that side (y = 0); absent terms contribute nothing
    """
    generator, discriminator = zero(), zero()
    for category in taxonomy.PRIOR_NAMES:
        source_out = d_source.get(category)
        target_out = d_target.get(category)
        if source_out is not None:
            check_probability(f"{category} discriminator (source)", source_out)
            discriminator = discriminator - ad.log(source_out, floor=P_MIN, name='adv_log')
        if target_out is not None:
            check_probability(f"{category} discriminator (target)", target_out)
            generator = generator - ad.log(target_out, floor=P_MIN, name='adv_log')
            discriminator = discriminator - ad.log(1.0 - target_out, floor=P_MIN, name='adv_log')
    return generator, discriminator


def scene_adversarial_objective(d_target, d_source) -> float:
    """ the undivided scene objective, for bookkeeping """
    return -math.log(d_source) - math.log(d_target) - math.log(1.0 - d_target)


def instance_adversarial_objective(d_source: dict, d_target: dict) -> float:
    """ the undivided per-category objective, for bookkeeping """
    value = 0.0
    for category in taxonomy.PRIOR_NAMES:
        y_source = 0 if d_source.get(category) is None else 1
        y_target = 0 if d_target.get(category) is None else 1
        if y_source:
            value -= y_source * math.log(d_source[category])
        if y_target:
            value -= y_target * (math.log(d_target[category]) + math.log(1.0 - d_target[category]))
    return value


def weak_label_loss(probabilities: ad.Tensor, pixel_mask, category, spec: WeakLabelSpec = None) -> ad.Tensor:
    spec = spec if spec is not None else WeakLabelSpec()
    pixel_mask = np.asarray(pixel_mask, dtype=bool)
    count = int(np.count_nonzero(pixel_mask))
    if count == 0:
        msg = f"weak label loss for {category} has no pixels"
        raise EmptyCategoryError(msg)
    gathered = ad.gather_mask(probabilities, pixel_mask)                       # (C, n)
    forbidden_mass = ad.matmul(spec.forbidden_row(category), gathered)         # (1, n)
    kept = ad.log(1.0 - forbidden_mass, floor=P_MIN, name='weak_log')
    return ad.total(kept) * (-1.0 / count)
