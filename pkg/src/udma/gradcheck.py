""" gradcheck.py
    Finite-difference verification of every training loss, composed
    through the full model on a small 8x8 source/target pair.

    Each loss is rebuilt from scratch on every evaluation (the graph is
    define-by-run), and compared against ad.grad_check on a sample of
    elements from a handful of parameter tensors on both sides of the
    network.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from typeguard import typechecked

from udma import autodiff as ad
from udma import losses
from udma import model as model_lib
from udma import taxonomy
from udma.training import SourceBatch, TargetBatch, category_outputs

logger = logging.getLogger(__name__)

TOY_SIZE = 8

# parameters sampled for every loss; the adversarial losses add the discriminator ones
GENERATOR_CHECKED = ('extractor.enc1.weight', 'extractor.enc2.weight', 'extractor.bottleneck.weight',
                    'extractor.dec2.weight', 'extractor.dec1.weight', 'extractor.dec1.bias',
                    'node_linear.weight', 'node_linear.bias', 'edge_linear.weight', 'edge_linear.bias',
                    'seg.weight', 'seg.bias')
DISCRIMINATOR_CHECKED = ('disc.main.hidden.weight', 'disc.main.output.weight',
                        'disc.car.hidden.weight', 'disc.ground.output.weight', 'disc.wall.hidden.bias')

LOSS_NAMES = ('ce', 'scene_generator', 'scene_discriminator', 'instance_generator',
              'instance_discriminator', 'weak_label', 'fine_tune_car')


@dataclass
class ToyProblem:
    udma_model: model_lib.UDMAModel
    source: SourceBatch
    target: TargetBatch


def toy_model_config() -> model_lib.ModelConfig:
    return model_lib.ModelConfig(feature_dim=4, base_channels=2, knn_k=2, disc_hidden=8, use_ire=True)


def toy_problem(seed, size=TOY_SIZE) -> ToyProblem:
    """ four quadrant instances per domain so every prior category is present on both sides """
    rng = np.random.default_rng(seed)
    half = size // 2
    quadrants = [(slice(0, half), slice(0, half)), (slice(0, half), slice(half, size)),
                 (slice(half, size), slice(0, half)), (slice(half, size), slice(half, size))]

    labels = np.empty((size, size), dtype=np.int64)
    for quadrant, class_id in zip(quadrants, (taxonomy.ROAD, taxonomy.BUILDING, taxonomy.CAR, taxonomy.VEGETATION)):
        labels[quadrant] = class_id
    labels[0, 0] = taxonomy.IGNORE_ID
    source_input = rng.normal(size=(3, size, size))
    source = SourceBatch(source_input, labels, model_lib.source_node_masks(labels),
                         losses.PriorPixelSets.from_labels(labels))

    component_image = np.empty((size, size), dtype=np.int64)
    for component, quadrant in enumerate(quadrants):
        component_image[quadrant] = component
    valid = np.ones((size, size), dtype=bool)
    valid[-1, -1] = False
    component_image[~valid] = -1
    category_of_component = np.array([taxonomy.CATEGORY_CODES[name] for name in ('ground', 'wall', 'car', 'unknown')])
    codes = np.where(valid, category_of_component[np.maximum(component_image, 0)], taxonomy.CATEGORY_CODES['unknown'])
    target = TargetBatch(rng.normal(size=(3, size, size)), valid,
                         model_lib.target_node_masks(component_image, valid),
                         losses.PriorPixelSets.from_category_codes(codes, valid))

    udma_model = model_lib.UDMAModel(toy_model_config(), seed=seed)
    # random biases so no relu sits exactly at its kink
    for name, tensor in udma_model.named_parameters().items():
        if name.endswith('bias'):
            tensor.data[...] = rng.normal(0.0, 0.1, size=tensor.shape)
    return ToyProblem(udma_model, source, target)


def loss_function(problem: ToyProblem, loss_name):
    """ closure rebuilding loss_name from the model's current parameter values """
    udma_model, source, target = problem.udma_model, problem.source, problem.target
    main = udma_model.discriminators['main']

    def scene_pair():
        source_out = udma_model.forward(source.network_input, source.node_masks)
        target_out = udma_model.forward(target.network_input, target.node_masks)
        return losses.scene_adv_losses(model_lib.discriminate(target_out.features, target.valid, main),
                                       model_lib.discriminate(source_out.features, source.valid, main))

    def instance_pair():
        source_out = udma_model.forward(source.network_input, source.node_masks)
        target_out = udma_model.forward(target.network_input, target.node_masks)
        return losses.instance_adv_losses(category_outputs(udma_model, source_out.features, source.priors),
                                          category_outputs(udma_model, target_out.features, target.priors))

    def weak_label():
        out = udma_model.forward(target.network_input, target.node_masks)
        return losses.weak_label_loss(out.probabilities, target.priors.masks['ground'], 'ground') \
            + losses.weak_label_loss(out.probabilities, target.priors.masks['wall'], 'wall')

    def fine_tune_car():
        out = udma_model.forward(target.network_input, target.node_masks)
        car_labels = np.where(target.priors.masks['car'], taxonomy.CAR, taxonomy.IGNORE_ID)
        return losses.ce_loss(out.probabilities, car_labels)

    def ce():
        out = udma_model.forward(source.network_input, source.node_masks)
        return losses.ce_loss(out.probabilities, source.labels)

    table = {
        'ce': ce,
        'scene_generator': lambda: scene_pair()[0],
        'scene_discriminator': lambda: scene_pair()[1],
        'instance_generator': lambda: instance_pair()[0],
        'instance_discriminator': lambda: instance_pair()[1],
        'weak_label': weak_label,
        'fine_tune_car': fine_tune_car,
    }
    build = table[loss_name]
    return lambda _x: build()


def checked_parameters(loss_name) -> tuple[str, ...]:
    if loss_name.startswith(('scene', 'instance')):
        return GENERATOR_CHECKED + DISCRIMINATOR_CHECKED
    return GENERATOR_CHECKED


@typechecked
def check_losses(seed: int, h: float = 1e-5, tol: float = 1e-4, max_elements: int = 4,
                 loss_names: tuple | list = LOSS_NAMES) -> pd.DataFrame:
    """ one row per (loss, parameter) with the grad_check report fields """
    problem = toy_problem(seed)
    named = problem.udma_model.named_parameters()
    rng = np.random.default_rng(seed)
    rows = []
    for loss_name in loss_names:
        f = loss_function(problem, loss_name)
        for parameter_name in checked_parameters(loss_name):
            report = ad.grad_check(f, named[parameter_name], h=h, tol=tol, max_elements=max_elements, rng=rng)
            problem.udma_model.zero_grad()
            rows.append({'seed': seed, 'loss': loss_name, 'parameter': parameter_name,
                         'max_rel_error': report.max_rel_error, 'n_checked': report.n_checked,
                         'kink_retries': report.kink_retries, 'n_failed': report.n_failed,
                         'passed': report.passed})
            if not report.passed:
                logger.warning(f"gradcheck {loss_name} / {parameter_name} seed {seed}: "
                               f"relative error {report.max_rel_error:.3g} at {report.worst_index}")
    return pd.DataFrame(rows)


def run_grad_checks(seeds, h=1e-5, tol=1e-4, max_elements=4) -> pd.DataFrame:
    frames = [check_losses(int(seed), h, tol, max_elements) for seed in seeds]
    results_df = pd.concat(frames, ignore_index=True)
    logger.info(f"gradcheck: {len(results_df)} checks over {len(frames)} seeds, "
                f"{int((~results_df['passed']).sum())} failed")
    return results_df


def summarize(results_df: pd.DataFrame) -> pd.DataFrame:
    """ per loss: worst relative error, elements checked, retries, failing elements, pass """
    return results_df.groupby('loss', sort=False).agg(
        max_rel_error=('max_rel_error', 'max'),
        n_checked=('n_checked', 'sum'),
        kink_retries=('kink_retries', 'sum'),
        n_failed=('n_failed', 'sum'),
        passed=('passed', 'all'),
    ).reset_index()
