""" training.py
    Alternating adversarial training and the weak-label fine-tuning stage.

    One step takes one source sample and one target scan:
      generator      SGD on  lambda_ce * CE(source) + lambda_sa * L_gen_SA + lambda_ia * L_gen_IA
      discriminator  Adam on L_disc_SA + L_disc_IA, on the generator pass's features, detached
    Each side's optimizer only ever touches its own parameters.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from typeguard import typechecked

from udma import autodiff as ad
from udma import diagnostics
from udma import losses
from udma import model as model_lib
from udma import taxonomy
from udma.dataio import SourceSample
from udma.errors import NumericError, ShapeError
from udma.projection import RangeImage

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_ce: float = 1.0
    lambda_sa: float = 0.001
    lambda_ia: float = 0.001
    lambda_car: float = 1.0
    ce_literal_sum: bool = False
    use_sa: bool = True
    use_ia: bool = True
    lr_generator: float = 2.5e-4
    lr_discriminator: float = 1e-4
    lr_fine_tune: float = 2.5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    train_steps: int = 500
    fine_tune_steps: int = 200
    seed: int = 0

    @classmethod
    def from_run_config(cls, cfg):
        return cls(**{name: cfg[name] for name in cls.__dataclass_fields__})


@dataclass
class SourceBatch:
    network_input: np.ndarray
    labels: np.ndarray
    node_masks: np.ndarray
    priors: losses.PriorPixelSets

    @property
    def valid(self) -> np.ndarray:
        return self.labels != taxonomy.IGNORE_ID

    @classmethod
    def from_sample(cls, sample: SourceSample):
        return cls(sample.network_input(), sample.labels, model_lib.source_node_masks(sample.labels),
                   losses.PriorPixelSets.from_labels(sample.labels))


@dataclass
class TargetBatch:
    network_input: np.ndarray
    valid: np.ndarray
    node_masks: np.ndarray
    priors: losses.PriorPixelSets
    labels: np.ndarray | None = None     # evaluation only, never read by a training step

    @classmethod
    def from_range_image(cls, image: RangeImage, categories, range_scale=1.0, point_labels=None):
        codes = image.pixel_categories(categories)
        labels = None if point_labels is None else image.pixel_labels(point_labels)
        return cls(image.network_input(range_scale), image.valid.copy(),
                   model_lib.target_node_masks(image.component_id, image.valid),
                   losses.PriorPixelSets.from_category_codes(codes, image.valid), labels)


class SGD:
    def __init__(self, params: dict, lr):
        self.params = params
        self.lr = lr
        self.steps = 0

    def step(self):
        sgd_update(self.params, {name: p.grad for name, p in self.params.items()}, self.lr)
        self.steps += 1


class Adam:
    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.steps = 0

    def step(self):
        adam_update(self.params, {name: p.grad for name, p in self.params.items()}, self)


def check_grad_shapes(params, grads):
    for name, tensor in params.items():
        if name not in grads or grads[name] is None or np.shape(grads[name]) != tensor.shape:
            shape = None if grads.get(name) is None else np.shape(grads[name])
            msg = f"gradient for {name} has shape {shape}, parameter has {tensor.shape}"
            raise ShapeError(msg)


def sgd_update(params: dict, grads: dict, lr):
    """ p <- p - lr * g, in place """
    check_grad_shapes(params, grads)
    for name, tensor in params.items():
        tensor.data -= lr * grads[name]


def adam_update(params: dict, grads: dict, state: Adam):
    """ bias-corrected Adam, in place; state holds the moment buffers and step count """
    check_grad_shapes(params, grads)
    state.steps += 1
    correction1 = 1.0 - state.beta1 ** state.steps
    correction2 = 1.0 - state.beta2 ** state.steps
    for name, tensor in params.items():
        if state.m[name].shape != tensor.shape:
            msg = f"Adam moments for {name} have shape {state.m[name].shape}, parameter has {tensor.shape}"
            raise ShapeError(msg)
        grad = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        tensor.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class OptimizerState:
    generator: SGD
    discriminator: Adam
    steps: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def for_model(cls, udma_model, cfg: TrainConfig, lr_generator=None):
        lr_generator = cfg.lr_generator if lr_generator is None else lr_generator
        return cls(SGD(udma_model.generator_parameters(), lr_generator),
                   Adam(udma_model.discriminator_parameters(), cfg.lr_discriminator,
                        cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps))


def grad_norm(params: dict) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values())))


def zero_grads(params: dict):
    for tensor in params.values():
        tensor.zero_grad()


def category_outputs(udma_model, features, priors) -> dict:
    return {category: model_lib.discriminate(features, priors.masks[category], udma_model.discriminators[category])
            for category in taxonomy.PRIOR_NAMES}


def value_or_none(outputs: dict) -> dict:
    return {k: (None if v is None else v.item()) for k, v in outputs.items()}


def abort_with_diagnostics(stage, step, error, state):
    logger.error(f"{stage} step {step} aborted: {error}")
    logger.error(f"    (cont.) clamp counters {diagnostics.get_clamp_counts()}")
    logger.error(f"    (cont.) generator grad norm {grad_norm(state.generator.params):.6g}, "
                 f"discriminator grad norm {grad_norm(state.discriminator.params):.6g}")


@typechecked
def train_step(udma_model: model_lib.UDMAModel, source: SourceBatch, target: TargetBatch | None,
               state: OptimizerState, cfg: TrainConfig) -> dict:
    try:
        return _train_step(udma_model, source, target, state, cfg)
    except NumericError as error:
        abort_with_diagnostics('train', state.steps, error, state)
        raise


def _train_step(udma_model, source, target, state, cfg) -> dict:
    generator_params = state.generator.params
    discriminator_params = state.discriminator.params
    zero_grads(generator_params)
    zero_grads(discriminator_params)

    # generator
    source_out = udma_model.forward(source.network_input, source.node_masks)
    ce = losses.ce_loss(source_out.probabilities, source.labels, literal_sum=cfg.ce_literal_sum)
    generator_loss = ce * cfg.lambda_ce
    metrics = {'step': state.steps, 'loss_ce': ce.item()}

    target_out = None
    if cfg.use_sa or cfg.use_ia:
        target_out = udma_model.forward(target.network_input, target.node_masks)

    scene_target = scene_source = None
    if cfg.use_sa:
        scene_target = model_lib.discriminate(target_out.features, target.valid, udma_model.discriminators['main'])
        scene_source = model_lib.discriminate(source_out.features, source.valid, udma_model.discriminators['main'])
    if scene_target is not None and scene_source is not None:
        sa_gen, _ = losses.scene_adv_losses(scene_target, scene_source)
        if cfg.lambda_sa > 0:
            generator_loss = generator_loss + sa_gen * cfg.lambda_sa
        metrics['sa_gen'] = sa_gen.item()

    if cfg.use_ia:
        ia_gen, _ = losses.instance_adv_losses({}, category_outputs(udma_model, target_out.features, target.priors))
        if cfg.lambda_ia > 0:
            generator_loss = generator_loss + ia_gen * cfg.lambda_ia
        metrics['ia_gen'] = ia_gen.item()

    metrics['loss_generator'] = generator_loss.item()
    ad.backward(generator_loss)
    metrics['grad_norm_generator'] = grad_norm(generator_params)
    state.generator.step()

    # discriminators, on the same features with the generator cut off
    zero_grads(discriminator_params)
    discriminator_loss = losses.zero()
    if target_out is not None:
        source_features = source_out.features.detach()
        target_features = target_out.features.detach()
        if 'sa_gen' in metrics:
            d_target = model_lib.discriminate(target_features, target.valid, udma_model.discriminators['main'])
            d_source = model_lib.discriminate(source_features, source.valid, udma_model.discriminators['main'])
            _, sa_disc = losses.scene_adv_losses(d_target, d_source)
            discriminator_loss = discriminator_loss + sa_disc
            metrics['sa_disc'] = sa_disc.item()
            metrics['d_main_source'] = d_source.item()
            metrics['d_main_target'] = d_target.item()
            metrics['scene_objective'] = losses.scene_adversarial_objective(d_target.item(), d_source.item())
        if cfg.use_ia:
            source_outputs = category_outputs(udma_model, source_features, source.priors)
            target_outputs = category_outputs(udma_model, target_features, target.priors)
            _, ia_disc = losses.instance_adv_losses(source_outputs, target_outputs)
            discriminator_loss = discriminator_loss + ia_disc
            metrics['ia_disc'] = ia_disc.item()
            metrics['instance_objective'] = losses.instance_adversarial_objective(
                value_or_none(source_outputs), value_or_none(target_outputs))
            for category, flag in source.priors.flags().items():
                metrics[f"y_source_{category}"] = flag
            for category, flag in target.priors.flags().items():
                metrics[f"y_target_{category}"] = flag

    metrics['loss_discriminator'] = discriminator_loss.item()
    if discriminator_loss.requires_grad:
        ad.backward(discriminator_loss)
        metrics['grad_norm_discriminator'] = grad_norm(discriminator_params)
        state.discriminator.step()
    metrics['clamps'] = diagnostics.get_total_clamps()
    state.steps += 1
    state.history.append(metrics)
    logger.debug(f"train step {metrics}")
    return metrics


@typechecked
def fine_tune_step(udma_model: model_lib.UDMAModel, target: TargetBatch, priors: losses.PriorPixelSets,
                   state: OptimizerState, cfg: TrainConfig) -> dict:
    """ weak labels on ground and wall pixels, lambda_car * CE toward car on car pixels;
        absent categories are skipped
    """
    try:
        return _fine_tune_step(udma_model, target, priors, state, cfg)
    except NumericError as error:
        abort_with_diagnostics('fine-tune', state.steps, error, state)
        raise


def _fine_tune_step(udma_model, target, priors, state, cfg) -> dict:
    generator_params = state.generator.params
    zero_grads(generator_params)
    out = udma_model.forward(target.network_input, target.node_masks)
    total = losses.zero()
    metrics = {'step': state.steps}
    for category in ('ground', 'wall'):
        if priors.present(category):
            term = losses.weak_label_loss(out.probabilities, priors.masks[category], category)
            total = total + term
            metrics[f"weak_{category}"] = term.item()
    if priors.present('car'):
        car_labels = np.where(priors.masks['car'], taxonomy.CAR, taxonomy.IGNORE_ID)
        term = losses.ce_loss(out.probabilities, car_labels, literal_sum=cfg.ce_literal_sum)
        total = total + term * cfg.lambda_car
        metrics['ce_car'] = term.item()
    metrics['loss_fine_tune'] = total.item()
    if total.requires_grad:
        ad.backward(total)
        metrics['grad_norm_generator'] = grad_norm(generator_params)
        state.generator.step()
    metrics['clamps'] = diagnostics.get_total_clamps()
    state.steps += 1
    state.history.append(metrics)
    return metrics


def epoch_order(rng, count, steps) -> np.ndarray:
    """ indices for steps draws: concatenated seeded permutations of range(count) """
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    epochs = -(-steps // count)
    return np.concatenate([rng.permutation(count) for _ in range(max(epochs, 1))])[:steps]


def train(udma_model, source_batches, target_batches, cfg: TrainConfig, state=None) -> OptimizerState:
    state = state if state is not None else OptimizerState.for_model(udma_model, cfg)
    if cfg.train_steps == 0:
        return state
    if not source_batches or ((cfg.use_sa or cfg.use_ia) and not target_batches):
        msg = f"training needs data, got {len(source_batches)} source and {len(target_batches)} target batches"
        raise ShapeError(msg)
    rng = np.random.default_rng(cfg.seed)
    source_order = epoch_order(rng, len(source_batches), cfg.train_steps)
    target_order = epoch_order(rng, len(target_batches), cfg.train_steps)
    for step in range(cfg.train_steps):
        target = target_batches[target_order[step]] if len(target_order) else None
        metrics = train_step(udma_model, source_batches[source_order[step]], target, state, cfg)
        if step % 50 == 0 or step == cfg.train_steps - 1:
            logger.info(f"train step {step}: ce {metrics['loss_ce']:.4f} "
                        f"generator {metrics['loss_generator']:.4f} discriminator {metrics['loss_discriminator']:.4f}")
    return state


def fine_tune(udma_model, target_batches, cfg: TrainConfig, state=None) -> OptimizerState:
    """ fine-tuning runs its own SGD at lr_fine_tune unless a state is passed in """
    state = state if state is not None else OptimizerState.for_model(udma_model, cfg, cfg.lr_fine_tune)
    if cfg.fine_tune_steps == 0 or not target_batches:
        return state
    rng = np.random.default_rng(cfg.seed + 1)
    order = epoch_order(rng, len(target_batches), cfg.fine_tune_steps)
    for step in range(cfg.fine_tune_steps):
        target = target_batches[order[step]]
        metrics = fine_tune_step(udma_model, target, target.priors, state, cfg)
        if step % 50 == 0 or step == cfg.fine_tune_steps - 1:
            logger.info(f"fine-tune step {step}: loss {metrics['loss_fine_tune']:.4f}")
    return state


def write_metrics_log(path, history):
    """ one JSON record per step """
    pd.DataFrame(history).to_json(path, orient='records', lines=True)
