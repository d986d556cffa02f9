""" experiment.py
    Desk-scale adaptation experiment on the synthetic two-domain dataset.

    Every variant starts from the same initialization and sees the same
    batches in the same order:
        source_only   CE only
        full          CE + scene + instance alignment
        no_sa         without scene alignment
        no_ia         without instance alignment
        no_ire        full objective, node branch off
    The full model is then fine-tuned with weak labels and evaluated again.
    mIoU is per point on held-out target scans; balanced accuracy is that
    of the main discriminator on held-out source/target pairs.
"""
import dataclasses
import logging
import os

import numpy as np
import pandas as pd

from udma import datasets
from udma import diagnostics
from udma import evaluation
from udma import model as model_lib
from udma import taxonomy
from udma import training
from udma.errors import ConfigError

logger = logging.getLogger(__name__)

# variant: (TrainConfig overrides, use_ire)
experiment_variants = {
    'source_only': ({'use_sa': False, 'use_ia': False}, True),
    'full':        ({}, True),
    'no_sa':       ({'use_sa': False}, True),
    'no_ia':       ({'use_ia': False}, True),
    'no_ire':      ({}, False),
}
FINE_TUNED = 'full_fine_tuned'


@dataclasses.dataclass
class ExperimentData:
    source: list
    target: list
    held_source: list
    held_target: list
    held_processed: list


def build_data(run_config) -> ExperimentData:
    source, target, _ = datasets.synthetic_batches(run_config, run_config['synth_sources'],
                                                   run_config['synth_scans'])
    offset = max(run_config['synth_sources'], run_config['synth_scans'])
    n_held = run_config['synth_eval_scans']
    held_source, held_target, held_processed = datasets.synthetic_batches(run_config, n_held, n_held, offset)
    logger.info(f"experiment data: {len(source)} source, {len(target)} target, {n_held} held-out pairs")
    return ExperimentData(source, target, held_source, held_target, held_processed)


def main_discriminator_outputs(udma_model, batches) -> list[float]:
    outputs = []
    for batch in batches:
        out = udma_model.forward(batch.network_input, batch.node_masks)
        score = model_lib.discriminate(out.features, batch.valid, udma_model.discriminators['main'])
        if score is not None:
            outputs.append(score.item())
    return outputs


def score_model(udma_model, data: ExperimentData, run_config) -> dict:
    cm = datasets.evaluate_processed(udma_model, data.held_processed, run_config)
    iou, mean_iou = evaluation.miou(cm)
    row = {'miou': mean_iou}
    row.update({f"iou_{name}": value for name, value in zip(taxonomy.CLASS_NAMES, iou)})
    row['balanced_accuracy'] = evaluation.balanced_accuracy(
        main_discriminator_outputs(udma_model, data.held_source),
        main_discriminator_outputs(udma_model, data.held_target))
    return row


def tag_history(history, variant, stage) -> list[dict]:
    return [{'variant': variant, 'stage': stage, **record} for record in history]


def run_variant(name, run_config, data: ExperimentData):
    overrides, use_ire = experiment_variants[name]
    train_cfg = dataclasses.replace(training.TrainConfig.from_run_config(run_config), **overrides)
    model_cfg = dataclasses.replace(model_lib.ModelConfig.from_run_config(run_config), use_ire=use_ire)
    udma_model = model_lib.UDMAModel(model_cfg, seed=run_config['seed'])
    diagnostics.reset_clamp_counts()
    state = training.train(udma_model, data.source, data.target, train_cfg)
    row = {'variant': name, **score_model(udma_model, data, run_config)}
    logger.info(f"variant {name}: target mIoU {row['miou']:.4f}, "
                f"discriminator balanced accuracy {row['balanced_accuracy']:.3f}")
    return udma_model, state, row


def run_experiment(run_config, out_dir=None, variants=None) -> pd.DataFrame:
    """ one summary row per variant plus the fine-tuned full model;
        variants picks a subset of experiment_variants and must include source_only and full
    """
    variants = list(experiment_variants) if variants is None else list(variants)
    for required in ('source_only', 'full'):
        if required not in variants:
            msg = f"experiment variants {variants} must include {required}"
            raise ConfigError(msg)
    unknown = [name for name in variants if name not in experiment_variants]
    if unknown:
        msg = f"unknown experiment variants {unknown}, expected some of {list(experiment_variants)}"
        raise ConfigError(msg)
    data = build_data(run_config)
    rows, log_records = [], []
    full_model = None
    for name in variants:
        udma_model, state, row = run_variant(name, run_config, data)
        rows.append(row)
        log_records.extend(tag_history(state.history, name, 'train'))
        if name == 'full':
            full_model = udma_model

    train_cfg = training.TrainConfig.from_run_config(run_config)
    diagnostics.reset_clamp_counts()
    state = training.fine_tune(full_model, data.target, train_cfg)
    log_records.extend(tag_history(state.history, FINE_TUNED, 'fine_tune'))
    rows.append({'variant': FINE_TUNED, **score_model(full_model, data, run_config)})

    summary_df = pd.DataFrame(rows)
    baseline = float(summary_df.loc[summary_df['variant'] == 'source_only', 'miou'].iloc[0])
    full = float(summary_df.loc[summary_df['variant'] == 'full', 'miou'].iloc[0])
    summary_df['gain_over_source_only'] = summary_df['miou'] - baseline
    summary_df['gain_over_full'] = summary_df['miou'] - full
    logger.info(f"fine-tuning delta {float(summary_df['gain_over_full'].iloc[-1]):+.4f} mIoU")

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        training.write_metrics_log(os.path.join(out_dir, 'metrics.jsonl'), log_records)
        summary_df.to_csv(os.path.join(out_dir, 'summary.csv'), index=False)
    return summary_df


def format_summary(summary_df: pd.DataFrame) -> str:
    columns = ['variant', 'miou', 'gain_over_source_only', 'balanced_accuracy']
    return summary_df[columns].to_string(index=False, float_format=lambda v: f"{v:.4f}" if np.isfinite(v) else "nan")
