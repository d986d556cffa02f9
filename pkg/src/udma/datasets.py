""" datasets.py
    The dataset layer: walks directories of scans and source samples, runs
    pre-segmentation and projection per scan, and turns the results into
    training batches. Also the inference path from a raw scan to per-point
    predictions.

    Directory convention:
        <target_root>/<name>.bin     scan
        <target_root>/<name>.label   labels, optional, used only for evaluation
        <source_root>/<name>.img     source image
        <source_root>/<name>.label   source labels
"""
import argparse
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from udma import dataio
from udma import evaluation
from udma import preseg
from udma import synth
from udma import config as config_lib
from udma.errors import FormatError
from udma.model import UDMAModel
from udma.projection import ProjectionConfig, RangeImage, build_range_image, save_range_image, unproject_labels
from udma.training import SourceBatch, TargetBatch

logger = logging.getLogger(__name__)

SCAN_SUFFIX = '.bin'
LABEL_SUFFIX = '.label'
SOURCE_SUFFIX = '.img'
TARGET_DOMAIN, SOURCE_DOMAIN = 1, 2


@dataclass
class ProcessedScan:
    name: str
    cloud: dataio.PointCloud
    ground: preseg.GroundModel
    components: preseg.ComponentMap
    image: RangeImage

    def target_batch(self, run_config) -> TargetBatch:
        return TargetBatch.from_range_image(self.image, self.components.categories,
                                            run_config['input_range_scale'], self.cloud.labels)


def scene_seed(run_seed, domain, index) -> int:
    """ independent, reproducible seed per (run seed, domain, sample index) """
    return int(np.random.SeedSequence([run_seed, domain, index]).generate_state(1)[0])


def list_files(directory, suffix) -> list[str]:
    if not os.path.isdir(directory):
        msg = f"dataset directory {directory} does not exist"
        raise FileNotFoundError(msg)
    return sorted(os.path.join(directory, f) for f in os.listdir(directory)
                  if f.endswith(suffix) and os.path.isfile(os.path.join(directory, f)))


def stem(path) -> str:
    return os.path.splitext(path)[0]


def process_cloud(name, cloud, run_config) -> ProcessedScan:
    ground, components = preseg.presegment(cloud, run_config)
    image = build_range_image(cloud, components, ProjectionConfig.from_run_config(run_config))
    return ProcessedScan(name, cloud, ground, components, image)


def process_file(scan_path, run_config, label_map=None) -> ProcessedScan:
    """ read -> pre-segment -> project one scan; labels are attached when a .label file sits next to it """
    cloud = dataio.read_scan(scan_path)
    label_path = stem(scan_path) + LABEL_SUFFIX
    if os.path.exists(label_path):
        label_map = label_map if label_map is not None else run_config.label_map_dict()
        cloud = dataio.PointCloud(cloud.points, dataio.read_labels(label_path, len(cloud), label_map))
    return process_cloud(os.path.basename(stem(scan_path)), cloud, run_config)


def write_outputs(processed: ProcessedScan, out_dir):
    """ component map (+ sidecar CSV) and range image next to each other under out_dir """
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, processed.name)
    preseg.write_component_map(f"{base}.components", processed.components)
    save_range_image(f"{base}.range", processed.image)


def process_directory(directory, run_config, out_dir=None, limit=0, skip=0) -> list[ProcessedScan]:
    label_map = run_config.label_map_dict()
    processed = []
    scan_paths = list_files(directory, SCAN_SUFFIX)[skip:]
    if limit > 0:
        scan_paths = scan_paths[:limit]
    for count, scan_path in enumerate(scan_paths):
        logger.info(f"PROCESSING {count} {os.path.basename(scan_path)}")
        result = process_file(scan_path, run_config, label_map)
        if out_dir is not None:
            write_outputs(result, out_dir)
        processed.append(result)
    summary_df = pd.DataFrame([{'scan': p.name, 'points': len(p.cloud),
                                'components': p.components.num_components,
                                'valid_pixels': int(p.image.valid.sum())} for p in processed])
    if out_dir is not None and len(summary_df) > 0:
        summary_df.to_csv(os.path.join(out_dir, 'summary.csv'), index=False)
    return processed


def load_source_batches(directory, run_config) -> list[SourceBatch]:
    label_map = run_config.label_map_dict()
    batches = []
    for image_path in list_files(directory, SOURCE_SUFFIX):
        label_path = stem(image_path) + LABEL_SUFFIX
        if not os.path.exists(label_path):
            msg = f"source image {image_path} has no label file {label_path}"
            raise FormatError(msg)
        batches.append(SourceBatch.from_sample(dataio.read_source_sample(image_path, label_path, label_map)))
    logger.info(f"load_source_batches {directory}: {len(batches)} samples")
    return batches


def load_target_batches(directory, run_config) -> tuple[list[TargetBatch], list[ProcessedScan]]:
    processed = process_directory(directory, run_config)
    return [p.target_batch(run_config) for p in processed], processed


def write_synthetic_dataset(out_root, run_config) -> dict[str, int]:
    """ synth_scans target scans and synth_sources source samples in the dataio formats """
    target_dir = os.path.join(out_root, 'target')
    source_dir = os.path.join(out_root, 'source')
    os.makedirs(target_dir, exist_ok=True)
    os.makedirs(source_dir, exist_ok=True)
    for index in range(run_config['synth_scans']):
        seed = scene_seed(run_config['seed'], TARGET_DOMAIN, index)
        spec = synth.scene_spec_from_config(run_config, seed)
        cloud, _ = synth.generate_scan(spec, seed)
        base = os.path.join(target_dir, f"scan_{index:04d}")
        dataio.write_scan(f"{base}{SCAN_SUFFIX}", cloud)
        dataio.write_labels(f"{base}{LABEL_SUFFIX}", cloud.labels)
    for index in range(run_config['synth_sources']):
        seed = scene_seed(run_config['seed'], SOURCE_DOMAIN, index)
        sample = synth.generate_source(synth.scene_spec_from_config(run_config, seed), seed)
        base = os.path.join(source_dir, f"sample_{index:04d}")
        dataio.write_source_sample(f"{base}{SOURCE_SUFFIX}", f"{base}{LABEL_SUFFIX}", sample)
    logger.info(f"write_synthetic_dataset {out_root}: {run_config['synth_scans']} scans, "
                f"{run_config['synth_sources']} source samples")
    return {'target': run_config['synth_scans'], 'source': run_config['synth_sources']}


def synthetic_batches(run_config, n_source, n_target, offset=0):
    """ in-memory equivalent of write_synthetic_dataset + load, samples offset .. offset + n """
    source_batches = []
    for index in range(offset, offset + n_source):
        seed = scene_seed(run_config['seed'], SOURCE_DOMAIN, index)
        sample = synth.generate_source(synth.scene_spec_from_config(run_config, seed), seed)
        source_batches.append(SourceBatch.from_sample(sample))
    processed = []
    for index in range(offset, offset + n_target):
        seed = scene_seed(run_config['seed'], TARGET_DOMAIN, index)
        cloud, _ = synth.generate_scan(synth.scene_spec_from_config(run_config, seed), seed)
        processed.append(process_cloud(f"scan_{index:04d}", cloud, run_config))
    return source_batches, [p.target_batch(run_config) for p in processed], processed


def predict_processed(udma_model: UDMAModel, processed: ProcessedScan, run_config) -> np.ndarray:
    batch = processed.target_batch(run_config)
    pixel_labels = udma_model.predict(batch.network_input, batch.node_masks)
    return unproject_labels(processed.image, pixel_labels, processed.cloud)


def predict_scan(udma_model: UDMAModel, cloud: dataio.PointCloud, run_config) -> np.ndarray:
    """ scan -> pre-segmentation -> projection -> model -> per-pixel argmax -> per-point labels """
    return predict_processed(udma_model, process_cloud('scan', cloud, run_config), run_config)


def evaluate_processed(udma_model, processed_scans, run_config) -> evaluation.ConfusionMatrix:
    cm = evaluation.ConfusionMatrix()
    for processed in processed_scans:
        if processed.cloud.labels is None:
            logger.warning(f"scan {processed.name} has no labels, skipped in evaluation")
            continue
        evaluation.accumulate(cm, processed.cloud.labels, predict_processed(udma_model, processed, run_config))
    return cm


def main():
    parser = argparse.ArgumentParser(
        prog='udma dataset layer, datasets.py',
        description="pre-segments and projects every scan in a directory, writes component maps and range images")
    parser.add_argument('-d', '--directory', required=True, help="directory of .bin scans")
    parser.add_argument('-g', '--config', default='', help="run configuration file")
    parser.add_argument('-o', '--out', default='output', help="directory for component maps and range images")
    parser.add_argument('-l', '--limit', type=int, default=0, help="max scans to process")
    parser.add_argument('-s', '--skip', type=int, default=0, help="scans to skip before processing")
    args = parser.parse_args()
    run_config = dataio.load_config(args.config) if args.config else config_lib.default_config()
    processed = process_directory(args.directory, run_config, args.out, args.limit, args.skip)
    print(f"processed {len(processed)} scans from {args.directory} into {args.out}")


if __name__ == '__main__':
    main()
