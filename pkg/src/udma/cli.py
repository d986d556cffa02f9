""" cli.py
    The udma command line.

        python3 -m udma.cli synth      -g run.conf -o data
        python3 -m udma.cli preseg     scan.bin -o scan.components
        python3 -m udma.cli project    scan.bin -o scan.range --png scan.pgm
        python3 -m udma.cli train      -g run.conf -c model.ckpt -m metrics.jsonl
        python3 -m udma.cli eval       --truth scan.label --pred pred.label
        python3 -m udma.cli eval       --checkpoint model.ckpt --target data/target --json
        python3 -m udma.cli gradcheck  --seeds 20
        python3 -m udma.cli viz        scan.range -o scan.png
        python3 -m udma.cli experiment -g experiment.conf -o output/experiment

    Exit status: 0 success, 1 bad input or usage, 2 runtime or numeric failure.
"""
import argparse
import json
import logging
import math
import os
import sys

from udma import config as config_lib
from udma import dataio
from udma import datasets
from udma import evaluation
from udma import experiment
from udma import gradcheck
from udma import model as model_lib
from udma import preseg
from udma import training
from udma import viz
from udma.errors import UDMAError, ValidationError
from udma.projection import ProjectionConfig, build_range_image, load_range_image, save_range_image

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageParser(argparse.ArgumentParser):
    """ argparse exits 2 on a usage error; this tool reserves 2 for runtime failures """

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_VALIDATION)


def load_run_config(path) -> config_lib.RunConfig:
    return dataio.load_config(path) if path else config_lib.default_config()


def print_table(rows_df):
    print(rows_df.to_string(index=False))


def do_synth(args, run_config):
    counts = datasets.write_synthetic_dataset(args.out, run_config)
    print(f"wrote {counts['target']} target scans and {counts['source']} source samples under {args.out}")


def do_preseg(args, run_config):
    cloud = dataio.read_scan(args.scan)
    ground, component_map = preseg.presegment(cloud, run_config)
    out = args.out if args.out else f"{datasets.stem(args.scan)}.components"
    preseg.write_component_map(out, component_map)
    categories = component_map.category_table()['category'].value_counts()
    print(f"{len(cloud)} points, {component_map.num_components} components, "
          f"ground tilt {math.degrees(ground.tilt()):.2f} deg -> {out}")
    for category, count in categories.items():
        print(f"    {category}: {count}")


def do_project(args, run_config):
    cloud = dataio.read_scan(args.scan)
    if args.components:
        component_map = preseg.read_component_map(args.components, len(cloud))
    else:
        _, component_map = preseg.presegment(cloud, run_config)
    image = build_range_image(cloud, component_map, ProjectionConfig.from_run_config(run_config))
    out = args.out if args.out else f"{datasets.stem(args.scan)}.range"
    save_range_image(out, image)
    print(f"{int(image.valid.sum())} of {image.valid.size} pixels filled -> {out}")
    if args.png:
        viz.save_range_raster(args.png, image)


def do_train(args, run_config):
    source_batches = datasets.load_source_batches(args.source or run_config['source_root'], run_config)
    target_batches, _ = datasets.load_target_batches(args.target or run_config['target_root'], run_config)
    train_cfg = training.TrainConfig.from_run_config(run_config)
    udma_model = model_lib.UDMAModel(model_lib.ModelConfig.from_run_config(run_config), seed=run_config['seed'])
    state = training.train(udma_model, source_batches, target_batches, train_cfg)
    train_history = [{'stage': 'train', **record} for record in state.history]
    state = training.fine_tune(udma_model, target_batches, train_cfg)
    history = train_history + [{'stage': 'fine_tune', **record} for record in state.history]
    model_lib.save_checkpoint(args.checkpoint, udma_model)
    if args.metrics:
        training.write_metrics_log(args.metrics, history)
    print(f"trained {train_cfg.train_steps} + {train_cfg.fine_tune_steps} steps -> {args.checkpoint}")


def evaluate_label_files(args, run_config) -> evaluation.ConfusionMatrix:
    n_points = os.path.getsize(args.truth) // dataio.LABEL_DTYPE.itemsize
    label_map = run_config.label_map_dict()
    truth = dataio.read_labels(args.truth, n_points, label_map)
    pred = dataio.read_labels(args.pred, n_points, label_map)
    return evaluation.accumulate(evaluation.ConfusionMatrix(), truth, pred)


def evaluate_checkpoint(args, run_config) -> evaluation.ConfusionMatrix:
    udma_model = model_lib.load_checkpoint(args.checkpoint)
    processed = datasets.process_directory(args.target or run_config['target_root'], run_config)
    return datasets.evaluate_processed(udma_model, processed, run_config)


def do_eval(args, run_config):
    if args.checkpoint:
        cm = evaluate_checkpoint(args, run_config)
    elif args.truth and args.pred:
        cm = evaluate_label_files(args, run_config)
    else:
        msg = "eval needs --checkpoint, or both --truth and --pred"
        raise ValidationError(msg)
    table_df = evaluation.per_class_table(cm)
    _, mean_iou = evaluation.miou(cm)
    excluded = table_df.loc[~table_df['present'], 'class'].tolist()
    if args.json:
        records = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}
                   for row in table_df.astype(object).to_dict('records')]
        print(json.dumps({'miou': mean_iou, 'points': cm.total(), 'excluded': excluded, 'classes': records}))
        return
    print_table(table_df)
    print(f"mIoU {mean_iou:.4f} over {cm.total()} points")
    if excluded:
        print(f"excluded (no points): {', '.join(excluded)}")


def do_gradcheck(args, run_config):
    results_df = gradcheck.run_grad_checks(range(args.seed, args.seed + args.seeds), args.h, args.tol,
                                           args.elements)
    summary_df = gradcheck.summarize(results_df)
    print_table(summary_df)
    if not summary_df['passed'].all():
        failed = summary_df.loc[~summary_df['passed'], 'loss'].tolist()
        logger.error(f"gradient check failed for {failed} at tolerance {args.tol}")
        return EXIT_RUNTIME
    return EXIT_OK


def do_viz(args, run_config):
    image = load_range_image(args.range_image)
    viz.save_range_raster(args.out, image)
    if args.labels:
        if not args.color_out:
            msg = "--labels needs --color-out"
            raise ValidationError(msg)
        n_points = os.path.getsize(args.labels) // dataio.LABEL_DTYPE.itemsize
        point_labels = dataio.read_labels(args.labels, n_points, run_config.label_map_dict())
        viz.save_label_image(args.color_out, image.pixel_labels(point_labels))
    print(f"{image.shape[1]}x{image.shape[0]} -> {args.out}")


def do_experiment(args, run_config):
    summary_df = experiment.run_experiment(run_config, args.out)
    print(experiment.format_summary(summary_df))


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog='udma', description="label-free LiDAR segmentation by image to range image adaptation")
    parser.add_argument('-v', '--verbose', action='store_true', help="log progress (INFO)")
    parser.add_argument('--debug', action='store_true', help="log everything (DEBUG)")
    commands = parser.add_subparsers(dest='command', required=True, metavar='command')

    def command(name, handler, help_text):
        sub = commands.add_parser(name, help=help_text, description=help_text)
        sub.add_argument('-g', '--config', default='', help="run configuration file (key = value lines)")
        sub.set_defaults(handler=handler)
        return sub

    sub = command('synth', do_synth, "write a synthetic two-domain dataset")
    sub.add_argument('-o', '--out', default='data', help="output root, gets target/ and source/")

    sub = command('preseg', do_preseg, "pre-segment one scan into ground and components")
    sub.add_argument('scan', help=".bin scan")
    sub.add_argument('-o', '--out', default='', help="component map path, default <scan>.components")

    sub = command('project', do_project, "project one scan into a range image")
    sub.add_argument('scan', help=".bin scan")
    sub.add_argument('-o', '--out', default='', help="range image path, default <scan>.range")
    sub.add_argument('--components', default='', help="component map from preseg, else pre-segment now")
    sub.add_argument('--png', default='', help="also write a grayscale range picture (.png or .pgm)")

    sub = command('train', do_train, "adversarial training then weak-label fine-tuning")
    sub.add_argument('-c', '--checkpoint', required=True, help="checkpoint to write")
    sub.add_argument('-m', '--metrics', default='', help="per-step metrics log, one JSON record per line")
    sub.add_argument('--source', default='', help="source directory, default source_root")
    sub.add_argument('--target', default='', help="target directory, default target_root")

    sub = command('eval', do_eval, "per-class IoU and mIoU")
    sub.add_argument('--truth', default='', help="ground-truth label file")
    sub.add_argument('--pred', default='', help="predicted label file")
    sub.add_argument('--checkpoint', default='', help="predict every labeled scan of --target with this model")
    sub.add_argument('--target', default='', help="target directory, default target_root")
    sub.add_argument('--json', action='store_true', help="one JSON object instead of a table")

    sub = command('gradcheck', do_gradcheck, "finite-difference check of every loss through the model")
    sub.add_argument('--seeds', type=int, default=20, help="number of seeds")
    sub.add_argument('--seed', type=int, default=0, help="first seed")
    sub.add_argument('--h', type=float, default=1e-5, help="central difference step")
    sub.add_argument('--tol', type=float, default=1e-4, help="largest accepted relative error")
    sub.add_argument('--elements', type=int, default=4, help="elements sampled per parameter tensor")

    sub = command('viz', do_viz, "write a range image as a picture")
    sub.add_argument('range_image', help=".range file from project")
    sub.add_argument('-o', '--out', required=True, help="output picture (.pgm or .png)")
    sub.add_argument('--labels', default='', help="per-point label file of the projected scan")
    sub.add_argument('--color-out', default='', help="class-colored picture (.ppm or .png)")

    sub = command('experiment', do_experiment, "desk-scale adaptation experiment with ablations")
    sub.add_argument('-o', '--out', default='output/experiment', help="directory for metrics.jsonl and summary.csv")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        return exit_request.code if isinstance(exit_request.code, int) else EXIT_VALIDATION
    if args.debug:
        logging.getLogger('udma').setLevel(logging.DEBUG)
    elif args.verbose:
        logging.getLogger('udma').setLevel(logging.INFO)
    try:
        run_config = load_run_config(args.config)
        return_code = args.handler(args, run_config)
        return EXIT_OK if return_code is None else return_code
    except ValidationError as error:
        logger.error(f"{args.command}: {error}")
        return EXIT_VALIDATION
    except (OSError, UDMAError) as error:
        logger.error(f"{args.command}: {type(error).__name__}: {error}")
        return EXIT_RUNTIME
    except ValueError as error:
        # pandas and numpy parse failures, e.g. a non-numeric cell in label_map_file
        logger.error(f"{args.command}: {type(error).__name__}: {error}")
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
