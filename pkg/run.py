import argparse
import logging
import sys

from errors import EXIT_CONFIG, SBAError
from experiment_config import ABLATION_AXES, METHODS, load_config
import Experiments


def build_parser():
    parser = argparse.ArgumentParser(description="Train, evaluate and verify Stiefel-constrained Bayesian adapters.")
    subparsers = parser.add_subparsers(dest='command', title='commands',
                                       description='Available experiment commands',
                                       help='Select a command to execute')

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='JSON config file (default: desk-scale defaults)')
    common.add_argument('--seed', type=int, default=None, help='Run a single seed instead of the config seed list')
    common.add_argument('--out', default="results", help='Output directory (default: results)')
    common.add_argument('--workers', type=int, default=1, help='Worker processes for grids (default: 1)')
    common.add_argument('--format', choices=["json", "csv"], default="json",
                        help='Also write a flattened CSV table with csv (default: json)')

    subparsers.add_parser('train', parents=[common], help='Train the configured method; write checkpoints and traces')

    eval_parser = subparsers.add_parser('eval', parents=[common], help='Evaluate checkpoints on ID, shifted and OOD splits')
    eval_parser.add_argument('--checkpoint', nargs='+', default=None,
                             help='Checkpoint files (default: the train outputs for each config seed)')
    eval_parser.add_argument('--method', choices=METHODS, default=None,
                             help='Which parameter sets to average (default: the checkpoint method)')
    eval_parser.add_argument('--data', default=None, help='Cached dataset CSV written by train')

    ablate_parser = subparsers.add_parser('ablate', parents=[common], help='Run train + eval over one ablation axis')
    ablate_parser.add_argument('axis', choices=ABLATION_AXES)
    ablate_parser.add_argument('--grid', nargs='+', default=None,
                               help='Grid values (default: the config ablation grid for the axis)')

    subparsers.add_parser('klgap', parents=[common], help='KL gap between retracted and projected Gaussians')

    verify_parser = subparsers.add_parser('verify-geometry', parents=[common],
                                          help='Check the polar expansion and tangency identities')
    verify_parser.add_argument('--trials', type=int, default=1000, help='Random probes (default: 1000)')
    verify_parser.add_argument('--corrupt-delta', action='store_true',
                               help='Negative control: drop part of the second-order correction')

    subparsers.add_parser('validate-normalizer', parents=[common],
                          help='Saddle-point versus Monte Carlo Matrix Langevin normalisers')

    distill_parser = subparsers.add_parser('distill', parents=[common],
                                           help='Distill SBA checkpoints into single adapters')
    distill_parser.add_argument('--checkpoint', nargs='+', default=None,
                                help='Teacher sba checkpoints (default: the train outputs for each config seed)')
    return parser


def _grid_values(axis, values):
    if values is None:
        return None
    if axis in ("samples", "rank", "hessian_points"):
        return [int(v) for v in values]
    if axis == "kappa0":
        return [float(v) for v in values]
    return list(values)


def run_command(args):
    config = load_config(args.config, seed_override=args.seed)
    if args.command == 'train':
        return Experiments.cmd_train(config, args.out, args.workers, args.format)
    if args.command == 'eval':
        return Experiments.cmd_eval(config, args.out, args.checkpoint, args.method, args.data, args.workers, args.format)
    if args.command == 'ablate':
        return Experiments.cmd_ablate(config, args.axis, args.out, _grid_values(args.axis, args.grid), args.workers,
                                      args.format)
    if args.command == 'klgap':
        return Experiments.cmd_klgap(config, args.out, args.workers, args.format)
    if args.command == 'verify-geometry':
        seed = args.seed if args.seed is not None else config.seeds[0]
        return Experiments.cmd_verify_geometry(args.out, seed, args.trials, args.corrupt_delta, args.format)
    if args.command == 'validate-normalizer':
        return Experiments.cmd_validate_normalizer(config, args.out, args.workers, args.format)
    return Experiments.cmd_distill(config, args.out, args.checkpoint, args.workers, args.format)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return run_command(args)
    except SBAError as e:
        logging.error(f"[{args.command}] {type(e).__name__}: {e}")
        return e.exit_code
    except ValueError as e:
        logging.error(f"[{args.command}] Invalid input: {e}")
        return EXIT_CONFIG


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    sys.exit(main())
