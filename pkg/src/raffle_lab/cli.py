"""Command-line entry point.

Exit codes: 0 success, 2 exploration budget exhausted, 3 configuration
error, 4 verification failure.
"""

import argparse
import json
import logging
import sys

from .exceptions import ConfigurationError
from .experiment import load_config, run, run_replearn, write_json
from .hard_instances import HardInstanceParams, build_perturbed, build_reference, enumerate_family
from .verify import SUITES, run_suite

EXIT_OK, EXIT_BUDGET, EXIT_CONFIG, EXIT_VERIFY = 0, 2, 3, 4


def _index(text):
    try:
        parts = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("index must be h,l,a") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("index must be h,l,a")
    return parts


def build_parser():
    parser = argparse.ArgumentParser(prog="raffle-lab", description="Reward-free exploration experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="explore, plan and evaluate one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--beta3", type=float)
    p.add_argument("--bonus-scale", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("hard-instance", help="write a hard-instance member or the family manifest")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--actions", type=int, required=True)
    p.add_argument("--epsilon0", type=float, required=True)
    p.add_argument("--h-bar", type=int)
    p.add_argument("--index", type=_index, help="h,l,a of the member; omit for the manifest")
    p.add_argument("--out", required=True)

    p = sub.add_parser("replearn", help="representation learning for a configuration")
    p.add_argument("--config", required=True)

    p = sub.add_parser("verify", help="run a property-check suite")
    p.add_argument("suite", choices=sorted(SUITES) + ["all"])
    return parser


def _summary(record):
    payload = {"terminated": record.terminated, "n_epsilon": record.n_epsilon, "metrics": record.metrics}
    if record.replearn is not None:
        payload["divergence_scores"] = record.replearn["divergence_scores"]
    return json.dumps(payload, indent=2)


def _cmd_run(args):
    config = load_config(args.config).with_overrides(
        epsilon=args.epsilon,
        delta=args.delta,
        beta3=args.beta3,
        bonus_scale=args.bonus_scale,
        max_iterations=args.max_iter,
        seed=args.seed,
    )
    record = run(config)
    print(_summary(record))
    return EXIT_OK if record.terminated else EXIT_BUDGET


def _cmd_replearn(args):
    record = run_replearn(load_config(args.config))
    print(_summary(record))
    return EXIT_OK if record.terminated else EXIT_BUDGET


def _cmd_hard_instance(args):
    try:
        params = HardInstanceParams(args.horizon, args.depth, args.actions, args.epsilon0, args.h_bar)
        if args.index is None:
            ref = build_reference(params)
            payload = {"reference": ref.to_dict(), "family": [list(i) for i in enumerate_family(params)]}
        else:
            payload = build_perturbed(params, *args.index).to_dict()
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    write_json(args.out, payload)
    return EXIT_OK


def _cmd_verify(args):
    failed = False
    for suite, results in run_suite(args.suite).items():
        for r in results:
            failed |= not r.passed
            print(f"[{'PASS' if r.passed else 'FAIL'}] {suite}: {r.name}" + (f" ({r.detail})" if r.detail else ""))
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {"run": _cmd_run, "hard-instance": _cmd_hard_instance, "replearn": _cmd_replearn, "verify": _cmd_verify}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
