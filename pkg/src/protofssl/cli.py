"""Command line entry point: ``protofssl {run,gen-data,cost}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import cost
from .data import save_dataset, synth_blobs
from .errors import ConfigurationError, DatasetFormatError, NonFiniteError, SizingError
from .experiment import ExperimentConfig, apply_overrides, final_accuracy, load_config, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("protofssl")


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        apply_overrides(cfg, _parse_set(args.set))
        cfg.validate()
    except ConfigurationError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        records = run_experiment(cfg)
    except NonFiniteError as exc:
        log.error("numeric blow-up in round %s: %s", exc.round, exc)
        return EXIT_NUMERIC
    except (ConfigurationError, DatasetFormatError, SizingError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{len(records) - 1} rounds, final test accuracy {final_accuracy(records):.4f}, "
          f"metrics in {cfg.out_dir}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        ds = synth_blobs(args.classes, args.samples, args.dim, args.separation, seed=args.seed,
                         cluster_std=args.cluster_std, nuisance_std=args.nuisance_std)
    except ConfigurationError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    path = save_dataset(ds, args.out, stem=args.name)
    print(path)
    return EXIT_OK


def cmd_cost(args) -> int:
    p = cost.table2_params()
    arch = {"resnet8": cost.RESNET8, "resnet9": cost.RESNET9}[args.arch]
    overrides = {
        "F": args.flops if args.flops is not None else cost.forward_flops(arch, args.input_hw),
        "theta_bytes": (args.theta_bytes if args.theta_bytes is not None
                        else cost.BYTES_PER_REAL * cost.param_count(arch)),
    }
    for name in ("proto_bytes", "n_labeled", "n_unlabeled", "epochs", "augmentations", "helpers",
                 "n_classes", "helper_interval"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    try:
        p = p.with_(**overrides)
    except ValueError as exc:
        print(f"invalid cost parameters: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(json.dumps({"params": p.__dict__, "rows": cost.cost_table(p)}, indent=2))
    else:
        print(f"{arch.name}: {cost.param_count(arch):,} parameters, F = {p.F:.4g} FLOPs/sample")
        print(cost.format_cost_table(p))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protofssl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one federated experiment")
    run.add_argument("--config", help="JSON config file")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory")
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="dotted-key override, e.g. rounds.helper_count=2 (repeatable)")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen-data", help="write a synthetic blob dataset as manifest + binaries")
    gen.add_argument("--out", required=True)
    gen.add_argument("--name", default="data")
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--samples", type=int, default=10000)
    gen.add_argument("--dim", type=int, default=16)
    gen.add_argument("--separation", type=float, default=4.0)
    gen.add_argument("--cluster-std", type=float, default=1.0)
    gen.add_argument("--nuisance-std", type=float, default=4.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("cost", help="per-client per-round cost report (defaults: ResNet9 / CIFAR-10)")
    c.add_argument("--arch", choices=["resnet8", "resnet9"], default="resnet9")
    c.add_argument("--input-hw", type=int, default=32)
    c.add_argument("--flops", type=float, help="override F (FLOPs per sample)")
    c.add_argument("--theta-bytes", type=float)
    c.add_argument("--proto-bytes", type=float)
    c.add_argument("--n-labeled", type=int)
    c.add_argument("--n-unlabeled", type=int)
    c.add_argument("--epochs", type=int)
    c.add_argument("--augmentations", type=int)
    c.add_argument("--helpers", type=int)
    c.add_argument("--n-classes", type=int)
    c.add_argument("--helper-interval", type=int)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
