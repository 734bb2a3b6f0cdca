"""Command line front end.

Five subcommands cover the workflow: ``search`` runs the relaxed
architecture search, ``evaluate`` retrains a searched genotype from
scratch, ``ablate`` sweeps a study grid, ``verify`` runs the oracle
battery, and ``convert`` packs a directory of raw images into the
binary dataset container.

Exit codes: 0 on success, 1 when a run fails at runtime, 2 for usage
or configuration errors.
"""

import argparse
import sys

from . import harness
from .autodiff import NonFiniteError
from .config import ConfigError, load_config
from .search_space import GenotypeError


def _add_common(sub, mode_lambda: bool = True):
    sub.add_argument("--config", metavar="PATH", default=None,
                     help="INI settings file (defaults are used when omitted)")
    sub.add_argument("--seed", type=int, default=None,
                     help="override run.seed")
    sub.add_argument("--out", metavar="DIR", default=None,
                     help="output directory (default runs/<command>)")
    if mode_lambda:
        sub.add_argument("--mode", choices=("first", "second"), default=None,
                         help="hypergradient order, overrides run.mode")
        sub.add_argument("--lambda", dest="lam", type=float, default=None,
                         metavar="LAM", help="override weighting.lambda")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trinas",
        description="architecture search with class-weighted synthetic "
                    "examples")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("search", help="run the relaxed search")
    _add_common(p)

    p = subs.add_parser("evaluate",
                        help="retrain a genotype from scratch and report "
                             "held-out accuracy")
    p.add_argument("genotype", metavar="GENOTYPE", help="genotype text file")
    _add_common(p, mode_lambda=False)
    p.add_argument("--force", action="store_true",
                   help="evaluate even if the genotype was searched over a "
                        "different op set")

    p = subs.add_parser("ablate", help="sweep a study grid over seeds")
    p.add_argument("--study", choices=harness.STUDIES,
                   default="lambda_sweep")
    _add_common(p)

    subs.add_parser("verify", help="run the gradient and hypergradient "
                                   "oracle checks")

    p = subs.add_parser("convert",
                        help="pack class-per-subdirectory images into the "
                             "binary container")
    p.add_argument("src", metavar="DIR",
                   help="directory with one subdirectory per class "
                        "(.npy or .pgm files)")
    p.add_argument("--out", metavar="PATH", required=True,
                   help="output container path")
    return parser


def _overrides(args) -> dict:
    over = {}
    if args.seed is not None:
        over["run.seed"] = str(args.seed)
    if getattr(args, "mode", None) is not None:
        over["run.mode"] = args.mode
    if getattr(args, "lam", None) is not None:
        over["weighting.lambda"] = repr(args.lam)
    return over


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = args.out if getattr(args, "out", None) else f"runs/{args.command}"
    try:
        if args.command == "verify":
            return harness.cmd_verify(log=print)
        if args.command == "convert":
            harness.convert_directory(args.src, args.out, log=print)
            return 0

        cfg = load_config(args.config, overrides=_overrides(args))
        if args.command == "search":
            rep = harness.cmd_search(cfg, out, log=print)
            print(f"searched {rep.details['iterations']} iterations in "
                  f"{rep.wall_clock:.1f}s, supernet val accuracy "
                  f"{rep.details['sup_val_accuracy']:.4f}")
            print(f"genotype   {rep.genotype_path}")
            print(f"metrics    {rep.metrics_path}")
            print(f"checkpoint {rep.checkpoint_path}")
            return 0
        if args.command == "evaluate":
            rep = harness.cmd_evaluate(args.genotype, cfg, out,
                                       force=args.force, log=print)
            d = rep.details
            print(f"retrained in {rep.wall_clock:.1f}s: "
                  f"{d['num_params']} parameters, "
                  f"train accuracy {d['train_accuracy']:.4f}, "
                  f"test accuracy {d['test_accuracy']:.4f} "
                  f"(error {d['test_error']:.4f})")
            print(f"metrics    {rep.metrics_path}")
            print(f"checkpoint {rep.checkpoint_path}")
            return 0
        if args.command == "ablate":
            rep = harness.cmd_ablate(cfg, args.study, out, log=print)
            for row in rep.details["summary"]:
                print(f"{row['point']}: mean test error "
                      f"{row['mean_test_err']:.4f} "
                      f"(std {row['std_test_err']:.4f}, "
                      f"{row['runs_ok']} runs)")
            print(f"summary    {rep.metrics_path}")
            print(f"plot       {rep.details['plot_path']}")
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (GenotypeError, harness.CheckpointError, NonFiniteError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
