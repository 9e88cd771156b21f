"""actionimage command line.

Exit codes: 0 success, 1 invalid config or arguments, 2 unreadable data,
3 numeric failure (diverged training or a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from actionimage import run
from actionimage.ingest import ParseError
from actionimage.net import NumericError
from actionimage.png import PNGError
from actionimage.skeleton import ConfigError, UnsupportedInputError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _run_config(args) -> run.RunConfig:
    cfg = run.RunConfig.load(args.config)
    over = {
        "out_dir": args.out,
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": getattr(args, "seed", None),
        "mapping": getattr(args, "mapping", None),
        "mask": getattr(args, "mask", None),
        "stats": getattr(args, "stats", None),
    }
    return cfg.override(**over)


def _synth(args):
    print(run.cmd_synth(_run_config(args)))


def _stats(args):
    print(run.cmd_stats(_run_config(args)))


def _encode(args):
    res = run.cmd_encode(_run_config(args))
    print(f"wrote {res.written} image(s), index {res.index_path}")
    for path, msg in res.failures:
        print(f"failed: {path}: {msg}", file=sys.stderr)
    return EXIT_DATA if res.failures else EXIT_OK


def _augment(args):
    print(run.cmd_augment(_run_config(args)))


def _train(args):
    res = run.cmd_train(_run_config(args), resume=args.resume)
    if res.history:
        last = res.history[-1]
        print(f"epoch {last['epoch']} loss {last['loss']:.4f} "
              f"train_acc {last['train_acc']:.3f} test_acc {last.get('test_acc', float('nan')):.3f}")
    print(res.checkpoint)


def _eval(args):
    rep = run.cmd_eval(args.checkpoint, manifest=args.manifest, split=args.split, out_dir=args.out)
    print(json.dumps({"accuracy": rep.accuracy, "per_class_accuracy": rep.per_class_accuracy}))


def _gradcheck(args):
    rep = run.cmd_gradcheck(args.precision, h=args.h, tolerance=args.tolerance,
                            n_params=args.params, seed=args.seed)
    print(rep.summary())
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="actionimage", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("config", help="run config (JSON)")
        sp.add_argument("--out", help=f"output directory (default: config, then ${run.OUT_ENV})")
        sp.set_defaults(fn=fn)
        return sp

    with_config("synth", _synth, "write the synthetic dataset and its manifest")
    with_config("stats", _stats, "global min/max of the train split")
    sp = with_config("encode", _encode, "encode every sequence to a PNG action image")
    sp.add_argument("--mapping", choices=["proposed", "baseline"])
    sp.add_argument("--mask", help="channels to keep, e.g. xy")
    sp.add_argument("--stats", help="stats file for the baseline mapping")
    with_config("augment", _augment, "write the expanded train split")
    sp = with_config("train", _train, "train the multi-scale network")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--mapping", choices=["proposed", "baseline"])
    sp.add_argument("--mask")
    sp.add_argument("--stats")
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--manifest", help="dataset manifest (default: the training data source)")
    sp.add_argument("--split", default="test", choices=["train", "test"])
    sp.add_argument("--out", help="report directory (default: <run out_dir>/eval)")
    sp.set_defaults(fn=_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the default network")
    sp.add_argument("--precision", choices=["double", "single"], default="double")
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--params", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args) or EXIT_OK
    except (ConfigError, UnsupportedInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (run.DataError, ParseError, PNGError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
