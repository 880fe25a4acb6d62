"""Command-line entry point: ``chaoscal {gen-data,train,estimate,evaluate,heatmap}``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config
from .dynamics import IntegrationError
from .enki import EnkiError
from .nn import GradientError
from .storage import FormatError
from .training import TrainingError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("chaoscal")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration (defaults to the desk-scale L96 setup)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
    p.add_argument("--out", default="runs/default", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("pair must look like '1,2'") from exc
    return a, b


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chaoscal", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate and filter a train/test dataset")
    _common(p)
    p.add_argument("--split", choices=("train", "test", "both"), default="both")

    p = sub.add_parser("train", help="train encoder, head and emulator")
    _common(p)

    p = sub.add_parser("estimate", help="estimate parameters for the test set")
    _common(p)
    p.add_argument("--mode", choices=pipeline.MODES, required=True)
    p.add_argument("--checkpoint", help="model checkpoint (defaults to OUT/model.ckpt)")
    p.add_argument("--limit", type=int, help="only the first N accepted test instances")

    p = sub.add_parser("evaluate", help="MAPE/MdAPE/CRPS report for an estimate file")
    _common(p)
    p.add_argument("--mode", choices=pipeline.MODES, required=True)

    p = sub.add_parser("heatmap", help="objective values over a 2-D parameter grid")
    _common(p)
    p.add_argument("--objective", choices=("moment", "emulator"), required=True)
    p.add_argument("--pair", type=_pair, required=True, help="free component indices, e.g. 1,2")
    p.add_argument("--index", type=int, default=0, help="test instance index")
    p.add_argument("--checkpoint")
    p.add_argument("--resolution", type=int)
    return ap


def run(args: argparse.Namespace) -> None:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    pipeline.configure_threads(args.threads, args.deterministic)
    out = args.out
    ckpt = getattr(args, "checkpoint", None) or f"{out}/model.ckpt"
    if args.command == "gen-data":
        splits = ("train", "test") if args.split == "both" else (args.split,)
        for s in splits:
            ds = pipeline.gen_data(cfg, out, s, seed)
            print(f"{s}: {len(ds.accepted)}/{len(ds.records)} accepted")
    elif args.command == "train":
        def progress(rec):
            log.info("epoch %d total %.4f val_mape %.2f", rec["epoch"], rec["total"], rec["val_mape"])

        res = pipeline.cmd_train(cfg, out, seed, progress)["result"]
        print(f"best epoch {res.best_epoch}: validation MAPE {res.best_val:.2f}% (untrained {res.initial_val:.2f}%)")
    elif args.command == "estimate":
        indices = None
        if args.limit is not None:
            indices = [r["index"] for r in pipeline.load_dataset(out, "test").accepted[: args.limit]]
        doc = pipeline.cmd_estimate(cfg, out, args.mode, ckpt, seed, indices)
        print(f"{args.mode}: {len(doc['records'])} estimates")
    elif args.command == "evaluate":
        rep = pipeline.cmd_evaluate(cfg, out, args.mode)["report"]
        for name, m, md in zip(rep.names, rep.mape, rep.mdape):
            print(f"{name}: MAPE {m:.2f}%  MdAPE {md:.2f}%")
    elif args.command == "heatmap":
        hm = pipeline.cmd_heatmap(cfg, out, args.objective, args.pair, args.index, ckpt, seed,
                                  resolution=args.resolution)["heatmap"]
        print(f"argmin cell {hm.argmin}, truth cell {hm.truth_cell}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, GradientError, EnkiError, IntegrationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
