"""Command-line entry point: ``dwff <command> --config <path> [--seed N] [--out DIR] [--force]``.

Exit codes: 0 success, 1 usage or config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys

from .config import ConfigError, RunConfig, load_config
from .decoder import FusionMode
from .features import MissingLabelError
from .optim import CheckpointShapeError
from .tensorfile import TensorFileError
from . import pipeline

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults: desk profile)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = _Parser(prog="dwff", description="Dynamic-weighted feature fusion decoder lab")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic feature dataset")
    sub.add_parser("train", parents=[common], help="train the decoder")
    sub.add_parser("ablate", parents=[common], help="train and compare NWFF-1..4, SWFF, DWFF")
    for name, desc in (("eval", "evaluate a checkpoint"), ("entropy", "fusion-weight entropy analysis")):
        sp = sub.add_parser(name, parents=[common], help=desc)
        sp.add_argument("--checkpoint", help="checkpoint prefix (default <out>/checkpoint_final)")
    gp = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of model + loss")
    gp.add_argument("--mode", help="fusion mode override (DWFF, SWFF, NWFF-L)")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.replace(seed=args.seed).validate()
    return cfg


def _refuse_existing(path: str, force: bool, outputs: list[str]) -> None:
    hits = [o for o in outputs if os.path.exists(os.path.join(path, o))]
    if hits and not force:
        raise pipeline.PathCollisionError(f"{path} already holds {', '.join(hits)} (use --force to overwrite)")


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        mode = FusionMode.parse(args.mode) if getattr(args, "mode", None) else cfg.mode
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"dwff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    cmd = args.command
    try:
        if cmd == "gen-data":
            root = args.out or cfg.data_dir
            manifest = pipeline.generate_dataset(cfg, root, force=args.force)
            sizes = "/".join(str(len(manifest[s])) for s in ("train", "val", "test"))
            print(f"wrote {cfg.data_n_scenes} scenes to {root} (train/val/test {sizes})")
        elif cmd == "train":
            out = args.out or cfg.out
            _refuse_existing(out, args.force, ["loss_log.csv", "checkpoint_final.dwf"])
            result = pipeline.train(cfg, out)
            rows = result["loss_rows"]
            final = f", final total loss {float(rows[-1][6]):.6f}" if rows else ""
            print(f"trained {mode} for {result['steps']} steps{final}; outputs in {out}")
        elif cmd == "ablate":
            out = args.out or os.path.join(cfg.out, "ablation")
            _refuse_existing(out, args.force, ["ablation.csv"])
            result = pipeline.run_ablation(cfg, out)
            for name, rep in result["reports"].items():
                print(f"{name:<7} mP {rep.m_precision:.4f} mR {rep.m_recall:.4f} mF1 {rep.m_f1:.4f} mIoU {rep.m_iou:.4f}")
            for flag in result["flags"]:
                print(f"FLAG: {flag}")
        elif cmd == "eval":
            out = args.out or cfg.out
            prefix = args.checkpoint or os.path.join(cfg.out, "checkpoint_final")
            rep = pipeline.run_eval(cfg, prefix, out)
            print(rep.to_table(), end="")
        elif cmd == "entropy":
            out = args.out or os.path.join(cfg.out, "entropy")
            prefix = args.checkpoint or os.path.join(cfg.out, "checkpoint_final")
            records = pipeline.run_entropy(cfg, prefix, out)
            print(f"wrote {len(records)} weight records to {out}")
        elif cmd == "gradcheck":
            err = pipeline.gradcheck_model(cfg, mode)
            ok = math.isfinite(err) and err < cfg.gradcheck_tol
            print(f"gradcheck {mode}: max relative error {err:.3e} (tolerance {cfg.gradcheck_tol:g}) {'PASS' if ok else 'FAIL'}")
            return EXIT_OK if ok else EXIT_RUNTIME
    except (
        pipeline.PathCollisionError,
        pipeline.TrainingAborted,
        CheckpointShapeError,
        MissingLabelError,
        TensorFileError,
        OSError,
        ValueError,
    ) as exc:
        print(f"dwff: {cmd} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=os.environ.get("DWFF_LOG", "WARNING"), format="%(levelname)s %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
