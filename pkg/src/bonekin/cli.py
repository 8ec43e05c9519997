"""``bonekin`` command line: gen-data, train, eval, predict, gradcheck, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import BonekinError, ConfigError

log = logging.getLogger("bonekin")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common(p: argparse.ArgumentParser, model_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON config file (flat keys)")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    if not model_flags:
        return
    p.add_argument("--frames", type=int, dest="d", help="direction window length d (a power of the stride)")
    p.add_argument("--subnets", type=int, dest="num_subnets")
    p.add_argument("--strategy", choices=["random", "causal-random", "firstframe", "consecutive"])
    p.add_argument("--causal", action="store_true", default=None)
    p.add_argument("--no-vis-fusion", dest="vis_fusion", action="store_false", default=None)
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    p.add_argument("--no-attention", dest="attention", action="store_false", default=None)
    p.add_argument("--composition", choices=["analytic", "heads"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bonekin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p, model_flags=False)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a dataset (split by actor)")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", action="store_true", help="continue from the state in --out")

    p = sub.add_parser("eval", help="print a metric report as JSON")
    p.add_argument("--data", required=True, help="ground-truth dataset")
    p.add_argument("--checkpoint", help="evaluate a trained model")
    p.add_argument("--predictions", help="evaluate a prediction file instead")
    p.add_argument("--split", choices=["val", "all"], default="all")
    p.add_argument("--strategy", choices=["random", "causal-random", "firstframe", "consecutive"])
    p.add_argument("--frames-out", action="store_true", help="include per-frame errors")

    p = sub.add_parser("predict", help="write predicted poses in the dataset format")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=["random", "causal-random", "firstframe", "consecutive"])

    p = sub.add_parser("gradcheck", help="finite-difference check of every kernel and both branches")
    p.add_argument("--dims", choices=["tiny"], default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-entry", type=int, default=12, help="entries sampled per parameter (0: all)")

    p = sub.add_parser("ablate", help="multi-seed toggle matrix with median deltas")
    _common(p)
    p.add_argument("--toggles", default="sampling,decomposition,augmentation,visibility")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", help="also write the result JSON here")
    return parser


def _effective_config(args):
    from .config import load_config, parse_override

    overrides = dict(parse_override(s) for s in args.set)
    for key in ("seed", "d", "num_subnets", "strategy", "causal", "vis_fusion", "augment", "attention", "composition"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    cfg = load_config(args.config, overrides)
    print(json.dumps({"effective_config": cfg.to_dict()}, sort_keys=True), file=sys.stderr)
    return cfg


def cmd_gen_data(args) -> int:
    from .dataio import write_dataset
    from .skeleton import default_topology
    from .synth import generate_dataset

    cfg = _effective_config(args)
    videos = generate_dataset(cfg.generator)
    write_dataset(videos, args.out, default_topology(cfg.generator.topology))
    print(json.dumps({"videos": len(videos), "frames": sum(v.frames for v in videos), "out": args.out}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataio import read_dataset
    from .synth import split_by_actor
    from .training import load_train_state, save_train_state, train

    cfg = _effective_config(args)
    videos, topo = read_dataset(args.data)
    train_set, val_set = split_by_actor(videos, cfg.train.val_actors)
    out = Path(args.out)
    state = None
    if args.resume:
        state = load_train_state(out)
        if state.models.config.hash() != cfg.train.hash():
            raise ConfigError("--resume: effective config differs from the checkpoint's")
    state = train(train_set, val_set, cfg.train, topo, state=state,
                  log_path=out / "train_log.jsonl" if out else None, checkpoint_dir=out)
    save_train_state(state, out)
    last = state.history[-1] if state.history else {}
    print(json.dumps({"epochs": state.epoch, "best_val_mpjpe_mm": state.best_val_mpjpe,
                      "last": {k: v for k, v in last.items() if k != "val"}}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import metrics
    from .dataio import read_dataset
    from .synth import split_by_actor
    from .training import evaluate, load_train_state

    if bool(args.checkpoint) == bool(args.predictions):
        raise UsageError("eval: give exactly one of --checkpoint or --predictions")
    videos, topo = read_dataset(args.data)
    if args.predictions:
        preds, _ = read_dataset(args.predictions, topo)
        if len(preds) != len(videos):
            raise BonekinError(f"{len(preds)} predicted videos vs {len(videos)} ground-truth videos")
        report = metrics.evaluate_sequences([p.poses3d for p in preds], [v.poses3d for v in videos])
    else:
        state = load_train_state(args.checkpoint)
        if args.split == "val":
            _, videos = split_by_actor(videos, state.models.config.val_actors)
        report = evaluate(state.models, videos, args.strategy)
    print(json.dumps(report.to_dict(include_frames=args.frames_out)))
    return EXIT_OK


def cmd_predict(args) -> int:
    from .dataio import read_dataset, write_dataset
    from .training import load_train_state, predict_all, predictions_to_videos

    videos, topo = read_dataset(args.data)
    state = load_train_state(args.checkpoint)
    preds = predict_all(state.models, videos, args.strategy)
    write_dataset(predictions_to_videos(videos, preds), args.out, topo)
    print(json.dumps({"videos": len(videos), "out": args.out}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(args.seed, args.per_entry or None)
    worst = 0.0
    for r in results:
        worst = max(worst, r.report.worst)
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:32s} worst {r.report.worst:.3e} (tol {r.tol:.0e})")
    print(f"worst relative error: {worst:.3e}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = _effective_config(args)
    toggles = [t for t in args.toggles.split(",") if t]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s]
    except ValueError as exc:
        raise UsageError(f"--seeds: {exc}") from exc
    try:
        result = run_ablation(toggles, seeds, cfg.generator, cfg.train)
    except KeyError as exc:
        raise UsageError(f"--toggles: {exc.args[0]}") from exc
    print(result.table())
    if args.out:
        Path(args.out).write_text(json.dumps(result.to_dict(), indent=1))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
    "predict": cmd_predict, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"bonekin: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BonekinError, OSError, ValueError) as exc:
        print(f"bonekin: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
