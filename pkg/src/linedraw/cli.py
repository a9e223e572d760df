"""Command line entry point: ``linedraw <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

log = logging.getLogger("linedraw")


def _load_flat(path: str | None) -> dict:
    if path is None:
        return {}
    import yaml

    text = Path(path).read_text()
    d = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    if not isinstance(d, dict):
        raise SystemExit(f"{path}: expected a flat key-value document")
    return d


def cmd_synth_fixture(args) -> int:
    from .data import FixtureSpec, synth_fixture

    shapes = tuple(args.shapes.split(","))
    out = synth_fixture(FixtureSpec(n_images=args.n, shapes=shapes, seed=args.seed, size=args.size), args.out)
    print(out)
    return 0


def cmd_cache_depth(args) -> int:
    from .backbones import make_depth_oracle
    from .depth_pretrain import cache_pseudo_depth

    oracle = make_depth_oracle(args.oracle, fixture_dir=args.fixture, model=args.depth_model)
    manifest = cache_pseudo_depth(args.photos, oracle, args.cache, workers=args.workers)
    print(json.dumps(manifest["stats"]))
    return 0


def cmd_pretrain_depth(args) -> int:
    from .backbones import make_depth_oracle, make_extractor
    from .depth_pretrain import PretrainConfig, cache_pseudo_depth, pretrain_from_dirs

    raw = _load_flat(args.config)
    extractor_kind = raw.pop("extractor", args.extractor)
    extractor_weights = raw.pop("extractor_weights", None)
    known = {f.name for f in fields(PretrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise SystemExit(f"unknown pretrain config keys: {unknown}")
    for key in ("epochs", "max_steps", "image_size", "seed", "batch_size"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    cfg = PretrainConfig(**raw)
    if args.oracle is not None:
        cache_pseudo_depth(args.photos, make_depth_oracle(args.oracle, fixture_dir=args.fixture), args.cache)
    extractor = make_extractor(extractor_kind, cfg.seed, extractor_weights)
    _, losses = pretrain_from_dirs(args.photos, args.cache, extractor, cfg, args.out)
    print(json.dumps({"steps": len(losses), "first": losses[0], "last": losses[-1], "out": args.out}))
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    cfg = TrainConfig.from_file(args.config)
    run_dir = train(cfg, resume=args.resume)
    print(run_dir)
    return 0


def cmd_draw(args) -> int:
    from .trainer import draw

    for path in draw(args.weights, args.input, args.output):
        print(path)
    return 0


def cmd_eval(args) -> int:
    from .evaluate import EvalConfig, _backbones_for, evaluate_checkpoint, report

    cfg = EvalConfig(
        photos_dir=args.photos, depth_cache=args.cache, image_size=args.image_size,
        n_pairs=args.n_pairs, gap=args.gap, seed=args.seed, max_images=args.max_images,
    )
    weights = Path(args.weights)
    if weights.name == "final" and not args.no_plots:
        out = report(weights.parent, cfg, args.out)
    else:
        rep = evaluate_checkpoint(weights, cfg, *_backbones_for(weights))
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(rep, indent=1, sort_keys=True))
    rep = json.loads(Path(out).read_text())
    print(json.dumps({k: rep[k] for k in ("depth_mse", "ordinal_agreement", "semantic_cosine")}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="linedraw", description="Photo to line-drawing translation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-fixture", help="render the synthetic shapes fixture")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--shapes", default="sphere,box,plane")
    s.set_defaults(func=cmd_synth_fixture)

    s = sub.add_parser("cache-depth", help="build the pseudo-depth cache for a photo directory")
    s.add_argument("--photos", required=True)
    s.add_argument("--cache", required=True)
    s.add_argument("--oracle", choices=("reference", "stub"), default="reference")
    s.add_argument("--fixture", help="fixture directory whose analytic depth the stub oracle serves")
    s.add_argument("--depth-model")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_cache_depth)

    s = sub.add_parser("pretrain-depth", help="pretrain the feature-to-depth decoder")
    s.add_argument("--photos", required=True)
    s.add_argument("--cache", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--extractor", choices=("reference", "stub"), default="reference")
    s.add_argument("--oracle", choices=("reference", "stub"), help="build the cache first with this oracle")
    s.add_argument("--fixture")
    s.add_argument("--epochs", type=int)
    s.add_argument("--max-steps", dest="max_steps", type=int)
    s.add_argument("--image-size", dest="image_size", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain_depth)

    s = sub.add_parser("train", help="train the drawing generator")
    s.add_argument("--config", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("draw", help="turn photos into drawings with a trained checkpoint")
    s.add_argument("--weights", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_draw)

    s = sub.add_parser("eval", help="depth / ordinal / semantic metrics for a checkpoint")
    s.add_argument("--weights", required=True)
    s.add_argument("--photos", required=True)
    s.add_argument("--cache", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--image-size", type=int, default=256)
    s.add_argument("--n-pairs", type=int, default=2000)
    s.add_argument("--gap", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-images", type=int)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
