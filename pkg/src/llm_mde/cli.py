"""Command line: ``llm-mde {train,eval,experiment,render}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import LlmMdeError
from .experiments import (EXPERIMENTS, ExperimentConfig, load_pool, parse_config_file,
                          render_depth_image, run_experiment, set_determinism)
from .model import load_model

log = logging.getLogger("llm_mde")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--synthetic", type=int, help="synthetic samples per scene type")
    p.add_argument("--data-dir", help="dataset directory containing index.txt")
    p.add_argument("--device-free", action="store_true", default=None,
                   help="single-threaded deterministic CPU mode")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llm-mde", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train one model and save its weights")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a saved model on the test split")
    _common(p)
    p.add_argument("--weights", required=False)

    p = sub.add_parser("experiment", help="run a protocol preset")
    _common(p)
    p.add_argument("--experiment", choices=EXPERIMENTS)

    p = sub.add_parser("render", help="write depth PNGs from a model or a raw depth file")
    _common(p)
    p.add_argument("--weights", help="model weight file; renders test-pool predictions")
    p.add_argument("--depth-file", help="16-bit depth PNG to render directly")
    p.add_argument("--depth-scale", type=float, default=0.001)
    p.add_argument("--count", type=int, default=8)
    return parser


def resolve_config(args) -> ExperimentConfig:
    """Config file first, then flags; flags win."""
    values = parse_config_file(args.config) if args.config else {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    flag_map = {"seed": args.seed, "out": args.out, "synthetic": args.synthetic,
                "data_dir": args.data_dir, "device_free": args.device_free,
                "weights": getattr(args, "weights", None), "experiment": getattr(args, "experiment", None)}
    values.update({k: v for k, v in flag_map.items() if v is not None})
    if args.verb in ("train", "eval"):
        values["experiment"] = args.verb
    return ExperimentConfig.from_dict(values)


def _render_cmd(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.depth_file:
        from PIL import Image

        with Image.open(args.depth_file) as im:
            raw = np.array(im)
        depth = raw.astype(np.float64) * args.depth_scale
        path = render_depth_image(depth, out / "depth_0.png", valid_mask=raw > 0)
        print(path)
        return 0
    if not args.weights:
        raise SystemExit("render needs --weights or --depth-file")
    set_determinism(cfg.device_free)
    model = load_model(args.weights)
    samples = load_pool(cfg.replace(resolution=model.cfg.backbone.image_size))[:args.count]
    from .apg import Tokenizer

    tokenizer = Tokenizer.build(model.cfg.backbone.V, extra_words=(cfg.name,))
    preds = model.predict(samples, tokenizer, cfg.name, cfg.prompt_mode)
    for i, p in enumerate(preds):
        print(render_depth_image(p, out / f"depth_{i}.png"))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.verb == "render":
            return _render_cmd(args, cfg)
        records = run_experiment(cfg)
    except LlmMdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for rec in records:
        m = rec.metrics
        print(f"{rec.name:<16} rmse={m.rmse:.4f} abs_rel={m.abs_rel:.4f} sq_rel={m.sq_rel:.4f} "
              f"log_rmse={m.log_rmse:.4f} d1={m.delta1:.3f} d2={m.delta2:.3f} d3={m.delta3:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
