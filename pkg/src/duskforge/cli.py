"""Command-line entry points.

Every subcommand prints one JSON object on stdout and logs to stderr. Exit
status: 0 on success, 1 on invalid input or configuration, 2 when a run fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .autodiff import AutodiffError, CheckpointError, serialize
from .config import Config, ConfigError
from .data import ImageFormatError, ManifestError, ShapeSceneSpec, generate_shapescenes, load_image, save_image
from .darkening import DarkeningError, darken_image
from .losses import CollapseError
from . import checks, trainer

log = logging.getLogger("duskforge")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
INVALID_INPUT = (ConfigError, ImageFormatError, ManifestError, CheckpointError, DarkeningError,
                 FileNotFoundError, KeyError, ValueError)


class UsageError(Exception):
    pass


def _thread_limit():
    raw = os.environ.get("DUSKFORGE_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DUSKFORGE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DUSKFORGE_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _save_resolved(cfg: Config, output) -> None:
    if output is not None:
        out = Path(output)
        cfg.save(out.with_name(out.name + ".config.txt"))


# -- subcommands ---------------------------------------------------------------

def cmd_generate_data(cfg: Config, args) -> dict:
    out = Path(args.out or cfg["data.root"])
    spec = ShapeSceneSpec(num_classes=cfg["gen.num_classes"], image_size=cfg["gen.image_size"],
                          train_per_class=cfg["gen.train_per_class"], val_per_class=cfg["gen.val_per_class"],
                          test_per_class=cfg["gen.test_per_class"])
    manifests = generate_shapescenes(spec, cfg["train.seed"], out)
    cfg.save(out / "config.txt")
    return {"root": str(out), "splits": {k: len(m) for k, m in manifests.items()}}


def _stage(stage: str):
    def run(cfg: Config, args) -> dict:
        day = getattr(args, "day_checkpoint", None)
        dark = getattr(args, "darkener_checkpoint", None)
        tc = trainer.TrainConfig.from_config(cfg, stage, args.out, day, dark)
        return trainer.run_stage(tc, stop_after=args.stop_after, resume=args.resume)
    return run


def cmd_evaluate(cfg: Config, args) -> dict:
    _save_resolved(cfg, args.output)
    return trainer.evaluate(cfg, args.checkpoint, args.split, args.darkener_checkpoint, args.output)


def _exposure_map(value: str, h: int, w: int) -> np.ndarray:
    try:
        level = float(value)
    except ValueError:
        img = load_image(value, allow_png=True)
        if img.shape[1:] != (h, w):
            raise ValueError(f"exposure map is {img.shape[1]}x{img.shape[2]}, image is {h}x{w}") from None
        return img.mean(axis=0)
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"exposure level must be in [0, 1], got {level}")
    return np.full((h, w), level, dtype=np.float32)


def cmd_darken(cfg: Config, args) -> dict:
    image = load_image(args.input, allow_png=cfg["data.allow_png"])
    _, h, w = image.shape
    exposure = _exposure_map(args.exposure, h, w)
    family = cfg.curve_family()
    net = trainer.load_darkener(cfg, args.checkpoint) if family.learnable else None
    from .autodiff import no_grad
    with no_grad():
        out = darken_image(image, exposure, net, family).data
    save_image(out, args.output)
    _save_resolved(cfg, args.output)
    return {"input": str(args.input), "output": str(args.output), "family": family.tag,
            "input_mean": float(image.mean()), "output_mean": float(out.mean()),
            "exposure_mean": float(exposure.mean())}


def cmd_gradcheck(cfg: Config, args) -> dict:
    dtype = {"f32": np.float32, "f64": np.float64}[args.dtype]
    results = checks.run_all(dtype, args.only or None)
    payload = {"dtype": args.dtype, "passed": all(r.passed for r in results),
               "results": [r.as_dict() for r in results]}
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        _save_resolved(cfg, args.output)
    if not payload["passed"]:
        failed = [r.name for r in results if not r.passed]
        raise trainer.TrainingError(f"gradient check failed for: {', '.join(failed)}")
    return payload


def cmd_mmd_report(cfg: Config, args) -> dict:
    root = Path(cfg["data.root"])
    a = trainer.load_split(root, args.split_a)
    size = a._cache.shape[-1]
    model = trainer.build_model(cfg, a.num_classes, size)
    model.load_component_state(serialize.load(args.checkpoint), ["extractor", "classifier"])
    feats_a = trainer.extract_features(model, a._cache)
    if args.darkener_checkpoint:
        net = trainer.load_darkener(cfg, args.darkener_checkpoint)
        n, _, h, w = a._cache.shape
        dark = trainer.darken_batch(net, a._cache, trainer.eval_exposures(cfg, n, h, w), cfg.curve_family())
        feats_b, label_b = trainer.extract_features(model, dark), f"darkened {args.split_a}"
    else:
        b = trainer.load_split(root, args.split_b)
        feats_b, label_b = trainer.extract_features(model, b._cache), args.split_b
    from .diagnostics import mmd
    report = {"set_a": args.split_a, "set_b": label_b, **mmd(feats_a, feats_b).as_dict()}
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        _save_resolved(cfg, args.output)
    return report


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duskforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.set_defaults(func=fn)
        return p

    p = add("generate-data", cmd_generate_data, "render the shape-scene dataset")
    p.add_argument("--out", help="output root (default: data.root)")

    for name, stage, needs in (("pretrain", "pretrain_day", ()),
                               ("train-darkener", "train_darkener", ("day",)),
                               ("adapt", "adapt", ("day", "darkener"))):
        p = add(name, _stage(stage), f"run the {stage} stage")
        p.add_argument("--out", required=True, help="run directory")
        if "day" in needs:
            p.add_argument("--day-checkpoint", required=True)
        if "darkener" in needs:
            p.add_argument("--darkener-checkpoint", required=True)
        p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.dftn")
        p.add_argument("--stop-after", type=int, default=None, metavar="STEP",
                       help="checkpoint and stop once this many steps are done")

    p = add("evaluate", cmd_evaluate, "Top-1 and day/night alignment metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, choices=("train", "val", "test_day", "test_night"))
    p.add_argument("--darkener-checkpoint", help="pair images with their synthetic-night versions")
    p.add_argument("--output", help="JSON record path")

    p = add("darken", cmd_darken, "darken one image")
    p.add_argument("--input", required=True)
    p.add_argument("--exposure", required=True, help="constant level in [0, 1] or an exposure-map image")
    p.add_argument("--checkpoint", help="darkener checkpoint (not needed for heuristic families)")
    p.add_argument("--output", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference checks of every registered op and loss")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--only", action="append", metavar="NAME", help="restrict to named cases")
    p.add_argument("--output")

    p = add("mmd-report", cmd_mmd_report, "MMD^2 between feature sets of two splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split-a", default="test_day")
    p.add_argument("--split-b", default="test_night")
    p.add_argument("--darkener-checkpoint", help="compare split-a with its synthetic-night version")
    p.add_argument("--output")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = Config.load(args.config, args.set)
        if args.command == "darken" and cfg.curve_family().learnable and not args.checkpoint:
            raise UsageError("darken needs --checkpoint for a learnable curve family")
        with _thread_limit():
            result = args.func(cfg, args)
    except (UsageError, *INVALID_INPUT) as exc:
        log.error("%s", exc)
        print(json.dumps({"ok": False, "error": type(exc).__name__, "message": str(exc)}))
        return EXIT_INVALID
    except (trainer.TrainingError, CollapseError, AutodiffError, OSError, RuntimeError, FloatingPointError) as exc:
        log.error("%s", exc)
        print(json.dumps({"ok": False, "error": type(exc).__name__, "message": str(exc)}))
        return EXIT_FAILED
    print(json.dumps({"ok": True, "command": args.command, **result}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
