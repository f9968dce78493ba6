"""Command-line entry point: ``msnet <command> [options]``.

Every command accepts ``--config``, ``--seed`` and ``--out`` plus one flag per
configuration field (``--input-size 64``, ``--lossnet-enabled false`` ...).
Failures exit with status 1 and a single ``error: <category>: <message>``
line on stderr.
"""
from __future__ import annotations

import argparse
import statistics
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import checks
from . import data as D
from . import imageio
from . import metrics as mt
from . import model as M
from .autodiff import ShapeError
from .config import FIELD_TYPES, MODEL_FIELDS, ConfigError, RunConfig, load_config
from .train import NonFiniteLossError, predict_batches, train


class CommandError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {raw!r}")


_PARSERS = {"int": int, "float": float, "bool": _bool, "str": str}


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="key = value configuration file")
    parser.add_argument("--seed", type=int, default=default, help="run seed")
    parser.add_argument("--out", default=default, help="output directory")


def _field_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuration overrides")
    for f in fields(RunConfig):
        if f.name == "seed":
            continue
        kind = FIELD_TYPES[f.name]
        kind = kind if isinstance(kind, str) else kind.__name__
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=_PARSERS[kind],
                           default=None, metavar=kind.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msnet", description="Multi-scale subtraction segmentation toolkit")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _common(p, suppress=True)
        _field_flags(p)
        return p

    p = add("gen-data", "generate the synthetic dataset")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    add("train", "train a model; writes best.ckpt, last.ckpt and train_log.txt")

    p = add("eval", "evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--split", default="test", choices=D.SPLITS)
    p.add_argument("--gt-as-pred", action="store_true", help="score ground truth against itself")

    p = add("predict", "write probability maps and masks for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help="PPM files or directories of PPM files")

    p = add("gradcheck", "finite-difference gradient checks")
    p.add_argument("--scope", default="all", choices=("ops", "loss", "model", "all"))
    p.add_argument("--trials", type=int, default=None)

    add("ablate", "train and evaluate the seven ablation configurations")

    p = add("bench", "forward-pass latency and throughput")
    p.add_argument("--checkpoint", default=None, help="defaults to freshly initialized parameters")
    p.add_argument("--iters", type=int, default=50, help="timed iterations (at least 30)")
    p.add_argument("--warmup", type=int, default=10)
    return parser


def resolve_config(args) -> tuple[RunConfig, set[str]]:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _out(args, default: str) -> Path:
    return Path(args.out if args.out is not None else default)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig, explicit: set[str]) -> int:
    out = _out(args, cfg.data_dir)
    counts = D.generate_dataset(out, cfg.seed, cfg.n, cfg.ratios(), cfg.input_size, cfg.difficulty,
                                force=args.force)
    print(" ".join(f"{k} {v}" for k, v in counts.items()) + f" -> {out}")
    return 0


def cmd_train(args, cfg: RunConfig, explicit: set[str]) -> int:
    out = _out(args, "runs/train")
    _require_dataset(cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    result = train(cfg, out)
    print(f"best val_mdice {result.best_val_mdice:.4f} at epoch {result.best_epoch}; "
          f"checkpoints in {out}")
    return 0


def _require_dataset(root) -> None:
    if not (Path(root) / "manifest.txt").exists():
        raise CommandError("missing", f"no dataset at {root} (run gen-data first)")


def load_checkpoint(path, cfg: RunConfig, explicit: set[str]) -> tuple[RunConfig, dict]:
    """Load a checkpoint, refusing explicitly requested architecture settings it contradicts."""
    if path is None:
        raise CommandError("usage", "--checkpoint is required")
    if not Path(path).exists():
        raise CommandError("missing", f"checkpoint not found: {path}")
    model_cfg, params = M.load_params(path)
    wanted = cfg.model_config()
    clashes = [f"{k}={getattr(wanted, k)} (checkpoint {getattr(model_cfg, k)})"
               for k in MODEL_FIELDS if k in explicit and getattr(wanted, k) != getattr(model_cfg, k)]
    if clashes:
        raise CommandError("mismatch", "configuration contradicts checkpoint: " + ", ".join(clashes))
    return cfg.with_model(model_cfg), params


def predict_maps(images: list[np.ndarray], cfg: RunConfig, params) -> list[np.ndarray]:
    """Probability maps at each image's own resolution (resized to the model input and back)."""
    mcfg = cfg.model_config()
    s = mcfg.input_size
    batch = np.stack([D.resize_maps(img, s, s) for img in images])
    probs = predict_batches(batch, mcfg, params)
    return [D.resize_maps(p, *img.shape[-2:]) for p, img in zip(probs, images)]


def cmd_eval(args, cfg: RunConfig, explicit: set[str]) -> int:
    _require_dataset(cfg.data_dir)
    samples = D.load_split(cfg.data_dir, args.split)
    if not samples:
        raise CommandError("data", f"split {args.split!r} of {cfg.data_dir} is empty")
    if args.gt_as_pred:
        preds = [s.mask for s in samples]
    else:
        cfg, params = load_checkpoint(args.checkpoint, cfg, explicit)
        preds = predict_maps([s.image for s in samples], cfg, params)
    # score exactly what a prediction file would hold: 8-bit quantized maps
    pairs = ((s.id, imageio.to_uint8(p[0]) / 255.0, s.mask[0]) for s, p in zip(samples, preds))
    report = mt.evaluate_pairs(pairs, cfg.threshold)
    out = _out(args, "runs/eval")
    report.write(out, f"metrics_{args.split}")
    print(report.to_table(f"{args.split} split"), end="")
    return 0


def _input_files(inputs) -> list[Path]:
    files = []
    for raw in inputs:
        p = Path(raw)
        if p.is_dir():
            files.extend(sorted(p.glob("*.ppm")))
        else:
            files.append(p)
    if not files:
        raise CommandError("missing", "no input images found")
    return files


def cmd_predict(args, cfg: RunConfig, explicit: set[str]) -> int:
    cfg, params = load_checkpoint(args.checkpoint, cfg, explicit)
    files = _input_files(args.inputs)
    images = [imageio.read_image(f) for f in files]
    out = _out(args, "runs/predict")
    out.mkdir(parents=True, exist_ok=True)
    for f, prob in zip(files, predict_maps(images, cfg, params)):
        q = imageio.to_uint8(prob[0]) / 255.0
        imageio.write_gray(out / f"{f.stem}_prob.pgm", q)
        imageio.write_mask(out / f"{f.stem}_mask.pgm", mt.binarize(q, cfg.threshold))
    print(f"wrote {2 * len(files)} files to {out}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig, explicit: set[str]) -> int:
    scopes = ("ops", "loss", "model") if args.scope == "all" else (args.scope,)
    failed = 0
    for scope in scopes:
        for res in checks.run(scope, args.trials, cfg.seed):
            print(res.line(), flush=True)
            failed += not res.passed
    if failed:
        raise CommandError("gradcheck", f"{failed} check(s) exceeded tolerance")
    return 0


ABLATION_ROWS = (
    ("baseline (MS1)", dict(pyramid_depth=1, lossnet_enabled=False)),
    ("+ MS2", dict(pyramid_depth=2, lossnet_enabled=False)),
    ("+ MS3", dict(pyramid_depth=3, lossnet_enabled=False)),
    ("+ MS4", dict(pyramid_depth=4, lossnet_enabled=False)),
    ("+ MS5", dict(pyramid_depth=5, lossnet_enabled=False)),
    ("+ Lf", dict(pyramid_depth=5, lossnet_enabled=True)),
    ("MS -> MA", dict(pyramid_depth=5, lossnet_enabled=True, fusion_mode="add")),
)


def ablation_configs(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    base = replace(cfg, fusion_mode="subtract")
    return [(name, replace(base, **changes)) for name, changes in ABLATION_ROWS]


def cmd_ablate(args, cfg: RunConfig, explicit: set[str]) -> int:
    _require_dataset(cfg.data_dir)
    out = _out(args, "runs/ablate")
    train_samples = D.load_split(cfg.data_dir, "train")
    val_samples = D.load_split(cfg.data_dir, "val")
    test_samples = D.load_split(cfg.data_dir, "test")
    header = ["row", "params", "config", *mt.TABLE_HEADERS]
    lines = [",".join(header)]
    table = [f"{'row':<16} {'params':>8} {'config':>12} " + " ".join(f"{h:>6}" for h in mt.TABLE_HEADERS)]
    print(table[0], flush=True)
    for k, (name, run_cfg) in enumerate(ablation_configs(cfg), start=1):
        run_dir = out / f"row{k}"
        result = train(run_cfg, run_dir, train_samples, val_samples, echo=lambda s: None)
        _, params = M.load_params(result.best_path)
        preds = predict_maps([s.image for s in test_samples], run_cfg, params)
        report = mt.evaluate_pairs(((s.id, p[0], s.mask[0]) for s, p in zip(test_samples, preds)),
                                   run_cfg.threshold)
        means = report.means
        n_params = M.count_params(params)
        row = [name, str(n_params), run_cfg.digest(), *(f"{means[m]:.4f}" for m in mt.METRIC_NAMES)]
        lines.append(",".join(row))
        table.append(f"{name:<16} {n_params:>8} {run_cfg.digest():>12} "
                     + " ".join(f"{means[m]:6.3f}" for m in mt.METRIC_NAMES))
        print(table[-1], flush=True)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    (out / "ablation.txt").write_text("\n".join(table) + "\n")
    return 0


def bench_stats(samples_ms: list[float]) -> dict[str, float]:
    mean = statistics.fmean(samples_ms)
    return {
        "samples": len(samples_ms),
        "mean_ms": mean,
        "median_ms": statistics.median(samples_ms),
        "std_ms": statistics.stdev(samples_ms),
        "fps": 1000.0 / mean,
    }


def cmd_bench(args, cfg: RunConfig, explicit: set[str]) -> int:
    if args.iters < 30:
        raise CommandError("usage", f"--iters must be at least 30, got {args.iters}")
    if args.checkpoint is not None:
        cfg, params = load_checkpoint(args.checkpoint, cfg, explicit)
    else:
        params = M.init_params(cfg.model_config())
    mcfg = cfg.model_config()
    image = np.random.default_rng(cfg.seed).uniform(0, 1, (1, 3, mcfg.input_size, mcfg.input_size))
    for _ in range(args.warmup):
        M.predict(image, mcfg, params)
    samples = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        M.predict(image, mcfg, params)
        samples.append((time.perf_counter() - t0) * 1000.0)
    st = bench_stats(samples)
    print(f"input {mcfg.input_size}x{mcfg.input_size}, batch 1, {st['samples']} samples after "
          f"{args.warmup} warmup")
    print(f"mean {st['mean_ms']:.3f} ms  median {st['median_ms']:.3f} ms  std {st['std_ms']:.3f} ms  "
          f"fps {st['fps']:.2f}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}

_CATEGORIES = (
    (CommandError, None),
    (ConfigError, "config"),
    (M.CheckpointError, "checkpoint"),
    (imageio.ImageFormatError, "format"),
    (D.DatasetExistsError, "exists"),
    (NonFiniteLossError, "nonfinite"),
    (ShapeError, "shape"),
    (FileNotFoundError, "missing"),
    (ValueError, "value"),
    (OSError, "io"),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, explicit = resolve_config(args)
        return COMMANDS[args.command](args, cfg, explicit)
    except Exception as exc:  # noqa: BLE001 - mapped to a one-line error below
        for kind, category in _CATEGORIES:
            if isinstance(exc, kind):
                category = category or exc.category
                message = str(exc).replace("\n", " ")
                print(f"error: {category}: {message}", file=sys.stderr)
                return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
