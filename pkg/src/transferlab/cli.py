"""``transferlab`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every subcommand accepts ``--config FILE`` (YAML mapping of option names to
values); explicit flags override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .cam import compute_cam, render_heatmap_overlay
from .experiments import PRESETS, PRETRAIN_DEFAULTS, expand_grid, get_preset, load_pixels, pretrain, prepare_model, run_sweep
from .imageio import DatasetManifest, PNMError, batch_to_tensor, bilinear_resize, read_pnm, to_input_tensor
from .models import ArchSpec, build, count_params
from .plotting import CSVFormatError, plot_csv
from .synthgen import gen_dataset
from .tensor import NumericError, child_seed
from .train import Dataset, TrainConfig, evaluate, predictions, stratified_split, train_model
from .transfer import CacheMismatchError, WeightFileError, load_model, read_weights, save_weights

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("transferlab")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.csv in {data_dir}")
    return DatasetManifest.read(path)


def _train_config(args, **extra) -> TrainConfig:
    keys = ("lr", "batch_size", "min_epochs", "patience", "max_epochs", "optimizer")
    opts = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    opts.update(extra)
    return TrainConfig(**opts)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    m = gen_dataset(args.kind, args.count, args.seed, args.out, canvas=args.canvas, noise=args.noise)
    print(f"wrote {m.count} images to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    m = _manifest(args.data)
    pixels, labels = load_pixels(m, args.canvas)
    if len(labels) == 0:
        raise ValueError(f"source corpus in {args.data} is empty")
    cfg = _train_config(args, seed=args.seed)
    res = pretrain(pixels, labels, args.arch, args.canvas, args.channels, args.width_mult, cfg=cfg,
                   out_weights=args.out, seed=args.seed)
    r = res.report
    print(f"source val accuracy {res.val_accuracy:.4f} after {r.epochs_ran} epochs (best epoch {r.best_epoch})")
    print(f"backbone weights -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    m = _manifest(args.data)
    pixels, labels = load_pixels(m, args.canvas)
    preset = get_preset("mini", canvas=args.canvas, channels=args.channels, width_mult=args.width_mult,
                        seed=args.seed)
    model = prepare_model(preset, args.arch, args.weights)
    split = stratified_split(labels, args.n_per_class, args.val_fraction, args.test_per_class,
                             child_seed(args.seed, 0))
    ch = model.spec.input_shape[0]
    data = lambda idx: Dataset(batch_to_tensor(pixels[idx], ch), labels[idx])
    report = train_model(model, data(split.train), data(split.val) if len(split.val) else None,
                         _train_config(args, seed=args.seed))
    line = f"{args.arch}: {report.epochs_ran} epochs, best epoch {report.best_epoch}"
    if len(split.test):
        acc, loss = evaluate(model, data(split.test))
        line += f", test accuracy {acc:.4f}, test loss {loss:.4f}"
    print(line)
    if args.out:
        save_weights(model, args.out, meta={"test_indices": split.test.tolist()})
        print(f"model weights -> {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    overrides = {k: getattr(args, k) for k in ("trials", "eval_mode", "seed", "test_per_class", "canvas",
                                               "channels", "width_mult")
                 if getattr(args, k, None) is not None}
    if args.grid is not None:
        overrides["grid"] = expand_grid(args.grid)
    if args.archs is not None:
        overrides["archs"] = [a.strip() for a in args.archs.split(",") if a.strip()]
    train = {k: getattr(args, k) for k in ("lr", "batch_size", "min_epochs", "patience", "max_epochs", "optimizer")
             if getattr(args, k, None) is not None}
    if train:
        overrides["train"] = dict(PRESETS[args.preset].train, **train)
    preset = get_preset(args.preset, **overrides)
    if any(a.endswith("-frozen") for a in preset.archs) and not args.weights:
        raise UsageError("frozen architectures need --weights")
    m = _manifest(args.data)
    pixels, labels = load_pixels(m, preset.canvas)
    result = run_sweep(preset, pixels, labels, args.weights, args.out, cache_dir=args.cache, timing=args.timing)
    print(f"{len(result.rows)} rows -> {args.out}")
    for arch in preset.archs:
        curve = " ".join(f"{n}:{result.mean_accuracy(arch, n):.3f}" for n in preset.grid)
        print(f"  {arch:12s} {curve}")
    if not args.no_plot:
        fig = Path(args.plot) if args.plot else Path(args.out).with_suffix(".svg")
        plot_csv(args.out, fig)
        print(f"figure -> {fig}")
    return EXIT_OK


def cmd_plot(args) -> int:
    plot_csv(args.csv, args.out)
    print(f"figure -> {args.out}")
    return EXIT_OK


def cmd_cam(args) -> int:
    model = load_model(args.weights)
    image = read_pnm(args.image)
    c, h, w = model.spec.input_shape
    if (image.height, image.width) != (h, w):
        image = bilinear_resize(image, w, h)
    x = to_input_tensor(image, c, model.dtype)
    logits = model.predict(x)
    cls = int(predictions(logits)[0]) if args.class_index is None else args.class_index
    raw = compute_cam(model, x, cls)
    render_heatmap_overlay(raw, image, args.alpha, args.out)
    print(f"class {cls} (logits {np.round(logits[0], 4).tolist()}) -> {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.weights:
        wf = read_weights(args.weights)
        print(f"arch: {wf.header.get('arch_id')}  input: {wf.header.get('input_shape')}  "
              f"backbone_only: {wf.header.get('backbone_only')}")
        if "meta" in wf.header:
            print("meta: " + json.dumps(wf.header["meta"], sort_keys=True)[:200])
        total = 0
        for entry in wf.header["tensors"]:
            n = int(np.prod(entry["shape"]))
            total += n
            print(f"  {entry['name']:24s} {entry['dtype']} {str(tuple(entry['shape'])):18s} "
                  f"offset={entry['offset']:<10d} {n}")
        print(f"tensors: {len(wf.tensors)}  parameters: {total}")
        if wf.arch is not None and not wf.header.get("backbone_only"):
            model = build(wf.arch)
            t, tr = count_params(model)
            print(f"model parameters: total {t}, trainable {tr}")
        return EXIT_OK
    if not args.arch:
        raise UsageError("inspect needs a weight file or --arch")
    shape = tuple(int(v) for v in args.input_shape.split("x")) if args.input_shape else None
    model = build(ArchSpec(args.arch, shape, args.width_mult, args.outputs))
    for layer in model.layers:
        n = layer.param_count()
        flag = " frozen" if layer.frozen else ""
        print(f"  {layer.name:16s} {type(layer).__name__:14s} {n:>10d}{flag}")
    t, tr = count_params(model)
    print(f"{model.arch_id}: total {t}, trainable {tr}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--min-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))


def build_parser() -> tuple[Parser, dict]:
    parser = Parser(prog="transferlab", description="Transfer-learning sample-efficiency experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    subs = {}

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="YAML file of option defaults")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("gen", cmd_gen, "generate a synthetic dataset")
    p.add_argument("--kind", choices=("uml", "shapes"), default="uml")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--out", required=True)

    p = add("pretrain", cmd_pretrain, "train a backbone on a source corpus and save it")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", default="mini", choices=("mini", "vgg16", "small-cnn"))
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--width-mult", default="1/8")
    p.add_argument("--seed", type=int, default=0)
    _train_flags(p)
    p.set_defaults(**PRETRAIN_DEFAULTS)

    p = add("train", cmd_train, "train one model on a labelled dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", default="mini-frozen")
    p.add_argument("--weights", help="backbone weights for frozen archs")
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--test-per-class", type=int, default=0)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--width-mult", default="1/8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write full model weights here")
    _train_flags(p)

    p = add("sweep", cmd_sweep, "sample-size sweep; writes CSV plus an SVG learning-curve figure")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--preset", default="mini", choices=sorted(PRESETS))
    p.add_argument("--weights")
    p.add_argument("--grid", help="start:end:step or a preset name")
    p.add_argument("--archs", help="comma-separated arch ids")
    p.add_argument("--trials", type=int)
    p.add_argument("--eval-mode", choices=("holdout", "kfold"))
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--canvas", type=int)
    p.add_argument("--channels", type=int, choices=(1, 3))
    p.add_argument("--width-mult")
    p.add_argument("--seed", type=int)
    p.add_argument("--cache", help="feature cache directory")
    p.add_argument("--timing", action="store_true", help="record wall_seconds (CSV no longer byte-stable)")
    p.add_argument("--plot", help="figure path (default: CSV path with .svg)")
    p.add_argument("--no-plot", action="store_true")
    _train_flags(p)

    p = add("plot", cmd_plot, "render a sweep CSV as a learning-curve figure")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)

    p = add("cam", cmd_cam, "class activation map overlay for one image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--class-index", type=int, help="default: predicted class")

    p = add("inspect", cmd_inspect, "print a weight file's tensor table or an arch's parameter counts")
    p.add_argument("weights", nargs="?")
    p.add_argument("--arch")
    p.add_argument("--input-shape", help="CxHxW")
    p.add_argument("--width-mult")
    p.add_argument("--outputs", type=int, default=1)
    return parser, subs


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(argv, parser, subs):
    """Parse ``argv`` with the config file's values installed as defaults."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    command = next((tok for tok in argv if tok in subs), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must be a mapping")
    p = subs[command]
    known = {a.dest for a in p._actions}
    defaults = {}
    for key, value in data.items():
        dest = str(key).replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for '{command}'")
        defaults[dest] = value
    p.set_defaults(**defaults)
    # options supplied by the config are no longer required on the command line
    for a in p._actions:
        if a.dest in defaults:
            a.required = False
    return parser.parse_args(argv)


def _make_parents(args) -> None:
    """Create missing directories above output files (gen makes its own out dir)."""
    outs = [getattr(args, "plot", None)]
    if args.command != "gen":
        outs.append(getattr(args, "out", None))
    for out in outs:
        if out:
            Path(out).parent.mkdir(parents=True, exist_ok=True)


def main(argv=None) -> int:
    parser, subs = build_parser()
    try:
        args = _apply_config(argv, parser, subs)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _make_parents(args)
        return args.func(args)
    except UsageError as exc:
        print(f"transferlab: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"transferlab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, PNMError, WeightFileError, CacheMismatchError, CSVFormatError,
            KeyError, ValueError) as exc:
        print(f"transferlab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
