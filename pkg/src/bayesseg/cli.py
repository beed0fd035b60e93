"""``bayesseg`` command line.

Exit codes: 0 ok, 2 configuration error, 3 I/O or file format error,
4 data/model contract violation.
"""

import argparse
import os
import sys
from contextlib import nullcontext
from importlib import resources

from . import densenet as D
from . import experiments as E
from .config import ConfigError, RunConfig, parse_config
from .evaluation import evaluate
from .io import FormatError, read_dataset, read_image, read_split, write_btsr, write_dataset, write_heatmap, write_mask
from .metrics import report_csv, report_table
from .synthdata import CLASS_NAMES, generate
from .tensor import DimensionError
from .training import ClassStats, LabelError, SizeError, class_stats, split
from .uncertainty import DEFAULT_SAMPLES, DecisionRule, analyze

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 2, 3, 4


def preset_names():
    return sorted(p.name[:-4] for p in resources.files("bayesseg").joinpath("presets").iterdir()
                  if p.name.endswith(".cfg"))


def preset_text(name):
    path = resources.files("bayesseg").joinpath("presets", f"{name}.cfg")
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return path.read_text()


def _load(args):
    """Config file and/or preset, then ``--set key=value`` overrides."""
    text = ""
    if getattr(args, "preset", None):
        text += preset_text(args.preset) + "\n"
    if getattr(args, "config", None):
        with open(args.config) as fh:
            text += fh.read() + "\n"
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        text += item + "\n"
    return parse_config(text) if text.strip() else RunConfig().validate()


def _rule_from_meta(meta):
    strategy = meta.get("strategy", "UW-MAP")
    if strategy.endswith("-ML"):
        freqs = [float(v) for v in meta["frequencies"].split(",")]
        return DecisionRule("ML", freqs)
    return DecisionRule("MAP")


def _write_resolved(out_dir, lines):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.txt"), "w") as fh:
        fh.write("".join(f"{line}\n" for line in lines))


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(args):
    cfg = _load(args)
    scene = cfg.scene_spec()
    images, masks = generate(scene)
    write_dataset(args.out, images, masks, scene.header_lines(), split(len(images), cfg.split_seed))
    E.write_resolved_config(cfg, args.out)
    print(f"wrote {len(images)} {scene.task} images ({scene.height}x{scene.width}) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load(args)
    data = E.load_dataset(cfg, args.data)
    model = E.train_model(cfg, data, benchmark=args.benchmark, tag="benchmark" if args.benchmark else "bayesian")
    E.save_model(model, args.out, cfg.strategy, {"benchmark": int(args.benchmark)})
    E.write_resolved_config(cfg, args.out)
    print(f"best epoch {model.result.best_epoch}; checkpoint at {os.path.join(args.out, 'checkpoint.bseg')}")
    return EXIT_OK


def cmd_infer(args):
    params, spec, meta = D.load_checkpoint(args.model)
    image = read_image(args.image)
    if image.shape[-1] != spec.input_channels:
        raise DimensionError(f"image has {image.shape[-1]} channels, model expects {spec.input_channels}")
    rule = _rule_from_meta(meta)
    mask, maps, stack = analyze(params, spec, image, args.samples, args.seed, rule, keep_stack=True)
    out = args.out
    os.makedirs(out, exist_ok=True)
    write_mask(mask, os.path.join(out, "prediction.pgm"))
    write_heatmap(maps.entropy, os.path.join(out, "entropy.pgm"))
    write_heatmap(maps.mcsv, os.path.join(out, "mcsv.pgm"))
    write_btsr(maps.mean, os.path.join(out, "mean.btsr"))
    write_btsr(maps.csv, os.path.join(out, "csv.btsr"))
    if args.keep_stack:
        write_btsr(stack.samples, os.path.join(out, "stack.btsr"))
    _write_resolved(out, [f"model = {args.model}", f"image = {args.image}", f"samples = {args.samples}",
                          f"seed = {args.seed}", f"rule = {rule.kind}", f"keep_stack = {int(args.keep_stack)}"])
    print(f"{stack.source} inference with {stack.n_samples} sample(s); outputs in {out}")
    return EXIT_OK


def _load_eval_data(args, spec):
    images, masks, header = read_dataset(args.data)
    split_path = os.path.join(args.data, "split.txt")
    sp = read_split(split_path) if os.path.exists(split_path) else split(len(images), args.split_seed)
    indices = getattr(sp, args.split)
    if not indices or max(indices) >= len(images):
        raise E.DataError(f"split {args.split!r} does not index the {len(images)} images in {args.data}")
    E.check_network_fit(spec, images)
    for i in indices:
        if masks[i].max() >= spec.num_classes:
            raise E.DataError(f"mask {i}: label {int(masks[i].max())} outside the model's {spec.num_classes} classes")
    return images, masks, header, indices


def _class_names(header, num_classes):
    names = CLASS_NAMES.get(header.get("task", ""))
    return names if names is not None and len(names) == num_classes else None


def cmd_evaluate(args):
    params, spec, meta = D.load_checkpoint(args.model)
    images, masks, header, indices = _load_eval_data(args, spec)
    rule = _rule_from_meta(meta)
    ev = evaluate(params, spec, images, masks, indices, args.samples, args.seed, rule)
    os.makedirs(args.out, exist_ok=True)
    label = f"{meta.get('strategy', rule.kind)} ({args.split})"
    names = _class_names(header, spec.num_classes)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(f"# split = {args.split}\n")
        fh.write(report_table([ev.report], [label], names))
    with open(os.path.join(args.out, "report.csv"), "w") as fh:
        fh.write(report_csv([ev.report], [label], names))
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write("\n".join(ev.summary_lines(args.split)) + "\n")
    _write_resolved(args.out, [f"model = {args.model}", f"data = {args.data}", f"split = {args.split}",
                               f"samples = {args.samples}", f"seed = {args.seed}", f"split_seed = {args.split_seed}"])
    print("\n".join(ev.summary_lines(args.split)))
    return EXIT_OK


def cmd_surrogate(args):
    cfg = _load(args)
    params, spec, meta = D.load_checkpoint(args.base)
    data = E.load_dataset(cfg, args.data)
    E.check_network_fit(spec, data.images)
    stats_path = os.path.join(os.path.dirname(os.path.abspath(args.base)), "class_stats.txt")
    if os.path.exists(stats_path):
        with open(stats_path) as fh:
            stats = ClassStats.from_text(fh.read())
    else:
        stats = class_stats([data.masks[i] for i in data.split.train], data.num_classes, cfg.weight_scheme)
    base = E.TrainedModel(params, spec, stats, None)
    res = E.surrogate_study(cfg, data, base, args.out)
    E.write_resolved_config(cfg, args.out)
    print(f"mean IoU difference (surrogate - initial): {100 * res.iou_difference:+.2f}")
    return EXIT_OK


def cmd_experiment(args):
    cfg = _load(args)
    E.run_experiment(cfg, args.out)
    with open(os.path.join(args.out, "summary.txt")) as fh:
        print(fh.read(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="bayesseg", description="Bayesian FC-DenseNet segmentation with "
                                     "MC-dropout uncertainty on synthetic inspection scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p, required=False):
        p.add_argument("--config", required=required, help="key = value run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("generate-data", help="write a synthetic dataset directory")
    config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a Bayesian (or --benchmark) model")
    config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--benchmark", action="store_true", help="dropout-free benchmark model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="prediction and uncertainty maps for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keep-stack", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="metrics and uncertainty AUROC over a split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0, help="used only when the dataset has no split.txt")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("surrogate", help="train the uncertainty-input surrogate on top of a base model")
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_surrogate)

    p = sub.add_parser("experiment", help="run a preset case study end to end")
    p.add_argument("--preset", help="bundled preset name: " + ", ".join(preset_names()))
    config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def _thread_limit():
    raw = os.environ.get("BSEG_THREADS", "").strip()
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"BSEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"BSEG_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (E.DataError, LabelError, SizeError, DimensionError, D.SpecError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
