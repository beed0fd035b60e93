"""Experiment presets: train, evaluate and tabulate the case-study comparisons.

Every runner writes into one run directory::

    resolved_config.txt        the full RunConfig used
    <model>/checkpoint.bseg    one directory per trained model
    <model>/train_log.csv
    <model>/class_stats.txt
    <model>/heatmaps/          entropy and MCSV maps of the first test image
    report.txt / report.csv    comparison table(s)
    summary.txt                headline numbers as ``key = value`` lines
"""

import hashlib
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import densenet as D
from .config import ConfigError
from .evaluation import evaluate
from .io import read_dataset, read_split, write_heatmap
from .metrics import report_csv, report_table
from .surrogate import run_surrogate_pipeline
from .synthdata import CLASS_NAMES, NUM_CLASSES, generate
from .training import class_stats, fit, split
from .uncertainty import DecisionRule

# (task, strategy) per surrogate case study
SURROGATE_TRIO = (("crack", "UW-ML"), ("damage", "UW-MAP"), ("component", "UW-MAP"))


class DataError(ValueError):
    """Dataset that does not fit the configured network or task."""


@dataclass
class Dataset:
    images: list
    masks: list
    split: object
    num_classes: int
    class_names: tuple


@dataclass
class TrainedModel:
    params: object
    spec: object
    stats: object
    result: object


def _stderr(msg):
    print(msg, file=sys.stderr, flush=True)


def load_dataset(cfg, data_dir=None):
    """Read ``data_dir`` (or ``cfg.data_dir``) if set, otherwise generate the configured scenes."""
    data_dir = data_dir or cfg.data_dir
    num_classes = NUM_CLASSES[cfg.task]
    if data_dir:
        images, masks, header = read_dataset(data_dir)
        task = header.get("task", cfg.task)
        if task != cfg.task:
            raise DataError(f"dataset task {task!r} does not match config task {cfg.task!r}")
        split_path = os.path.join(data_dir, "split.txt")
        sp = read_split(split_path) if os.path.exists(split_path) else split(len(images), cfg.split_seed)
    else:
        images, masks = generate(cfg.scene_spec())
        sp = split(len(images), cfg.split_seed)
    n = len(images)
    for name in ("train", "val", "test"):
        idx = getattr(sp, name)
        if not idx or min(idx) < 0 or max(idx) >= n:
            raise DataError(f"split {name!r} must be a non-empty index list within [0, {n})")
    for i, m in enumerate(masks):
        if m.max() >= num_classes:
            raise DataError(f"mask {i}: label {int(m.max())} outside [0, {num_classes}) for task {cfg.task!r}")
    return Dataset(images, masks, sp, num_classes, CLASS_NAMES[cfg.task])


def check_network_fit(spec, images):
    multiple = 2 ** spec.n_pools
    for i, img in enumerate(images):
        h, w, c = img.shape
        if h % multiple or w % multiple:
            raise DataError(f"image {i}: size {h}x{w} is not divisible by {multiple} for {spec.n_pools} pools")
        if c != spec.input_channels:
            raise DataError(f"image {i}: {c} channels, network expects {spec.input_channels}")


def train_model(cfg, data, seed=None, benchmark=False, scheme=None, log=_stderr, tag=""):
    strategy = cfg.strategy if scheme is None else f"{scheme}-{cfg.rule_kind}"
    run_cfg = cfg.replace(strategy=strategy)
    spec = run_cfg.network_spec(data.num_classes, data.images[0].shape[-1], benchmark)
    check_network_fit(spec, data.images)
    tc = run_cfg.train_config(seed)
    sp = data.split
    stats = class_stats([data.masks[i] for i in sp.train], data.num_classes, tc.weight_scheme)

    def progress(rec):
        log(f"[{tag or 'train'}] {rec.line()}")

    result = fit(spec, tc, [data.images[i] for i in sp.train], [data.masks[i] for i in sp.train],
                 [data.images[i] for i in sp.val], [data.masks[i] for i in sp.val], stats, callback=progress)
    return TrainedModel(result.params, spec, stats, result)


def rule_for(kind, stats):
    return DecisionRule("ML", tuple(stats.frequencies)) if kind == "ML" else DecisionRule("MAP")


def save_model(model, out_dir, strategy, extra_meta=None):
    os.makedirs(out_dir, exist_ok=True)
    meta = {"strategy": strategy, "weight_scheme": model.stats.scheme,
            "frequencies": ",".join(repr(float(f)) for f in model.stats.frequencies)}
    meta.update(extra_meta or {})
    D.save_checkpoint(model.params, model.spec, os.path.join(out_dir, "checkpoint.bseg"), meta)
    with open(os.path.join(out_dir, "train_log.csv"), "w") as fh:
        fh.write(model.result.log_text())
    with open(os.path.join(out_dir, "class_stats.txt"), "w") as fh:
        fh.write(model.stats.to_text())


def write_example_heatmaps(evaluation, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    maps = evaluation.maps[0]
    write_heatmap(maps.entropy, os.path.join(out_dir, "entropy.pgm"))
    write_heatmap(maps.mcsv, os.path.join(out_dir, "mcsv.pgm"))


def write_resolved_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.txt"), "w") as fh:
        fh.write(cfg.to_text())


def _write(out_dir, name, text):
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write(text)


def _fmt(x):
    return "nan" if x is None or np.isnan(x) else f"{x:.6f}"


# ---------------------------------------------------------------------------
# presets


def run_crack_six(cfg, out_dir, log=_stderr):
    """Bayesian and benchmark models under UW-MAP, UW-ML and MFW-MAP (four trainings)."""
    data = load_dataset(cfg)
    models = {}
    for scheme in ("UW", "MFW"):
        for benchmark in (True, False):
            name = f"{'benchmark' if benchmark else 'bayesian'}_{scheme}"
            model = train_model(cfg, data, benchmark=benchmark, scheme=scheme, log=log, tag=name)
            save_model(model, os.path.join(out_dir, name), f"{scheme}-*")
            models[name] = model

    labels, reports, evals, summary = [], [], {}, []
    for strategy in ("UW-MAP", "UW-ML", "MFW-MAP"):
        scheme, kind = strategy.split("-")
        for kind_name in ("benchmark", "bayesian"):
            model = models[f"{kind_name}_{scheme}"]
            ev = evaluate(model.params, model.spec, data.images, data.masks, data.split.test,
                          cfg.n_samples, cfg.infer_seed, rule_for(kind, model.stats))
            label = f"{kind_name.capitalize()} {strategy}"
            labels.append(label)
            reports.append(ev.report)
            evals[label] = ev
            key = f"{kind_name}_{strategy}"
            summary += [f"{key}.crack_recall = {_fmt(ev.report.recall[1])}",
                        f"{key}.crack_precision = {_fmt(ev.report.precision[1])}",
                        f"{key}.crack_f1 = {_fmt(ev.report.f1[1])}",
                        f"{key}.GA = {_fmt(ev.report.ga)}",
                        f"{key}.MCA = {_fmt(ev.report.mca)}",
                        f"{key}.entropy_auroc = {_fmt(ev.entropy_auroc)}",
                        f"{key}.mcsv_auroc = {_fmt(ev.mcsv_auroc)}"]
    write_example_heatmaps(evals["Bayesian UW-MAP"], os.path.join(out_dir, "bayesian_UW", "heatmaps"))
    diffs = [(0, 1), (2, 3), (4, 5)]
    _write(out_dir, "report.txt", report_table(reports, labels, data.class_names, diffs))
    _write(out_dir, "report.csv", report_csv(reports, labels, data.class_names, diffs))
    _write(out_dir, "summary.txt", "\n".join(summary) + "\n")
    return evals


def run_pair(cfg, out_dir, log=_stderr):
    """Bayesian vs benchmark under ``cfg.strategy`` for every seed in ``cfg.seed_list``."""
    data = load_dataset(cfg)
    summary, wins, results = [], 0, {}
    for seed in cfg.seed_list:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        pair = {}
        for kind_name, benchmark in (("benchmark", True), ("bayesian", False)):
            model = train_model(cfg, data, seed=seed, benchmark=benchmark, log=log, tag=f"{kind_name} seed {seed}")
            save_model(model, os.path.join(seed_dir, kind_name), cfg.strategy, {"seed": seed})
            ev = evaluate(model.params, model.spec, data.images, data.masks, data.split.test,
                          cfg.n_samples, cfg.infer_seed, rule_for(cfg.rule_kind, model.stats))
            write_example_heatmaps(ev, os.path.join(seed_dir, kind_name, "heatmaps"))
            pair[kind_name] = ev
        labels = [f"Benchmark {cfg.strategy}", f"Bayesian {cfg.strategy}"]
        reports = [pair["benchmark"].report, pair["bayesian"].report]
        _write(seed_dir, "report.txt", report_table(reports, labels, data.class_names, [(0, 1)]))
        _write(seed_dir, "report.csv", report_csv(reports, labels, data.class_names, [(0, 1)]))
        f_bench, f_bayes = pair["benchmark"].report.mean("f1"), pair["bayesian"].report.mean("f1")
        wins += int(f_bayes >= f_bench)
        summary += [f"seed_{seed}.benchmark_mean_f1 = {_fmt(f_bench)}",
                    f"seed_{seed}.bayesian_mean_f1 = {_fmt(f_bayes)}",
                    f"seed_{seed}.benchmark_mean_iou = {_fmt(pair['benchmark'].report.mean('iou'))}",
                    f"seed_{seed}.bayesian_mean_iou = {_fmt(pair['bayesian'].report.mean('iou'))}",
                    f"seed_{seed}.bayesian_entropy_auroc = {_fmt(pair['bayesian'].entropy_auroc)}",
                    f"seed_{seed}.bayesian_mcsv_auroc = {_fmt(pair['bayesian'].mcsv_auroc)}"]
        results[seed] = pair
    summary.append(f"bayesian_at_least_benchmark = {wins}/{len(cfg.seed_list)}")
    _write(out_dir, "summary.txt", "\n".join(summary) + "\n")
    return results


def surrogate_study(cfg, data, base, out_dir, log=_stderr):
    """Surrogate on top of a trained base model; writes the paired report into ``out_dir``."""
    kind = cfg.rule_kind
    base_rule = rule_for(kind, base.stats)
    tc = cfg.train_config()
    res = run_surrogate_pipeline(base.params, base.spec, data.images, data.masks, data.split, tc,
                                 cfg.n_samples, cfg.infer_seed, base_rule,
                                 rule_for=lambda stats: rule_for(kind, stats))
    stats = class_stats([data.masks[i] for i in data.split.train], data.num_classes, tc.weight_scheme)
    surrogate = TrainedModel(res.params, res.spec, stats, res.train_result)
    save_model(surrogate, os.path.join(out_dir, "surrogate"), cfg.strategy, {"role": "surrogate"})
    write_example_heatmaps(res.surrogate_eval, os.path.join(out_dir, "surrogate", "heatmaps"))
    _write(os.path.join(out_dir, "surrogate"), "normalization.txt",
           res.normalization.to_text(data.images[0].shape[-1]))
    labels = ["Initial", "Surrogate"]
    reports = [res.base_eval.report, res.surrogate_eval.report]
    mcsv = (res.base_eval.mean_mcsv, res.surrogate_eval.mean_mcsv)
    _write(out_dir, "report.txt", report_table(reports, labels, data.class_names, [(0, 1)])
           + f"\nMean test MCSV: Initial {mcsv[0]:.6e}, Surrogate {mcsv[1]:.6e}, "
             f"Difference {mcsv[1] - mcsv[0]:+.6e}\n")
    _write(out_dir, "report.csv", report_csv(reports, labels, data.class_names, [(0, 1)])
           + f"mean_mcsv,all,{mcsv[0]!r},{mcsv[1]!r},{mcsv[1] - mcsv[0]!r}\n")
    summary = [f"initial_mean_iou = {_fmt(res.base_eval.report.mean('iou'))}",
               f"surrogate_mean_iou = {_fmt(res.surrogate_eval.report.mean('iou'))}",
               f"mean_iou_difference = {100 * res.iou_difference:+.2f}",
               f"initial_mean_mcsv = {res.base_eval.mean_mcsv:.6e}",
               f"surrogate_mean_mcsv = {res.surrogate_eval.mean_mcsv:.6e}",
               f"test_indices = {' '.join(str(i) for i in data.split.test)}"]
    _write(out_dir, "summary.txt", "\n".join(summary) + "\n")
    return res


def run_surrogate_trio(cfg, out_dir, log=_stderr, tasks=SURROGATE_TRIO):
    results = {}
    for task, strategy in tasks:
        sub = cfg.replace(task=task, strategy=strategy)
        task_dir = os.path.join(out_dir, task)
        write_resolved_config(sub, task_dir)
        data = load_dataset(sub)
        base = train_model(sub, data, log=log, tag=f"{task} base")
        save_model(base, os.path.join(task_dir, "base"), strategy)
        log(f"[{task}] building surrogate inputs")
        results[task] = surrogate_study(sub, data, base, task_dir, log)
    lines = [f"{task}.mean_iou_difference = {100 * r.iou_difference:+.2f}" for task, r in results.items()]
    _write(out_dir, "summary.txt", "\n".join(lines) + "\n")
    return results


def run_single(cfg, out_dir, log=_stderr):
    data = load_dataset(cfg)
    model = train_model(cfg, data, log=log)
    save_model(model, os.path.join(out_dir, "model"), cfg.strategy)
    ev = evaluate(model.params, model.spec, data.images, data.masks, data.split.test,
                  cfg.n_samples, cfg.infer_seed, rule_for(cfg.rule_kind, model.stats))
    write_example_heatmaps(ev, os.path.join(out_dir, "model", "heatmaps"))
    _write(out_dir, "report.txt", report_table([ev.report], [cfg.strategy], data.class_names))
    _write(out_dir, "summary.txt", "\n".join(ev.summary_lines("test")) + "\n")
    return ev


RUNNERS = {
    "single": run_single,
    "crack-6-combinations": run_crack_six,
    "damage-pair": run_pair,
    "component-pair": run_pair,
    "surrogate-trio": run_surrogate_trio,
}


def run_experiment(cfg, out_dir, log=_stderr):
    if cfg.experiment not in RUNNERS:
        raise ConfigError(f"experiment: unknown preset {cfg.experiment!r}")
    write_resolved_config(cfg, out_dir)
    return RUNNERS[cfg.experiment](cfg, out_dir, log=log)


def digest_tree(root):
    """SHA-256 over every file (relative path + bytes), for determinism checks."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
