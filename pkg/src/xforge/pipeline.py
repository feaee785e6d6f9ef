"""Pipeline stages over a run directory.

Each stage reads what earlier stages persisted and writes its own
artifacts, so stages can be re-run independently:

``train_classifier`` -> ``explain`` -> ``evaluate`` -> ``fuse`` ->
``optimize`` -> ``report``.

Instances come from three sets: ``train`` and ``val`` feed fusion
calibration and optimizer training, ``test`` is held out for the report.
Each instance is explained for the class the classifier predicts.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attributions as A
from . import metrics as M
from .classifier import (
    Checkpoint,
    ClassifierConfig,
    build_classifier,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
    train_classifier,
)
from .config import RunConfig
from .data import ShapesConfig, generate_shapes, load_cifar10, load_split, save_split
from .fusion import WeightVector, calibrate_weights, weighted_average
from .io import HeatmapRender, load_map, read_csv, render_heatmap, save_map, write_csv
from .optimizer import (
    OptimizerSchedule,
    build_optimizer_net,
    explain_optimal,
    make_optimizer_data,
    save_optimizer,
    stack_inputs,
    train_optimizer,
)

log = logging.getLogger(__name__)

SETS = ("train", "val", "test")
WA = "weighted_average"
OPT = "explanation_optimizer"
OPT_HR = "explanation_optimizer_hr"


class StageError(RuntimeError):
    """A stage was run before the artifacts it depends on exist."""


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class RunPaths:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def config(self) -> Path:
        return self.root / "config.txt"

    @property
    def state(self) -> Path:
        return self.root / "run.json"

    @property
    def split(self) -> Path:
        return self.root / "data" / "split.xftn"

    @property
    def classifier(self) -> Path:
        return self.root / "classifier" / "classifier.xftn"

    @property
    def classifier_curves(self) -> Path:
        return self.root / "classifier" / "curves.csv"

    @property
    def instances(self) -> Path:
        return self.root / "instances.csv"

    def map(self, instance: str, method: str) -> Path:
        return self.root / "maps" / instance / f"{method}.xmap"

    def png(self, instance: str, method: str, suffix: str = "") -> Path:
        return self.root / "png" / f"{instance}_{method}{suffix}.png"

    def perturbations(self, set_name: str) -> Path:
        return self.root / "perturbations" / f"{set_name}.npz"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics"

    @property
    def weights(self) -> Path:
        return self.root / "fusion" / "weights.csv"

    @property
    def optimizer(self) -> Path:
        return self.root / "optimizer" / "optimizer.xftn"

    @property
    def optimizer_curves(self) -> Path:
        return self.root / "optimizer" / "curves.csv"

    @property
    def report(self) -> Path:
        return self.root / "report"


def _read_state(paths: RunPaths) -> dict:
    return json.loads(paths.state.read_text()) if paths.state.exists() else {}


def _update_state(paths: RunPaths, **fields) -> None:
    state = _read_state(paths)
    state.update(fields)
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.state.write_text(json.dumps(state, indent=2))


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"{path} is missing; run the {stage} stage first")
    return path


def _snapshot(cfg: RunConfig) -> RunPaths:
    paths = RunPaths(cfg.out)
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.config.write_text(cfg.dumps(), encoding="utf-8")
    return paths


def thread_count() -> int:
    """Worker processes for per-instance stages (``XFORGE_THREADS``, default 1)."""
    raw = os.environ.get("XFORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"XFORGE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _parallel_map(fn: Callable, jobs: Sequence) -> list:
    n = min(thread_count(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * n))))


def instance_seed(seed: int, set_name: str, index: int) -> int:
    return int(np.random.SeedSequence([seed, SETS.index(set_name), index]).generate_state(1)[0])


# ---------------------------------------------------------------- classifier


def prepare_data(cfg: RunConfig):
    d = cfg.data
    if d.source == "shapes":
        return generate_shapes(ShapesConfig(d.image_size, d.num_classes, d.per_class, d.noise, seed=cfg.seed))
    if d.source == "cifar10":
        if not d.cifar_dir:
            raise ValueError("data.cifar_dir must be set when data.source = cifar10")
        return load_cifar10(d.cifar_dir, seed=cfg.seed)
    raise ValueError(f"unknown data.source {d.source!r}; expected shapes or cifar10")


def train_classifier_stage(cfg: RunConfig) -> Checkpoint:
    paths = _snapshot(cfg)
    split = prepare_data(cfg)
    save_split(paths.split, split)
    config = ClassifierConfig(split.input_shape, cfg.classifier.blocks, cfg.classifier.width, split.num_classes)
    model = build_classifier(config, seed=cfg.seed)
    schedule = replace(cfg.train, seed=cfg.seed + cfg.train.seed)
    ckpt = train_classifier(model, split, schedule, cfg.augment)
    paths.classifier.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, paths.classifier)
    cols = ["epoch", "train_loss", "val_loss", "train_acc", "val_acc", "lr"]
    write_csv(paths.classifier_curves, cols, ([row.get(c, "") for c in cols] for row in ckpt.curves))
    log.info("classifier test accuracy %.3f", ckpt.metrics.get("test_acc", math.nan))
    return ckpt


# ---------------------------------------------------------------- instances and attribution


@dataclass(frozen=True)
class Instance:
    set_name: str
    index: int
    label: int
    target: int

    @property
    def id(self) -> str:
        return f"{self.set_name}_{self.index:04d}"


def _set_sizes(cfg: RunConfig) -> dict[str, int]:
    return {"train": cfg.optimizer.train_instances, "val": cfg.optimizer.val_instances, "test": cfg.evaluation.test_instances}


def select_instances(cfg: RunConfig, split, model) -> list[Instance]:
    out = []
    for set_name, n in _set_sizes(cfg).items():
        sub = split.part(set_name)
        n = min(n, len(sub))
        pred = predict_logits(model, sub.x[:n]).argmax(axis=1) if n else []
        out.extend(Instance(set_name, i, int(sub.y[i]), int(pred[i])) for i in range(n))
    return out


def load_instances(paths: RunPaths) -> list[Instance]:
    rows = read_csv(_require(paths.instances, "explain"))
    return [Instance(r["set"], int(r["index"]), int(r["label"]), int(r["target"])) for r in rows]


def partition_for(cfg: RunConfig, shape) -> A.PatchPartition:
    return A.PatchPartition.default(shape[-2], shape[-1], patch=cfg.metrics.patch)


def validate_methods(methods: Sequence[str]) -> tuple[str, ...]:
    unknown = [m for m in methods if m not in A.METHOD_NAMES]
    if unknown or not methods:
        raise ValueError(f"unknown method(s) {unknown}; valid: {', '.join(A.METHOD_NAMES)}")
    return tuple(methods)


def method_params(cfg: RunConfig, method: str, seed: int, reference: np.ndarray, partition) -> dict:
    a = cfg.attribution
    return {
        "saliency": {},
        "deeplift": {"seed": seed},
        "kernel_shap": {"partition": partition, "n_coalitions": a.kernel_shap_coalitions, "ridge": a.kernel_shap_ridge, "seed": seed},
        "deeplift_shap": {"reference": reference, "n_samples": a.deeplift_shap_samples, "seed": seed},
        "integrated_gradients": {"steps": a.ig_steps, "rule": a.ig_rule, "seed": seed},
        "guided_backprop": {},
        "guided_gradcam": {"layer": a.gradcam_layer},
        "gradient_shap": {"n_samples": a.gradient_shap_samples, "sigma": a.gradient_shap_sigma, "seed": seed},
    }[method]


def _explain_job(job) -> list[np.ndarray]:
    model, x, target, calls = job
    return [A.explain(model, x, target, name, **params).scores for name, params in calls]


def explain_stage(cfg: RunConfig, methods: Sequence[str] | None = None, render: bool = True) -> list[Instance]:
    """Attribution maps for every selected instance, plus PNG heatmaps for the test set."""
    methods = validate_methods(methods or cfg.attribution.methods)
    paths = _snapshot(cfg)
    split = load_split(_require(paths.split, "train-classifier"))
    model = load_checkpoint(_require(paths.classifier, "train-classifier")).model()
    instances = select_instances(cfg, split, model)
    write_csv(paths.instances, ["set", "index", "id", "label", "target"], ((i.set_name, i.index, i.id, i.label, i.target) for i in instances))
    reference = split.train.x[: cfg.attribution.deeplift_shap_references]
    part = partition_for(cfg, split.input_shape)
    jobs = []
    for inst in instances:
        seed = instance_seed(cfg.seed, inst.set_name, inst.index)
        calls = [(m, method_params(cfg, m, seed, reference, part)) for m in methods]
        jobs.append((model, split.part(inst.set_name).x[inst.index], inst.target, calls))
    t0 = time.time()
    results = _parallel_map(_explain_job, jobs)
    for inst, maps in zip(instances, results):
        x = split.part(inst.set_name).x[inst.index]
        for m, scores in zip(methods, maps):
            amap = A.AttributionMap(scores, m, inst.target, instance=inst.id)
            save_map(paths.map(inst.id, m), amap)
            if render and inst.set_name == "test":
                _render(paths, inst.id, m, amap, x, part)
    log.info("explained %d instances x %d methods in %.1fs", len(instances), len(methods), time.time() - t0)
    _update_state(paths, methods=list(methods))
    return instances


def _render(paths: RunPaths, instance: str, method: str, amap, x, part) -> None:
    import warnings

    out = paths.png(instance, method)
    out.parent.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        out.write_bytes(render_heatmap(amap, HeatmapRender(), partition=part))
        paths.png(instance, method, "_top10").write_bytes(render_heatmap(amap, HeatmapRender(q=0.1), image=x, partition=part))


def run_methods(paths: RunPaths) -> tuple[str, ...]:
    methods = _read_state(paths).get("methods")
    if not methods:
        raise StageError(f"{paths.state} lists no explained methods; run the explain stage first")
    return tuple(methods)


# ---------------------------------------------------------------- perturbations and metrics


def _perturb_job(job) -> tuple[np.ndarray, np.ndarray]:
    model, x, target, fcfg = job
    p = M.perturb(model, x, target, fcfg)
    return p.subsets, p.deltas


def _load_perturbations(paths: RunPaths, set_name: str, part) -> dict[str, M.Perturbations]:
    with np.load(_require(paths.perturbations(set_name), "evaluate")) as z:
        return {str(i): M.Perturbations(s, d, part) for i, s, d in zip(z["ids"], z["subsets"], z["deltas"])}


def score(scores: np.ndarray, pert: M.Perturbations) -> tuple[float, float]:
    """(faithfulness, complexity) from persisted perturbations; ``nan`` marks undefined."""
    scores = np.asarray(scores, dtype=np.float64)
    faith = M.pearson(pert.subset_sums(scores), pert.deltas)
    try:
        compx = M.complexity(scores, pert.partition)
    except M.MetricError:
        compx = math.nan
    return faith, compx


def _score_set(paths: RunPaths, instances: Sequence[Instance], perts: dict, methods: Sequence[str], limit: int | None = None):
    rows = []
    for inst in instances:
        p = perts[inst.id]
        if limit is not None:
            p = M.Perturbations(p.subsets[:limit], p.deltas[:limit], p.partition)
        for m in methods:
            f, c = score(load_map(paths.map(inst.id, m)).scores, p)
            rows.append(M.InstanceScore(inst.id, m, f, c))
    return M.MetricReport(rows)


def write_metric_report(directory: Path, report: M.MetricReport, methods: Sequence[str]) -> dict[str, M.StatTestResult]:
    """Per-instance scores, summary rows and Kruskal-Wallis tests as CSV."""
    write_csv(
        directory / "scores.csv",
        ["instance_id", "method", "faithfulness", "complexity", "undefined_flag"],
        ((r.instance, r.method, r.faithfulness, r.complexity, int(r.undefined)) for r in report.rows),
    )
    rows, tests = [], {}
    for metric in ("faithfulness", "complexity"):
        for s in report.summary(metric):
            rows.append((metric, s.method, s.count, s.undefined, s.mean, s.median, s.q1, s.q3, s.minimum, s.maximum))
        groups = report.by_method(metric)
        try:
            tests[metric] = M.kruskal_wallis([groups[m] for m in methods], labels=methods)
        except M.MetricError as e:
            log.warning("Kruskal-Wallis on %s skipped: %s", metric, e)
    write_csv(directory / "summary.csv", ["metric", "method", "count", "undefined", "mean", "median", "q1", "q3", "min", "max"], rows)
    write_csv(
        directory / "kruskal.csv",
        ["metric", "H", "dof", "p_value", "groups"],
        ((k, t.statistic, t.dof, t.pvalue, ";".join(t.labels)) for k, t in tests.items()),
    )
    return tests


def evaluate_stage(cfg: RunConfig) -> M.MetricReport:
    """Perturbation draws for every instance, then the baseline MetricReport on the test set."""
    paths = _snapshot(cfg)
    split = load_split(_require(paths.split, "train-classifier"))
    model = load_checkpoint(_require(paths.classifier, "train-classifier")).model()
    instances = load_instances(paths)
    methods = run_methods(paths)
    part = partition_for(cfg, split.input_shape)
    size = cfg.metrics.subset_size or None
    for set_name in SETS:
        members = [i for i in instances if i.set_name == set_name]
        n = cfg.metrics.perturbations if set_name == "test" else max(cfg.optimizer.pool, cfg.metrics.perturbations)
        jobs = [
            (model, split.part(set_name).x[i.index], i.target,
             M.FaithfulnessConfig(n, size, 0.0, part, instance_seed(cfg.seed, set_name, i.index) + 1))
            for i in members
        ]
        out = _parallel_map(_perturb_job, jobs)
        paths.perturbations(set_name).parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            paths.perturbations(set_name),
            ids=np.array([i.id for i in members]),
            subsets=np.array([s for s, _ in out]).reshape(len(out), n, -1),
            deltas=np.array([d for _, d in out]).reshape(len(out), n),
        )
    test = [i for i in instances if i.set_name == "test"]
    report = _score_set(paths, test, _load_perturbations(paths, "test", part), methods)
    write_metric_report(paths.metrics, report, methods)
    return report


# ---------------------------------------------------------------- fusion


def fuse_stage(cfg: RunConfig) -> WeightVector:
    """Calibrate weights on the validation instances and write a Weighted Average map per instance."""
    paths = _snapshot(cfg)
    methods = run_methods(paths)
    instances = load_instances(paths)
    val = [i for i in instances if i.set_name == "val"]
    if not val:
        raise StageError("fusion calibration needs validation instances (optimizer.val_instances > 0)")
    shape = load_map(paths.map(val[0].id, methods[0])).shape
    part = partition_for(cfg, shape)
    report = _score_set(paths, val, _load_perturbations(paths, "val", part), methods, limit=cfg.metrics.perturbations)
    table = {m: [(r.faithfulness, r.complexity) for r in report.rows if r.method == m] for m in methods}
    weights = calibrate_weights(table, cfg.fusion.l1, cfg.fusion.l2)
    write_csv(
        paths.weights,
        ["method", "avg_faith", "avg_compx", "weight"],
        zip(weights.methods, weights.avg_faith.tolist(), weights.avg_compx.tolist(), weights.weights.tolist()),
    )
    for inst in instances:
        maps = [load_map(paths.map(inst.id, m)) for m in methods]
        wa = weighted_average(maps, weights, instance=inst.id, normalize=True)
        save_map(paths.map(inst.id, WA), A.AttributionMap(wa.scores, WA, inst.target, instance=inst.id))
    return weights


# ---------------------------------------------------------------- optimizer


def _optimizer_data(paths: RunPaths, instances: Sequence[Instance], methods, part, set_name: str):
    members = [i for i in instances if i.set_name == set_name]
    perts = _load_perturbations(paths, set_name, part)
    inputs, wets = [], []
    for inst in members:
        maps = [load_map(paths.map(inst.id, m)) for m in methods]
        wa = load_map(_require(paths.map(inst.id, WA), "fuse"))
        inputs.append(stack_inputs(maps, wa, methods))
        wets.append(wa.scores)
    labels = np.array([i.target for i in members])
    return members, make_optimizer_data(np.array(inputs), np.array(wets), [perts[i.id] for i in members], labels)


def optimize_stage(cfg: RunConfig, lr_grid: Sequence[float] | None = None):
    """Train the explanation optimizer and write its maps for the test instances."""
    paths = _snapshot(cfg)
    methods = run_methods(paths)
    instances = load_instances(paths)
    shape = load_map(paths.map(instances[0].id, methods[0])).shape
    part = partition_for(cfg, shape)
    _, train = _optimizer_data(paths, instances, methods, part, "train")
    _, val = _optimizer_data(paths, instances, methods, part, "val")
    o = cfg.optimizer
    schedule = OptimizerSchedule(
        lr_grid=tuple(lr_grid or o.lr_grid),
        max_epochs=o.max_epochs,
        patience=o.patience,
        stop_after=o.stop_after,
        batch_size=o.batch_size,
        draws_per_step=o.draws_per_step,
        seed=cfg.seed,
    )
    net = build_optimizer_net(len(methods), width=o.width, image_size=shape, seed=cfg.seed)
    t0 = time.time()
    result = train_optimizer(net, train, val, cfg.loss, schedule)
    log.info("optimizer trained in %.1fs; best lr %g at epoch %d", time.time() - t0, result.best.lr, result.best.best_epoch)
    paths.optimizer.parent.mkdir(parents=True, exist_ok=True)
    save_optimizer(result.net, paths.optimizer, {"methods": list(methods), "lr": result.best.lr, "best_epoch": result.best.best_epoch})
    curves = result.curves
    cols = list(dict.fromkeys(k for row in curves for k in row))
    write_csv(paths.optimizer_curves, cols, ([row.get(c, "") for c in cols] for row in curves))
    for c in sorted({k for row in curves for k in row if k.startswith("val_loss_class")}):
        write_csv(paths.optimizer.parent / f"curves_{c[len('val_loss_'):]}.csv", ["lr", "epoch", "val_loss"], ((r["lr"], r["epoch"], r[c]) for r in curves))
    test, data = _optimizer_data(paths, instances, methods, part, "test")
    split = load_split(paths.split) if paths.split.exists() else None
    for inst, pair in zip(test, explain_optimal(result.net, data.inputs)):
        lr_map = A.AttributionMap(pair.lr, OPT, inst.target, instance=inst.id)
        save_map(paths.map(inst.id, OPT), lr_map)
        save_map(paths.map(inst.id, OPT_HR), A.AttributionMap(pair.hr, OPT_HR, inst.target, instance=inst.id))
        if split is not None:
            _render(paths, inst.id, OPT, lr_map, split.test.x[inst.index], part)
    _update_state(paths, optimizer={"lr": result.best.lr, "best_epoch": result.best.best_epoch, "seconds": time.time() - t0})
    return result


# ---------------------------------------------------------------- report


@dataclass
class Report:
    methods: tuple[str, ...]  # row order: baselines, then fused and optimized maps when present
    metrics: M.MetricReport
    tests: dict[str, M.StatTestResult]

    def mean(self, method: str, metric: str) -> float:
        return self.metrics.mean(method, metric)

    @property
    def baselines(self) -> tuple[str, ...]:
        return tuple(m for m in self.methods if m not in (WA, OPT))


def report_stage(cfg: RunConfig) -> Report:
    """Headline table and box-plot data from persisted maps and perturbations only."""
    paths = RunPaths(cfg.out)
    methods = run_methods(paths)
    test = [i for i in load_instances(paths) if i.set_name == "test"]
    if not test:
        raise StageError("no test instances to report on")
    rows = list(methods)
    for extra in (WA, OPT):
        if all(paths.map(i.id, extra).exists() for i in test):
            rows.append(extra)
    shape = load_map(paths.map(test[0].id, methods[0])).shape
    metrics = _score_set(paths, test, _load_perturbations(paths, "test", partition_for(cfg, shape)), rows)
    out = paths.report
    tests = write_metric_report(out, metrics, methods)
    summary = {metric: {s.method: s for s in metrics.summary(metric)} for metric in ("faithfulness", "complexity")}
    write_csv(
        out / "report.csv",
        ["method", "instances", "undefined", "faithfulness_mean", "faithfulness_median", "complexity_mean", "complexity_median"],
        (
            (m, summary["faithfulness"][m].count + summary["faithfulness"][m].undefined, summary["faithfulness"][m].undefined,
             summary["faithfulness"][m].mean, summary["faithfulness"][m].median,
             summary["complexity"][m].mean, summary["complexity"][m].median)
            for m in rows
        ),
    )
    write_csv(
        out / "boxplot.csv",
        ["metric", "method", "min", "q1", "median", "q3", "max"],
        ((k, m, s.minimum, s.q1, s.median, s.q3, s.maximum) for k, by in summary.items() for m, s in by.items()),
    )
    (out / "report.md").write_text(format_table(rows, summary, tests), encoding="utf-8")
    return Report(tuple(rows), metrics, tests)


def format_table(rows, summary, tests) -> str:
    lines = ["| method | faithfulness (mean) | complexity (mean) |", "|---|---|---|"]
    for m in rows:
        lines.append(f"| {m} | {summary['faithfulness'][m].mean:.4f} | {summary['complexity'][m].mean:.4f} |")
    for metric, t in tests.items():
        lines.append(f"\nKruskal-Wallis on {metric} across baselines: H = {t.statistic:.3f}, dof = {t.dof}, p = {t.pvalue:.3g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- everything


def run_all(cfg: RunConfig, lr_grid: Sequence[float] | None = None) -> Report:
    timings = {}
    stages = [
        ("train_classifier", lambda: train_classifier_stage(cfg)),
        ("explain", lambda: explain_stage(cfg)),
        ("evaluate", lambda: evaluate_stage(cfg)),
        ("fuse", lambda: fuse_stage(cfg)),
        ("optimize", lambda: optimize_stage(cfg, lr_grid)),
        ("report", lambda: report_stage(cfg)),
    ]
    result = None
    for name, fn in stages:
        t0 = time.time()
        result = fn()
        timings[name] = round(time.time() - t0, 2)
        log.info("stage %s finished in %.1fs", name, timings[name])
    _update_state(RunPaths(cfg.out), timings=timings)
    return result
