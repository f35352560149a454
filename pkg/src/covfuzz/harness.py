"""End-to-end experiment orchestration over a run directory.

A run directory is laid out as::

    run/
      data/          synthetic images + train_val/test manifests
      split/         new_train_val / cgt_data / clean_test / corruptions
      adv/           adversarial counterparts, one <id>.png per image
      models/        baseline.sdnm, profile.json, per-cell retrained models
      fuzz/<cell>/   bug journal + mutant images
      eval/          nm_test manifest, per-model scores
      report/        rendered CSV/Markdown tables + report.json

The adversarial images are ordinarily precomputed attack outputs dropped
into ``adv/``; for self-contained runs ``pseudo_adversarial`` provides a
gradient-free stand-in (seeded random-search noise concentrated on the
cells where the detector is confident).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import coverage as cov
from .datasets import (Record, generate_synthetic_dataset, load_image,
                       read_manifest, save_image, write_manifest)
from .deteval import (EvalScores, average_precision, corruption_scores_from_maps,
                      dataset_map, relative_change)
from .errors import ArgumentError, OrchestrationError, PairingError
from .fuzzer import (BugStore, DatasetSplit, FuzzConfig, build_retrain_set,
                     derive_rng, run_adversarial, run_stage1, run_stage2,
                     split_dataset)
from .mutation import AcceptanceParams, mutate_natural
from .net import (ModelGraph, decode_and_nms, forward_with_trace, init_graph,
                  load_model, save_model, sigmoid)
from .report import render_report
from .training import TrainConfig, check_config_match, train

NC_TABLE_THRESHOLDS = (0.25, 0.5, 0.75)

METRIC_LABELS = {"none": "None", "nc": "NC", "snac": "SNA", "nbc": "NB",
                 "nbc+snac": "NB+SNA"}


@dataclass
class ExperimentPlan:
    """The (metric, alpha) grid to run, all cells sharing one baseline."""

    cells: list[tuple[str, float]]
    mode: str = "natural"
    seed: int = 11

    def __post_init__(self):
        if self.mode not in ("natural", "adversarial"):
            raise ArgumentError(f"unknown mutation mode {self.mode!r}")
        seen = set()
        for metric, alpha in self.cells:
            if metric not in cov.METRIC_SELECTIONS:
                raise ArgumentError(f"unknown metric selection {metric!r}")
            if not (0 < alpha <= 1):
                raise ArgumentError("alpha_map must lie in (0, 1]")
            if (metric, alpha) in seen:
                raise ArgumentError(f"duplicate plan cell {(metric, alpha)}")
            seen.add((metric, alpha))

    def to_json(self) -> dict:
        return {"cells": [[m, a] for m, a in self.cells],
                "mode": self.mode, "seed": self.seed}

    @staticmethod
    def from_json(d: dict) -> "ExperimentPlan":
        return ExperimentPlan([(m, float(a)) for m, a in d["cells"]],
                              d.get("mode", "natural"), int(d.get("seed", 11)))


def default_plan(mode: str = "natural", seed: int = 11) -> ExperimentPlan:
    """The ten-cell grid: each metric selection at alpha 0.6 and 0.3."""
    cells = [(metric, alpha)
             for metric in ("none", "nc", "snac", "nbc", "nbc+snac")
             for alpha in (0.6, 0.3)]
    return ExperimentPlan(cells, mode, seed)


def cell_name(mode: str, metric: str, alpha: float) -> str:
    prefix = "nm" if mode == "natural" else "am"
    return f"{prefix}-{metric.replace('+', '_')}-a{alpha:g}"


class RunDir:
    """Path bookkeeping for one experiment run."""

    def __init__(self, root):
        self.root = str(root)
        for sub in ("data", "split", "adv", "models", "fuzz", "eval", "report"):
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    @property
    def split_json(self) -> str:
        return self.path("split", "split.json")

    @property
    def baseline_model(self) -> str:
        return self.path("models", "baseline.sdnm")

    @property
    def profile_json(self) -> str:
        return self.path("models", "profile.json")

    def load_split(self) -> DatasetSplit:
        if not os.path.exists(self.split_json):
            raise OrchestrationError("run has no dataset split yet")
        return DatasetSplit.load(self.split_json)

    def load_baseline(self) -> ModelGraph:
        if not os.path.exists(self.baseline_model):
            raise OrchestrationError("run has no baseline model yet")
        return load_model(self.baseline_model)


@dataclass
class HarnessConfig:
    """Desk-scale defaults for the full pipeline."""

    n_train_val: int = 600
    n_test: int = 200
    data_seed: int = 7
    split_seed: int = 11
    corruptions: bool = True
    adv_trials: int = 12
    adv_epsilon: float = 0.22
    adv_seed: int = 13
    nm_test_seed: int = 17
    train: TrainConfig = field(default_factory=TrainConfig)
    fuzz: FuzzConfig = field(default_factory=FuzzConfig)
    eval_nm: bool = True
    eval_adv: bool = True
    eval_corruptions: bool = True
    nc_table: bool = True

    def to_json(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_json()
        d["fuzz"] = self.fuzz.to_json()
        return d

    @staticmethod
    def from_json(d: dict) -> "HarnessConfig":
        d = dict(d)
        if "train" in d:
            d["train"] = TrainConfig.from_json(d["train"])
        if "fuzz" in d:
            d["fuzz"] = FuzzConfig.from_json(d["fuzz"])
        return HarnessConfig(**d)


# ---------------------------------------------------------------------------
# Pipeline steps
# ---------------------------------------------------------------------------

def generate_data(run: RunDir, config: HarnessConfig) -> dict[str, str]:
    return generate_synthetic_dataset(run.path("data"), config.n_train_val,
                                      config.n_test, config.data_seed)


def make_split(run: RunDir, config: HarnessConfig,
               adv_source=None) -> DatasetSplit:
    data = run.path("data")
    tv, te = os.path.join(data, "train_val.jsonl"), os.path.join(data, "test.jsonl")
    if not (os.path.exists(tv) and os.path.exists(te)):
        raise OrchestrationError("generate data before splitting")
    split = split_dataset(tv, te, run.path("split"), adv_source,
                          corruption_grid=config.corruptions,
                          seed=config.split_seed)
    split.save(run.split_json)
    return split


def manifest_samples(records: list[Record]):
    return [(load_image(rec.image_path), rec.boxes) for rec in records]


def train_baseline(run: RunDir, config: HarnessConfig) -> ModelGraph:
    split = run.load_split()
    samples = manifest_samples(read_manifest(split.new_train_val))
    graph = init_graph(seed=config.train.seed)
    trained = train(graph, samples, config.train,
                    log_path=run.path("models", "baseline_train_log.csv"))
    save_model(trained, run.baseline_model)
    return trained


def compute_profile(run: RunDir, graph: ModelGraph | None = None) -> cov.NeuronProfile:
    split = run.load_split()
    graph = graph or run.load_baseline()
    records = read_manifest(split.new_train_val)
    images = [load_image(rec.image_path) for rec in records]
    profile = cov.profile_dataset(graph, images, source="new_train_val")
    profile.save(run.profile_json)
    return profile


def pseudo_adversarial(graph: ModelGraph, image: np.ndarray, boxes,
                       rng: np.random.Generator, trials: int = 12,
                       epsilon: float = 0.22) -> np.ndarray:
    """Gradient-free attack stand-in: strongest of ``trials`` seeded noise
    candidates, each concentrated on cells the detector scores highly."""
    raw, _ = forward_with_trace(graph, image)
    spec = graph.detect_spec()
    sh, sw = spec.grid
    obj = sigmoid(raw.reshape(sh, sw, spec.boxes_per_cell, 5)[..., 4]).max(axis=2)
    h, w = image.shape[:2]
    weight = 0.5 + 1.5 * np.repeat(np.repeat(obj, h // sh, 0), w // sw, 1)
    best_img, best_ap = None, None
    for _ in range(trials):
        noise = rng.uniform(-1.0, 1.0, size=image.shape)
        cand = np.clip(image + epsilon * weight[:, :, None] * noise,
                       0.0, 1.0).astype(np.float32)
        raw_c, _ = forward_with_trace(graph, cand)
        ap = average_precision(decode_and_nms(raw_c, graph), boxes)
        if best_ap is None or ap < best_ap:
            best_img, best_ap = cand, ap
    return best_img


def generate_adversarial_set(run: RunDir, config: HarnessConfig,
                             graph: ModelGraph | None = None,
                             include_cgt: bool = True) -> str:
    """Writes adv/<id>.png for clean-test (and optionally cgt) images and
    links the adversarial test manifest into the split."""
    split = run.load_split()
    graph = graph or run.load_baseline()
    adv_dir = run.path("adv")
    targets = list(read_manifest(split.clean_test))
    if include_cgt:
        targets += read_manifest(split.cgt_data)
    for rec in targets:
        out_path = os.path.join(adv_dir, f"{rec.id}.png")
        if os.path.exists(out_path):
            continue
        rng = derive_rng(config.adv_seed, "adv", rec.id)
        adv = pseudo_adversarial(graph, load_image(rec.image_path), rec.boxes,
                                 rng, config.adv_trials, config.adv_epsilon)
        save_image(adv, out_path)
    link_adversarial(split, adv_dir, run.path("split"))
    split.save(run.split_json)
    return adv_dir


def link_adversarial(split: DatasetSplit, adv_source, out_dir) -> None:
    """Pairs every clean test image with adv_source/<id>.png."""
    records = []
    for rec in read_manifest(split.clean_test):
        adv_path = os.path.join(str(adv_source), f"{rec.id}.png")
        if not os.path.exists(adv_path):
            raise PairingError(f"no adversarial counterpart for {rec.id!r}")
        records.append(Record(rec.id, rec.image_path, rec.boxes,
                              {"adv_image_path": adv_path}))
    split.adv_test = os.path.join(str(out_dir), "adv_test.jsonl")
    write_manifest(records, split.adv_test)
    split.adv_source = str(adv_source)


def build_nm_test(run: RunDir, config: HarnessConfig) -> str:
    """A naturally-mutated copy of clean_test for robustness evaluation.

    Images whose mutation never passes acceptance stay clean, keeping the
    manifest aligned with clean_test.
    """
    split = run.load_split()
    out_dir = run.path("eval", "nm_test")
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for rec in read_manifest(split.clean_test):
        rng = derive_rng(config.nm_test_seed, "nm-test", rec.id)
        image = load_image(rec.image_path)
        result = mutate_natural(image, rec.boxes, image, rng,
                                config.fuzz.acceptance, config.fuzz.max_retries)
        if result is None:
            records.append(Record(rec.id, rec.image_path, rec.boxes))
            continue
        mutant, boxes, _ = result
        path = os.path.join(out_dir, f"{rec.id}.png")
        save_image(mutant, path)
        records.append(Record(rec.id, path, boxes))
    manifest = run.path("eval", "nm_test.jsonl")
    write_manifest(records, manifest)
    return manifest


def evaluate_model(run: RunDir, graph: ModelGraph,
                   config: HarnessConfig) -> EvalScores:
    """mAP on clean/adv/nm test sets plus mPC/rPC over the corruption grid."""
    split = run.load_split()
    clean = manifest_samples(read_manifest(split.clean_test))
    map_clean = dataset_map(graph, clean, config.fuzz.score_thresh,
                            config.fuzz.iou_thresh)
    map_adv = 0.0
    if config.eval_adv:
        if split.adv_test is None:
            raise OrchestrationError("no adversarial test set linked")
        adv = [(load_image(rec.extra["adv_image_path"]), rec.boxes)
               for rec in read_manifest(split.adv_test)]
        map_adv = dataset_map(graph, adv, config.fuzz.score_thresh,
                              config.fuzz.iou_thresh)
    mpc = rpc = 0.0
    if config.eval_corruptions:
        if split.corruptions is None:
            raise OrchestrationError("no corruption grid in the split")
        grid: dict[tuple[str, int], list] = {}
        for rec in read_manifest(split.corruptions):
            key = (rec.extra["corruption"], int(rec.extra["severity"]))
            grid.setdefault(key, []).append((load_image(rec.image_path), rec.boxes))
        grid_maps = {key: dataset_map(graph, ds, config.fuzz.score_thresh,
                                      config.fuzz.iou_thresh)
                     for key, ds in sorted(grid.items())}
        mpc, rpc = corruption_scores_from_maps(grid_maps, map_clean)
    map_nm = None
    if config.eval_nm:
        nm_manifest = run.path("eval", "nm_test.jsonl")
        if not os.path.exists(nm_manifest):
            raise OrchestrationError("no naturally-mutated test set built")
        nm = manifest_samples(read_manifest(nm_manifest))
        map_nm = dataset_map(graph, nm, config.fuzz.score_thresh,
                             config.fuzz.iou_thresh)
    return EvalScores(map_clean, map_adv, mpc, rpc, map_nm)


def baseline_nc_table(run: RunDir, graph: ModelGraph,
                      config: HarnessConfig) -> dict:
    """Accumulated NC of the baseline over clean/adv/corruption sets."""
    split = run.load_split()
    datasets = {"clean_test": read_manifest(split.clean_test)}
    if config.eval_adv and split.adv_test is not None:
        datasets["adv_test"] = [
            Record(rec.id, rec.extra["adv_image_path"], rec.boxes)
            for rec in read_manifest(split.adv_test)]
    if config.eval_corruptions and split.corruptions is not None:
        datasets["corruptions"] = read_manifest(split.corruptions)
    n = graph.num_coverage_neurons()
    table: dict[str, dict[str, float]] = {}
    for name, records in datasets.items():
        states = {t: cov.new_state(cov.NC, n, t) for t in NC_TABLE_THRESHOLDS}
        for rec in records:
            _, trace = forward_with_trace(graph, load_image(rec.image_path))
            summary = cov.summarize_trace(trace)
            for t, state in states.items():
                cov.accumulate_coverage(
                    state, cov.single_input_coverage(cov.NC, summary, t=t))
        table[name] = {f"{t:g}": states[t].ratio * 100 for t in NC_TABLE_THRESHOLDS}
    return table


def fuzz_cell(run: RunDir, graph: ModelGraph, config: HarnessConfig,
              metric: str, alpha: float, mode: str,
              profile: cov.NeuronProfile | None) -> tuple[BugStore, list]:
    cell = cell_name(mode, metric, alpha)
    cell_dir = run.path("fuzz", cell)
    os.makedirs(cell_dir, exist_ok=True)
    fuzz_config = FuzzConfig(**{**config.fuzz.to_json(),
                                "metric_selection": metric,
                                "alpha_map": alpha})
    split = run.load_split()
    store = BugStore(os.path.join(cell_dir, "journal.jsonl"))
    bugs_dir = os.path.join(cell_dir, "bugs")
    if mode == "natural":
        reports = run_stage1(graph, split, fuzz_config, store, bugs_dir, profile)
        reports += run_stage2(graph, fuzz_config, store, bugs_dir, profile)
    else:
        reports = run_adversarial(graph, split, fuzz_config, store, profile)
    with open(os.path.join(cell_dir, "rounds.json"), "w", encoding="utf-8") as fh:
        json.dump([asdict(r) for r in reports], fh, indent=1, sort_keys=True)
    return store, reports


def retrain_cell(run: RunDir, baseline: ModelGraph, config: HarnessConfig,
                 cell: str, retrain_manifest: str) -> ModelGraph:
    check_config_match(baseline, config.train)
    samples = manifest_samples(read_manifest(retrain_manifest))
    retrained = train(baseline, samples, config.train,
                      log_path=run.path("models", f"{cell}_train_log.csv"))
    save_model(retrained, run.path("models", f"{cell}.sdnm"))
    return retrained


def run_experiment(plan: ExperimentPlan, run: RunDir,
                   config: HarnessConfig) -> dict:
    """Executes the whole plan against a shared baseline; renders reports.

    Prepares any missing artifact (data, split, baseline, profile,
    adversarial set, nm test set) so a fresh run directory works end to end.
    """
    if not os.path.exists(run.path("data", "train_val.jsonl")):
        generate_data(run, config)
    if not os.path.exists(run.split_json):
        make_split(run, config)
    split = run.load_split()
    if os.path.exists(run.baseline_model):
        baseline = run.load_baseline()
    else:
        baseline = train_baseline(run, config)

    needs_adv = config.eval_adv or plan.mode == "adversarial"
    if needs_adv and split.adv_test is None:
        generate_adversarial_set(run, config, baseline,
                                 include_cgt=plan.mode == "adversarial")
    if config.eval_nm and not os.path.exists(run.path("eval", "nm_test.jsonl")):
        build_nm_test(run, config)

    needs_profile = any(metric != "none" for metric, _ in plan.cells)
    profile = None
    if needs_profile:
        if os.path.exists(run.profile_json):
            profile = cov.NeuronProfile.load(run.profile_json)
        else:
            profile = compute_profile(run, baseline)

    base_scores = evaluate_model(run, baseline, config)
    results: dict = {
        "plan": plan.to_json(),
        "config": config.to_json(),
        "baseline": {"scores": base_scores.to_json()},
        "cells": [],
    }
    if config.nc_table:
        results["baseline"]["nc_table"] = baseline_nc_table(run, baseline, config)

    for metric, alpha in plan.cells:
        cell = cell_name(plan.mode, metric, alpha)
        store, reports = fuzz_cell(run, baseline, config, metric, alpha,
                                   plan.mode, profile)
        retrain_manifest = build_retrain_set(split, store,
                                             run.path("fuzz", cell))
        retrained = retrain_cell(run, baseline, config, cell, retrain_manifest)
        scores = evaluate_model(run, retrained, config)
        rel = _relative_scores(scores, base_scores, config)
        results["cells"].append({
            "cell": cell, "mode": plan.mode, "metric": metric,
            "metric_label": METRIC_LABELS[metric], "alpha_map": alpha,
            "bugs": len(store),
            "rounds": [asdict(r) for r in reports],
            "scores": scores.to_json(), "rel": rel,
        })

    results["summaries"] = summarize(results["cells"])
    report_dir = run.path("report")
    for name, content in render_report(results).items():
        with open(os.path.join(report_dir, name), "w", encoding="utf-8") as fh:
            fh.write(content)
    with open(os.path.join(report_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=1, sort_keys=True)
    return results


def _relative_scores(scores: EvalScores, base: EvalScores,
                     config: HarnessConfig) -> dict[str, float]:
    rel = {"map_clean": relative_change(scores.map_clean, base.map_clean)}
    if config.eval_adv and base.map_adv > 0:
        rel["map_adv"] = relative_change(scores.map_adv, base.map_adv)
    if config.eval_corruptions and base.mpc > 0:
        rel["mpc"] = relative_change(scores.mpc, base.mpc)
        rel["rpc"] = relative_change(scores.rpc, base.rpc)
    if (config.eval_nm and base.map_nm is not None and base.map_nm > 0
            and scores.map_nm is not None):
        rel["map_nm"] = relative_change(scores.map_nm, base.map_nm)
    return rel


def summarize(cells: list[dict]) -> dict:
    """Mean relative changes with vs. without a coverage metric, plus the
    per-robustness-type means over all cells, grouped by mutation mode."""
    summaries: dict = {"coverage_vs_none": {}, "robustness_means": {}}
    for mode in sorted({c["mode"] for c in cells}):
        mode_cells = [c for c in cells if c["mode"] == mode]
        with_cov = [c for c in mode_cells if c["metric"] != "none"]
        without = [c for c in mode_cells if c["metric"] == "none"]
        summaries["coverage_vs_none"][mode] = {
            "cov": _mean_rel(with_cov), "no_cov": _mean_rel(without)}
        summaries["robustness_means"][mode] = _mean_rel(mode_cells)
    return summaries


def _mean_rel(cells: list[dict]) -> dict[str, float]:
    if not cells:
        return {}
    keys = sorted({k for c in cells for k in c["rel"]})
    return {k: float(np.mean([c["rel"][k] for c in cells if k in c["rel"]]))
            for k in keys}
