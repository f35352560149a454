"""Dataset splitting, the two-stage CGT loop, bug detection, retrain sets.

A bug is an (original, mutated) pair whose per-image AP ratio falls to
alpha_map or below, optionally additionally requiring a strict increase of
the selected coverage metric. Stage 1 samples and mutates cgt-data images;
stage 2 re-mutates every stage-1 mutant against the same clean baseline AP;
the adversarial mode replays precomputed attack images with no mutation.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import coverage as cov
from .datasets import Record, load_image, read_manifest, save_image, write_manifest
from .deteval import average_precision
from .errors import ArgumentError, IntegrityError, PairingError
from .mutation import (CORRUPTIONS, SEVERITIES, AcceptanceParams,
                       MutationRecord, apply_corruption, mutate_natural)
from .net import ModelGraph, decode_and_nms, forward_with_trace

STAGE1 = 1
STAGE2 = 2
STAGE_ADV = "adversarial"


@dataclass
class FuzzConfig:
    alpha_map: float = 0.6
    metric_selection: str = cov.SELECTION_NONE
    t_single: float = 0.5
    combine: str = "and"            # nbc+snac gate: "and" or "or"
    n_rounds_stage1: int = 3
    n_samples: int = 200
    n_rounds_stage2: int = 5
    adv_rounds: int = 3
    adv_samples: int = 100
    acceptance: AcceptanceParams = field(default_factory=AcceptanceParams)
    max_retries: int = 3
    score_thresh: float = 0.25
    iou_thresh: float = 0.45
    seed: int = 11

    def __post_init__(self):
        if not (0 < self.alpha_map <= 1):
            raise ArgumentError("alpha_map must lie in (0, 1]")
        if min(self.n_rounds_stage1, self.n_samples, self.n_rounds_stage2,
               self.adv_rounds, self.adv_samples, self.max_retries) <= 0:
            raise ArgumentError("round and sample counts must be positive")
        if self.metric_selection not in cov.METRIC_SELECTIONS:
            raise ArgumentError(
                f"unknown metric selection {self.metric_selection!r}")
        if isinstance(self.acceptance, dict):
            self.acceptance = AcceptanceParams(**self.acceptance)

    def to_json(self) -> dict:
        d = asdict(self)
        d["acceptance"] = asdict(self.acceptance)
        return d

    @staticmethod
    def from_json(d: dict) -> "FuzzConfig":
        return FuzzConfig(**d)


@dataclass
class DatasetSplit:
    new_train_val: str
    cgt_data: str
    clean_test: str
    adv_test: str | None = None
    corruptions: str | None = None
    adv_source: str | None = None
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "DatasetSplit":
        return DatasetSplit(**d)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)

    @staticmethod
    def load(path) -> "DatasetSplit":
        with open(path, encoding="utf-8") as fh:
            return DatasetSplit.from_json(json.load(fh))


@dataclass
class Bug:
    original_id: str
    original_path: str
    original_boxes: np.ndarray
    stage: object                  # 1, 2, or "adversarial"
    round: int
    mutant_path: str
    boxes: np.ndarray              # transformed annotations of the mutant
    ap_orig: float
    ap_mut: float
    coverage_before: dict = field(default_factory=dict)
    coverage_after: dict = field(default_factory=dict)
    mutation: MutationRecord | None = None
    mutant_sha256: str = ""
    parent: str | None = None      # stage-2: key of the stage-1 bug mutated

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(-1, 4)
        self.original_boxes = np.asarray(self.original_boxes,
                                         dtype=np.float32).reshape(-1, 4)

    @property
    def ratio(self) -> float:
        return self.ap_mut / self.ap_orig

    @property
    def key(self) -> str:
        return f"{self.original_id}/s{self.stage}/r{self.round}"

    def to_json(self) -> dict:
        return {
            "original_id": self.original_id,
            "original_path": self.original_path,
            "original_boxes": [[float(v) for v in b] for b in self.original_boxes],
            "stage": self.stage,
            "round": self.round, "mutant_path": self.mutant_path,
            "boxes": [[float(v) for v in b] for b in self.boxes],
            "ap_orig": self.ap_orig, "ap_mut": self.ap_mut,
            "ratio": self.ratio,
            "coverage_before": self.coverage_before,
            "coverage_after": self.coverage_after,
            "mutation": (self.mutation.to_json() if self.mutation is not None
                         else "adversarial"),
            "mutant_sha256": self.mutant_sha256,
            "parent": self.parent,
        }

    @staticmethod
    def from_json(d: dict) -> "Bug":
        if "boxes" not in d:
            raise IntegrityError(
                f"bug {d.get('original_id')!r} has no annotations")
        mutation = d.get("mutation")
        return Bug(
            original_id=d["original_id"],
            original_path=d["original_path"],
            original_boxes=d["original_boxes"],
            stage=d["stage"], round=d["round"],
            mutant_path=d["mutant_path"], boxes=d["boxes"],
            ap_orig=float(d["ap_orig"]), ap_mut=float(d["ap_mut"]),
            coverage_before=d.get("coverage_before", {}),
            coverage_after=d.get("coverage_after", {}),
            mutation=(MutationRecord.from_json(mutation)
                      if isinstance(mutation, dict) else None),
            mutant_sha256=d.get("mutant_sha256", ""),
            parent=d.get("parent"))


class BugStore:
    """Append-only bug collection journaled as JSON-lines.

    Duplicate mutated images (by content hash) are rejected, as are reused
    (original, stage, round) keys.
    """

    def __init__(self, journal_path):
        self.journal_path = str(journal_path)
        self.bugs: list[Bug] = []
        self._hashes: set[str] = set()
        self._keys: set[str] = set()
        if os.path.exists(self.journal_path):
            with open(self.journal_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self._admit(Bug.from_json(json.loads(line)), journal=False)

    def _admit(self, bug: Bug, journal: bool) -> bool:
        if bug.mutant_sha256 and bug.mutant_sha256 in self._hashes:
            return False
        if bug.key in self._keys:
            return False
        self.bugs.append(bug)
        self._hashes.add(bug.mutant_sha256)
        self._keys.add(bug.key)
        if journal:
            with open(self.journal_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(bug.to_json(), sort_keys=True) + "\n")
        return True

    def add(self, bug: Bug) -> bool:
        return self._admit(bug, journal=True)

    def would_accept(self, key: str, digest: str) -> bool:
        return key not in self._keys and (not digest or digest not in self._hashes)

    def stage_bugs(self, stage) -> list[Bug]:
        return [b for b in self.bugs if b.stage == stage]

    def __len__(self) -> int:
        return len(self.bugs)

    def __iter__(self):
        return iter(self.bugs)


@dataclass
class RoundReport:
    stage: object
    round: int
    sampled: int
    skipped_zero_ap: int = 0
    discarded: int = 0             # acceptance test never passed
    candidates: int = 0            # mutated and evaluated
    bugs_found: int = 0            # satisfied the bug predicate
    bugs_new: int = 0              # actually added (not duplicates)


def image_sha256(image: np.ndarray) -> str:
    quantized = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return hashlib.sha256(quantized.tobytes()).hexdigest()


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """Stable per-(purpose, id, round, ...) generator, independent of order
    of use across images so metric selection cannot perturb sampling."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    entropy = [seed] + [int.from_bytes(digest[i:i + 4], "little")
                        for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def is_bug(ap_orig: float, ap_mut: float, cov_check: bool,
           alpha_map: float) -> bool:
    """Eq-style predicate: AP ratio at most alpha_map and the coverage gate."""
    if ap_orig <= 0:
        raise ArgumentError("is_bug requires ap_orig > 0; skip such images")
    return (ap_mut / ap_orig <= alpha_map) and cov_check


def split_dataset(train_val_manifest, test_manifest, out_dir,
                  adv_source=None, corruption_grid: bool | list = False,
                  seed: int = 0) -> DatasetSplit:
    """Seeded 2:1 split of train_val plus the derived test-side datasets.

    When ``adv_source`` is given, every clean test image must have an
    ``<id>.png`` counterpart there. ``corruption_grid`` may be True (full
    8x5 grid) or a list of (kind, severity) pairs.
    """
    train_val = read_manifest(train_val_manifest)
    test = read_manifest(test_manifest)
    if not train_val:
        raise ArgumentError("train_val manifest is empty")
    os.makedirs(out_dir, exist_ok=True)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_val))
    n_new = (2 * len(train_val)) // 3
    new_train_val = [train_val[i] for i in order[:n_new]]
    cgt_data = [train_val[i] for i in order[n_new:]]

    paths = {
        "new_train_val": os.path.join(out_dir, "new_train_val.jsonl"),
        "cgt_data": os.path.join(out_dir, "cgt_data.jsonl"),
        "clean_test": os.path.join(out_dir, "clean_test.jsonl"),
    }
    write_manifest(new_train_val, paths["new_train_val"])
    write_manifest(cgt_data, paths["cgt_data"])
    write_manifest(test, paths["clean_test"])
    split = DatasetSplit(paths["new_train_val"], paths["cgt_data"],
                         paths["clean_test"], seed=seed)

    if adv_source is not None:
        adv_records = []
        for rec in test:
            adv_path = os.path.join(str(adv_source), f"{rec.id}.png")
            if not os.path.exists(adv_path):
                raise PairingError(f"no adversarial counterpart for {rec.id!r}")
            adv_records.append(Record(rec.id, rec.image_path, rec.boxes,
                                      {"adv_image_path": adv_path}))
        split.adv_test = os.path.join(out_dir, "adv_test.jsonl")
        write_manifest(adv_records, split.adv_test)
        split.adv_source = str(adv_source)

    if corruption_grid:
        grid = (corruption_grid if isinstance(corruption_grid, list)
                else [(k, s) for k in CORRUPTIONS for s in SEVERITIES])
        corr_dir = os.path.join(out_dir, "corruptions")
        os.makedirs(corr_dir, exist_ok=True)
        corr_records = []
        for kind, severity in grid:
            for rec in test:
                rng_img = derive_rng(seed, "corrupt", kind, severity, rec.id)
                corrupted = apply_corruption(load_image(rec.image_path),
                                             kind, severity, rng_img)
                path = os.path.join(corr_dir, f"{rec.id}_{kind}_{severity}.png")
                save_image(corrupted, path)
                corr_records.append(Record(
                    rec.id, path, rec.boxes,
                    {"corruption": kind, "severity": severity}))
        split.corruptions = os.path.join(out_dir, "corruptions.jsonl")
        write_manifest(corr_records, split.corruptions)
    return split


class _Evaluator:
    """Caches per-image clean predictions, AP, and coverage summaries."""

    def __init__(self, graph: ModelGraph, config: FuzzConfig,
                 profile: cov.NeuronProfile | None):
        self.graph = graph
        self.config = config
        self.profile = profile
        if (config.metric_selection != cov.SELECTION_NONE
                and config.metric_selection != cov.NC and profile is None):
            raise ArgumentError(
                f"metric {config.metric_selection!r} requires a neuron profile")
        self._clean: dict[str, tuple[float, cov.ActivationSummary]] = {}

    def evaluate(self, image: np.ndarray, boxes) -> tuple[float, cov.ActivationSummary]:
        raw, trace = forward_with_trace(self.graph, image)
        preds = decode_and_nms(raw, self.graph, self.config.score_thresh,
                               self.config.iou_thresh)
        return average_precision(preds, boxes), cov.summarize_trace(trace)

    def evaluate_clean(self, rec: Record) -> tuple[float, cov.ActivationSummary]:
        if rec.id not in self._clean:
            self._clean[rec.id] = self.evaluate(load_image(rec.image_path),
                                                rec.boxes)
        return self._clean[rec.id]

    def gate(self, orig: cov.ActivationSummary,
             mut: cov.ActivationSummary) -> bool:
        return cov.coverage_increase(self.config.metric_selection, orig, mut,
                                     self.profile, self.config.t_single,
                                     self.config.combine)

    def ratios(self, summary: cov.ActivationSummary) -> dict[str, float]:
        return cov.coverage_ratios(self.config.metric_selection, summary,
                                   self.profile, self.config.t_single)


def run_stage1(graph: ModelGraph, split: DatasetSplit, config: FuzzConfig,
               bug_store: BugStore, bugs_dir,
               profile: cov.NeuronProfile | None = None) -> list[RoundReport]:
    """Samples and mutates cgt-data images for n_rounds_stage1 rounds."""
    records = read_manifest(split.cgt_data)
    if not records:
        raise ArgumentError("cgt data set is empty")
    os.makedirs(bugs_dir, exist_ok=True)
    ev = _Evaluator(graph, config, profile)
    reports = []
    for rnd in range(1, config.n_rounds_stage1 + 1):
        rng_round = derive_rng(config.seed, "sample", STAGE1, rnd)
        n = min(config.n_samples, len(records))
        chosen = rng_round.choice(len(records), size=n, replace=False)
        report = RoundReport(STAGE1, rnd, sampled=n)
        for idx in chosen:
            rec = records[idx]
            ap_orig, orig_summary = ev.evaluate_clean(rec)
            if ap_orig <= 0:
                report.skipped_zero_ap += 1
                continue
            rng_img = derive_rng(config.seed, "mutate", STAGE1, rnd, rec.id)
            image = load_image(rec.image_path)
            result = mutate_natural(image, rec.boxes, image, rng_img,
                                    config.acceptance, config.max_retries)
            if result is None:
                report.discarded += 1
                continue
            mutant, mut_boxes, mrecord = result
            report.candidates += 1
            ap_mut, mut_summary = ev.evaluate(mutant, mut_boxes)
            if is_bug(ap_orig, ap_mut, ev.gate(orig_summary, mut_summary),
                      config.alpha_map):
                report.bugs_found += 1
                if _store_bug(bug_store, bugs_dir, rec, STAGE1, rnd,
                              mutant, mut_boxes, ap_orig, ap_mut,
                              ev.ratios(orig_summary),
                              ev.ratios(mut_summary), mrecord):
                    report.bugs_new += 1
        reports.append(report)
    return reports


def run_stage2(graph: ModelGraph, config: FuzzConfig, bug_store: BugStore,
               bugs_dir, profile: cov.NeuronProfile | None = None
               ) -> list[RoundReport]:
    """Re-mutates every stage-1 mutant for n_rounds_stage2 rounds.

    The acceptance reference is the stage-1 mutant itself; the AP baseline
    stays the stage-1 original's clean AP. With no stage-1 bugs this is a
    warned no-op.
    """
    suite = bug_store.stage_bugs(STAGE1)
    if not suite:
        import warnings
        warnings.warn("stage 2 skipped: no stage-1 bugs", stacklevel=2)
        return []
    os.makedirs(bugs_dir, exist_ok=True)
    ev = _Evaluator(graph, config, profile)
    reports = []
    for rnd in range(1, config.n_rounds_stage2 + 1):
        report = RoundReport(STAGE2, rnd, sampled=len(suite))
        for parent in suite:
            rng_img = derive_rng(config.seed, "mutate", STAGE2, rnd, parent.key)
            image = load_image(parent.mutant_path)
            result = mutate_natural(image, parent.boxes, image, rng_img,
                                    config.acceptance, config.max_retries)
            if result is None:
                report.discarded += 1
                continue
            mutant, mut_boxes, mrecord = result
            report.candidates += 1
            ap_mut, mut_summary = ev.evaluate(mutant, mut_boxes)
            # coverage gate still compares against the clean original
            orig_rec = Record(parent.original_id, parent.original_path,
                              parent.original_boxes)
            _, orig_summary = ev.evaluate_clean(orig_rec)
            if is_bug(parent.ap_orig, ap_mut,
                      ev.gate(orig_summary, mut_summary), config.alpha_map):
                report.bugs_found += 1
                if _store_bug(bug_store, bugs_dir, orig_rec, STAGE2, rnd,
                              mutant, mut_boxes, parent.ap_orig, ap_mut,
                              ev.ratios(orig_summary),
                              ev.ratios(mut_summary), mrecord,
                              parent=parent.key):
                    report.bugs_new += 1
        reports.append(report)
    return reports


def run_adversarial(graph: ModelGraph, split: DatasetSplit, config: FuzzConfig,
                    bug_store: BugStore,
                    profile: cov.NeuronProfile | None = None
                    ) -> list[RoundReport]:
    """Single-stage loop over precomputed adversarial counterparts."""
    if split.adv_source is None:
        raise PairingError("split has no adversarial source directory")
    records = read_manifest(split.cgt_data)
    pairs = {}
    for rec in records:
        adv_path = os.path.join(split.adv_source, f"{rec.id}.png")
        if not os.path.exists(adv_path):
            raise PairingError(f"no adversarial counterpart for {rec.id!r}")
        pairs[rec.id] = adv_path
    ev = _Evaluator(graph, config, profile)
    reports = []
    for rnd in range(1, config.adv_rounds + 1):
        rng_round = derive_rng(config.seed, "sample", STAGE_ADV, rnd)
        n = min(config.adv_samples, len(records))
        chosen = rng_round.choice(len(records), size=n, replace=False)
        report = RoundReport(STAGE_ADV, rnd, sampled=n)
        for idx in chosen:
            rec = records[idx]
            ap_orig, orig_summary = ev.evaluate_clean(rec)
            if ap_orig <= 0:
                report.skipped_zero_ap += 1
                continue
            report.candidates += 1
            adv_image = load_image(pairs[rec.id])
            ap_adv, adv_summary = ev.evaluate(adv_image, rec.boxes)
            if is_bug(ap_orig, ap_adv, ev.gate(orig_summary, adv_summary),
                      config.alpha_map):
                report.bugs_found += 1
                bug = Bug(rec.id, rec.image_path, rec.boxes, STAGE_ADV, rnd,
                          pairs[rec.id], rec.boxes, ap_orig, ap_adv,
                          ev.ratios(orig_summary), ev.ratios(adv_summary),
                          None, image_sha256(adv_image))
                if bug_store.add(bug):
                    report.bugs_new += 1
        reports.append(report)
    return reports


def _store_bug(bug_store: BugStore, bugs_dir, orig: Record, stage, rnd,
               mutant, boxes, ap_orig, ap_mut, cov_before, cov_after,
               mrecord, parent=None) -> bool:
    digest = image_sha256(mutant)
    name = f"{orig.id}_s{stage}_r{rnd}.png"
    path = os.path.join(bugs_dir, name)
    bug = Bug(orig.id, orig.image_path, orig.boxes, stage, rnd, path, boxes,
              ap_orig, ap_mut, cov_before, cov_after, mrecord, digest, parent)
    if not bug_store.would_accept(bug.key, digest):
        return False
    save_image(mutant, path)
    return bug_store.add(bug)


def build_retrain_set(split: DatasetSplit, bug_store: BugStore, out_dir):
    """new_train_val plus, per bug, the original and mutant with annotations."""
    base = read_manifest(split.new_train_val)
    records = list(base)
    seen_ids = {rec.id for rec in base}
    for bug in bug_store:
        if bug.original_id not in seen_ids:
            if not os.path.exists(bug.original_path):
                raise IntegrityError(
                    f"bug original image missing: {bug.original_path}")
            records.append(Record(bug.original_id, bug.original_path,
                                  bug.original_boxes))
            seen_ids.add(bug.original_id)
        mutant_id = bug.key.replace("/", "_")
        if mutant_id not in seen_ids:
            if not os.path.exists(bug.mutant_path):
                raise IntegrityError(f"mutant image missing: {bug.mutant_path}")
            records.append(Record(mutant_id, bug.mutant_path, bug.boxes))
            seen_ids.add(mutant_id)
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "retrain.jsonl")
    write_manifest(records, manifest_path)
    return manifest_path
