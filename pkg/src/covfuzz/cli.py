"""Command-line entry points for the full testing pipeline.

Every subcommand works inside a run directory (``--run``). Exit codes:
0 success, 2 argument error, 3 data-integrity error, 4 numeric or
training error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import coverage as cov
from .datasets import read_manifest
from .errors import (ArgumentError, CovfuzzError, IntegrityError,
                     NumericError, TrainingError)
from .fuzzer import BugStore, FuzzConfig, build_retrain_set
from .harness import (ExperimentPlan, HarnessConfig, RunDir, baseline_nc_table,
                      build_nm_test, compute_profile, default_plan, fuzz_cell,
                      generate_adversarial_set, generate_data, make_split,
                      evaluate_model, retrain_cell, run_experiment,
                      train_baseline, cell_name)
from .net import load_model
from .report import render_report

EXIT_ARGUMENT = 2
EXIT_INTEGRITY = 3
EXIT_NUMERIC = 4


def _load_config(args) -> HarnessConfig:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            config = HarnessConfig.from_json(json.load(fh))
    else:
        config = HarnessConfig()
    if args.seed is not None:
        config.fuzz.seed = args.seed
        config.train = type(config.train)(**{**config.train.to_json(),
                                             "seed": args.seed})
        config.data_seed = args.seed
        config.split_seed = args.seed
    return config


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--run", required=True, help="run directory")
    parser.add_argument("--config", help="harness config JSON")
    parser.add_argument("--seed", type=int, default=None,
                        help="override every stage seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covfuzz",
        description="Coverage-guided testing for a small person detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_common(p)
    p.add_argument("--n-train-val", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)

    p = sub.add_parser("split", help="derive the CGT dataset split")
    _add_common(p)
    p.add_argument("--adv-source", default=None,
                   help="directory of precomputed adversarial images")
    p.add_argument("--no-corruptions", action="store_true")

    p = sub.add_parser("train-baseline", help="train the baseline detector")
    _add_common(p)

    p = sub.add_parser("profile", help="profile neuron ranges on new_train_val")
    _add_common(p)

    p = sub.add_parser("gen-adv", help="generate pseudo-adversarial images")
    _add_common(p)
    p.add_argument("--no-cgt", action="store_true",
                   help="only cover the test split")

    p = sub.add_parser("fuzz", help="run one fuzzing cell")
    _add_common(p)
    p.add_argument("--mode", choices=("natural", "adversarial"),
                   default="natural")
    p.add_argument("--metric", choices=[m for m in cov.METRIC_SELECTIONS],
                   default="none")
    p.add_argument("--alpha-map", type=float, default=0.6)

    p = sub.add_parser("build-retrain-set", help="manifest of train data + bugs")
    _add_common(p)
    p.add_argument("--cell", required=True)

    p = sub.add_parser("retrain", help="retrain on a cell's retrain set")
    _add_common(p)
    p.add_argument("--cell", required=True)

    p = sub.add_parser("eval", help="evaluate a model on the test sets")
    _add_common(p)
    p.add_argument("--model", default=None, help="model path; default baseline")
    p.add_argument("--name", default="baseline", help="label for the output")

    p = sub.add_parser("corrupt", help="(re)build the corruption grid")
    _add_common(p)

    p = sub.add_parser("report", help="re-render tables from report.json")
    _add_common(p)

    p = sub.add_parser("experiment", help="run a full plan end to end")
    _add_common(p)
    p.add_argument("--plan", default=None,
                   help="plan JSON; default ten-cell natural grid")
    return parser


def _cmd(args) -> int:
    run = RunDir(args.run)
    config = _load_config(args)
    cmd = args.command

    if cmd == "gen-data":
        if args.n_train_val:
            config.n_train_val = args.n_train_val
        if args.n_test:
            config.n_test = args.n_test
        manifests = generate_data(run, config)
        print(json.dumps(manifests, indent=1))
    elif cmd == "split":
        if args.no_corruptions:
            config.corruptions = False
        split = make_split(run, config, adv_source=args.adv_source)
        print(json.dumps(split.to_json(), indent=1))
    elif cmd == "train-baseline":
        graph = train_baseline(run, config)
        print(f"baseline saved: {run.baseline_model} "
              f"({graph.num_coverage_neurons()} coverage neurons)")
    elif cmd == "profile":
        profile = compute_profile(run)
        print(f"profiled {profile.n_neurons} neurons over {profile.count} images")
    elif cmd == "gen-adv":
        adv_dir = generate_adversarial_set(run, config,
                                           include_cgt=not args.no_cgt)
        print(f"adversarial images in {adv_dir}")
    elif cmd == "fuzz":
        profile = None
        if args.metric != "none":
            if not os.path.exists(run.profile_json):
                compute_profile(run)
            profile = cov.NeuronProfile.load(run.profile_json)
        store, reports = fuzz_cell(run, run.load_baseline(), config,
                                   args.metric, args.alpha_map, args.mode,
                                   profile)
        for rep in reports:
            print(f"stage {rep.stage} round {rep.round}: "
                  f"{rep.bugs_new} new bugs / {rep.sampled} sampled")
        print(f"total bugs: {len(store)}")
    elif cmd == "build-retrain-set":
        split = run.load_split()
        journal = run.path("fuzz", args.cell, "journal.jsonl")
        if not os.path.exists(journal):
            raise IntegrityError(f"no bug journal for cell {args.cell!r}")
        manifest = build_retrain_set(split, BugStore(journal),
                                     run.path("fuzz", args.cell))
        print(manifest)
    elif cmd == "retrain":
        manifest = run.path("fuzz", args.cell, "retrain.jsonl")
        if not os.path.exists(manifest):
            raise IntegrityError(f"no retrain manifest for cell {args.cell!r}")
        retrain_cell(run, run.load_baseline(), config, args.cell, manifest)
        print(run.path("models", f"{args.cell}.sdnm"))
    elif cmd == "eval":
        graph = load_model(args.model) if args.model else run.load_baseline()
        if config.eval_nm and not os.path.exists(run.path("eval", "nm_test.jsonl")):
            build_nm_test(run, config)
        scores = evaluate_model(run, graph, config)
        out = run.path("eval", f"{args.name}.json")
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(scores.to_json(), fh, indent=1, sort_keys=True)
        print(json.dumps(scores.to_json(), indent=1, sort_keys=True))
    elif cmd == "corrupt":
        split = make_split(run, config)
        print(split.corruptions or "corruption grid disabled")
    elif cmd == "report":
        report_json = run.path("report", "report.json")
        if not os.path.exists(report_json):
            raise IntegrityError("no report.json in this run")
        with open(report_json, encoding="utf-8") as fh:
            results = json.load(fh)
        for name, content in render_report(results).items():
            with open(run.path("report", name), "w", encoding="utf-8") as out:
                out.write(content)
        print(run.path("report", "report.md"))
    elif cmd == "experiment":
        if args.plan:
            with open(args.plan, encoding="utf-8") as fh:
                plan = ExperimentPlan.from_json(json.load(fh))
        else:
            plan = default_plan()
        results = run_experiment(plan, run, config)
        print(run.path("report", "report.md"))
        for cell in results["cells"]:
            print(f"{cell['cell']}: {cell['bugs']} bugs, "
                  f"rel mAP_clean {cell['rel'].get('map_clean', 0.0):+.2f}%")
    else:  # pragma: no cover - argparse enforces the choice
        raise ArgumentError(f"unknown command {cmd!r}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _cmd(args)
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT
    except (NumericError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IntegrityError, CovfuzzError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
