"""Coverage-guided testing and retraining for a small convolutional
person detector: neuron-coverage metrics, metamorphic image mutation,
per-image AP bug detection, and experiment orchestration."""

__version__ = "0.1.0"

from .net import (ModelGraph, LayerSpec, Detection, ActivationTrace,
                  load_model, save_model, forward_with_trace, decode_and_nms,
                  init_graph, person_mini)
from .coverage import (NeuronId, NeuronProfile, ActivationSummary,
                       CoverageResult, CoverageState, summarize_trace,
                       profile_dataset, single_input_coverage,
                       accumulate_coverage, coverage_increase)
from .deteval import (EvalScores, iou, average_precision, dataset_map,
                      relative_change, corruption_scores)
from .mutation import (AcceptanceParams, MutationRecord, apply_enhancement,
                       apply_filter, apply_geometric, acceptance_test,
                       mutate_natural, apply_corruption)
from .fuzzer import (FuzzConfig, DatasetSplit, Bug, BugStore, split_dataset,
                     is_bug, run_stage1, run_stage2, run_adversarial,
                     build_retrain_set)
from .training import TrainConfig, detector_loss, backward_gradients, train
from .harness import ExperimentPlan, HarnessConfig, RunDir, run_experiment

__all__ = [name for name in dir() if not name.startswith("_")]
