"""Neuron coverage metrics: NC, NBC, SNAC, profiles, and the increase gate.

A neuron is one output channel of a post-nonlinearity layer; its activation
for an input is the spatial mean of that channel. NC thresholds per-layer
min-max scaled activations; NBC/SNAC compare raw activations against
[low, high] ranges profiled on the training set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ArgumentError, NumericError
from .net import ActivationTrace, ModelGraph, forward_batch

NC = "nc"
NBC = "nbc"
SNAC = "snac"

SELECTION_NONE = "none"
SELECTION_NBC_SNAC = "nbc+snac"
METRIC_SELECTIONS = (SELECTION_NONE, NC, SNAC, NBC, SELECTION_NBC_SNAC)


class NeuronId(NamedTuple):
    layer: int
    channel: int


@dataclass
class ActivationSummary:
    """Per-neuron raw and per-layer min-max scaled channel means."""

    layer_indices: list[int]
    raw: list[np.ndarray]
    scaled: list[np.ndarray]

    def neurons(self) -> Iterable[tuple[NeuronId, float, float]]:
        for layer, raw, scaled in zip(self.layer_indices, self.raw, self.scaled):
            for ch in range(raw.shape[0]):
                yield NeuronId(layer, ch), float(raw[ch]), float(scaled[ch])

    @property
    def n_neurons(self) -> int:
        return int(sum(r.shape[0] for r in self.raw))


@dataclass
class NeuronProfile:
    """Per-neuron [low, high] output ranges measured on a dataset."""

    layer_indices: list[int]
    low: list[np.ndarray]
    high: list[np.ndarray]
    source: str = ""
    count: int = 0

    def __post_init__(self):
        for lo, hi in zip(self.low, self.high):
            if np.any(lo > hi):
                raise ArgumentError("profile has low > high")

    @property
    def n_neurons(self) -> int:
        return int(sum(a.shape[0] for a in self.low))

    def bounds(self, neuron: NeuronId) -> tuple[float, float]:
        i = self.layer_indices.index(neuron.layer)
        return float(self.low[i][neuron.channel]), float(self.high[i][neuron.channel])

    def to_json(self) -> dict:
        neurons = {}
        for layer, lo, hi in zip(self.layer_indices, self.low, self.high):
            for ch in range(lo.shape[0]):
                neurons[f"{layer}:{ch}"] = [float(lo[ch]), float(hi[ch])]
        return {"neurons": neurons, "source": self.source, "count": self.count}

    @staticmethod
    def from_json(d: dict) -> "NeuronProfile":
        per_layer: dict[int, dict[int, tuple[float, float]]] = {}
        for key, (lo, hi) in d["neurons"].items():
            layer_s, ch_s = key.split(":")
            per_layer.setdefault(int(layer_s), {})[int(ch_s)] = (lo, hi)
        layer_indices = sorted(per_layer)
        lows, highs = [], []
        for layer in layer_indices:
            chans = per_layer[layer]
            if sorted(chans) != list(range(len(chans))):
                raise ArgumentError(f"profile layer {layer} has channel gaps")
            lows.append(np.array([chans[c][0] for c in range(len(chans))], np.float32))
            highs.append(np.array([chans[c][1] for c in range(len(chans))], np.float32))
        return NeuronProfile(layer_indices, lows, highs,
                             str(d.get("source", "")), int(d.get("count", 0)))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)

    @staticmethod
    def load(path) -> "NeuronProfile":
        with open(path, encoding="utf-8") as fh:
            return NeuronProfile.from_json(json.load(fh))


@dataclass(frozen=True)
class CoverageResult:
    """Covered-neuron sets and the ratio for one input."""

    kind: str
    n_neurons: int
    covered: frozenset = frozenset()      # NC: activated; SNAC/NBC: upper
    lower: frozenset = frozenset()        # NBC only
    t: float | None = None

    @property
    def ratio(self) -> float:
        if self.kind == NBC:
            return (len(self.covered) + len(self.lower)) / (2 * self.n_neurons)
        return len(self.covered) / self.n_neurons


@dataclass
class CoverageState:
    """Accumulated covered sets over an input collection."""

    kind: str
    n_neurons: int
    covered: set = field(default_factory=set)
    lower: set = field(default_factory=set)
    t: float | None = None
    n_inputs: int = 0

    @property
    def ratio(self) -> float:
        if self.kind == NBC:
            return (len(self.covered) + len(self.lower)) / (2 * self.n_neurons)
        return len(self.covered) / self.n_neurons


def summarize_trace(trace: ActivationTrace) -> ActivationSummary:
    """Raw channel means plus per-layer min-max scaling within this input.

    A constant layer (max == min) scales to all zeros.
    """
    raw_list, scaled_list = [], []
    for means in trace.channel_means:
        means = np.asarray(means)
        if not np.all(np.isfinite(means)):
            raise NumericError("non-finite activation means in trace")
        lo, hi = means.min(), means.max()
        if hi > lo:
            scaled = (means - lo) / (hi - lo)
        else:
            scaled = np.zeros_like(means)
        raw_list.append(means.astype(np.float32))
        scaled_list.append(scaled.astype(np.float32))
    return ActivationSummary(list(trace.layer_indices), raw_list, scaled_list)


def profile_dataset(graph: ModelGraph, images: Iterable[np.ndarray],
                    source: str = "", batch_size: int = 16) -> NeuronProfile:
    """Per-neuron min/max of raw channel means over a dataset."""
    images = list(images)
    if not images:
        raise ArgumentError("cannot profile an empty dataset")
    low = high = None
    layer_indices = graph.activation_layer_indices()
    count = 0
    for start in range(0, len(images), batch_size):
        batch = np.stack(images[start:start + batch_size])
        _, traces, _ = forward_batch(graph, batch)
        for trace in traces:
            raw = [np.asarray(m, np.float32) for m in trace.channel_means]
            if low is None:
                low = [r.copy() for r in raw]
                high = [r.copy() for r in raw]
            else:
                low = [np.minimum(a, r) for a, r in zip(low, raw)]
                high = [np.maximum(a, r) for a, r in zip(high, raw)]
            count += 1
    return NeuronProfile(list(layer_indices), low, high, source, count)


def _check_profile(summary: ActivationSummary, profile: NeuronProfile) -> None:
    if profile is None:
        raise ArgumentError("this coverage kind requires a neuron profile")
    if (profile.layer_indices != summary.layer_indices
            or any(p.shape != r.shape for p, r in zip(profile.low, summary.raw))):
        raise ArgumentError("profile does not match the summary layout")


def single_input_coverage(kind: str, summary: ActivationSummary,
                          profile: NeuronProfile | None = None,
                          t: float | None = None) -> CoverageResult:
    """NC(t), NBC, or SNAC for one input."""
    n = summary.n_neurons
    if kind == NC:
        if t is None:
            raise ArgumentError("NC requires a threshold t")
        covered = set()
        for layer, scaled in zip(summary.layer_indices, summary.scaled):
            for ch in np.nonzero(scaled > t)[0]:
                covered.add(NeuronId(layer, int(ch)))
        return CoverageResult(NC, n, frozenset(covered), t=float(t))
    if kind in (NBC, SNAC):
        _check_profile(summary, profile)
        upper, lower = set(), set()
        for layer, raw, lo, hi in zip(summary.layer_indices, summary.raw,
                                      profile.low, profile.high):
            for ch in np.nonzero(raw > hi)[0]:
                upper.add(NeuronId(layer, int(ch)))
            for ch in np.nonzero(raw < lo)[0]:
                lower.add(NeuronId(layer, int(ch)))
        if kind == SNAC:
            return CoverageResult(SNAC, n, frozenset(upper))
        return CoverageResult(NBC, n, frozenset(upper), frozenset(lower))
    raise ArgumentError(f"unknown coverage kind {kind!r}")


def new_state(kind: str, n_neurons: int, t: float | None = None) -> CoverageState:
    return CoverageState(kind, n_neurons, t=t)


def accumulate_coverage(state: CoverageState, result: CoverageResult) -> CoverageState:
    """Unions the covered sets into the state; commutative and idempotent."""
    if state.kind != result.kind or state.n_neurons != result.n_neurons:
        raise ArgumentError("coverage kind mismatch in accumulation")
    if state.kind == NC and state.t != result.t:
        raise ArgumentError("NC threshold mismatch in accumulation")
    state.covered |= result.covered
    state.lower |= result.lower
    state.n_inputs += 1
    return state


def coverage_increase(selection: str, orig: ActivationSummary,
                      mut: ActivationSummary,
                      profile: NeuronProfile | None = None,
                      t_single: float | None = None,
                      combine: str = "and") -> bool:
    """The extended-bug-definition gate: did coverage strictly increase?

    ``selection`` is one of none/nc/snac/nbc/nbc+snac; the combined metric
    uses ``combine`` ("and": both must increase, "or": either).
    """
    if selection not in METRIC_SELECTIONS:
        raise ArgumentError(f"unknown metric selection {selection!r}")
    if selection == SELECTION_NONE:
        return True
    if selection == NC:
        if t_single is None:
            raise ArgumentError("NC selection requires t_single")
        before = single_input_coverage(NC, orig, t=t_single).ratio
        after = single_input_coverage(NC, mut, t=t_single).ratio
        return after > before
    if selection in (NBC, SNAC):
        before = single_input_coverage(selection, orig, profile).ratio
        after = single_input_coverage(selection, mut, profile).ratio
        return after > before
    # nbc+snac
    if combine not in ("and", "or"):
        raise ArgumentError(f"unknown combine mode {combine!r}")
    nbc_up = (single_input_coverage(NBC, mut, profile).ratio
              > single_input_coverage(NBC, orig, profile).ratio)
    snac_up = (single_input_coverage(SNAC, mut, profile).ratio
               > single_input_coverage(SNAC, orig, profile).ratio)
    return (nbc_up and snac_up) if combine == "and" else (nbc_up or snac_up)


def coverage_ratios(selection: str, summary: ActivationSummary,
                    profile: NeuronProfile | None = None,
                    t_single: float | None = None) -> dict[str, float]:
    """Ratios of the constituent metrics of a selection, for bug records."""
    if selection == SELECTION_NONE:
        return {}
    if selection == NC:
        return {NC: single_input_coverage(NC, summary, t=t_single).ratio}
    if selection in (NBC, SNAC):
        return {selection: single_input_coverage(selection, summary, profile).ratio}
    return {NBC: single_input_coverage(NBC, summary, profile).ratio,
            SNAC: single_input_coverage(SNAC, summary, profile).ratio}
