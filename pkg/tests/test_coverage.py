"""Coverage metric tests against an independent per-neuron loop oracle."""

import numpy as np
import pytest

from covfuzz import coverage as cov
from covfuzz import net
from covfuzz.errors import ArgumentError, NumericError
from covfuzz.net import ActivationTrace


def make_summary(layer_means):
    """Summary straight from raw per-layer mean vectors."""
    trace = ActivationTrace(list(range(len(layer_means))),
                            [np.asarray(m, np.float32) for m in layer_means])
    return cov.summarize_trace(trace)


def make_profile(summaries):
    low = [np.min([s.raw[i] for s in summaries], axis=0)
           for i in range(len(summaries[0].raw))]
    high = [np.max([s.raw[i] for s in summaries], axis=0)
            for i in range(len(summaries[0].raw))]
    return cov.NeuronProfile(list(summaries[0].layer_indices), low, high,
                             "test", len(summaries))


def oracle_nc(summary, t):
    """Plain per-neuron loop, independent of the vectorized path."""
    covered = set()
    total = 0
    for nid, _raw, scaled in summary.neurons():
        total += 1
        if scaled > t:
            covered.add(nid)
    return covered, len(covered) / total


def oracle_nbc_snac(summary, profile):
    upper, lower = set(), set()
    total = 0
    for nid, raw, _scaled in summary.neurons():
        total += 1
        lo, hi = profile.bounds(nid)
        if raw > hi:
            upper.add(nid)
        if raw < lo:
            lower.add(nid)
    nbc = (len(upper) + len(lower)) / (2 * total)
    snac = len(upper) / total
    return upper, lower, nbc, snac


class TestSummarize:
    def test_minmax_scaling(self):
        summary = make_summary([[2.0, 4.0, 6.0]])
        assert np.allclose(summary.scaled[0], [0.0, 0.5, 1.0])

    def test_constant_layer_scales_to_zero(self):
        summary = make_summary([[3.0, 3.0]])
        assert np.array_equal(summary.scaled[0], [0.0, 0.0])

    def test_scaled_always_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            layers = [rng.normal(0, 10, size=rng.integers(1, 20))
                      for _ in range(rng.integers(1, 4))]
            summary = make_summary(layers)
            for scaled in summary.scaled:
                assert np.all(scaled >= 0.0) and np.all(scaled <= 1.0)

    def test_non_finite_raises(self):
        trace = ActivationTrace([0], [np.array([1.0, np.nan], np.float32)])
        with pytest.raises(NumericError):
            cov.summarize_trace(trace)


class TestSingleInputCoverage:
    def test_nc_ratio(self):
        summary = make_summary([[0.0, 1.0]])
        # craft scaled values directly: [0.3, 0.6, 0.1, 0.9] over 4 neurons
        summary = cov.ActivationSummary(
            [0], [np.array([0.3, 0.6, 0.1, 0.9], np.float32)],
            [np.array([0.3, 0.6, 0.1, 0.9], np.float32)])
        result = cov.single_input_coverage(cov.NC, summary, t=0.5)
        assert result.ratio == pytest.approx(0.5)
        assert result.covered == {cov.NeuronId(0, 1), cov.NeuronId(0, 3)}

    def test_nbc_snac_ratios(self):
        summary = cov.ActivationSummary(
            [0], [np.array([1.5, -0.2], np.float32)],
            [np.array([1.0, 0.0], np.float32)])
        profile = cov.NeuronProfile([0], [np.array([0.0, 0.0], np.float32)],
                                    [np.array([1.0, 1.0], np.float32)])
        nbc = cov.single_input_coverage(cov.NBC, summary, profile)
        snac = cov.single_input_coverage(cov.SNAC, summary, profile)
        assert nbc.ratio == pytest.approx(0.5)
        assert snac.ratio == pytest.approx(0.5)

    def test_profiling_set_has_zero_boundary_coverage(self):
        rng = np.random.default_rng(1)
        summaries = [make_summary([rng.normal(0, 3, 7), rng.normal(1, 2, 4)])
                     for _ in range(10)]
        profile = make_profile(summaries)
        for summary in summaries:
            assert cov.single_input_coverage(cov.NBC, summary, profile).ratio == 0.0
            assert cov.single_input_coverage(cov.SNAC, summary, profile).ratio == 0.0

    def test_missing_arguments(self):
        summary = make_summary([[1.0, 2.0]])
        with pytest.raises(ArgumentError):
            cov.single_input_coverage(cov.NC, summary)
        with pytest.raises(ArgumentError):
            cov.single_input_coverage(cov.NBC, summary)


class TestOracleEquivalence:
    def test_random_graphs_match_loop_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(30):
            n_layers = int(rng.integers(1, 4))
            layer_means = [rng.normal(0, 5, size=int(rng.integers(1, 60)))
                           for _ in range(n_layers)]
            summary = make_summary(layer_means)
            profile = make_profile([make_summary(
                [rng.normal(0, 5, size=m.shape[0]) for m in layer_means])
                for _ in range(5)])
            for t in (0.25, 0.5, 0.75):
                result = cov.single_input_coverage(cov.NC, summary, t=t)
                covered, ratio = oracle_nc(summary, t)
                assert result.covered == covered
                assert result.ratio == ratio
            upper, lower, nbc, snac = oracle_nbc_snac(summary, profile)
            nbc_res = cov.single_input_coverage(cov.NBC, summary, profile)
            snac_res = cov.single_input_coverage(cov.SNAC, summary, profile)
            assert nbc_res.covered == upper and nbc_res.lower == lower
            assert nbc_res.ratio == nbc
            assert snac_res.covered == upper
            assert snac_res.ratio == snac


class TestAccumulate:
    def test_idempotent(self):
        summary = make_summary([[0.1, 0.9, 0.5]])
        result = cov.single_input_coverage(cov.NC, summary, t=0.5)
        state = cov.new_state(cov.NC, summary.n_neurons, t=0.5)
        cov.accumulate_coverage(state, result)
        once = set(state.covered)
        cov.accumulate_coverage(state, result)
        assert state.covered == once

    def test_disjoint_union(self):
        r1 = cov.CoverageResult(cov.NC, 4, frozenset({cov.NeuronId(0, 0)}), t=0.5)
        r2 = cov.CoverageResult(cov.NC, 4, frozenset({cov.NeuronId(0, 1)}), t=0.5)
        state = cov.new_state(cov.NC, 4, t=0.5)
        cov.accumulate_coverage(state, r1)
        cov.accumulate_coverage(state, r2)
        assert state.ratio == pytest.approx(0.5)

    def test_order_independent(self):
        rng = np.random.default_rng(3)
        results = []
        for _ in range(12):
            summary = make_summary([rng.normal(0, 2, 9)])
            results.append(cov.single_input_coverage(cov.NC, summary, t=0.5))
        finals = []
        for perm_seed in range(4):
            order = np.random.default_rng(perm_seed).permutation(len(results))
            state = cov.new_state(cov.NC, 9, t=0.5)
            for i in order:
                cov.accumulate_coverage(state, results[i])
            finals.append((frozenset(state.covered), state.ratio))
        assert len(set(finals)) == 1

    def test_kind_mismatch(self):
        state = cov.new_state(cov.NC, 4, t=0.5)
        result = cov.CoverageResult(cov.SNAC, 4, frozenset())
        with pytest.raises(ArgumentError):
            cov.accumulate_coverage(state, result)

    def test_accumulated_monotone(self):
        rng = np.random.default_rng(4)
        state = cov.new_state(cov.NC, 15, t=0.25)
        last = 0.0
        for _ in range(20):
            summary = make_summary([rng.normal(0, 2, 15)])
            cov.accumulate_coverage(
                state, cov.single_input_coverage(cov.NC, summary, t=0.25))
            assert state.ratio >= last
            last = state.ratio


class TestCoverageIncrease:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.summaries = [make_summary([rng.normal(0, 2, 10)]) for _ in range(8)]
        self.profile = make_profile(self.summaries[:4])

    def test_none_always_true(self):
        assert cov.coverage_increase("none", self.summaries[0], self.summaries[1])

    def test_nc_tie_is_not_increase(self):
        s = self.summaries[0]
        assert not cov.coverage_increase(cov.NC, s, s, t_single=0.5)

    def test_combined_requires_both(self):
        # orig inside profile; mut exceeds only the lower bound -> NBC up,
        # SNAC unchanged -> conjunction false, disjunction true
        orig = self.summaries[0]
        mut_raw = orig.raw[0].copy()
        mut_raw[0] = self.profile.low[0][0] - 10.0
        mut = make_summary([mut_raw])
        assert not cov.coverage_increase("nbc+snac", orig, mut, self.profile)
        assert cov.coverage_increase("nbc+snac", orig, mut, self.profile,
                                     combine="or")

    def test_nbc_snac_identity(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            summary = make_summary([rng.normal(0, 4, 12)])
            profile = make_profile([make_summary([rng.normal(0, 4, 12)])
                                    for _ in range(3)])
            nbc = cov.single_input_coverage(cov.NBC, summary, profile).ratio
            snac = cov.single_input_coverage(cov.SNAC, summary, profile).ratio
            lower_ratio = 2 * nbc - snac
            assert 0.0 <= lower_ratio <= 1.0

    def test_nc_monotone_in_t(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            summary = make_summary([rng.normal(0, 1, 20)])
            ratios = [cov.single_input_coverage(cov.NC, summary, t=t).ratio
                      for t in (0.25, 0.5, 0.75)]
            assert ratios[0] >= ratios[1] >= ratios[2]


class TestProfile:
    def test_single_input_profile(self):
        graph = net.init_graph(seed=8)
        image = np.random.default_rng(0).random((96, 96, 3), dtype=np.float32)
        profile = cov.profile_dataset(graph, [image])
        _, trace = net.forward_with_trace(graph, image)
        for lo, hi, means in zip(profile.low, profile.high, trace.channel_means):
            assert np.array_equal(lo, means)
            assert np.array_equal(hi, means)

    def test_two_inputs_min_max(self):
        summaries = [make_summary([[1.0]]), make_summary([[3.0]])]
        profile = make_profile(summaries)
        assert profile.bounds(cov.NeuronId(0, 0)) == (1.0, 3.0)

    def test_profile_matches_bruteforce(self):
        graph = net.init_graph(seed=9)
        rng = np.random.default_rng(10)
        images = [rng.random((96, 96, 3), dtype=np.float32) for _ in range(20)]
        profile = cov.profile_dataset(graph, images)
        raws = []
        for image in images:
            _, trace = net.forward_with_trace(graph, image)
            raws.append([np.asarray(m) for m in trace.channel_means])
        for i in range(len(profile.layer_indices)):
            stack = np.stack([r[i] for r in raws])
            assert np.array_equal(profile.low[i], stack.min(axis=0))
            assert np.array_equal(profile.high[i], stack.max(axis=0))

    def test_empty_dataset(self):
        graph = net.init_graph(seed=8)
        with pytest.raises(ArgumentError):
            cov.profile_dataset(graph, [])

    def test_json_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        profile = make_profile([make_summary([rng.normal(0, 2, 5),
                                              rng.normal(0, 2, 3)])
                                for _ in range(4)])
        path = tmp_path / "profile.json"
        profile.save(path)
        loaded = cov.NeuronProfile.load(path)
        assert loaded.layer_indices == profile.layer_indices
        for a, b in zip(loaded.low, profile.low):
            assert np.array_equal(a, b)
        for a, b in zip(loaded.high, profile.high):
            assert np.array_equal(a, b)
        assert loaded.source == "test" and loaded.count == 4
