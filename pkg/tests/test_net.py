"""Runtime tests: serialization, forward traces, decode/NMS, properties."""

import numpy as np
import pytest

from covfuzz import net
from covfuzz.errors import ArgumentError, CorruptModelError, FormatError


def scaled_sigmoid_inverse(p):
    return float(np.log(p / (1 - p)))


def make_raw_for_boxes(graph, boxes_scores):
    """Builds a raw head tensor decoding to the given (box, score) list."""
    spec = graph.detect_spec()
    sh, sw = spec.grid
    img_h, img_w = graph.input_shape[:2]
    raw = np.full((sh, sw, spec.boxes_per_cell * 5), -1000.0, dtype=np.float32)
    for (x1, y1, x2, y2), score, b in boxes_scores:
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        w, h = (x2 - x1) / img_w, (y2 - y1) / img_h
        j = min(int(cx / img_w * sw), sw - 1)
        i = min(int(cy / img_h * sh), sh - 1)
        fx = np.clip(cx / img_w * sw - j, 1e-4, 1 - 1e-4)
        fy = np.clip(cy / img_h * sh - i, 1e-4, 1 - 1e-4)
        aw, ah = spec.anchors[b]
        raw[i, j, b * 5:b * 5 + 5] = [
            scaled_sigmoid_inverse(fx), scaled_sigmoid_inverse(fy),
            np.log(w / aw), np.log(h / ah), scaled_sigmoid_inverse(score)]
    return raw


class TestSerialization:
    def test_reference_architecture(self, tmp_path):
        graph = net.init_graph(seed=1)
        assert sum(1 for s in graph.layers if s.kind == net.CONV2D) == 5
        assert graph.num_coverage_neurons() == 176
        path = tmp_path / "model.sdnm"
        net.save_model(graph, path)
        loaded = net.load_model(path)
        assert net.graphs_equal(graph, loaded)

    def test_header_lists_five_conv_layers(self, tmp_path):
        import json, struct
        graph = net.init_graph(seed=1)
        path = tmp_path / "model.sdnm"
        net.save_model(graph, path)
        raw = path.read_bytes()
        assert raw[:4] == b"SDNM"
        version, header_len = struct.unpack("<II", raw[4:12])
        assert version == 1
        header = json.loads(raw[12:12 + header_len])
        convs = [d for d in header["layers"] if d["kind"] == "conv2d"]
        assert len(convs) == 5

    def test_two_saves_byte_identical(self, tmp_path):
        graph = net.init_graph(seed=2)
        a, b = tmp_path / "a.sdnm", tmp_path / "b.sdnm"
        net.save_model(graph, a)
        net.save_model(graph, b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.sdnm"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(FormatError):
            net.load_model(path)

    def test_bad_version(self, tmp_path):
        graph = net.init_graph(seed=1)
        path = tmp_path / "model.sdnm"
        net.save_model(graph, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            net.load_model(path)

    def test_truncated_weights(self, tmp_path):
        graph = net.init_graph(seed=1)
        path = tmp_path / "model.sdnm"
        net.save_model(graph, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-20])
        with pytest.raises(CorruptModelError):
            net.load_model(path)


class TestForward:
    def test_zero_weights_zero_means(self):
        graph = net.init_graph(seed=0)
        graph.weights = np.zeros_like(graph.weights)
        image = np.zeros((96, 96, 3), dtype=np.float32)
        _, trace = net.forward_with_trace(graph, image)
        for means in trace.channel_means:
            assert np.all(means == 0.0)

    def test_deterministic(self):
        graph = net.init_graph(seed=4)
        image = np.random.default_rng(0).random((96, 96, 3), dtype=np.float32)
        raw1, trace1 = net.forward_with_trace(graph, image)
        raw2, trace2 = net.forward_with_trace(graph, image)
        assert np.array_equal(raw1, raw2)
        for m1, m2 in zip(trace1.channel_means, trace2.channel_means):
            assert np.array_equal(m1, m2)

    def test_shape_mismatch(self):
        graph = net.init_graph(seed=4)
        with pytest.raises(ArgumentError):
            net.forward_with_trace(graph, np.zeros((32, 32, 3), np.float32))

    def test_conv_means_match_hand_computation(self):
        layers = [net.LayerSpec.conv((3, 3), 2), net.LayerSpec.relu()]
        graph = net.init_graph(layers, (4, 4, 3), seed=9)
        rng = np.random.default_rng(7)
        image = rng.random((4, 4, 3))
        kernel, bias = graph.conv_params(0, np.float64)
        padded = np.pad(image, ((1, 1), (1, 1), (0, 0)))
        expected = np.zeros((4, 4, 2))
        for oc in range(2):
            for y in range(4):
                for x in range(4):
                    acc = bias[oc]
                    for ic in range(3):
                        for ky in range(3):
                            for kx in range(3):
                                acc += kernel[oc, ic, ky, kx] * padded[y + ky, x + kx, ic]
                    expected[y, x, oc] = acc
        expected = np.maximum(expected, 0.0)
        _, trace = net.forward_with_trace(graph, image, dtype=np.float64)
        assert np.allclose(trace.channel_means[0],
                           expected.mean(axis=(0, 1)), atol=1e-12)

    def test_channel_mean_linearity(self):
        layers = [net.LayerSpec.conv((3, 3), 8), net.LayerSpec.leaky(),
                  net.LayerSpec.maxpool(), net.LayerSpec.conv((3, 3), 4),
                  net.LayerSpec.leaky()]
        graph = net.init_graph(layers, (8, 8, 3), seed=12)
        layout = graph.weight_layout()
        for idx, spec in enumerate(graph.layers):   # zero the conv biases
            if spec.kind == net.CONV2D:
                offset, count = layout[idx]
                n_kernel = count - spec.out_channels
                graph.weights[offset + n_kernel:offset + count] = 0.0
        image = np.random.default_rng(3).random((8, 8, 3))
        c = 2.75
        _, trace1 = net.forward_with_trace(graph, image, dtype=np.float64)
        _, trace2 = net.forward_with_trace(graph, c * image, dtype=np.float64)
        for m1, m2 in zip(trace1.channel_means, trace2.channel_means):
            assert np.allclose(c * m1, m2, rtol=1e-12)

    def test_shape_soundness_random_graphs(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            h = w = int(rng.choice([8, 16, 24]))
            c = 3
            layers = []
            for _ in range(int(rng.integers(1, 4))):
                out_ch = int(rng.integers(1, 9))
                layers += [net.LayerSpec.conv((3, 3), out_ch), net.LayerSpec.leaky()]
                if h % 2 == 0 and rng.random() < 0.5:
                    layers.append(net.LayerSpec.maxpool())
                    h, w = h // 2, w // 2
                c = out_ch
            graph = net.init_graph(layers, (int(rng.choice([8, 16, 24])),) * 2 + (3,),
                                   seed=int(rng.integers(1 << 30)))
            shapes = net.propagate_shapes(graph.layers, graph.input_shape)
            image = rng.random(graph.input_shape).astype(np.float32)
            x, _, _ = net.forward_batch(graph, image[None])
            assert x.shape[1:] == shapes[-1]


class TestDecodeNms:
    def test_all_suppressed_objectness(self):
        graph = net.init_graph(seed=5)
        raw = np.full((12, 12, 10), -1000.0, dtype=np.float32)
        assert net.decode_and_nms(raw, graph) == []

    def test_identical_boxes_keep_highest(self):
        graph = net.init_graph(seed=5)
        box = (30.0, 20.0, 60.0, 70.0)
        raw = make_raw_for_boxes(graph, [(box, 0.9, 0), (box, 0.8, 1)])
        dets = net.decode_and_nms(raw, graph, iou_thresh=0.45)
        assert len(dets) == 1
        assert dets[0].score == pytest.approx(0.9, abs=1e-6)

    def test_disjoint_boxes_all_kept_sorted(self):
        graph = net.init_graph(seed=5)
        from covfuzz.deteval import iou
        boxes = [((4.0, 4.0, 20.0, 28.0), 0.7, 0),
                 ((40.0, 40.0, 56.0, 64.0), 0.9, 0),
                 ((70.0, 4.0, 86.0, 28.0), 0.8, 0)]
        raw = make_raw_for_boxes(graph, boxes)
        dets = net.decode_and_nms(raw, graph, iou_thresh=0.45)
        assert len(dets) == 3
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        for i in range(3):
            for j in range(i + 1, 3):
                assert iou(boxes[i][0], boxes[j][0]) < 0.45

    def test_output_is_antichain(self):
        from covfuzz.deteval import iou
        graph = net.init_graph(seed=6)
        rng = np.random.default_rng(8)
        for _ in range(10):
            raw = rng.normal(0, 2, size=(12, 12, 10)).astype(np.float32)
            dets = net.decode_and_nms(raw, graph, score_thresh=0.3,
                                      iou_thresh=0.45)
            scores = [d.score for d in dets]
            assert scores == sorted(scores, reverse=True)
            for i in range(len(dets)):
                for j in range(i + 1, len(dets)):
                    assert iou(dets[i].box, dets[j].box) < 0.45
