"""Small convolutional detector: graph definition, serialization, inference.

The runtime executes a fixed layer vocabulary (conv2d, leaky_relu, relu,
maxpool2x2, detect_head) on HWC float tensors. Forward passes are pure and
expose per-activation-layer channel means, which is what the coverage
instrumentation consumes: one "neuron" per output channel of each
post-nonlinearity layer, its activation being the spatial mean of that
channel.

Model file format: magic "SDNM", u32 LE version (=1), u32 LE JSON header
length, UTF-8 JSON header, then a raw little-endian float32 weight blob.
Conv weights are stored kernels-first in (out_ch, in_ch, k_h, k_w) order,
then biases.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, CorruptModelError, FormatError, NumericError

MAGIC = b"SDNM"
VERSION = 1

CONV2D = "conv2d"
LEAKY_RELU = "leaky_relu"
RELU = "relu"
MAXPOOL = "maxpool2x2"
DETECT_HEAD = "detect_head"

ACTIVATION_KINDS = (LEAKY_RELU, RELU)

DEFAULT_SCORE_THRESH = 0.25
DEFAULT_IOU_THRESH = 0.45


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the detector graph.

    Only the fields relevant to ``kind`` are meaningful; the constructors
    below fill in the rest.
    """

    kind: str
    kernel: tuple[int, int] | None = None
    out_channels: int | None = None
    stride: int = 1
    padding: str = "same"
    slope: float = 0.1
    grid: tuple[int, int] | None = None
    anchors: tuple[tuple[float, float], ...] | None = None
    boxes_per_cell: int | None = None

    @staticmethod
    def conv(kernel: tuple[int, int], out_channels: int, stride: int = 1,
             padding: str = "same") -> "LayerSpec":
        return LayerSpec(CONV2D, kernel=tuple(kernel), out_channels=out_channels,
                         stride=stride, padding=padding)

    @staticmethod
    def leaky(slope: float = 0.1) -> "LayerSpec":
        return LayerSpec(LEAKY_RELU, slope=slope)

    @staticmethod
    def relu() -> "LayerSpec":
        return LayerSpec(RELU)

    @staticmethod
    def maxpool() -> "LayerSpec":
        return LayerSpec(MAXPOOL)

    @staticmethod
    def detect(grid: tuple[int, int], anchors, boxes_per_cell: int) -> "LayerSpec":
        return LayerSpec(DETECT_HEAD, grid=tuple(grid),
                         anchors=tuple(tuple(a) for a in anchors),
                         boxes_per_cell=boxes_per_cell)

    def to_json(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == CONV2D:
            d.update(kernel=list(self.kernel), out_channels=self.out_channels,
                     stride=self.stride, padding=self.padding)
        elif self.kind == LEAKY_RELU:
            d["slope"] = self.slope
        elif self.kind == DETECT_HEAD:
            d.update(grid=list(self.grid),
                     anchors=[list(a) for a in self.anchors],
                     boxes_per_cell=self.boxes_per_cell)
        return d

    @staticmethod
    def from_json(d: dict) -> "LayerSpec":
        kind = d.get("kind")
        if kind == CONV2D:
            return LayerSpec.conv(tuple(d["kernel"]), int(d["out_channels"]),
                                  int(d.get("stride", 1)), d.get("padding", "same"))
        if kind == LEAKY_RELU:
            return LayerSpec.leaky(float(d.get("slope", 0.1)))
        if kind == RELU:
            return LayerSpec.relu()
        if kind == MAXPOOL:
            return LayerSpec.maxpool()
        if kind == DETECT_HEAD:
            return LayerSpec.detect(tuple(d["grid"]), d["anchors"],
                                    int(d["boxes_per_cell"]))
        raise FormatError(f"unknown layer kind {kind!r}")


@dataclass
class ModelGraph:
    """Ordered layer list plus one flat float32 weight vector."""

    layers: list[LayerSpec]
    weights: np.ndarray
    input_shape: tuple[int, int, int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32).reshape(-1)
        self.input_shape = tuple(int(v) for v in self.input_shape)

    def copy(self) -> "ModelGraph":
        return ModelGraph(list(self.layers), self.weights.copy(),
                          self.input_shape, dict(self.meta))

    def weight_layout(self) -> list[tuple[int, int]]:
        """(offset, count) per layer; zero count for weightless layers."""
        layout = []
        offset = 0
        shapes = propagate_shapes(self.layers, self.input_shape)
        in_shapes = [self.input_shape] + shapes[:-1]
        for spec, in_shape in zip(self.layers, in_shapes):
            count = 0
            if spec.kind == CONV2D:
                kh, kw = spec.kernel
                count = spec.out_channels * in_shape[2] * kh * kw + spec.out_channels
            layout.append((offset, count))
            offset += count
        return layout

    def conv_params(self, layer_index: int, dtype=np.float32):
        """Kernel (out, in, kh, kw) and bias (out,) views for a conv layer."""
        spec = self.layers[layer_index]
        if spec.kind != CONV2D:
            raise ArgumentError(f"layer {layer_index} is not conv2d")
        shapes = propagate_shapes(self.layers, self.input_shape)
        in_ch = ([self.input_shape] + shapes[:-1])[layer_index][2]
        offset, count = self.weight_layout()[layer_index]
        kh, kw = spec.kernel
        n_kernel = spec.out_channels * in_ch * kh * kw
        blob = self.weights[offset:offset + count].astype(dtype, copy=False)
        kernel = blob[:n_kernel].reshape(spec.out_channels, in_ch, kh, kw)
        bias = blob[n_kernel:]
        return kernel, bias

    def activation_layer_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind in ACTIVATION_KINDS]

    def coverage_channel_counts(self) -> list[int]:
        """Channel count per activation layer, in layer order."""
        shapes = propagate_shapes(self.layers, self.input_shape)
        return [shapes[i][2] for i in self.activation_layer_indices()]

    def num_coverage_neurons(self) -> int:
        return int(sum(self.coverage_channel_counts()))

    def detect_spec(self) -> LayerSpec:
        return self.layers[-1]


@dataclass
class ActivationTrace:
    """Per-activation-layer channel means for a single input."""

    layer_indices: list[int]
    channel_means: list[np.ndarray]


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float
    cls: str = "person"


def _out_size(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Output extent plus (pad_before, pad_after) for one spatial axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        before = total // 2
        return out, before, total - before
    if padding == "valid":
        if size < k:
            raise ArgumentError(f"input extent {size} smaller than kernel {k}")
        return (size - k) // stride + 1, 0, 0
    raise ArgumentError(f"unknown padding mode {padding!r}")


def propagate_shapes(layers: list[LayerSpec],
                     input_shape: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Output shape after each layer; raises ArgumentError on any mismatch."""
    h, w, c = input_shape
    if h <= 0 or w <= 0 or c <= 0:
        raise ArgumentError(f"bad input shape {input_shape}")
    shapes = []
    for i, spec in enumerate(layers):
        if spec.kind == CONV2D:
            kh, kw = spec.kernel
            if kh % 2 == 0 or kw % 2 == 0 or kh <= 0 or kw <= 0:
                raise ArgumentError(f"conv kernel dims must be odd, got {spec.kernel}")
            if spec.stride < 1:
                raise ArgumentError("conv stride must be >= 1")
            h, _, _ = _out_size(h, kh, spec.stride, spec.padding)
            w, _, _ = _out_size(w, kw, spec.stride, spec.padding)
            c = spec.out_channels
        elif spec.kind in ACTIVATION_KINDS:
            pass
        elif spec.kind == MAXPOOL:
            if h % 2 or w % 2:
                raise ArgumentError(f"maxpool2x2 needs even dims, got {(h, w)}")
            h, w = h // 2, w // 2
        elif spec.kind == DETECT_HEAD:
            if i != len(layers) - 1:
                raise ArgumentError("detect_head must be the last layer")
            sh, sw = spec.grid
            b = spec.boxes_per_cell
            if not spec.anchors or len(spec.anchors) != b:
                raise ArgumentError("detect_head needs one anchor per box")
            if any(aw <= 0 or ah <= 0 for aw, ah in spec.anchors):
                raise ArgumentError("anchors must be strictly positive")
            if (h, w, c) != (sh, sw, b * 5):
                raise ArgumentError(
                    f"detect_head expects {(sh, sw, b * 5)}, got {(h, w, c)}")
        else:
            raise ArgumentError(f"unknown layer kind {spec.kind!r}")
        shapes.append((h, w, c))
    return shapes


def validate_graph(graph: ModelGraph) -> None:
    """Checks shape propagation and the weight-count invariant."""
    if not graph.layers:
        raise ArgumentError("graph has no layers")
    propagate_shapes(graph.layers, graph.input_shape)
    layout = graph.weight_layout()
    expected = layout[-1][0] + layout[-1][1]
    if graph.weights.size != expected:
        raise CorruptModelError(
            f"weight blob has {graph.weights.size} values, expected {expected}")
    if not np.all(np.isfinite(graph.weights)):
        raise CorruptModelError("weight blob contains non-finite values")


# ---------------------------------------------------------------------------
# Reference architecture
# ---------------------------------------------------------------------------

def person_mini() -> list[LayerSpec]:
    """The 176-neuron toy person detector (96x96 input, 12x12 grid, B=2)."""
    return [
        LayerSpec.conv((3, 3), 16), LayerSpec.leaky(), LayerSpec.maxpool(),
        LayerSpec.conv((3, 3), 32), LayerSpec.leaky(), LayerSpec.maxpool(),
        LayerSpec.conv((3, 3), 64), LayerSpec.leaky(), LayerSpec.maxpool(),
        LayerSpec.conv((3, 3), 64), LayerSpec.leaky(),
        LayerSpec.conv((1, 1), 10),
        LayerSpec.detect((12, 12), [(0.15, 0.35), (0.40, 0.80)], 2),
    ]


PERSON_MINI_INPUT_SHAPE = (96, 96, 3)


OBJECTNESS_PRIOR_LOGIT = -3.0


def init_graph(layers: list[LayerSpec] | None = None,
               input_shape: tuple[int, int, int] | None = None,
               seed: int = 0) -> ModelGraph:
    """Builds a graph with seeded He-scaled kernels and zero biases.

    The objectness bias of the conv feeding detect_head starts at a low
    prior so early training is not dominated by the no-object term.
    """
    layers = list(layers) if layers is not None else person_mini()
    input_shape = tuple(input_shape) if input_shape else PERSON_MINI_INPUT_SHAPE
    graph = ModelGraph(layers, np.zeros(0, np.float32), input_shape)
    layout = graph.weight_layout()
    total = layout[-1][0] + layout[-1][1]
    rng = np.random.default_rng(seed)
    weights = np.zeros(total, dtype=np.float32)
    shapes = propagate_shapes(layers, input_shape)
    in_shapes = [input_shape] + shapes[:-1]
    for spec, in_shape, (offset, count) in zip(layers, in_shapes, layout):
        if spec.kind != CONV2D:
            continue
        kh, kw = spec.kernel
        fan_in = in_shape[2] * kh * kw
        n_kernel = spec.out_channels * fan_in
        std = np.sqrt(2.0 / fan_in)
        weights[offset:offset + n_kernel] = rng.normal(
            0.0, std, size=n_kernel).astype(np.float32)
        # biases stay zero
    if len(layers) >= 2 and layers[-1].kind == DETECT_HEAD:
        head_conv = len(layers) - 2
        offset, count = layout[head_conv]
        n_kernel = count - layers[head_conv].out_channels
        for b in range(layers[-1].boxes_per_cell):
            weights[offset + n_kernel + b * 5 + 4] = OBJECTNESS_PRIOR_LOGIT
    graph.weights = weights
    validate_graph(graph)
    return graph


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(graph: ModelGraph, path) -> None:
    """Writes the graph; two saves of the same graph are byte-identical."""
    validate_graph(graph)
    header = {
        "input_shape": list(graph.input_shape),
        "layers": [spec.to_json() for spec in graph.layers],
        "weight_count": int(graph.weights.size),
        "weight_offsets": [list(t) for t in graph.weight_layout()],
        "meta": graph.meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(graph.weights.astype("<f4").tobytes())


def load_model(path) -> ModelGraph:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FormatError("bad magic bytes, not a model file")
    if len(raw) < 12:
        raise FormatError("truncated model header")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported model version {version}")
    if len(raw) < 12 + header_len:
        raise FormatError("truncated model header")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable model header: {exc}") from exc
    layers = [LayerSpec.from_json(d) for d in header["layers"]]
    blob = raw[12 + header_len:]
    declared = int(header["weight_count"])
    if len(blob) != declared * 4:
        raise CorruptModelError(
            f"weight blob is {len(blob)} bytes, expected {declared * 4}")
    weights = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    graph = ModelGraph(layers, weights, tuple(header["input_shape"]),
                       dict(header.get("meta", {})))
    try:
        validate_graph(graph)
    except ArgumentError as exc:
        raise CorruptModelError(str(exc)) from exc
    return graph


def graphs_equal(a: ModelGraph, b: ModelGraph) -> bool:
    return (a.layers == b.layers and a.input_shape == b.input_shape
            and a.meta == b.meta and np.array_equal(a.weights, b.weights))


# ---------------------------------------------------------------------------
# Layer primitives (batched NHWC)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: str):
    """Returns (cols, geometry) with cols of shape (n*oh*ow, kh*kw*c)."""
    n, h, w, c = x.shape
    oh, pt, pb = _out_size(h, kh, stride, padding)
    ow, pl, pr = _out_size(w, kw, stride, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # (n, oh, ow, c, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    cols = cols.reshape(n * oh * ow, kh * kw * c)
    return cols, (n, h, w, c, oh, ow, pt, pb, pl, pr)


def _conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                  stride: int, padding: str):
    out_ch, in_ch, kh, kw = kernel.shape
    cols, geom = _im2col(x, kh, kw, stride, padding)
    kmat = kernel.transpose(2, 3, 1, 0).reshape(kh * kw * in_ch, out_ch)
    y = cols @ kmat + bias
    n, _, _, _, oh, ow = geom[:6]
    return y.reshape(n, oh, ow, out_ch), (cols, kmat, geom, kernel.shape, stride, padding)


def _conv_backward(dy: np.ndarray, cache):
    cols, kmat, geom, kshape, stride, padding = cache
    out_ch, in_ch, kh, kw = kshape
    n, h, w, c, oh, ow, pt, pb, pl, pr = geom
    dy2 = dy.reshape(n * oh * ow, out_ch)
    dkmat = cols.T @ dy2
    dkernel = dkmat.reshape(kh, kw, in_ch, out_ch).transpose(3, 2, 0, 1)
    dbias = dy2.sum(axis=0)
    dcols = (dy2 @ kmat.T).reshape(n, oh, ow, kh, kw, c)
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :] += \
                dcols[:, :, :, i, j, :]
    dx = dxp[:, pt:pt + h, pl:pl + w, :]
    return dx, dkernel, dbias


def _maxpool_forward(x: np.ndarray):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c)
    y = np.maximum(np.maximum(win[:, :, 0, :, 0], win[:, :, 0, :, 1]),
                   np.maximum(win[:, :, 1, :, 0], win[:, :, 1, :, 1]))
    return y, (x, y)


def _maxpool_backward(dy: np.ndarray, cache):
    x, y = cache
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c)
    dwin = np.zeros_like(win)
    taken = np.zeros(y.shape, dtype=bool)   # first max wins on ties
    for ki in range(2):
        for kj in range(2):
            hit = (win[:, :, ki, :, kj] == y) & ~taken
            dwin[:, :, ki, :, kj] = np.where(hit, dy, 0)
            taken |= hit
    return dwin.reshape(n, h, w, c)


def _leaky_forward(x: np.ndarray, slope: float):
    return np.where(x >= 0, x, slope * x), x >= 0


def _leaky_backward(dy: np.ndarray, mask: np.ndarray, slope: float):
    return np.where(mask, dy, slope * dy)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def forward_batch(graph: ModelGraph, images: np.ndarray, dtype=np.float32,
                  keep_cache: bool = False):
    """Runs a batch (n, H, W, C); returns (head, traces, caches).

    ``traces`` is one ActivationTrace per image; ``caches`` holds per-layer
    backward context when requested (used by the trainer).
    """
    images = np.asarray(images, dtype=dtype)
    if images.ndim != 4 or images.shape[1:] != graph.input_shape:
        raise ArgumentError(
            f"batch shape {images.shape} does not match input {graph.input_shape}")
    x = images
    caches = [] if keep_cache else None
    act_indices = graph.activation_layer_indices()
    means = {i: None for i in act_indices}
    for idx, spec in enumerate(graph.layers):
        if spec.kind == CONV2D:
            kernel, bias = graph.conv_params(idx, dtype)
            x, cache = _conv_forward(x, kernel, bias, spec.stride, spec.padding)
        elif spec.kind == LEAKY_RELU:
            x, cache = _leaky_forward(x, spec.slope)
        elif spec.kind == RELU:
            x, cache = _leaky_forward(x, 0.0)
        elif spec.kind == MAXPOOL:
            x, cache = _maxpool_forward(x)
        elif spec.kind == DETECT_HEAD:
            cache = None
        else:
            raise ArgumentError(f"unknown layer kind {spec.kind!r}")
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activations after layer {idx}")
        if idx in means:
            # 64-bit accumulation, stored back at working precision
            means[idx] = x.mean(axis=(1, 2), dtype=np.float64).astype(dtype)
        if keep_cache:
            caches.append(cache)
    traces = []
    for b in range(images.shape[0]):
        traces.append(ActivationTrace(
            list(act_indices), [means[i][b].copy() for i in act_indices]))
    return x, traces, caches


def forward_with_trace(graph: ModelGraph, image: np.ndarray,
                       dtype=np.float32) -> tuple[np.ndarray, ActivationTrace]:
    """Single-image forward; returns the raw head tensor and its trace."""
    image = np.asarray(image, dtype=dtype)
    if image.ndim != 3:
        raise ArgumentError(f"expected HWC image, got shape {image.shape}")
    head, traces, _ = forward_batch(graph, image[None], dtype=dtype)
    return head[0], traces[0]


# ---------------------------------------------------------------------------
# Decode + NMS
# ---------------------------------------------------------------------------

def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def decode_and_nms(raw: np.ndarray, graph: ModelGraph,
                   score_thresh: float = DEFAULT_SCORE_THRESH,
                   iou_thresh: float = DEFAULT_IOU_THRESH) -> list[Detection]:
    """Grid/anchor decode followed by greedy NMS, highest score first."""
    spec = graph.detect_spec()
    if spec.kind != DETECT_HEAD:
        raise ArgumentError("graph has no detect_head layer")
    sh, sw = spec.grid
    bpc = spec.boxes_per_cell
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (sh, sw, bpc * 5):
        raise ArgumentError(f"raw shape {raw.shape} does not match head "
                            f"{(sh, sw, bpc * 5)}")
    if not np.all(np.isfinite(raw)):
        raise NumericError("non-finite values in raw head output")
    img_h, img_w = graph.input_shape[:2]

    t = raw.reshape(sh, sw, bpc, 5)
    scores = sigmoid(t[..., 4])
    keepable = scores >= score_thresh
    if not keepable.any():
        return []
    ii, jj, bb = np.nonzero(keepable)
    cx = (jj + sigmoid(t[ii, jj, bb, 0])) / sw * img_w
    cy = (ii + sigmoid(t[ii, jj, bb, 1])) / sh * img_h
    anchors = np.asarray(spec.anchors, dtype=np.float64)
    # exponent clamp keeps pathological raw values finite without changing
    # any box a trained detector can emit
    tw = np.clip(t[ii, jj, bb, 2], -30.0, 30.0)
    th = np.clip(t[ii, jj, bb, 3], -30.0, 30.0)
    bw = anchors[bb, 0] * np.exp(tw) * img_w
    bh = anchors[bb, 1] * np.exp(th) * img_h
    boxes = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)
    cand = []
    for k in np.argsort(-scores[ii, jj, bb], kind="stable"):
        box = tuple(float(v) for v in boxes[k])
        if box[0] >= box[2] or box[1] >= box[3]:
            continue
        if box[2] <= 0 or box[3] <= 0 or box[0] >= img_w or box[1] >= img_h:
            continue          # must intersect the image
        cand.append(Detection(box, float(scores[ii[k], jj[k], bb[k]])))
    kept: list[Detection] = []
    for det in cand:
        if all(_box_iou(det.box, k.box) < iou_thresh for k in kept):
            kept.append(det)
    return kept


def predict(graph: ModelGraph, image: np.ndarray,
            score_thresh: float = DEFAULT_SCORE_THRESH,
            iou_thresh: float = DEFAULT_IOU_THRESH
            ) -> tuple[list[Detection], ActivationTrace]:
    """Forward + decode in one call; the trace comes from the same pass."""
    raw, trace = forward_with_trace(graph, image)
    return decode_and_nms(raw, graph, score_thresh, iou_thresh), trace
