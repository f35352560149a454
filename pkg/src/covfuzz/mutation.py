"""Natural image mutations, the acceptance gate, and corruption operators.

The natural pipeline runs textural ops (enhancements, filters), checks the
L0/L-inf acceptance test against the reference, then applies geometric ops
(flip, translate, scale + re-placement) with annotations transformed
alongside. All operators work on HWC float images in [0, 1] and are pure
given an explicit RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ArgumentError

ENHANCEMENTS = ("brightness", "contrast", "color", "sharpness")
FILTERS = ("detail", "edge_enhance", "smooth", "sharpen")
CORRUPTIONS = ("gaussian_noise", "shot_noise", "impulse_noise", "gaussian_blur",
               "defocus_blur", "brightness_shift", "contrast_shift", "pixelate")
SEVERITIES = (1, 2, 3, 4, 5)

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)

FILTER_KERNELS = {
    "smooth": np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], np.float32) / 13.0,
    "sharpen": np.array([[-2, -2, -2], [-2, 32, -2], [-2, -2, -2]], np.float32) / 16.0,
    "detail": np.array([[0, -1, 0], [-1, 10, -1], [0, -1, 0]], np.float32) / 6.0,
    "edge_enhance": np.array([[-1, -1, -1], [-1, 10, -1], [-1, -1, -1]], np.float32) / 2.0,
}


@dataclass(frozen=True)
class AcceptanceParams:
    """L0 fraction bound (alpha) and L-inf fraction bound (beta)."""

    alpha: float = 0.02
    beta: float = 0.20

    def __post_init__(self):
        if not (0 < self.alpha < 1) or not (0 < self.beta <= 1):
            raise ArgumentError("acceptance params out of range")


@dataclass
class MutationRecord:
    """Everything needed to audit or replay one natural mutation."""

    enhancements: list[tuple[str, float]] = field(default_factory=list)
    filters: list[str] = field(default_factory=list)
    flip: bool = False
    dx: int = 0
    dy: int = 0
    scale: float = 1.0
    offset: tuple[int, int] = (0, 0)
    accepted: bool = False
    retries: int = 0
    seed: int | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["enhancements"] = [[op, float(f)] for op, f in self.enhancements]
        d["offset"] = list(self.offset)
        return d

    @staticmethod
    def from_json(d: dict) -> "MutationRecord":
        return MutationRecord(
            enhancements=[(op, float(f)) for op, f in d.get("enhancements", [])],
            filters=list(d.get("filters", [])),
            flip=bool(d.get("flip", False)),
            dx=int(d.get("dx", 0)), dy=int(d.get("dy", 0)),
            scale=float(d.get("scale", 1.0)),
            offset=tuple(d.get("offset", (0, 0))),
            accepted=bool(d.get("accepted", False)),
            retries=int(d.get("retries", 0)),
            seed=d.get("seed"))


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ArgumentError(f"expected HxWx3 image, got shape {image.shape}")
    return image


def _conv3x3_edge_clamped(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 convolution with clamp-to-edge padding."""
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(image)
    for i in range(3):
        for j in range(3):
            out += kernel[i, j] * padded[i:i + image.shape[0], j:j + image.shape[1]]
    return out


def luminance(image: np.ndarray) -> np.ndarray:
    return image @ LUMA


def apply_enhancement(image: np.ndarray, op: str, factor: float) -> np.ndarray:
    """Blend toward the op's degenerate image: out = (1-f)*degenerate + f*image.

    Factor 1.0 returns the image unchanged; factor 0.0 yields black
    (brightness), uniform grey at the mean luminance (contrast), per-pixel
    grayscale (color), or the 3x3-smoothed image (sharpness).
    """
    image = _check_image(image)
    if not (0.0 <= factor <= 1.0):
        raise ArgumentError(f"enhancement factor {factor} outside [0, 1]")
    if op == "brightness":
        degenerate = np.zeros_like(image)
    elif op == "contrast":
        degenerate = np.full_like(image, luminance(image).mean(dtype=np.float64))
    elif op == "color":
        degenerate = np.repeat(luminance(image)[:, :, None], 3, axis=2)
    elif op == "sharpness":
        degenerate = _conv3x3_edge_clamped(image, FILTER_KERNELS["smooth"])
    else:
        raise ArgumentError(f"unknown enhancement op {op!r}")
    out = (1.0 - factor) * degenerate + factor * image
    return np.clip(out, 0.0, 1.0)


def apply_filter(image: np.ndarray, op: str) -> np.ndarray:
    """Fixed-kernel 3x3 filter with clamp-to-edge padding."""
    image = _check_image(image)
    if op not in FILTER_KERNELS:
        raise ArgumentError(f"unknown filter op {op!r}")
    return np.clip(_conv3x3_edge_clamped(image, FILTER_KERNELS[op]), 0.0, 1.0)


def _clip_boxes(boxes: np.ndarray, w: int, h: int,
                orig_areas: np.ndarray) -> np.ndarray:
    """Clips boxes to the canvas; drops boxes below 25% of original area."""
    if boxes.size == 0:
        return boxes.reshape(0, 4)
    out = boxes.copy()
    out[:, 0] = np.clip(out[:, 0], 0, w)
    out[:, 2] = np.clip(out[:, 2], 0, w)
    out[:, 1] = np.clip(out[:, 1], 0, h)
    out[:, 3] = np.clip(out[:, 3], 0, h)
    areas = np.maximum(out[:, 2] - out[:, 0], 0) * np.maximum(out[:, 3] - out[:, 1], 0)
    keep = areas >= 0.25 * orig_areas
    return out[keep]


def _bilinear_resize(image: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    rows = (np.arange(new_h) + 0.5) * (h / new_h) - 0.5
    cols = (np.arange(new_w) + 0.5) * (w / new_w) - 0.5
    r0 = np.clip(np.floor(rows).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = np.clip(rows - r0, 0.0, 1.0).astype(np.float32)[:, None, None]
    fc = np.clip(cols - c0, 0.0, 1.0).astype(np.float32)[None, :, None]
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bot = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def apply_geometric(image: np.ndarray, boxes: np.ndarray, flip: bool,
                    dx: int, dy: int, s: float,
                    offset: tuple[int, int] | None = None,
                    rng: np.random.Generator | None = None):
    """Flip, translate (black fill), then scale and re-place on a black canvas.

    Returns (image, boxes, geometry dict). The scale placement offset comes
    from ``offset`` or is drawn from ``rng``. Boxes reduced below 25% of
    their area are dropped.
    """
    image = _check_image(image)
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    if abs(dx) > 2 or abs(dy) > 2:
        raise ArgumentError("translation limited to 2 pixels per axis")
    if not (0.5 <= s <= 1.0):
        raise ArgumentError("scale must lie in [0.5, 1.0]")
    h, w = image.shape[:2]
    out = image
    out_boxes = boxes.copy()
    orig_areas = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
                  if boxes.size else np.zeros(0, np.float32))

    if flip:
        out = out[:, ::-1, :]
        flipped = out_boxes.copy()
        flipped[:, 0] = w - out_boxes[:, 2]
        flipped[:, 2] = w - out_boxes[:, 0]
        out_boxes = flipped

    if dx or dy:
        shifted = np.zeros_like(out)
        src_x = slice(max(0, -dx), min(w, w - dx))
        src_y = slice(max(0, -dy), min(h, h - dy))
        dst_x = slice(max(0, dx), min(w, w + dx))
        dst_y = slice(max(0, dy), min(h, h + dy))
        shifted[dst_y, dst_x] = out[src_y, src_x]
        out = shifted
        if out_boxes.size:
            out_boxes[:, [0, 2]] += dx
            out_boxes[:, [1, 3]] += dy

    new_h, new_w = int(round(s * h)), int(round(s * w))
    if (new_h, new_w) != (h, w):
        content = _bilinear_resize(out, new_h, new_w)
        if offset is None:
            if rng is None:
                raise ArgumentError("scale placement needs an offset or rng")
            ox = int(rng.integers(0, w - new_w + 1))
            oy = int(rng.integers(0, h - new_h + 1))
        else:
            ox, oy = offset
        if not (0 <= ox <= w - new_w and 0 <= oy <= h - new_h):
            raise ArgumentError("scale placement offset outside canvas")
        canvas = np.zeros_like(image)
        canvas[oy:oy + new_h, ox:ox + new_w] = content
        out = canvas
        if out_boxes.size:
            sx, sy = new_w / w, new_h / h
            out_boxes[:, [0, 2]] = out_boxes[:, [0, 2]] * sx + ox
            out_boxes[:, [1, 3]] = out_boxes[:, [1, 3]] * sy + oy
            orig_areas = orig_areas * sx * sy
    else:
        ox = oy = 0

    out_boxes = _clip_boxes(out_boxes, w, h, orig_areas)
    return np.clip(out, 0.0, 1.0), out_boxes, {"scale": s, "offset": (ox, oy)}


def acceptance_test(reference: np.ndarray, candidate: np.ndarray,
                    params: AcceptanceParams) -> bool:
    """DeepHunter-style gate on the 0-255 integer scale.

    Accept iff the changed-pixel count is within alpha*H*W or the max
    channel difference is within beta*255.
    """
    reference = _check_image(reference)
    candidate = _check_image(candidate)
    if reference.shape != candidate.shape:
        raise ArgumentError("acceptance test needs same-size images")
    ref = np.rint(np.clip(reference, 0, 1) * 255).astype(np.int16)
    cand = np.rint(np.clip(candidate, 0, 1) * 255).astype(np.int16)
    diff = np.abs(ref - cand)
    l0 = int(np.count_nonzero(diff.max(axis=2)))
    linf = int(diff.max()) if diff.size else 0
    h, w = reference.shape[:2]
    return l0 <= params.alpha * h * w or linf <= params.beta * 255


def mutate_natural(image: np.ndarray, boxes: np.ndarray, reference: np.ndarray,
                   rng: np.random.Generator,
                   params: AcceptanceParams = AcceptanceParams(),
                   max_retries: int = 3):
    """One full natural mutation; None when no candidate passes acceptance.

    Per attempt: a non-empty random subset of enhancements (factors uniform
    in [0.5, 1]), a random subset of filters, a coin-flip horizontal flip,
    and a +-2 px translation are drawn; the textural result is gated by the
    acceptance test against ``reference`` before the geometric ops run.
    """
    image = _check_image(image)
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    for attempt in range(max_retries):
        n_enh = int(rng.integers(1, len(ENHANCEMENTS) + 1))
        enh_ops = [ENHANCEMENTS[i] for i in
                   sorted(rng.choice(len(ENHANCEMENTS), size=n_enh, replace=False))]
        enhancements = [(op, float(rng.uniform(0.5, 1.0))) for op in enh_ops]
        n_fil = int(rng.integers(0, len(FILTERS) + 1))
        filters = [FILTERS[i] for i in
                   sorted(rng.choice(len(FILTERS), size=n_fil, replace=False))]
        flip = bool(rng.random() < 0.5)
        dx = int(rng.integers(-2, 3))
        dy = int(rng.integers(-2, 3))
        s = float(rng.uniform(0.5, 1.0))

        textural = image
        for op, factor in enhancements:
            textural = apply_enhancement(textural, op, factor)
        for op in filters:
            textural = apply_filter(textural, op)
        if not acceptance_test(reference, textural, params):
            continue
        mutated, out_boxes, geom = apply_geometric(
            textural, boxes, flip, dx, dy, s, rng=rng)
        record = MutationRecord(enhancements, filters, flip, dx, dy,
                                geom["scale"], geom["offset"],
                                accepted=True, retries=attempt)
        return mutated, out_boxes, record
    return None


# ---------------------------------------------------------------------------
# Corruptions (8 analytic operators x 5 severities)
# ---------------------------------------------------------------------------

GAUSS_NOISE_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
SHOT_NOISE_PHOTONS = (60.0, 25.0, 12.0, 5.0, 3.0)
IMPULSE_FRACTION = (0.01, 0.03, 0.06, 0.10, 0.17)
GAUSS_BLUR_SIGMA = (0.5, 0.8, 1.2, 1.8, 2.5)
DEFOCUS_RADIUS = (1, 2, 3, 4, 6)
BRIGHTNESS_DELTA = (0.08, 0.14, 0.20, 0.27, 0.35)
CONTRAST_FACTOR = (0.75, 0.60, 0.45, 0.30, 0.20)
PIXELATE_BLOCK = (2, 3, 4, 6, 8)


def _gaussian_kernel_1d(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(2.5 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def _separable_blur(image: np.ndarray, k: np.ndarray) -> np.ndarray:
    radius = len(k) // 2
    padded = np.pad(image, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    tmp = np.zeros_like(image)
    for i, kv in enumerate(k):
        tmp += kv * padded[i:i + image.shape[0]]
    padded = np.pad(tmp, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(image)
    for i, kv in enumerate(k):
        out += kv * padded[:, i:i + image.shape[1]]
    return out


def _disk_kernel(radius: int) -> np.ndarray:
    ys, xs = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    k = ((xs ** 2 + ys ** 2) <= radius ** 2).astype(np.float32)
    return k / k.sum()


def apply_corruption(image: np.ndarray, kind: str, severity: int,
                     rng: np.random.Generator) -> np.ndarray:
    """One corruption operator at the given severity; deterministic per rng."""
    image = _check_image(image)
    if kind not in CORRUPTIONS:
        raise ArgumentError(f"unknown corruption kind {kind!r}")
    if severity not in SEVERITIES:
        raise ArgumentError(f"severity must be in 1..5, got {severity}")
    level = severity - 1
    h, w = image.shape[:2]

    if kind == "gaussian_noise":
        out = image + rng.normal(0.0, GAUSS_NOISE_SIGMA[level],
                                 size=image.shape).astype(np.float32)
    elif kind == "shot_noise":
        lam = SHOT_NOISE_PHOTONS[level]
        out = rng.poisson(image * lam).astype(np.float32) / lam
    elif kind == "impulse_noise":
        out = image.copy()
        mask = rng.random((h, w)) < IMPULSE_FRACTION[level]
        salt = rng.random((h, w)) < 0.5
        out[mask & salt] = 1.0
        out[mask & ~salt] = 0.0
    elif kind == "gaussian_blur":
        out = _separable_blur(image, _gaussian_kernel_1d(GAUSS_BLUR_SIGMA[level]))
    elif kind == "defocus_blur":
        out = _conv_full(image, _disk_kernel(DEFOCUS_RADIUS[level]))
    elif kind == "brightness_shift":
        out = image + BRIGHTNESS_DELTA[level]
    elif kind == "contrast_shift":
        means = image.mean(axis=(0, 1), keepdims=True, dtype=np.float64)
        out = ((image - means) * CONTRAST_FACTOR[level] + means).astype(np.float32)
    else:  # pixelate
        b = PIXELATE_BLOCK[level]
        if h % b or w % b:
            raise ArgumentError(f"pixelate block {b} does not divide {(h, w)}")
        blocks = image.reshape(h // b, b, w // b, b, 3).mean(axis=(1, 3))
        out = np.repeat(np.repeat(blocks, b, axis=0), b, axis=1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _conv_full(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    radius = kernel.shape[0] // 2
    padded = np.pad(image, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(image)
    for i in range(kernel.shape[0]):
        for j in range(kernel.shape[1]):
            if kernel[i, j]:
                out += kernel[i, j] * padded[i:i + image.shape[0],
                                             j:j + image.shape[1]]
    return out
