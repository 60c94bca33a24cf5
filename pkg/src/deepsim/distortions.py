"""The six image distortions, their parameter sampling, and 2AFC triplets.

Every distortion maps a (3, H, W) float image in [0, 1] to another of the
same shape and range.  Parameters are drawn uniformly from fixed intervals:

    rotate            30 .. 330 degrees (counter-clockwise)
    translate         -0.5 .. 0.5 of the image size per axis
    lower_brightness  0.1 .. 0.5 brightness factor
    shift_hue         -0.5 .. 0.5 hue factor (wraps; covers all hues)
    gaussian_blur     kernel size in {11, 13, 15, 17, 19, 21},
                      sigma 4 .. 10
    zoom_in           1.1 .. 2 zoom scale

Rotation and translation fill exposed pixels with black; geometric
operations use bilinear interpolation.  An ordering of distortion kinds
defines a similarity context: the earlier a kind appears, the more similar
its output counts as.  Triplets pair two distinct distortions of one image
with the binary label that convention implies.
"""

import enum
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DatasetError


class DistortionKind(enum.Enum):
    ROTATE = "rotate"
    TRANSLATE = "translate"
    LOWER_BRIGHTNESS = "lower_brightness"
    SHIFT_HUE = "shift_hue"
    GAUSSIAN_BLUR = "gaussian_blur"
    ZOOM_IN = "zoom_in"

    @classmethod
    def parse(cls, text):
        for kind in cls:
            if kind.value == text:
                return kind
        raise ValueError(f"unknown distortion kind {text!r}")


ALL_KINDS = tuple(DistortionKind)
BLUR_KERNEL_CHOICES = (11, 13, 15, 17, 19, 21)

PARAM_INTERVALS = {
    DistortionKind.ROTATE: ("degrees", 30.0, 330.0),
    DistortionKind.LOWER_BRIGHTNESS: ("factor", 0.1, 0.5),
    DistortionKind.SHIFT_HUE: ("hue_factor", -0.5, 0.5),
    DistortionKind.ZOOM_IN: ("scale", 1.1, 2.0),
}


@dataclass(frozen=True)
class Rotate:
    degrees: float


@dataclass(frozen=True)
class Translate:
    dx: float
    dy: float


@dataclass(frozen=True)
class LowerBrightness:
    factor: float


@dataclass(frozen=True)
class ShiftHue:
    hue_factor: float


@dataclass(frozen=True)
class GaussianBlur:
    kernel: int
    sigma: float


@dataclass(frozen=True)
class ZoomIn:
    scale: float


_PARAM_TYPES = {
    DistortionKind.ROTATE: Rotate,
    DistortionKind.TRANSLATE: Translate,
    DistortionKind.LOWER_BRIGHTNESS: LowerBrightness,
    DistortionKind.SHIFT_HUE: ShiftHue,
    DistortionKind.GAUSSIAN_BLUR: GaussianBlur,
    DistortionKind.ZOOM_IN: ZoomIn,
}


def sample_params(kind: DistortionKind, rng: np.random.Generator):
    """Draw parameters uniformly from the kind's interval."""
    if kind in PARAM_INTERVALS:
        _, lo, hi = PARAM_INTERVALS[kind]
        return _PARAM_TYPES[kind](float(rng.uniform(lo, hi)))
    if kind is DistortionKind.TRANSLATE:
        return Translate(float(rng.uniform(-0.5, 0.5)),
                         float(rng.uniform(-0.5, 0.5)))
    if kind is DistortionKind.GAUSSIAN_BLUR:
        kernel = int(rng.choice(BLUR_KERNEL_CHOICES))
        return GaussianBlur(kernel, float(rng.uniform(4.0, 10.0)))
    raise ValueError(f"unknown kind {kind!r}")


def _bilinear_sample(img, src_rows, src_cols):
    """Sample img (3,H,W) at fractional (row, col) grids; outside is black."""
    _, h, w = img.shape
    r0 = np.floor(src_rows)
    c0 = np.floor(src_cols)
    fr = (src_rows - r0).astype(np.float32)
    fc = (src_cols - c0).astype(np.float32)
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    out = np.zeros((img.shape[0],) + src_rows.shape, dtype=np.float32)
    for dr, dc, wgt in (
            (0, 0, (1 - fr) * (1 - fc)),
            (0, 1, (1 - fr) * fc),
            (1, 0, fr * (1 - fc)),
            (1, 1, fr * fc)):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rs = np.clip(rr, 0, h - 1)
        cs = np.clip(cc, 0, w - 1)
        out += img[:, rs, cs] * (wgt * valid)
    return out


def _affine_sample(img, inv):
    """Resample with dest->src map ``inv`` (2x3, row/col homogeneous)."""
    _, h, w = img.shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    src_r = inv[0, 0] * rows + inv[0, 1] * cols + inv[0, 2]
    src_c = inv[1, 0] * rows + inv[1, 1] * cols + inv[1, 2]
    return _bilinear_sample(img, src_r, src_c)


def _rotate(img, degrees):
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = np.deg2rad(degrees)
    cos, sin = np.cos(a), np.sin(a)
    # visual CCW rotation with rows growing downward; inverse map dest->src
    inv = np.array([
        [cos, sin, cy - cos * cy - sin * cx],
        [-sin, cos, cx + sin * cy - cos * cx],
    ])
    return _affine_sample(img, inv)


def _translate(img, dx, dy):
    _, h, w = img.shape
    inv = np.array([[1.0, 0.0, -dy * h],
                    [0.0, 1.0, -dx * w]])
    return _affine_sample(img, inv)


def _zoom_in(img, scale):
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    inv = np.array([[1.0 / scale, 0.0, cy * (1 - 1.0 / scale)],
                    [0.0, 1.0 / scale, cx * (1 - 1.0 / scale)]])
    return _affine_sample(img, inv)


def rgb_to_hsv(img):
    """Vectorized RGB->HSV on a (3, ...) array; h, s, v all in [0, 1]."""
    r, g, b = img[0], img[1], img[2]
    maxc = np.max(img, axis=0)
    minc = np.min(img, axis=0)
    chroma = maxc - minc
    safe = np.where(chroma > 0, chroma, 1.0)
    h = np.zeros_like(maxc)
    h = np.where((chroma > 0) & (maxc == r), ((g - b) / safe) % 6.0, h)
    h = np.where((chroma > 0) & (maxc == g) & (maxc != r), (b - r) / safe + 2.0, h)
    h = np.where((chroma > 0) & (maxc == b) & (maxc != r) & (maxc != g),
                 (r - g) / safe + 4.0, h)
    h = h / 6.0
    s = np.where(maxc > 0, chroma / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([h, s, maxc])


def hsv_to_rgb(img):
    h, s, v = img[0], img[1], img[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _shift_hue(img, hue_factor):
    hsv = rgb_to_hsv(img.astype(np.float64))
    hsv[0] = (hsv[0] + hue_factor) % 1.0
    return hsv_to_rgb(hsv).astype(np.float32)


def gaussian_kernel1d(kernel, sigma):
    """Continuous Gaussian sampled at integer offsets, normalized to sum 1."""
    offsets = np.arange(kernel, dtype=np.float64) - (kernel - 1) / 2.0
    weights = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def _gaussian_blur(img, kernel, sigma):
    weights = gaussian_kernel1d(kernel, sigma)
    out = img.astype(np.float64)
    # 'mirror' reflects without repeating the border sample
    out = correlate1d(out, weights, axis=1, mode="mirror")
    out = correlate1d(out, weights, axis=2, mode="mirror")
    return out.astype(np.float32)


def apply(kind: DistortionKind, params, img) -> np.ndarray:
    """Apply one distortion; output shape equals input, values in [0, 1]."""
    img = np.asarray(img, dtype=np.float32)
    if kind is DistortionKind.ROTATE:
        out = _rotate(img, params.degrees)
    elif kind is DistortionKind.TRANSLATE:
        out = _translate(img, params.dx, params.dy)
    elif kind is DistortionKind.LOWER_BRIGHTNESS:
        out = img * np.float32(params.factor)
    elif kind is DistortionKind.SHIFT_HUE:
        out = _shift_hue(img, params.hue_factor)
    elif kind is DistortionKind.GAUSSIAN_BLUR:
        out = _gaussian_blur(img, params.kernel, params.sigma)
    elif kind is DistortionKind.ZOOM_IN:
        out = _zoom_in(img, params.scale)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return np.clip(out, 0.0, 1.0, out=out)


@dataclass(frozen=True)
class DistortionOrdering:
    """Distinct distortion kinds, earliest = most similar.

    Full similarity contexts order all six kinds; restricted contexts (a
    subset of at least two) are allowed for small-scale experiments.
    """
    kinds: tuple

    def __post_init__(self):
        kinds = tuple(DistortionKind(k) for k in self.kinds)
        object.__setattr__(self, "kinds", kinds)
        if len(set(kinds)) != len(kinds):
            raise DatasetError("ordering repeats a distortion kind")
        if len(kinds) < 2:
            raise DatasetError("ordering needs at least two kinds")

    def position(self, kind):
        return self.kinds.index(kind)

    def label(self, kind0, kind1) -> float:
        """0 if kind0 is earlier (x0 counts as more similar), else 1."""
        return 0.0 if self.position(kind0) < self.position(kind1) else 1.0

    def reversed(self):
        return DistortionOrdering(tuple(reversed(self.kinds)))

    def to_json(self):
        return json.dumps([k.value for k in self.kinds])

    @classmethod
    def from_json(cls, text):
        return cls(tuple(DistortionKind.parse(n) for n in json.loads(text)))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def random_ordering(rng, kinds=ALL_KINDS) -> DistortionOrdering:
    order = rng.permutation(len(kinds))
    return DistortionOrdering(tuple(kinds[i] for i in order))


@dataclass(frozen=True)
class Triplet:
    """Reference image, two distorted variants, and the ordering label."""
    ref: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    judgement: float
    kinds: tuple
    params: tuple

    def manifest_record(self, image_ref=""):
        rec = {"image": image_ref,
               "kinds": [k.value for k in self.kinds],
               "params": [asdict(p) for p in self.params],
               "judgement": self.judgement}
        return json.dumps(rec, sort_keys=True)


def make_triplet(img, ordering: DistortionOrdering,
                 rng: np.random.Generator) -> Triplet:
    """Distort ``img`` with two distinct kinds drawn from the ordering.

    Kinds are drawn from the ordering's kind set in canonical enum order,
    so the same seed produces the same triplet under any permutation of
    that set; only the label changes.
    """
    pool = sorted(ordering.kinds, key=lambda k: ALL_KINDS.index(k))
    picks = rng.choice(len(pool), size=2, replace=False)
    kind0, kind1 = pool[int(picks[0])], pool[int(picks[1])]
    params0 = sample_params(kind0, rng)
    params1 = sample_params(kind1, rng)
    return Triplet(ref=img,
                   x0=apply(kind0, params0, img),
                   x1=apply(kind1, params1, img),
                   judgement=ordering.label(kind0, kind1),
                   kinds=(kind0, kind1),
                   params=(params0, params1))


def triplet_rng(base_seed, image_index, repeat) -> np.random.Generator:
    """Deterministic, collision-free generator for one triplet slot."""
    seq = np.random.SeedSequence([int(base_seed), int(image_index), int(repeat)])
    return np.random.default_rng(seq)


def replay_params(kinds, param_dicts):
    """Rebuild typed params from a manifest record."""
    return tuple(_PARAM_TYPES[DistortionKind.parse(k)](**d)
                 for k, d in zip(kinds, param_dicts))


def write_triplet_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for line in records:
            fh.write(line)
            fh.write("\n")
