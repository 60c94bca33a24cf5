"""Deep-feature distances with per-channel scalars.

Five comparison methods turn two feature stacks into one nonnegative
distance:

* ``spatial``  - mean squared difference over all activations of each tap
  layer, each channel scaled by its scalar before squaring, normalized by
  C*H*W per layer and summed over layers.
* ``mean``     - layers are first pooled to per-channel spatial means; the
  scaled squared difference is normalized by C.
* ``sort``     - like ``mean`` but each pooled vector is sorted descending
  before differencing, making the method blind to channel identity.
* ``spatial+mean`` / ``spatial+sort`` - exact sums of their parts.

Because the scalars multiply the difference before squaring, a distance is
a quadratic form in the scalars: d(w) = sum_c w_c^2 * A_c with nonnegative
coefficients A that depend only on the two stacks.  ``distance_coeffs``
exposes A directly; ``distance`` and ``distance_grad_w`` are evaluated
through it.  All accumulation happens in float64 regardless of the float32
feature storage.
"""

import enum
import json
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .nets.network import FeatureStack, forward_extract

EPSILON_NORM = 1e-10


class ComparisonMethod(enum.Enum):
    SPATIAL = "spatial"
    MEAN = "mean"
    SORT = "sort"
    SPATIAL_MEAN = "spatial+mean"
    SPATIAL_SORT = "spatial+sort"

    @classmethod
    def parse(cls, text):
        for method in cls:
            if method.value == text:
                return method
        raise ValueError(f"unknown comparison method {text!r}; "
                         f"expected one of {[m.value for m in cls]}")

    @property
    def parts(self):
        """Primitive methods this one sums over."""
        if self is ComparisonMethod.SPATIAL_MEAN:
            return (ComparisonMethod.SPATIAL, ComparisonMethod.MEAN)
        if self is ComparisonMethod.SPATIAL_SORT:
            return (ComparisonMethod.SPATIAL, ComparisonMethod.SORT)
        return (self,)


ALL_METHODS = tuple(ComparisonMethod)


@dataclass(frozen=True)
class ScalarWeights:
    """Per-layer, per-channel nonnegative scalars.

    ``values[k]`` is a float64 vector of length C for tap k;
    ``tap_indices[k]`` is the network layer index the tap sits at.  The
    all-ones state is the baseline metric.
    """
    values: tuple
    tap_indices: tuple = ()
    network: str = ""
    method: str = ""

    def __post_init__(self):
        vals = tuple(np.asarray(v, dtype=np.float64) for v in self.values)
        object.__setattr__(self, "values", vals)
        for k, v in enumerate(vals):
            if v.ndim != 1:
                raise ShapeMismatchError(f"scalar layer {k} is not a vector")
            if v.size and float(v.min()) < 0:
                raise ShapeMismatchError(f"scalar layer {k} has negative entries")

    @classmethod
    def ones(cls, channel_counts, tap_indices=(), network="", method=""):
        return cls(tuple(np.ones(c) for c in channel_counts),
                   tuple(tap_indices), network, method)

    @classmethod
    def ones_for(cls, spec, method=""):
        return cls.ones(spec.tap_channels(), spec.tap_indices,
                        spec.name, method)

    def min_entry(self):
        return min(float(v.min()) for v in self.values)

    def to_json(self):
        doc = {"network": self.network, "method": self.method,
               "layers": [{"index": int(i), "weights": v.tolist()}
                          for i, v in zip(self._indices(), self.values)]}
        return json.dumps(doc, indent=2)

    def _indices(self):
        if self.tap_indices:
            return self.tap_indices
        return tuple(range(len(self.values)))

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        layers = sorted(doc["layers"], key=lambda e: e["index"])
        return cls(tuple(np.asarray(e["weights"], dtype=np.float64)
                         for e in layers),
                   tuple(int(e["index"]) for e in layers),
                   doc.get("network", ""), doc.get("method", ""))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _check_pair(fx, fx0):
    if len(fx.layers) != len(fx0.layers):
        raise ShapeMismatchError(
            f"stacks have {len(fx.layers)} vs {len(fx0.layers)} layers")
    for k, (a, b) in enumerate(zip(fx.layers, fx0.layers)):
        if a.shape != b.shape:
            raise ShapeMismatchError(
                f"layer {k}: shapes {a.shape} vs {b.shape} differ")


def _check_weights(w, fx):
    if len(w.values) != len(fx.layers):
        raise ShapeMismatchError(
            f"weights cover {len(w.values)} layers, stack has {len(fx.layers)}")
    for k, (v, a) in enumerate(zip(w.values, fx.layers)):
        if v.shape[0] != a.shape[0]:
            raise ShapeMismatchError(
                f"layer {k}: {v.shape[0]} scalars vs {a.shape[0]} channels")


def channel_normalize(feats: FeatureStack) -> FeatureStack:
    """Scale every positional channel vector to unit L2 norm.

    Positions whose norm falls below ``EPSILON_NORM`` are zeroed rather
    than divided, so all-zero activations stay all-zero.
    """
    out = []
    for arr in feats.layers:
        norm = np.sqrt((arr.astype(np.float32) ** 2).sum(axis=0, keepdims=True))
        scaled = np.where(norm < EPSILON_NORM, np.float32(0), arr / np.maximum(norm, EPSILON_NORM))
        scaled = np.ascontiguousarray(scaled, dtype=np.float32)
        scaled.flags.writeable = False
        out.append(scaled)
    return FeatureStack(layers=tuple(out), tap_indices=feats.tap_indices)


def _pooled(arr):
    return arr.astype(np.float64).mean(axis=(1, 2))


def _coeffs_one(method, fx, fx0):
    out = []
    for a, b in zip(fx.layers, fx0.layers):
        c = a.shape[0]
        if method is ComparisonMethod.SPATIAL:
            delta = a.astype(np.float64) - b.astype(np.float64)
            out.append((delta ** 2).sum(axis=(1, 2)) / delta.size)
        elif method is ComparisonMethod.MEAN:
            delta = _pooled(a) - _pooled(b)
            out.append(delta ** 2 / c)
        elif method is ComparisonMethod.SORT:
            # sort each input's pooled vector independently, descending
            delta = -np.sort(-_pooled(a)) - -np.sort(-_pooled(b))
            out.append(delta ** 2 / c)
        else:  # pragma: no cover
            raise ValueError(f"not a primitive method: {method}")
    return out


def distance_coeffs(method, fx, fx0):
    """Per-layer nonnegative vectors A with d(w) = sum_l <w_l^2, A_l>."""
    _check_pair(fx, fx0)
    parts = ComparisonMethod(method).parts
    coeffs = _coeffs_one(parts[0], fx, fx0)
    for extra in parts[1:]:
        for k, vec in enumerate(_coeffs_one(extra, fx, fx0)):
            coeffs[k] = coeffs[k] + vec
    return coeffs


def _eval_quadratic(coeffs, w):
    total = 0.0
    for v, a in zip(w.values, coeffs):
        total += float((v * v * a).sum())
    return total


def d_spatial(fx, fx0, w: ScalarWeights) -> float:
    _check_pair(fx, fx0)
    _check_weights(w, fx)
    return _eval_quadratic(_coeffs_one(ComparisonMethod.SPATIAL, fx, fx0), w)


def d_mean(fx, fx0, w: ScalarWeights) -> float:
    _check_pair(fx, fx0)
    _check_weights(w, fx)
    return _eval_quadratic(_coeffs_one(ComparisonMethod.MEAN, fx, fx0), w)


def d_sort(fx, fx0, w: ScalarWeights) -> float:
    _check_pair(fx, fx0)
    _check_weights(w, fx)
    return _eval_quadratic(_coeffs_one(ComparisonMethod.SORT, fx, fx0), w)


_PRIMITIVE = {ComparisonMethod.SPATIAL: d_spatial,
              ComparisonMethod.MEAN: d_mean,
              ComparisonMethod.SORT: d_sort}


def distance(method, fx, fx0, w: ScalarWeights) -> float:
    """Dispatch on the comparison method; combined methods are the literal
    sum of their parts, so additivity holds bitwise."""
    method = ComparisonMethod(method)
    return sum(_PRIMITIVE[part](fx, fx0, w) for part in method.parts)


def distance_grad_w(method, fx, fx0, w: ScalarWeights):
    """Exact gradient of :func:`distance` w.r.t. every scalar.

    d = sum w^2 A, so dd/dw = 2 w A, with the sort permutation frozen at
    the forward pass (A is computed from sorted pooled vectors).
    """
    _check_weights(w, fx)
    coeffs = distance_coeffs(method, fx, fx0)
    return [2.0 * v * a for v, a in zip(w.values, coeffs)]


@dataclass
class Metric:
    """A runnable metric: frozen network + method + scalars.

    ``weights=None`` means the all-ones baseline.  ``normalize`` selects
    channel-wise unit normalization of the stacks before comparison.
    """
    net: object
    method: ComparisonMethod
    weights: ScalarWeights = None
    normalize: bool = True

    def __post_init__(self):
        self.method = ComparisonMethod(self.method)
        if self.weights is None:
            self.weights = ScalarWeights.ones_for(self.net.spec,
                                                  self.method.value)

    def features(self, img) -> FeatureStack:
        stack = forward_extract(self.net, img)
        return channel_normalize(stack) if self.normalize else stack

    def distance_from_features(self, fa, fb) -> float:
        return distance(self.method, fa, fb, self.weights)

    def distance(self, img_a, img_b) -> float:
        return self.distance_from_features(self.features(img_a),
                                           self.features(img_b))

    def coeffs(self, fa, fb):
        return distance_coeffs(self.method, fa, fb)

    def id(self, variant="baseline"):
        return f"{self.net.name}:{self.method.value}:{variant}"
