"""Network architecture descriptions.

A :class:`NetworkSpec` is an ordered list of layer descriptions plus the
per-channel preprocessing statistics applied once before the first layer.
Layers flagged ``tap=True`` are the feature-extraction points: the forward
pass returns their activations.  Specs serialize to a small JSON document
(see :func:`from_json` for the schema) so they can travel next to a weight
container.
"""

import json
from dataclasses import dataclass, field
from typing import Union

from ..errors import ArchitectureError

RGB_CHANNELS = 3


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    tap: bool = False

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ArchitectureError("conv kernel dims must be >= 1")
        if self.stride < 1:
            raise ArchitectureError("conv stride must be >= 1")
        if self.padding < 0:
            raise ArchitectureError("conv padding must be >= 0")
        if self.out_channels < 1:
            raise ArchitectureError("conv out_channels must be >= 1")


@dataclass(frozen=True)
class ReLU:
    tap: bool = False


@dataclass(frozen=True)
class LeakyReLU:
    slope: float
    tap: bool = False


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int
    ceil_mode: bool = False
    tap: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ArchitectureError("pool kernel and stride must be >= 1")


@dataclass(frozen=True)
class Fire:
    """Squeeze conv (1x1) + two expand convs (1x1 and 3x3, padding 1) whose
    outputs concatenate along the channel axis.  ReLU follows the squeeze
    and both expands, mirroring the reference implementation."""
    squeeze: int
    expand1x1: int
    expand3x3: int
    tap: bool = False

    @property
    def out_channels(self):
        return self.expand1x1 + self.expand3x3


Layer = Union[Conv2D, ReLU, LeakyReLU, MaxPool, Fire]

_KIND_NAMES = {Conv2D: "conv2d", ReLU: "relu", LeakyReLU: "leaky_relu",
               MaxPool: "maxpool", Fire: "fire"}


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)
    _channels: tuple = field(init=False, repr=False, compare=False, default=())

    def __post_init__(self):
        if not self.layers:
            raise ArchitectureError("network needs at least one layer")
        if not any(layer.tap for layer in self.layers):
            raise ArchitectureError("network needs at least one tap layer")
        if len(self.mean) != RGB_CHANNELS or len(self.std) != RGB_CHANNELS:
            raise ArchitectureError("preprocess stats must have 3 channels")
        if any(s == 0 for s in self.std):
            raise ArchitectureError("preprocess std must be nonzero")
        channels = []
        current = RGB_CHANNELS
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                current = layer.out_channels
            elif isinstance(layer, Fire):
                current = layer.out_channels
            channels.append(current)
        object.__setattr__(self, "_channels", tuple(channels))

    @property
    def tap_indices(self):
        return tuple(i for i, layer in enumerate(self.layers) if layer.tap)

    @property
    def tap_count(self):
        return len(self.tap_indices)

    def channels_after(self, index):
        """Channel count of the activation emitted by layer ``index``."""
        return self._channels[index]

    def in_channels(self, index):
        return RGB_CHANNELS if index == 0 else self._channels[index - 1]

    def tap_channels(self):
        return tuple(self._channels[i] for i in self.tap_indices)

    def spatial_walk(self, height, width):
        """(H, W) of every layer output for the given input size.

        Raises :class:`ArchitectureError` naming the first layer whose
        output would be empty.
        """
        from ..kernels import conv_output_dim, pool_output_dim

        dims = []
        h, w = height, width
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                h = conv_output_dim(h, layer.kernel_h, layer.stride, layer.padding)
                w = conv_output_dim(w, layer.kernel_w, layer.stride, layer.padding)
            elif isinstance(layer, MaxPool):
                h = pool_output_dim(h, layer.kernel, layer.stride, layer.ceil_mode)
                w = pool_output_dim(w, layer.kernel, layer.stride, layer.ceil_mode)
            # Fire: 1x1 and 3x3/pad-1 convs both preserve spatial dims
            if h < 1 or w < 1:
                raise ArchitectureError(
                    f"input {height}x{width} too small: layer {i} "
                    f"({_KIND_NAMES[type(layer)]}) would emit {h}x{w}")
            dims.append((h, w))
        return dims


def to_json(spec: NetworkSpec) -> str:
    layers = []
    for layer in spec.layers:
        entry = {"kind": _KIND_NAMES[type(layer)]}
        if isinstance(layer, Conv2D):
            entry.update(out_channels=layer.out_channels,
                         kernel=[layer.kernel_h, layer.kernel_w],
                         stride=layer.stride, padding=layer.padding)
        elif isinstance(layer, LeakyReLU):
            entry["slope"] = layer.slope
        elif isinstance(layer, MaxPool):
            entry.update(kernel=layer.kernel, stride=layer.stride)
            if layer.ceil_mode:
                entry["ceil_mode"] = True
        elif isinstance(layer, Fire):
            entry.update(squeeze=layer.squeeze, expand1x1=layer.expand1x1,
                         expand3x3=layer.expand3x3)
        if layer.tap:
            entry["tap"] = True
        layers.append(entry)
    doc = {"name": spec.name,
           "preprocess": {"mean": list(spec.mean), "std": list(spec.std)},
           "layers": layers}
    return json.dumps(doc, indent=2)


def from_json(text: str) -> NetworkSpec:
    """Parse a network spec document.

    Schema: {"name": str, "preprocess": {"mean": [3], "std": [3]},
    "layers": [{"kind": "conv2d"|"relu"|"leaky_relu"|"maxpool"|"fire", ...,
    "tap": bool}]}.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchitectureError(f"invalid spec JSON: {exc}") from exc
    try:
        layers = []
        for i, entry in enumerate(doc["layers"]):
            kind = entry["kind"]
            tap = bool(entry.get("tap", False))
            if kind == "conv2d":
                kh, kw = entry["kernel"]
                layers.append(Conv2D(entry["out_channels"], kh, kw,
                                     entry.get("stride", 1),
                                     entry.get("padding", 0), tap))
            elif kind == "relu":
                layers.append(ReLU(tap))
            elif kind == "leaky_relu":
                layers.append(LeakyReLU(entry["slope"], tap))
            elif kind == "maxpool":
                layers.append(MaxPool(entry["kernel"], entry["stride"],
                                      bool(entry.get("ceil_mode", False)), tap))
            elif kind == "fire":
                layers.append(Fire(entry["squeeze"], entry["expand1x1"],
                                   entry["expand3x3"], tap))
            else:
                raise ArchitectureError(f"layer {i}: unknown kind {kind!r}")
        pre = doc.get("preprocess", {})
        return NetworkSpec(name=doc["name"], layers=tuple(layers),
                           mean=tuple(pre.get("mean", (0, 0, 0))),
                           std=tuple(pre.get("std", (1, 1, 1))))
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchitectureError(f"malformed spec document: {exc!r}") from exc


def load_spec(path) -> NetworkSpec:
    with open(path, encoding="utf-8") as fh:
        return from_json(fh.read())


def save_spec(spec: NetworkSpec, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_json(spec))
        fh.write("\n")
