"""Frozen network loading and the tap-extraction forward pass."""

import hashlib
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..errors import ArchitectureError, ContainerError
from .arch import Conv2D, Fire, LeakyReLU, MaxPool, NetworkSpec, ReLU

_PREPROCESS_TOL = 1e-6


@dataclass(frozen=True)
class FeatureStack:
    """Per-tap-layer activations: tuple of (C, H, W) float32 arrays."""
    layers: tuple
    tap_indices: tuple

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def shapes(self):
        return tuple(a.shape for a in self.layers)


class LoadedNetwork:
    """Immutable inference-ready network.

    Weight arrays are read-only views into the container's mmap (zero copy);
    the container reference is held so the mapping stays alive.  Instances
    are safe to share across threads and processes.
    """

    def __init__(self, spec: NetworkSpec, params: dict, container=None):
        self.spec = spec
        self._params = params
        self._container = container
        for arr in params.values():
            arr.flags.writeable = False

    @property
    def name(self):
        return self.spec.name

    @property
    def tap_count(self):
        return self.spec.tap_count

    def param(self, name):
        return self._params[name]

    def param_names(self):
        return sorted(self._params)

    def checksum(self):
        """SHA-256 over all weight bytes, in name order.  Training must not
        change this."""
        digest = hashlib.sha256()
        for name in sorted(self._params):
            digest.update(name.encode())
            digest.update(self._params[name].tobytes())
        return digest.hexdigest()


def conv_param_names(index):
    return f"layers.{index}.weight", f"layers.{index}.bias"


def fire_param_names(index):
    names = []
    for part in ("squeeze", "expand1x1", "expand3x3"):
        names.append(f"layers.{index}.{part}.weight")
        names.append(f"layers.{index}.{part}.bias")
    return names


def _fetch(container, name, expected_shape, layer_index):
    if name not in container:
        raise ContainerError(
            f"layer {layer_index}: container is missing tensor {name!r}")
    arr = container.tensor(name)
    if arr.shape != expected_shape:
        raise ContainerError(
            f"layer {layer_index}: tensor {name!r} has shape {arr.shape}, "
            f"expected {expected_shape}")
    return arr


def load_network(spec: NetworkSpec, container) -> LoadedNetwork:
    """Resolve every parameterized layer of ``spec`` in ``container``.

    The container's ``__meta__`` preprocessing stats, when present, must
    agree with the spec; a mismatch means the weights were exported under a
    different input convention and the activations would be garbage.
    """
    meta_pre = (container.meta or {}).get("preprocess")
    if meta_pre is not None:
        mean = np.asarray(meta_pre.get("mean"), dtype=np.float64)
        std = np.asarray(meta_pre.get("std"), dtype=np.float64)
        if (np.abs(mean - np.asarray(spec.mean)).max() > _PREPROCESS_TOL
                or np.abs(std - np.asarray(spec.std)).max() > _PREPROCESS_TOL):
            raise ContainerError(
                "container preprocessing stats disagree with the network spec")
    params = {}
    for i, layer in enumerate(spec.layers):
        cin = spec.in_channels(i)
        if isinstance(layer, Conv2D):
            wname, bname = conv_param_names(i)
            params[wname] = _fetch(container, wname,
                                   (layer.out_channels, cin,
                                    layer.kernel_h, layer.kernel_w), i)
            params[bname] = _fetch(container, bname, (layer.out_channels,), i)
        elif isinstance(layer, Fire):
            shapes = {
                f"layers.{i}.squeeze.weight": (layer.squeeze, cin, 1, 1),
                f"layers.{i}.squeeze.bias": (layer.squeeze,),
                f"layers.{i}.expand1x1.weight": (layer.expand1x1, layer.squeeze, 1, 1),
                f"layers.{i}.expand1x1.bias": (layer.expand1x1,),
                f"layers.{i}.expand3x3.weight": (layer.expand3x3, layer.squeeze, 3, 3),
                f"layers.{i}.expand3x3.bias": (layer.expand3x3,),
            }
            for name, shape in shapes.items():
                params[name] = _fetch(container, name, shape, i)
    return LoadedNetwork(spec, params, container)


def check_image(img):
    """Validate the raw-image contract: (3, H, W) float array in [0, 1]."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ArchitectureError(f"expected a (3, H, W) image, got {arr.shape}")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ArchitectureError("image must have positive height and width")
    if not np.isfinite(arr).all():
        raise ArchitectureError("image contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ArchitectureError(f"image values outside [0, 1]: [{lo}, {hi}]")
    return arr


def _relu(x):
    return np.maximum(x, 0, out=x)


def _leaky_relu(x, slope):
    return np.where(x > 0, x, np.float32(slope) * x)


def _fire_forward(net, index, layer, x):
    p = net.param
    squeezed = _relu(kernels.conv2d(x, p(f"layers.{index}.squeeze.weight"),
                                    p(f"layers.{index}.squeeze.bias")))
    e1 = _relu(kernels.conv2d(squeezed, p(f"layers.{index}.expand1x1.weight"),
                              p(f"layers.{index}.expand1x1.bias")))
    e3 = _relu(kernels.conv2d(squeezed, p(f"layers.{index}.expand3x3.weight"),
                              p(f"layers.{index}.expand3x3.bias"), padding=1))
    return np.concatenate([e1, e3], axis=0)


def forward_extract(net: LoadedNetwork, img) -> FeatureStack:
    """Run the frozen forward pass and collect tap-layer activations.

    Preprocessing ((value - mean) / std per channel) is applied exactly
    once, before the first layer.  Pure function of (weights, image).
    """
    spec = net.spec
    arr = check_image(img).astype(np.float32, copy=True)
    spec.spatial_walk(arr.shape[1], arr.shape[2])  # fail fast with layer index
    mean = np.asarray(spec.mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(spec.std, dtype=np.float32).reshape(3, 1, 1)
    x = (arr - mean) / std
    taps = []
    indices = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2D):
            wname, bname = conv_param_names(i)
            x = kernels.conv2d(x, net.param(wname), net.param(bname),
                               layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            x = _relu(x.copy())
        elif isinstance(layer, LeakyReLU):
            x = _leaky_relu(x, layer.slope)
        elif isinstance(layer, MaxPool):
            x = kernels.maxpool2d(x, layer.kernel, layer.stride, layer.ceil_mode)
        elif isinstance(layer, Fire):
            x = _fire_forward(net, i, layer, x)
        else:  # pragma: no cover - spec validation precludes this
            raise ArchitectureError(f"layer {i}: unsupported kind {layer!r}")
        if layer.tap:
            tap = np.ascontiguousarray(x)
            if not np.isfinite(tap).all():
                raise ArchitectureError(
                    f"layer {i}: non-finite activations in tap output")
            tap.flags.writeable = False
            taps.append(tap)
            indices.append(i)
    return FeatureStack(layers=tuple(taps), tap_indices=tuple(indices))
