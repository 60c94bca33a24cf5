"""Export torchvision backbones into the engine's portable formats.

For each supported architecture this walks ``model.features``, translates
every module into a spec-document layer entry, marks the published tap
positions, collects the convolution tensors under the
``layers.<index>.<part>`` naming convention, and runs the reference
forward pass on a synthetic test image so the engine can later prove it
reproduces the same activations (``verify-weights``).

Pretrained ImageNet parameters are used when they can be fetched.  When
the download is unreachable the export falls back to deterministic
seeded-random parameters (scaled to keep activations near unit magnitude
through the whole stack) and records a warning in the container metadata;
the fixture round trip stays meaningful either way because the reference
activations always come from the same parameters as the container.
"""

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ExportError
from .formats import write_container, write_spec

# Input convention for all three backbones: ImageNet channel statistics,
# recorded both in the spec and in the container metadata so the engine
# can cross-check them at load time.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# torchvision release whose module layout the tap positions below were
# verified against; a different installed version still exports (the walk
# re-derives everything from the live modules) but gets a metadata warning.
REFERENCE_TORCHVISION = "0.11.3"

FIXTURE_SIZE = 64
FIXTURE_TOLERANCE = 1e-4

# Tap positions by kind occurrence (1-indexed): AlexNet taps every ReLU,
# SqueezeNet 1.1 taps the first ReLU plus fire modules 2 and 4 through 8,
# VGG-16 taps the last ReLU of each convolution block.
_TAP_RULES = {
    "alexnet": {"relu": "all"},
    "squeezenet1_1": {"relu": {1}, "fire": {2, 4, 5, 6, 7, 8}},
    "vgg16": {"relu": {2, 4, 7, 10, 13}},
}
EXPECTED_TAP_COUNTS = {"alexnet": 5, "squeezenet1_1": 7, "vgg16": 5}
ARCH_NAMES = tuple(sorted(_TAP_RULES))


@dataclass(frozen=True)
class ExportFixture:
    """Synthetic test image plus the reference tap activations for it."""
    image: np.ndarray
    taps: tuple
    tolerance: float


@dataclass(frozen=True)
class ExportedNetwork:
    """Everything one architecture export produces, before serialization."""
    arch: str
    spec_doc: dict
    tensors: dict
    fixture: ExportFixture
    meta: dict


def gradient_image(size: int = FIXTURE_SIZE) -> np.ndarray:
    """Deterministic gradient test card: horizontal, vertical and diagonal
    ramps over [0, 1], one per channel, shape (3, size, size) float32."""
    ramp = np.linspace(0.0, 1.0, size, dtype=np.float32)
    horizontal = np.broadcast_to(ramp, (size, size))
    vertical = np.broadcast_to(ramp[:, None], (size, size))
    diagonal = np.add.outer(ramp, ramp) * np.float32(0.5)
    return np.stack([horizontal, vertical, diagonal]).astype(np.float32)


def _int_pair(value):
    if isinstance(value, int):
        return value, value
    return tuple(value)


def _conv_entry(mod, index: int) -> dict:
    kh, kw = _int_pair(mod.kernel_size)
    sh, sw = _int_pair(mod.stride)
    ph, pw = _int_pair(mod.padding)
    if sh != sw or ph != pw:
        raise ExportError(
            f"layer {index}: asymmetric stride {mod.stride} or padding "
            f"{mod.padding} is not representable")
    if _int_pair(mod.dilation) != (1, 1) or mod.groups != 1:
        raise ExportError(
            f"layer {index}: dilation or grouping beyond the plain "
            f"convolution contract")
    if mod.bias is None:
        raise ExportError(f"layer {index}: convolution without bias is "
                          f"not representable")
    return {"kind": "conv2d", "out_channels": mod.out_channels,
            "kernel": [kh, kw], "stride": sh, "padding": ph}


def _pool_entry(mod, index: int) -> dict:
    kh, kw = _int_pair(mod.kernel_size)
    sh, sw = _int_pair(mod.stride)
    if kh != kw or sh != sw:
        raise ExportError(f"layer {index}: asymmetric pooling window is "
                          f"not representable")
    if _int_pair(mod.padding) != (0, 0) or _int_pair(mod.dilation) != (1, 1):
        raise ExportError(f"layer {index}: padded or dilated pooling is "
                          f"not representable")
    entry = {"kind": "maxpool", "kernel": kh, "stride": sh}
    if mod.ceil_mode:
        entry["ceil_mode"] = True
    return entry


def _fire_entry(mod) -> dict:
    return {"kind": "fire",
            "squeeze": mod.squeeze.out_channels,
            "expand1x1": mod.expand1x1.out_channels,
            "expand3x3": mod.expand3x3.out_channels}


def _is_tap(rules: dict, kind: str, occurrence: int) -> bool:
    wanted = rules.get(kind)
    if wanted is None:
        return False
    return wanted == "all" or occurrence in wanted


def _layer_entries(model, arch: str) -> list:
    """Translate ``model.features`` into spec layer entries with taps."""
    from torch import nn
    from torchvision.models.squeezenet import Fire

    rules = _TAP_RULES[arch]
    counts: dict = {}
    entries = []
    for i, mod in enumerate(model.features):
        if isinstance(mod, nn.Conv2d):
            entry = _conv_entry(mod, i)
        elif isinstance(mod, nn.ReLU):
            entry = {"kind": "relu"}
        elif isinstance(mod, nn.MaxPool2d):
            entry = _pool_entry(mod, i)
        elif isinstance(mod, Fire):
            entry = _fire_entry(mod)
        else:
            raise ExportError(
                f"layer {i}: unsupported module {type(mod).__name__}")
        kind = entry["kind"]
        counts[kind] = counts.get(kind, 0) + 1
        if _is_tap(rules, kind, counts[kind]):
            entry["tap"] = True
        entries.append(entry)
    taps = sum(1 for e in entries if e.get("tap"))
    if taps != EXPECTED_TAP_COUNTS[arch]:
        raise ExportError(
            f"{arch}: found {taps} tap layers, expected "
            f"{EXPECTED_TAP_COUNTS[arch]}; the installed torchvision layout "
            f"differs from the verified one ({REFERENCE_TORCHVISION})")
    return entries


def _collect_tensors(model, entries: list) -> dict:
    tensors = {}
    for i, (mod, entry) in enumerate(zip(model.features, entries)):
        if entry["kind"] == "conv2d":
            tensors[f"layers.{i}.weight"] = mod.weight.detach().numpy()
            tensors[f"layers.{i}.bias"] = mod.bias.detach().numpy()
        elif entry["kind"] == "fire":
            for part in ("squeeze", "expand1x1", "expand3x3"):
                sub = getattr(mod, part)
                tensors[f"layers.{i}.{part}.weight"] = sub.weight.detach().numpy()
                tensors[f"layers.{i}.{part}.bias"] = sub.bias.detach().numpy()
    return tensors


def _seed_parameters(model, arch: str) -> None:
    """Deterministic fallback parameters when pretrained ones are
    unreachable.

    Convolution weights are drawn at scale sqrt(2 / fan_in) so activation
    magnitudes stay near one through the whole rectified stack; that keeps
    the fixture's absolute tolerance meaningful at every tap depth.  Only
    ``features`` parameters matter; the classifier head is never exported.
    """
    import torch
    from torch import nn

    rng = np.random.default_rng(zlib.crc32(arch.encode("ascii")))
    with torch.no_grad():
        for mod in model.features.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                weight = rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                    size=tuple(mod.weight.shape))
                bias = rng.uniform(-0.05, 0.05, size=tuple(mod.bias.shape))
                mod.weight.copy_(torch.from_numpy(weight.astype(np.float32)))
                mod.bias.copy_(torch.from_numpy(bias.astype(np.float32)))


def _build_model(arch: str):
    """(model, weights_source, warnings); pretrained when reachable."""
    import torchvision
    import torchvision.models as models

    ctors = {
        "alexnet": (models.alexnet, "AlexNet_Weights"),
        "squeezenet1_1": (models.squeezenet1_1, "SqueezeNet1_1_Weights"),
        "vgg16": (models.vgg16, "VGG16_Weights"),
    }
    ctor, enum_name = ctors[arch]
    warnings = []
    installed = torchvision.__version__
    if installed.split("+")[0] != REFERENCE_TORCHVISION:
        warnings.append(
            f"exported with torchvision {installed}; tap positions were "
            f"verified against {REFERENCE_TORCHVISION}")
    try:
        weights = getattr(models, enum_name).IMAGENET1K_V1
        model = ctor(weights=weights)
        source = "torchvision pretrained (ImageNet)"
    except Exception as exc:
        model = ctor(weights=None)
        _seed_parameters(model, arch)
        source = "seeded random (pretrained weights unreachable)"
        warnings.append(
            f"pretrained download failed ({type(exc).__name__}); the "
            f"container holds deterministic random parameters, not the "
            f"published ones")
    model.eval()
    return model, source, warnings


def _reference_taps(model, entries: list, image: np.ndarray) -> tuple:
    """Run torchvision's own forward pass on the preprocessed image and
    collect the tapped activations as (C, H, W) float32 arrays."""
    import torch

    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(IMAGENET_STD, dtype=np.float32).reshape(3, 1, 1)
    x = torch.from_numpy(((image - mean) / std)[None])
    taps = []
    with torch.no_grad():
        for mod, entry in zip(model.features, entries):
            x = mod(x)
            if entry.get("tap"):
                taps.append(np.ascontiguousarray(x[0].numpy()))
    return tuple(taps)


def export_network(arch: str) -> ExportedNetwork:
    """Introspect one architecture into spec + tensors + fixture."""
    if arch not in _TAP_RULES:
        raise ExportError(
            f"unknown architecture {arch!r}; known: {', '.join(ARCH_NAMES)}")
    import torch
    import torchvision

    # One BLAS thread keeps the reference forward pass bit-reproducible,
    # so re-exports are byte-identical.
    torch.set_num_threads(1)
    model, source, warnings = _build_model(arch)
    entries = _layer_entries(model, arch)
    tensors = _collect_tensors(model, entries)
    image = gradient_image()
    taps = _reference_taps(model, entries, image)
    preprocess = {"mean": list(IMAGENET_MEAN), "std": list(IMAGENET_STD)}
    meta = {
        "architecture": arch,
        "preprocess": preprocess,
        "weights_source": source,
        "source_versions": {"torch": torch.__version__,
                            "torchvision": torchvision.__version__},
        "reference_torchvision": REFERENCE_TORCHVISION,
        "warnings": warnings,
    }
    spec_doc = {"name": arch, "preprocess": preprocess, "layers": entries}
    fixture = ExportFixture(image=image, taps=taps,
                            tolerance=FIXTURE_TOLERANCE)
    return ExportedNetwork(arch=arch, spec_doc=spec_doc, tensors=tensors,
                           fixture=fixture, meta=meta)


def write_export(export: ExportedNetwork, out_dir) -> dict:
    """Serialize one export: <arch>.spec.json, <arch>.dsw and
    <arch>.fixture.dsw under ``out_dir``.  Returns the three paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "spec": os.path.join(str(out_dir), f"{export.arch}.spec.json"),
        "weights": os.path.join(str(out_dir), f"{export.arch}.dsw"),
        "fixture": os.path.join(str(out_dir), f"{export.arch}.fixture.dsw"),
    }
    write_spec(paths["spec"], export.spec_doc)
    write_container(paths["weights"], export.tensors, meta=export.meta)
    fixture_tensors = {"fixture.image": export.fixture.image}
    for i, tap in enumerate(export.fixture.taps):
        fixture_tensors[f"fixture.tap.{i}"] = tap
    write_container(paths["fixture"], fixture_tensors, meta={
        "tolerance": export.fixture.tolerance,
        "architecture": export.arch,
        "image": f"synthetic gradient {FIXTURE_SIZE}x{FIXTURE_SIZE}",
        "warnings": export.meta["warnings"],
    })
    return paths
