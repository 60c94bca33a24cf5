"""One-shot bridge from the pretrained-model and dataset ecosystem into
the portable formats the similarity engine consumes.

The engine is never imported here; the two packages share only file
formats (weight containers, spec documents, dataset layouts) and the
engine's ``verify-weights`` command, which checks an exported fixture.
"""

from .datasets import export_bapps, export_dataset, export_stl10, export_svhn
from .errors import ExportError
from .formats import write_container, write_spec
from .networks import (ARCH_NAMES, ExportedNetwork, ExportFixture,
                       export_network, gradient_image, write_export)

__all__ = [
    "ARCH_NAMES",
    "ExportError",
    "ExportedNetwork",
    "ExportFixture",
    "export_bapps",
    "export_dataset",
    "export_network",
    "export_stl10",
    "export_svhn",
    "gradient_image",
    "write_container",
    "write_export",
    "write_spec",
]
