"""Acceptance: fixture round-trip through the similarity engine.

For each exported architecture, the engine's own forward pass on the
fixture image must reproduce the exported reference activations within
the fixture tolerance (1e-4 per element).  The engine is exercised
strictly through its published interfaces: the spec, weight container and
fixture files this package writes, and the ``verify-weights`` subcommand
run as a subprocess.  Nothing from the engine's code is imported here.
"""

import re
import subprocess
import sys

import pytest

from weight_export import write_export

ARCHS = ("alexnet", "squeezenet1_1", "vgg16")


@pytest.mark.parametrize("arch", ARCHS)
def test_fixture_roundtrip(arch, exports, tmp_path):
    export = exports(arch)
    paths = write_export(export, tmp_path)
    proc = subprocess.run(
        [sys.executable, "-m", "deepsim", "verify-weights",
         "--spec", paths["spec"], "--weights", paths["weights"],
         "--fixture", paths["fixture"]],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "verify-weights: all taps within tolerance" in proc.stdout

    diffs = [float(v) for v in re.findall(r"max abs diff (\S+)", proc.stdout)]
    assert len(diffs) == len(export.fixture.taps)
    worst = max(diffs)
    assert worst <= export.fixture.tolerance
    print(f"PASS [fixture-roundtrip {arch}] {len(diffs)} taps, "
          f"worst |diff| {worst:.3e} <= {export.fixture.tolerance:.0e} "
          f"via the engine CLI")
