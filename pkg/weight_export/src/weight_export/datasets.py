"""Dataset converters into the engine's ingestion layouts.

Two target layouts exist.  Plain image sets become a flat directory of
8-bit RGB PNGs plus an ``index.txt`` of newline-separated file names.
Human-judgement patch sets become the tree
``<root>/2afc/<split>/<category>/{ref,p0,p1}/<id>.png`` with the judgement
in ``judge/<id>`` as a single little-endian 32-bit float (the jnd part
uses {p0,p1} and ``same/<id>``).

Source archives with a published checksum are verified before conversion;
``skip_checksum`` exists for subsampled or synthetic archives and leaves a
note in the manifest.  Every converter writes a ``<name>.manifest.json``
recording actual counts next to the published ones so a partial source is
visible at a glance.
"""

import hashlib
import json
import os
import shutil
import struct
import tarfile

import numpy as np
from PIL import Image

from .errors import ExportError

# Published md5 checksums of the original source archives.
CHECKSUMS = {
    "train_32x32.mat": "e26dedcc434d2e4c54c9b2d4a06d8373",
    "test_32x32.mat": "eb5a983be6a315427106f1b164d9cef3",
    "stl10_binary.tar.gz": "91f7769df0f17e558f3565bffb0c7dfb",
}

# Published record counts for the full archives.
EXPECTED_COUNTS = {
    ("svhn", "train"): 73257,
    ("svhn", "test"): 26032,
    ("stl10", "test"): 8000,
}

STL_IMAGE_BYTES = 3 * 96 * 96


def _md5(path) -> str:
    digest = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _verify_source(path, skip_checksum: bool, notes: list) -> None:
    name = os.path.basename(str(path))
    want = CHECKSUMS.get(name)
    if want is None:
        notes.append(f"{name}: no reference checksum on record")
        return
    if skip_checksum:
        notes.append(f"{name}: checksum verification skipped")
        return
    got = _md5(path)
    if got != want:
        raise ExportError(
            f"checksum mismatch on source archive {name}: md5 {got}, "
            f"expected {want}")
    notes.append(f"{name}: md5 verified")


def _write_image_dir(out_root, images) -> int:
    """Write (H, W, 3) uint8 arrays as PNGs plus the index file."""
    os.makedirs(out_root, exist_ok=True)
    names = []
    for i, arr in enumerate(images):
        name = f"{i:06d}.png"
        Image.fromarray(arr).save(os.path.join(out_root, name), format="PNG")
        names.append(name)
    with open(os.path.join(out_root, "index.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(names) + "\n")
    return len(names)


def _note_count(dataset: str, split: str, count: int, notes: list) -> None:
    expected = EXPECTED_COUNTS.get((dataset, split))
    if expected is not None and count != expected:
        notes.append(f"{dataset} {split}: {count} records, published "
                     f"archive has {expected}")


def _write_manifest(out_dir, name: str, counts: dict, notes: list) -> dict:
    manifest = {
        "dataset": name,
        "counts": counts,
        "published_counts": {f"{d}/{s}": n for (d, s), n in
                             EXPECTED_COUNTS.items() if d == name},
        "notes": notes,
    }
    path = os.path.join(str(out_dir), f"{name}.manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, indent=2))
    return manifest


def export_svhn(src_dir, out_dir, skip_checksum: bool = False) -> dict:
    """Cropped-digit archives (train_32x32.mat, test_32x32.mat) to
    ``<out>/svhn-train`` and ``<out>/svhn-test`` image directories."""
    from scipy.io import loadmat

    os.makedirs(out_dir, exist_ok=True)
    counts = {}
    notes: list = []
    for split in ("train", "test"):
        path = os.path.join(str(src_dir), f"{split}_32x32.mat")
        if not os.path.isfile(path):
            raise ExportError(f"missing source file {path}")
        _verify_source(path, skip_checksum, notes)
        mat = loadmat(path)
        if "X" not in mat:
            raise ExportError(f"{path}: no 'X' variable in the archive")
        images = mat["X"]
        if images.ndim != 4 or images.shape[:3] != (32, 32, 3):
            raise ExportError(
                f"{path}: 'X' has shape {images.shape}, expected "
                f"(32, 32, 3, n)")
        images = np.ascontiguousarray(images.astype(np.uint8))
        n = images.shape[3]
        count = _write_image_dir(
            os.path.join(str(out_dir), f"svhn-{split}"),
            (images[:, :, :, i] for i in range(n)))
        counts[split] = count
        _note_count("svhn", split, count, notes)
    return _write_manifest(out_dir, "svhn", counts, notes)


def _read_stl_blob(src) -> bytes:
    """test_X.bin bytes from a tar.gz archive, a directory, or the file."""
    src = str(src)
    if os.path.isdir(src):
        src = os.path.join(src, "test_X.bin")
    if not os.path.isfile(src):
        raise ExportError(f"missing source file {src}")
    if src.endswith(".tar.gz"):
        with tarfile.open(src, "r:gz") as tar:
            for member in tar.getmembers():
                if os.path.basename(member.name) == "test_X.bin":
                    return tar.extractfile(member).read()
        raise ExportError(f"{src}: no test_X.bin member in the archive")
    with open(src, "rb") as fh:
        return fh.read()


def export_stl10(src, out_dir, skip_checksum: bool = False) -> dict:
    """Test-split binary (test_X.bin, each image stored channel-first in
    column-major order) to the ``<out>/stl10-test`` image directory."""
    os.makedirs(out_dir, exist_ok=True)
    notes: list = []
    _verify_source(src if not os.path.isdir(str(src))
                   else os.path.join(str(src), "test_X.bin"),
                   skip_checksum, notes)
    blob = _read_stl_blob(src)
    if not blob or len(blob) % STL_IMAGE_BYTES:
        raise ExportError(
            f"source holds {len(blob)} bytes, not a whole number of "
            f"{STL_IMAGE_BYTES}-byte images")
    data = np.frombuffer(blob, dtype=np.uint8).reshape(-1, 3, 96, 96)
    images = data.transpose(0, 1, 3, 2)  # stored (channel, column, row)
    count = _write_image_dir(
        os.path.join(str(out_dir), "stl10-test"),
        (np.ascontiguousarray(images[i].transpose(1, 2, 0))
         for i in range(images.shape[0])))
    _note_count("stl10", "test", count, notes)
    return _write_manifest(out_dir, "stl10", {"test": count}, notes)


def _read_judgement(path) -> float:
    try:
        value = float(np.load(path, allow_pickle=False).ravel()[0])
    except (OSError, ValueError, IndexError) as exc:
        raise ExportError(f"unreadable judgement file {path}: {exc}") from exc
    if not 0.0 <= value <= 1.0:
        raise ExportError(f"{path}: judgement {value} outside [0, 1]")
    return value


def _convert_category(src_cat, out_cat, image_subs, value_sub) -> int:
    """Copy one category's patches and convert its judgement files."""
    primary = os.path.join(src_cat, image_subs[0])
    if not os.path.isdir(primary):
        raise ExportError(f"missing subdirectory {primary}")
    ids = sorted(os.path.splitext(name)[0] for name in os.listdir(primary)
                 if name.endswith(".png"))
    for sub in image_subs:
        os.makedirs(os.path.join(out_cat, sub), exist_ok=True)
    os.makedirs(os.path.join(out_cat, value_sub), exist_ok=True)
    for i in ids:
        for sub in image_subs:
            src_png = os.path.join(src_cat, sub, i + ".png")
            if not os.path.isfile(src_png):
                raise ExportError(
                    f"{src_cat}: record {i} has no counterpart in {sub}/")
            shutil.copyfile(src_png, os.path.join(out_cat, sub, i + ".png"))
        value = _read_judgement(os.path.join(src_cat, value_sub, i + ".npy"))
        with open(os.path.join(out_cat, value_sub, i), "wb") as fh:
            fh.write(struct.pack("<f", value))
    return len(ids)


def export_bapps(src_root, out_dir) -> dict:
    """Patch-triplet tree (judgements as .npy) to the engine's layout
    (judgements as raw little-endian float32) under ``<out>/bapps``."""
    src_root = str(src_root)
    layouts = {"2afc": (("ref", "p0", "p1"), "judge"),
               "jnd": (("p0", "p1"), "same")}
    counts = {}
    notes: list = ["bapps: no reference checksum on record (directory source)"]
    seen = False
    for part, (image_subs, value_sub) in layouts.items():
        part_root = os.path.join(src_root, part)
        if not os.path.isdir(part_root):
            continue
        seen = True
        for split in sorted(os.listdir(part_root)):
            split_root = os.path.join(part_root, split)
            if not os.path.isdir(split_root):
                continue
            total = 0
            for category in sorted(os.listdir(split_root)):
                src_cat = os.path.join(split_root, category)
                if not os.path.isdir(src_cat):
                    continue
                out_cat = os.path.join(str(out_dir), "bapps", part, split,
                                       category)
                total += _convert_category(src_cat, out_cat, image_subs,
                                           value_sub)
            counts[f"{part}/{split}"] = total
    if not seen:
        raise ExportError(f"no 2afc/ or jnd/ tree under {src_root}")
    return _write_manifest(out_dir, "bapps", counts, notes)


def export_dataset(name: str, src, out_dir,
                   skip_checksum: bool = False) -> dict:
    """Dispatch one dataset conversion by name."""
    if name == "svhn":
        return export_svhn(src, out_dir, skip_checksum)
    if name == "stl10":
        return export_stl10(src, out_dir, skip_checksum)
    if name == "bapps":
        return export_bapps(src, out_dir)
    raise ExportError(
        f"unknown dataset {name!r}; known: bapps, stl10, svhn")
