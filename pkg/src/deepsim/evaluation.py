"""Scoring of metrics against human or ordering-derived judgements.

Two scores are produced.  The 2AFC score averages, over triplets
(ref, x0, x1, J), the value J when the metric ranks x1 strictly closer to
the reference and 1 - J otherwise (ties fall to the 1 - J branch).  The
JND score ranks image pairs by ascending metric distance and computes mean
average precision with the fraction-confused labels as graded relevance.

Datasets come in two layouts: a flat directory of 8-bit RGB PNGs with an
``index.txt`` of newline-separated relative paths, and a patch layout
``<root>/2afc/<split>/<category>/{ref,p0,p1}/<id>.png`` with the human
judgement in ``judge/<id>`` as a single little-endian 32-bit float (the
jnd part uses {p0,p1} and ``same/<id>``).
"""

import csv
import json
import os
import struct
from dataclasses import astuple, dataclass

import numpy as np
from PIL import Image

from .distortions import DistortionOrdering, make_triplet, triplet_rng
from .errors import DatasetError

INDEX_NAME = "index.txt"
REPORT_FIELDS = ("metric_id", "ordering_id", "dataset_id", "kind",
                 "value", "samples", "seed")


def load_png(path):
    """PNG -> (3, H, W) float32 with pixel value v mapped to v/255."""
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc
    return rgb.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)


def save_png(path, tensor):
    arr = np.asarray(tensor)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DatasetError(f"expected a (3, H, W) tensor, got {arr.shape}")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels.transpose(1, 2, 0)).save(path, format="PNG")


@dataclass(frozen=True)
class TwoAFCSample:
    """A reference, two variants, and the fraction J favoring x1."""
    ref: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    judgement: float

    def __post_init__(self):
        if not 0.0 <= self.judgement <= 1.0:
            raise DatasetError(f"judgement {self.judgement} outside [0, 1]")


@dataclass(frozen=True)
class JNDSample:
    """An image pair and the fraction of humans who saw no difference."""
    p0: np.ndarray
    p1: np.ndarray
    same_fraction: float

    def __post_init__(self):
        if not 0.0 <= self.same_fraction <= 1.0:
            raise DatasetError(
                f"same_fraction {self.same_fraction} outside [0, 1]")


@dataclass(frozen=True)
class EvalReport:
    metric_id: str
    ordering_id: str
    dataset_id: str
    kind: str
    value: float
    samples: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise DatasetError(f"score {self.value} outside [0, 1]")

    def to_json_line(self):
        return json.dumps({k: getattr(self, k) for k in REPORT_FIELDS},
                          sort_keys=True)

    @classmethod
    def from_json_line(cls, line):
        rec = json.loads(line)
        return cls(**{k: rec[k] for k in REPORT_FIELDS})


def write_reports_jsonl(path, reports):
    with open(path, "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(rep.to_json_line())
            fh.write("\n")


def read_reports_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [EvalReport.from_json_line(line)
                for line in fh if line.strip()]


def write_reports_csv(path, reports):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for rep in reports:
            writer.writerow(astuple(rep))


def two_afc_pair_score(d0, d1, judgement):
    """J when x1 is strictly closer, else 1 - J (ties included)."""
    return judgement if d1 < d0 else 1.0 - judgement


def two_afc_score(metric, samples) -> float:
    """Average per-sample 2AFC score; numpy's pairwise mean keeps the
    aggregation order-independent."""
    scores = []
    for s in samples:
        fref = metric.features(s.ref)
        d0 = metric.distance_from_features(fref, metric.features(s.x0))
        d1 = metric.distance_from_features(fref, metric.features(s.x1))
        scores.append(two_afc_pair_score(d0, d1, s.judgement))
    if not scores:
        raise DatasetError("2AFC scoring needs at least one sample")
    return float(np.mean(scores))


def soft_average_precision(relevance) -> float:
    """Mean average precision with graded labels over a fixed ranking.

    relevance[k] is the label of the k-th ranked item; precision at k is
    the mean label over the first k items, and each rank contributes its
    precision weighted by its own label.  All-zero labels score 0.
    """
    rel = np.asarray(relevance, dtype=np.float64)
    total = rel.sum()
    if total <= 0.0:
        return 0.0
    precision = np.cumsum(rel) / np.arange(1, rel.size + 1, dtype=np.float64)
    return float((precision * rel).sum() / total)


def jnd_score(metric, samples) -> float:
    """Soft-label mAP of pairs ranked by ascending distance.

    Invariant under strictly monotone transformations of the distances;
    ties keep input order (stable sort).
    """
    samples = list(samples)
    if not samples:
        raise DatasetError("JND scoring needs at least one sample")
    dists = np.array([metric.distance(s.p0, s.p1) for s in samples])
    order = np.argsort(dists, kind="stable")
    rel = np.array([s.same_fraction for s in samples], dtype=np.float64)
    return soft_average_precision(rel[order])


def ordering_id(ordering: DistortionOrdering) -> str:
    return ">".join(k.value for k in ordering.kinds)


def eval_ordering(metric, dataset, ordering: DistortionOrdering, seed,
                  repeats=1, metric_id=None) -> EvalReport:
    """2AFC of a metric against an ordering's own synthetic triplets.

    One triplet per image per repeat, reproducible from the seed alone;
    the same (dataset, seed, repeats) replayed under the reversed ordering
    yields the complementary score.
    """
    scores = []
    for repeat in range(repeats):
        for i in range(len(dataset)):
            trip = make_triplet(dataset[i], ordering, triplet_rng(seed, i, repeat))
            fref = metric.features(trip.ref)
            d0 = metric.distance_from_features(fref, metric.features(trip.x0))
            d1 = metric.distance_from_features(fref, metric.features(trip.x1))
            scores.append(two_afc_pair_score(d0, d1, trip.judgement))
    if not scores:
        raise DatasetError("dataset is empty")
    return EvalReport(
        metric_id=metric.id() if metric_id is None else metric_id,
        ordering_id=ordering_id(ordering),
        dataset_id=dataset.ident,
        kind="2AFC",
        value=float(np.mean(scores)),
        samples=len(scores),
        seed=int(seed))


class ImageDirDataset:
    """Directory of PNGs listed by an index file; loads lazily, in order."""

    def __init__(self, root):
        self.root = str(root)
        index_path = os.path.join(self.root, INDEX_NAME)
        if not os.path.isfile(index_path):
            raise DatasetError(f"missing index file {index_path}")
        with open(index_path, encoding="utf-8") as fh:
            names = [line.strip() for line in fh if line.strip()]
        self.paths = [os.path.join(self.root, name) for name in names]
        self.ident = os.path.basename(os.path.normpath(self.root))

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        return load_png(self.paths[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_image_dir(path) -> ImageDirDataset:
    return ImageDirDataset(path)


def _read_float32(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) != 4:
        raise DatasetError(f"{path}: expected exactly 4 bytes, got {len(blob)}")
    return struct.unpack("<f", blob)[0]


def _png_ids(dirpath):
    return sorted(os.path.splitext(name)[0] for name in os.listdir(dirpath)
                  if name.endswith(".png"))


def _category_dirs(root, part, split):
    base = os.path.join(str(root), part, split)
    if not os.path.isdir(base):
        raise DatasetError(f"missing dataset subdirectory {base}")
    return [os.path.join(base, name) for name in sorted(os.listdir(base))
            if os.path.isdir(os.path.join(base, name))]


def _check_ids(category, primary_name, ids, wanted):
    """Every id listed under the primary subdir must exist in the others."""
    for sub, suffix, present in wanted:
        missing = [i for i in ids if i not in present]
        if missing:
            raise DatasetError(
                f"{category}: {len(missing)} records under {primary_name}/ "
                f"have no counterpart in {sub}/ (first: {missing[0]})")


def load_bapps(root, part, split="val", categories=None):
    """Stream human-judged samples from the patch layout.

    part "2afc" yields TwoAFCSample (64x64 patches in the published data),
    part "jnd" yields JNDSample.  Counts are cross-checked per category
    before streaming begins.
    """
    part = part.lower()
    if part not in ("2afc", "jnd"):
        raise DatasetError(f"unknown part {part!r}; expected 2afc or jnd")
    plan = []
    for category in _category_dirs(root, part, split):
        if categories is not None \
                and os.path.basename(category) not in categories:
            continue
        subs = ("ref", "p0", "p1", "judge") if part == "2afc" \
            else ("p0", "p1", "same")
        for sub in subs:
            if not os.path.isdir(os.path.join(category, sub)):
                raise DatasetError(f"missing subdirectory {category}/{sub}")
        primary = subs[0]
        ids = _png_ids(os.path.join(category, primary))
        wanted = []
        for sub in subs[1:]:
            if sub in ("judge", "same"):
                present = {name for name in os.listdir(os.path.join(category, sub))}
            else:
                present = set(_png_ids(os.path.join(category, sub)))
            wanted.append((sub, "", present))
        _check_ids(category, primary, ids, wanted)
        plan.append((category, ids))

    def stream():
        for category, ids in plan:
            for i in ids:
                if part == "2afc":
                    yield TwoAFCSample(
                        ref=load_png(os.path.join(category, "ref", i + ".png")),
                        x0=load_png(os.path.join(category, "p0", i + ".png")),
                        x1=load_png(os.path.join(category, "p1", i + ".png")),
                        judgement=_read_float32(os.path.join(category, "judge", i)))
                else:
                    yield JNDSample(
                        p0=load_png(os.path.join(category, "p0", i + ".png")),
                        p1=load_png(os.path.join(category, "p1", i + ".png")),
                        same_fraction=_read_float32(os.path.join(category, "same", i)))

    return stream()
