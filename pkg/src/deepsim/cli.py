"""Command-line orchestration: ordering sweeps, training, evaluation,
report aggregation, and weight-container verification.

Configuration is a JSON file; any key can be overridden on the command
line with ``--set dotted.key=value`` (values parsed as JSON when they
parse).  Exit codes: 0 success, 1 configuration error, 2 a sweep finished
but some cells failed or were skipped.
"""

import argparse
import copy
import itertools
import json
import math
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .adaption import TrainConfig, save_judge, train_adaption
from .distortions import (ALL_KINDS, DistortionKind, DistortionOrdering,
                          random_ordering)
from .errors import (ArchitectureError, ConfigError, ContainerError,
                     DatasetError, DeepsimError, ShapeMismatchError)
from .evaluation import (EvalReport, eval_ordering, jnd_score, load_bapps,
                         load_image_dir, ordering_id, two_afc_score,
                         write_reports_csv, write_reports_jsonl)
from .nets import WeightContainer, load_network, load_spec
from .similarity import ComparisonMethod, Metric, ScalarWeights

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2

ALL_METHODS = [m.value for m in ComparisonMethod]

DEFAULT_CONFIG = {
    "networks": [],            # [{"name", "spec", "weights"}]
    "methods": list(ALL_METHODS),
    "orderings": {"count": 20, "dir": "orderings"},
    "repeats": 4,
    "seed": 0,
    "normalize": True,
    "eval_repeats": 1,
    "datasets": {"train_images": None, "eval_images": [],
                 "bapps": None, "bapps_split": "val"},
    "train": {},
    "output_dir": "runs",
}

_CONFIG_ERRORS = (ConfigError, DatasetError, ContainerError,
                  ArchitectureError, ShapeMismatchError,
                  FileNotFoundError, NotADirectoryError, IsADirectoryError,
                  PermissionError, json.JSONDecodeError, ValueError)


def derive_seed(*parts):
    """Stable, well-mixed integer seed from a path of ints and strings."""
    ints = [int(p) if isinstance(p, (int, np.integer))
            else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def _deep_merge(base, extra):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value


def _apply_override(cfg, assignment):
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {key!r} crosses a non-object")
    node[parts[-1]] = value


def load_config(args):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            _deep_merge(cfg, json.load(fh))
    for assignment in getattr(args, "set", None) or []:
        _apply_override(cfg, assignment)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    for method in cfg["methods"]:
        ComparisonMethod.parse(method)
    if not isinstance(cfg["repeats"], int) or cfg["repeats"] < 1:
        raise ConfigError("repeats must be a positive integer")
    return cfg


def resolve_orderings(cfg):
    """Ordering file paths from an explicit list or a directory + count."""
    spec = cfg["orderings"]
    if isinstance(spec, list):
        paths = list(spec)
    else:
        directory = spec.get("dir", "orderings")
        count = int(spec.get("count", 20))
        if not os.path.isdir(directory):
            raise ConfigError(
                f"ordering directory {directory!r} not found; "
                f"run 'deepsim gen-orderings' first")
        names = sorted(n for n in os.listdir(directory) if n.endswith(".json"))
        if len(names) < count:
            raise ConfigError(
                f"{directory!r} holds {len(names)} orderings, need {count}")
        paths = [os.path.join(directory, n) for n in names[:count]]
    if not paths:
        raise ConfigError("no orderings configured")
    for path in paths:
        if not os.path.isfile(path):
            raise ConfigError(f"ordering file {path!r} not found")
    return paths


def _parse_kinds(text):
    if not text:
        return ALL_KINDS
    kinds = tuple(DistortionKind.parse(t.strip()) for t in text.split(","))
    if len(set(kinds)) != len(kinds):
        raise ConfigError("duplicate kinds")
    return kinds


def cmd_gen_orderings(args):
    kinds = _parse_kinds(args.kinds)
    count = args.count
    if count < 1:
        raise ConfigError("count must be >= 1")
    space = math.factorial(len(kinds))
    if count > space:
        raise ConfigError(f"only {space} distinct orderings exist for "
                          f"{len(kinds)} kinds")
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    if count * 2 > space:
        # dense request: enumerate and shuffle instead of rejection sampling
        everything = [DistortionOrdering(p)
                      for p in itertools.permutations(kinds)]
        picks = [everything[i] for i in rng.permutation(space)[:count]]
    else:
        seen = set()
        picks = []
        while len(picks) < count:
            ordering = random_ordering(rng, kinds)
            if ordering.kinds not in seen:
                seen.add(ordering.kinds)
                picks.append(ordering)
    os.makedirs(args.out, exist_ok=True)
    width = max(3, len(str(count - 1)))
    for i, ordering in enumerate(picks):
        path = os.path.join(args.out, f"ordering_{i:0{width}d}.json")
        ordering.save(path)
        print(path)
    return EXIT_OK


def _iter_cells(cfg, ordering_paths):
    for net_cfg in cfg["networks"]:
        for sub in ("name", "spec", "weights"):
            if sub not in net_cfg:
                raise ConfigError(f"network entry missing {sub!r}: {net_cfg}")
        for method in cfg["methods"]:
            for oi, opath in enumerate(ordering_paths):
                for rep in range(cfg["repeats"]):
                    yield {
                        "network": net_cfg["name"],
                        "spec_path": net_cfg["spec"],
                        "weights_path": net_cfg["weights"],
                        "method": method,
                        "ordering_index": oi,
                        "ordering_path": opath,
                        "repeat": rep,
                        "seed": derive_seed(cfg["seed"], net_cfg["name"],
                                            method, oi, rep),
                    }


def _cell_id(cell):
    return (f"{cell['network']}_{cell['method']}"
            f"_o{cell['ordering_index']:03d}_r{cell['repeat']}")


def _cell_dir(cfg, cell):
    return os.path.join(cfg["output_dir"], "train", _cell_id(cell))


def _train_cell(cfg, cell):
    """Train one sweep cell; returns (cell_id, ok, message).

    Each cell is independent: failures are reported, never raised, so one
    bad cell cannot abort its siblings.
    """
    cell_dir = _cell_dir(cfg, cell)
    manifest_path = os.path.join(cell_dir, "manifest.json")
    if os.path.isfile(manifest_path):
        return _cell_id(cell), True, "skipped (manifest present)"
    os.makedirs(cell_dir, exist_ok=True)
    try:
        spec = load_spec(cell["spec_path"])
        with WeightContainer(cell["weights_path"]) as box:
            network = load_network(spec, box)
            images = load_image_dir(cfg["datasets"]["train_images"])
            ordering = DistortionOrdering.load(cell["ordering_path"])
            overrides = dict(cfg["train"])
            overrides.pop("seed", None)
            tconf = TrainConfig(seed=cell["seed"], **overrides)
            method = ComparisonMethod.parse(cell["method"])
            weights, judge, history = train_adaption(
                network, method, images, ordering, tconf,
                normalize=cfg["normalize"])
        weights.save(os.path.join(cell_dir, "weights.json"))
        save_judge(os.path.join(cell_dir, "judge.dsw"),
                   judge, meta={"cell": _cell_id(cell)})
        manifest = {
            "status": "ok",
            "cell": _cell_id(cell),
            "network": cell["network"],
            "method": cell["method"],
            "ordering": [k.value for k in ordering.kinds],
            "ordering_path": cell["ordering_path"],
            "repeat": cell["repeat"],
            "seed": cell["seed"],
            "normalize": cfg["normalize"],
            "train_config": json.loads(tconf.to_json()),
            "history": history.to_dict(),
            "artifacts": {"weights": "weights.json", "judge": "judge.dsw"},
        }
        message = (f"val 2AFC {history.records[-1].val_2afc:.3f} "
                   f"(baseline {history.baseline_val_2afc:.3f})")
        ok = True
    except (DeepsimError, OSError, ValueError) as exc:
        manifest = {"status": "failed", "cell": _cell_id(cell),
                    "seed": cell["seed"], "error": str(exc)}
        message = f"FAILED: {exc}"
        ok = False
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return _cell_id(cell), ok, message


def _pool_train(job):
    return _train_cell(*job)


def cmd_train(args):
    cfg = load_config(args)
    if not cfg["networks"]:
        raise ConfigError("config lists no networks")
    if not cfg["datasets"].get("train_images"):
        raise ConfigError("config sets no datasets.train_images")
    ordering_paths = resolve_orderings(cfg)
    cells = list(_iter_cells(cfg, ordering_paths))
    jobs = 1 if args.deterministic else max(1, args.jobs)
    failures = 0
    if jobs == 1:
        for cell in cells:
            cell_id, ok, message = _train_cell(cfg, cell)
            print(f"[train] {cell_id}: {message}")
            failures += 0 if ok else 1
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for cell_id, ok, message in pool.map(
                    _pool_train, [(cfg, cell) for cell in cells]):
                print(f"[train] {cell_id}: {message}")
                failures += 0 if ok else 1
    if failures:
        print(f"[train] {failures}/{len(cells)} cells failed",
              file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _load_adapted_metric(network, method, cell_dir, normalize):
    weights_path = os.path.join(cell_dir, "weights.json")
    if not os.path.isfile(weights_path):
        raise FileNotFoundError(f"no checkpoint at {weights_path}")
    weights = ScalarWeights.load(weights_path)
    return Metric(network, method, weights=weights, normalize=normalize)


def _bapps_reports(metric, metric_id, bapps_root, split, ordering_ref, cache):
    reports = []
    for part, kind in (("2afc", "2AFC"), ("jnd", "JND-mAP")):
        key = (metric_id, part)
        if key not in cache:
            samples = list(load_bapps(bapps_root, part, split=split))
            if part == "2afc":
                value = two_afc_score(metric, samples)
            else:
                value = jnd_score(metric, samples)
            cache[key] = (value, len(samples))
        value, count = cache[key]
        reports.append(EvalReport(
            metric_id=metric_id, ordering_id=ordering_ref,
            dataset_id=f"bapps-{part}-{split}", kind=kind,
            value=value, samples=count, seed=0))
    return reports


def cmd_eval(args):
    cfg = load_config(args)
    if not cfg["networks"]:
        raise ConfigError("config lists no networks")
    ordering_paths = resolve_orderings(cfg)
    eval_dirs = cfg["datasets"].get("eval_images") or []
    bapps_root = cfg["datasets"].get("bapps")
    if not eval_dirs and not bapps_root:
        raise ConfigError("config sets neither datasets.eval_images "
                          "nor datasets.bapps")
    reports_dir = os.path.join(cfg["output_dir"], "reports")
    os.makedirs(reports_dir, exist_ok=True)
    warnings = []
    bapps_cache = {}
    datasets = [load_image_dir(p) for p in eval_dirs]

    for net_cfg in cfg["networks"]:
        spec = load_spec(net_cfg["spec"])
        with WeightContainer(net_cfg["weights"]) as box:
            network = load_network(spec, box)
            for method_name in cfg["methods"]:
                method = ComparisonMethod.parse(method_name)
                for oi, opath in enumerate(ordering_paths):
                    ordering = DistortionOrdering.load(opath)
                    base = f"{net_cfg['name']}_{method_name}_o{oi:03d}"
                    eval_seed = derive_seed(cfg["seed"], "eval", oi)
                    metrics = [(Metric(network, method,
                                       normalize=cfg["normalize"]),
                                "baseline", "")]
                    if not args.baseline:
                        for rep in range(cfg["repeats"]):
                            cell = {"network": net_cfg["name"],
                                    "method": method_name,
                                    "ordering_index": oi, "repeat": rep}
                            cell_dir = _cell_dir(cfg, cell)
                            try:
                                metric = _load_adapted_metric(
                                    network, method, cell_dir,
                                    cfg["normalize"])
                            except (OSError, DeepsimError) as exc:
                                warnings.append(
                                    {"cell": f"{base}_r{rep}",
                                     "message": str(exc)})
                                continue
                            # the ordering index keeps adapted metric ids
                            # unique per checkpoint (the bapps cache keys
                            # on the id; baselines really are shared)
                            metrics.append((metric,
                                            f"adapted-o{oi:03d}-r{rep}",
                                            ordering_id(ordering)))
                    rows = []
                    for metric, variant, ordering_ref in metrics:
                        metric_id = metric.id(variant)
                        for dataset in datasets:
                            rows.append(eval_ordering(
                                metric, dataset, ordering,
                                seed=eval_seed,
                                repeats=cfg["eval_repeats"],
                                metric_id=metric_id))
                        if bapps_root:
                            rows.extend(_bapps_reports(
                                metric, metric_id, bapps_root,
                                cfg["datasets"].get("bapps_split", "val"),
                                ordering_ref, bapps_cache))
                    write_reports_jsonl(
                        os.path.join(reports_dir, base + ".jsonl"), rows)
                    write_reports_csv(
                        os.path.join(reports_dir, base + ".csv"), rows)
                    _write_cell_summary(reports_dir, base, rows)
                    print(f"[eval] {base}: {len(rows)} report rows")

    if warnings:
        with open(os.path.join(reports_dir, "warnings.jsonl"), "w",
                  encoding="utf-8") as fh:
            for record in warnings:
                fh.write(json.dumps(record, sort_keys=True))
                fh.write("\n")
        print(f"[eval] {len(warnings)} cells skipped (see warnings.jsonl)",
              file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _variant_of(metric_id):
    return metric_id.split(":")[2] if metric_id.count(":") >= 2 else ""


def _write_cell_summary(reports_dir, base, rows):
    """Mean/stddev over the adapted repeats, next to the raw rows."""
    groups = {}
    for row in rows:
        variant = _variant_of(row.metric_id)
        label = "adapted" if variant.startswith("adapted") else variant
        groups.setdefault((label, row.dataset_id, row.kind), []).append(row.value)
    summary = [{"variant": k[0], "dataset": k[1], "kind": k[2],
                "mean": float(np.mean(v)), "std": float(np.std(v)),
                "n": len(v)}
               for k, v in sorted(groups.items())]
    with open(os.path.join(reports_dir, base + ".summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _spearman(xs, ys):
    """Spearman rank correlation with average ranks for ties."""
    from scipy.stats import spearmanr

    rho = spearmanr(xs, ys).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def _read_all_reports(reports_dir):
    from .evaluation import read_reports_jsonl

    rows = []
    for name in sorted(os.listdir(reports_dir)):
        if name.endswith(".jsonl") and name != "warnings.jsonl":
            rows.extend(read_reports_jsonl(os.path.join(reports_dir, name)))
    return rows


def cmd_report(args):
    if args.reports_dir:
        reports_dir = args.reports_dir
    else:
        cfg = load_config(args)
        reports_dir = os.path.join(cfg["output_dir"], "reports")
    if not os.path.isdir(reports_dir):
        raise ConfigError(f"no reports directory at {reports_dir!r}")
    rows = _read_all_reports(reports_dir)
    if not rows:
        raise ConfigError(f"no report rows found under {reports_dir!r}")
    out_dir = args.out or reports_dir
    os.makedirs(out_dir, exist_ok=True)

    def parts(row):
        net, method, variant = row.metric_id.split(":", 2)
        label = "adapted" if variant.startswith("adapted") else variant
        return net, method, label

    # summary: mean/std per network, method, variant, dataset, score kind
    groups = {}
    for row in rows:
        net, method, label = parts(row)
        groups.setdefault((net, method, label, row.dataset_id, row.kind),
                          []).append(row.value)
    with open(os.path.join(out_dir, "summary.csv"), "w",
              encoding="utf-8", newline="") as fh:
        fh.write("network,method,variant,dataset,kind,mean,std,n\n")
        for key, values in sorted(groups.items()):
            fh.write(",".join(key) +
                     f",{np.mean(values):.6f},{np.std(values):.6f},"
                     f"{len(values)}\n")

    # baseline vs adapted deltas on the shared aggregation keys
    with open(os.path.join(out_dir, "deltas.csv"), "w",
              encoding="utf-8", newline="") as fh:
        fh.write("network,method,dataset,kind,baseline_mean,adapted_mean,"
                 "delta\n")
        for (net, method, label, dataset, kind), values in sorted(groups.items()):
            if label != "baseline":
                continue
            other = groups.get((net, method, "adapted", dataset, kind))
            if not other:
                continue
            base_mean = float(np.mean(values))
            adapted_mean = float(np.mean(other))
            fh.write(f"{net},{method},{dataset},{kind},{base_mean:.6f},"
                     f"{adapted_mean:.6f},{adapted_mean - base_mean:.6f}\n")

    # per-ordering scores for rank correlation and scatter plots
    per_ordering = {}
    for row in rows:
        if not row.ordering_id and _variant_of(row.metric_id) != "baseline":
            continue
        net, method, label = parts(row)
        key = (net, method, row.dataset_id, row.kind)
        slot = per_ordering.setdefault(key, {})
        # baseline rows carry no ordering id on bapps scores; group by seed
        okey = row.ordering_id or f"seed{row.seed}"
        slot.setdefault(okey, {}).setdefault(label, []).append(row.value)
    with open(os.path.join(out_dir, "spearman.csv"), "w",
              encoding="utf-8", newline="") as fh:
        fh.write("network,method,dataset,kind,spearman,n_orderings\n")
        for (net, method, dataset, kind), by_ordering in sorted(per_ordering.items()):
            xs, ys = [], []
            for okey in sorted(by_ordering):
                cell = by_ordering[okey]
                if "baseline" in cell and "adapted" in cell:
                    xs.append(float(np.mean(cell["baseline"])))
                    ys.append(float(np.mean(cell["adapted"])))
            if len(xs) >= 2:
                fh.write(f"{net},{method},{dataset},{kind},"
                         f"{_spearman(xs, ys):.6f},{len(xs)}\n")

    # scatter: first two image datasets side by side per evaluated cell
    image_sets = sorted({row.dataset_id for row in rows
                         if not row.dataset_id.startswith("bapps-")})
    if len(image_sets) >= 2:
        ds_x, ds_y = image_sets[0], image_sets[1]
        cells = {}
        for row in rows:
            if row.dataset_id not in (ds_x, ds_y) or row.kind != "2AFC":
                continue
            net, method, label = parts(row)
            key = (net, method, row.ordering_id, label)
            cells.setdefault(key, {})[row.dataset_id] = row.value
        with open(os.path.join(out_dir, "scatter.csv"), "w",
                  encoding="utf-8", newline="") as fh:
            fh.write(f"network,method,ordering,variant,{ds_x},{ds_y}\n")
            for (net, method, okey, label), values in sorted(cells.items()):
                if ds_x in values and ds_y in values:
                    fh.write(f"{net},{method},{okey},{label},"
                             f"{values[ds_x]:.6f},{values[ds_y]:.6f}\n")

    print(f"[report] wrote summary.csv, deltas.csv, spearman.csv under "
          f"{out_dir}")
    return EXIT_OK


def cmd_verify_weights(args):
    """Check a weight container against its exporter fixture.

    The fixture is itself a container: tensor "fixture.image" plus one
    "fixture.tap.N" per tap layer, with the tolerance in its metadata.
    """
    spec = load_spec(args.spec)
    from .nets import forward_extract

    failures = 0
    with WeightContainer(args.weights) as box:
        network = load_network(spec, box)
        with WeightContainer(args.fixture) as fixture:
            tolerance = args.tolerance
            if tolerance is None:
                tolerance = float(fixture.meta.get("tolerance", 1e-4))
            image = fixture.tensor("fixture.image")
            stack = forward_extract(network, image)
            if len(stack) != spec.tap_count:
                raise ContainerError("tap count mismatch")
            for i, got in enumerate(stack):
                name = f"fixture.tap.{i}"
                want = fixture.tensor(name)
                if want.shape != got.shape:
                    print(f"{name}: shape {got.shape} != {want.shape}")
                    failures += 1
                    continue
                diff = float(np.max(np.abs(got.astype(np.float64)
                                           - want.astype(np.float64))))
                status = "ok" if diff <= tolerance else "FAIL"
                if diff > tolerance:
                    failures += 1
                print(f"{name}: max abs diff {diff:.3e} "
                      f"(tolerance {tolerance:.1e}) {status}")
    if failures:
        print(f"verify-weights: {failures} tap(s) out of tolerance",
              file=sys.stderr)
        return EXIT_PARTIAL
    print("verify-weights: all taps within tolerance")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="deepsim",
                     description="Adaptable deep perceptual similarity")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (dotted path)")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--deterministic", action="store_true",
                        help="force serial, bit-reproducible execution")
    common.add_argument("--jobs", type=int, default=1,
                        help="worker processes for sweep cells")

    p = sub.add_parser("gen-orderings", parents=[common],
                       help="write random distortion orderings")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kinds", default="",
                   help="comma-separated subset of distortion kinds")
    p.set_defaults(func=cmd_gen_orderings)

    p = sub.add_parser("train", parents=[common],
                       help="train adapted scalars for every sweep cell")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="score baseline and adapted metrics")
    p.add_argument("--baseline", action="store_true",
                   help="evaluate baselines only (no checkpoints needed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common],
                       help="aggregate report files into summary tables")
    p.add_argument("--reports-dir", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify-weights", parents=[common],
                       help="check a container against an exporter fixture")
    p.add_argument("--spec", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--fixture", required=True)
    p.add_argument("--tolerance", type=float, default=None)
    p.set_defaults(func=cmd_verify_weights)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
