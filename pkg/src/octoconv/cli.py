"""Command-line entry point: ``octoconv <subcommand> [options]``.

Exit codes: 0 success, 1 usage/config/input error, 2 equivariance
violation, 3 non-finite loss. Every error is reported on stderr as one line
starting with ``octoconv: error:``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .data import DatasetConfig, PatchDataset, build_datasets
from .equivariance import check_equivariance
from .experiment import PROFILES, dataset_to_froc, predict_proba, predictions_to_candidates, train_group
from .froc import (
    CsvFormatError,
    format_curve_csv,
    froc_curve,
    match_candidates,
    read_candidates_csv,
    read_references_csv,
    write_candidates_csv,
    write_references_csv,
)
from .groups import GroupName, PermutationRep, get_group, get_rho
from .layers import GConv3d
from .model import ModelConfig, NonFiniteLossError, TrainConfig, config_from_mapping, save_checkpoint

log = logging.getLogger("octoconv")

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION, EXIT_NONFINITE = 0, 1, 2, 3
PREFIX = "octoconv: error:"
INDEX_HEADER = ["sample_id", "label", "malignant", "file"]
GROUP_CHOICES = [g.value for g in GroupName]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- output -------------------------------------------------------------------


def emit(records: list[dict], fmt: str, out=None) -> None:
    out = out or sys.stdout
    if not records:
        return
    keys = list(records[0])
    if fmt == "json-lines":
        for r in records:
            out.write(json.dumps(r, sort_keys=False) + "\n")
    elif fmt == "csv":
        w = csv.writer(out, lineterminator="\n")
        w.writerow(keys)
        for r in records:
            w.writerow([_cell(r.get(k)) for k in keys])
    else:
        cells = [[_cell(r.get(k)) for k in keys] for r in records]
        widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
        out.write("  ".join(k.ljust(w) for k, w in zip(keys, widths)).rstrip() + "\n")
        for c in cells:
            out.write("  ".join(v.ljust(w) for v, w in zip(c, widths)).rstrip() + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return " ".join(map(_cell, v))
    return "" if v is None else str(v)


# -- configuration --------------------------------------------------------------

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DatasetConfig}


def load_config(path) -> dict:
    """Read an INI file with optional ``[model]``, ``[train]`` and ``[data]``
    sections. Unknown sections or keys are errors."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config {path}: {exc}".replace("\n", " ")) from None
    out = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise UsageError(f"{path}: unknown section [{section}] (expected one of {', '.join(_SECTIONS)})")
        known = {f.name for f in fields(_SECTIONS[section])}
        items = dict(parser.items(section))
        bad = sorted(set(items) - known)
        if bad:
            raise UsageError(f"{path}: unknown key(s) in [{section}]: {', '.join(bad)}")
        out[section] = items
    return out


def _apply(cls, base, mapping: dict | None):
    if not mapping:
        return base
    try:
        overrides = config_from_mapping(cls, mapping)
        return replace(base, **{k: getattr(overrides, k) for k in mapping})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid [{cls.__name__}] value: {exc}") from None


def _env_int(name):
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{name} must be an integer, got {raw!r}") from None


def _group(name) -> str:
    try:
        return GroupName.parse(name).value
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- subcommands ------------------------------------------------------------------


def cmd_groups(args) -> int:
    names = [_group(args.group)] if args.group else GROUP_CHOICES
    records = []
    for name in names:
        g = get_group(name)
        dets = [int(round(np.linalg.det(m))) for m in g.elements]
        records.append({
            "group": name,
            "order": g.order,
            "proper_rotations": dets.count(1),
            "commutative": g.is_commutative(),
            "rho_is_homomorphism": _rho_homomorphic(name),
        })
    emit(records, args.format)
    if args.show_cayley and len(names) == 1:
        np.savetxt(sys.stdout, get_group(names[0]).cayley, fmt="%d", delimiter=",")
    return EXIT_OK


def _rho_homomorphic(name) -> bool:
    g, rho = get_group(name), get_rho(name)
    p = rho.perms
    return all(np.array_equal(p[g.cayley[i, j]], p[j][p[i]]) for i in range(g.order) for j in range(g.order))


def cmd_check_equivariance(args) -> int:
    name = _group(args.group)
    rho = None
    if args.corrupt_rho:
        # negative control: swap two orientation channels in one element
        good = get_rho(name)
        bad = good.perms.copy()
        if bad.shape[1] > 1:  # the trivial group has nothing to swap
            bad[1, [0, 1]] = bad[1, [1, 0]]
        rho = PermutationRep(good.group_name, bad)
    rep = check_equivariance(name, depth=args.depth, trials=args.trials, size=args.size, seed=args.seed,
                             rho=rho, with_bn=args.with_bn)
    g = get_group(name)
    records = [{"group": name, "h": h, "integer_error": e[0], "float_error": e[1]} for h, e in rep.errors.items()]
    if args.format == "text":
        emit(records, "text")
        print(f"worst integer error {rep.worst_integer:g}, worst float error {rep.worst_float:.3g}, "
              f"tolerance {args.tolerance:g} over {g.order} elements")
    else:
        emit(records, args.format)
    if not rep.passed(args.tolerance):
        print(f"{PREFIX} equivariance violated for group {name}: integer {rep.worst_integer:g}, "
              f"float {rep.worst_float:.3g}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def _profile(args, cfg):
    prof = PROFILES[args.profile]
    data = _apply(DatasetConfig, prof.data, cfg.get("data"))
    model = _apply(ModelConfig, prof.model, cfg.get("model"))
    train = _apply(TrainConfig, TrainConfig(), cfg.get("train"))
    return model, replace(train, seed=args.seed), data


def _write_dataset(root: Path, ds: PatchDataset, split: str, writer) -> None:
    folder = root / split
    folder.mkdir(parents=True, exist_ok=True)
    for i, sid in enumerate(ds.sample_ids):
        rel = f"{split}/{sid}.raw"
        T.write_volume(root / rel, ds.X[i, 0], ds.spacing_mm)
        writer.writerow([sid, int(ds.y[i]), int(ds.malignant[i]), rel])


def cmd_datagen(args, cfg) -> int:
    _, _, data = _profile(args, cfg)
    if args.sizes:
        data = replace(data, train_sizes=tuple(args.sizes))
    if args.val_size:
        data = replace(data, val_size=args.val_size)
    if args.test_size:
        data = replace(data, test_size=args.test_size)
    sets = build_datasets(args.seed, data)
    root = Path(args.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    largest = sets["train"][max(sets["train"])]
    with open(root / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_HEADER)
        for split, ds in (("train", largest), ("val", sets["val"]), ("test", sets["test"])):
            _write_dataset(root, ds, split, w)
    cands, refs, scans = dataset_to_froc(sets["test"], np.zeros(len(sets["test"])), data.candidates_per_scan)
    write_references_csv(root / "test_references.csv", refs, scans)
    records = [{"split": s, "samples": len(d), "positives": int(d.y.sum())}
               for s, d in (("train", largest), ("val", sets["val"]), ("test", sets["test"]))]
    emit(records, args.format)
    return EXIT_OK


def _read_index(root: Path) -> dict:
    path = root / "index.csv"
    if not path.exists():
        raise UsageError(f"no index.csv in {root} (run datagen or pass --datagen-inline)")
    splits: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != INDEX_HEADER:
            raise UsageError(f"{path}:1: expected header {','.join(INDEX_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise UsageError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            sid, label, mal, rel = row
            split = rel.split("/", 1)[0]
            try:
                vol, spacing = T.read_volume(root / rel)
            except (OSError, ValueError) as exc:
                raise UsageError(f"{path}:{lineno}: cannot read volume {rel}: {exc}") from None
            s = splits.setdefault(split, {"X": [], "y": [], "m": [], "ids": [], "spacing": spacing})
            s["X"].append(vol.reshape(1, *vol.shape[-3:]))
            s["y"].append(int(label))
            s["m"].append(mal == "1")
            s["ids"].append(sid)
    out = {}
    for split, s in splits.items():
        n = len(s["y"])
        out[split] = PatchDataset(np.stack(s["X"]), np.array(s["y"], dtype=np.intp), np.array(s["m"]),
                                  np.zeros(n), np.zeros(n, dtype=bool), s["ids"], s["spacing"])
    missing = {"train", "val", "test"} - set(out)
    if missing:
        raise UsageError(f"{path}: no samples for split(s) {', '.join(sorted(missing))}")
    return out


def cmd_train(args, cfg) -> int:
    model, train, data = _profile(args, cfg)
    if args.max_epochs:
        train = replace(train, max_epochs=args.max_epochs)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    group = _group(args.group)
    if args.datagen_inline:
        data = replace(data, train_sizes=(args.train_size,))
        if args.val_size:
            data = replace(data, val_size=args.val_size)
        if args.test_size:
            data = replace(data, test_size=args.test_size)
        sets = build_datasets(args.seed, data)
        train_ds, val_ds, test_ds = sets["train"][args.train_size], sets["val"], sets["test"]
        _, refs, scans = dataset_to_froc(test_ds, np.zeros(len(test_ds)), data.candidates_per_scan)
        write_references_csv(out / "test_references.csv", refs, scans)
    else:
        sets = _read_index(Path(args.data_dir))
        if len(sets["train"]) < args.train_size:
            raise UsageError(f"--train-size {args.train_size} exceeds the {len(sets['train'])} stored samples")
        train_ds, val_ds, test_ds = sets["train"].subset(args.train_size), sets["val"], sets["test"]
    if tuple(train_ds.X.shape[2:]) != tuple(model.input_shape[1:]):
        model = replace(model, input_shape=(1, *train_ds.X.shape[2:]))
    t0 = time.process_time()
    net, report = train_group(group, train_ds, val_ds, model, train)
    stem = f"{group}_n{args.train_size}_s{args.seed}"
    save_checkpoint(net, out / f"{stem}.ckpt")
    (out / f"{stem}_loss.csv").write_text(report.to_csv())
    probs = predict_proba(net, test_ds.X)
    cands = predictions_to_candidates(probs, data.candidates_per_scan)
    write_candidates_csv(out / f"{stem}_predictions.csv", cands)
    emit([{"group": group, "train_size": args.train_size, "seed": args.seed, "params": net.n_params(),
           "epochs": report.epochs, "best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss,
           "cpu_seconds": round(time.process_time() - t0, 1)}], args.format)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cands = read_candidates_csv(args.candidates)
    refs, scans = read_references_csv(args.references)
    try:
        match = match_candidates(cands, refs, scans)
        result = froc_curve(match)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.curve_out:
        Path(args.curve_out).write_text(format_curve_csv(result))
    records = [{"fp_per_scan": r, "sensitivity": s} for r, s in result.sensitivities.items()]
    records.append({"fp_per_scan": "overall", "sensitivity": result.overall_score})
    if args.format == "text":
        print(f"scans {result.n_scans}, relevant nodules {result.n_relevant}, candidates {len(cands)}")
        for r, s in result.sensitivities.items():
            print(f"sensitivity@{r:g}: {s:.6f}")
        print(f"overall_score: {result.overall_score:.6f}")
    else:
        emit(records, args.format)
    return EXIT_OK


def _best_times(fns, repeats):
    """Best wall time of each callable, timed in interleaved rounds so slow
    drift in machine load hits all of them alike."""
    for fn in fns:
        fn()
    best = [float("inf")] * len(fns)
    for _ in range(repeats):
        for i, fn in enumerate(fns):
            t = time.perf_counter()
            fn()
            best[i] = min(best[i], time.perf_counter() - t)
    return best


def bench_ratio(group, batch: int = 30, spatial=(6, 24, 24), base_widths=(8, 8), repeats: int = 5, seed: int = 0):
    """Time a higher-layer group convolution against a plain convolution
    whose bank already holds all ``n_out * |H|`` filters."""
    name = _group(group)
    n = get_group(name).order
    cfg = ModelConfig(name, base_widths=tuple(base_widths) + (1,) * max(0, 2 - len(base_widths)))
    c_in, c_out = cfg.widths[0], cfg.widths[1]
    rng = np.random.default_rng(seed)
    layer = GConv3d(name, c_in, c_out, first_layer=False)
    layer.params["filters"][...] = rng.standard_normal(layer.filter_shape)
    x = rng.standard_normal((batch, c_in * n, *spatial)).astype(np.float32)
    w = rng.standard_normal((c_out * n, c_in * n, 3, 3, 3)).astype(np.float32)
    b = np.zeros(c_out * n, np.float32)

    def plain():
        return T.conv3d_forward(x, w, layer.spec) + b[None, :, None, None, None]

    t_g, t_p = _best_times([lambda: layer.forward(x), plain], repeats)
    return {"group": name, "c_in": c_in * n, "c_out": c_out * n, "gconv_s": t_g, "conv_s": t_p, "ratio": t_g / t_p}


def cmd_bench(args) -> int:
    names = [_group(g) for g in args.groups] if args.groups else [g for g in GROUP_CHOICES if g != "Z3"]
    records = [bench_ratio(g, args.batch, tuple(args.spatial), repeats=args.repeats, seed=args.seed) for g in names]
    emit(records, args.format)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def _positive(v):
    try:
        i = int(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {v!r}") from None
    if i < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return i


def _sizes(v):
    return [_positive(s) for s in v.split(",") if s]


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (env OCTOCONV_SEED)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI file with [model]/[train]/[data]")
    common.add_argument("--output-dir", default=argparse.SUPPRESS, help="where artifacts are written")
    common.add_argument("--format", choices=["text", "csv", "json-lines"], default=argparse.SUPPRESS)
    common.add_argument("--threads", type=_positive, default=argparse.SUPPRESS,
                        help="cap BLAS threads (env OCTOCONV_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="octoconv", description="Group-equivariant 3D CNNs for nodule classification.",
                parents=[common])
    p.add_argument("--version", action="version", version=f"octoconv {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("groups", parents=[common], help="inspect the symmetry groups")
    g.add_argument("action", nargs="?", default="inspect", choices=["inspect"])
    g.add_argument("--group", choices=GROUP_CHOICES, type=lambda s: _group(s))
    g.add_argument("--show-cayley", action="store_true", help="print the Cayley table (with --group)")

    e = sub.add_parser("check-equivariance", parents=[common], help="verify f(hx) = h f(x) for every h")
    e.add_argument("--group", required=True)
    e.add_argument("--depth", type=_positive, default=1)
    e.add_argument("--trials", type=_positive, default=1)
    e.add_argument("--size", type=_positive, default=7, help="cube edge of the probe inputs")
    e.add_argument("--tolerance", type=float, default=1e-4)
    e.add_argument("--with-bn", action="store_true")
    e.add_argument("--corrupt-rho", action="store_true", help=argparse.SUPPRESS)

    d = sub.add_parser("datagen", parents=[common], help="write synthetic datasets to disk")
    d.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    d.add_argument("--sizes", type=_sizes, help="comma-separated nested train sizes")
    d.add_argument("--val-size", type=_positive)
    d.add_argument("--test-size", type=_positive)

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--group", required=True)
    t.add_argument("--train-size", type=_positive, required=True)
    t.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--data-dir", help="directory written by datagen (default: --output-dir)")
    src.add_argument("--datagen-inline", action="store_true", help="generate the data in memory")
    t.add_argument("--max-epochs", type=_positive)
    t.add_argument("--val-size", type=_positive, help="with --datagen-inline")
    t.add_argument("--test-size", type=_positive, help="with --datagen-inline")

    v = sub.add_parser("evaluate", parents=[common], help="FROC analysis of a candidate file")
    v.add_argument("candidates")
    v.add_argument("references")
    v.add_argument("--curve-out", help="write the full curve CSV here")

    b = sub.add_parser("bench", parents=[common], help="gconv vs expanded plain conv timing")
    b.add_argument("--groups", type=lambda s: s.split(","))
    b.add_argument("--batch", type=_positive, default=30)
    b.add_argument("--spatial", type=_sizes, default=[6, 24, 24])
    b.add_argument("--repeats", type=_positive, default=5)
    return p


def _resolve_globals(args):
    env_seed = _env_int("OCTOCONV_SEED")
    env_threads = _env_int("OCTOCONV_THREADS")
    args.seed = getattr(args, "seed", env_seed if env_seed is not None else 0)
    args.threads = getattr(args, "threads", env_threads)
    if args.threads is not None and args.threads < 1:
        raise UsageError("thread count must be positive")
    args.format = getattr(args, "format", "text")
    args.output_dir = getattr(args, "output_dir", ".")
    args.config = getattr(args, "config", None)
    args.verbose = getattr(args, "verbose", False)
    if args.command == "train" and not args.datagen_inline and args.data_dir is None:
        args.data_dir = args.output_dir
    if args.command == "bench" and len(args.spatial) != 3:
        raise UsageError("--spatial needs three comma-separated sizes")
    return args


def _dispatch(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    if args.command == "groups":
        return cmd_groups(args)
    if args.command == "check-equivariance":
        return cmd_check_equivariance(args)
    if args.command == "datagen":
        return cmd_datagen(args, cfg)
    if args.command == "train":
        return cmd_train(args, cfg)
    if args.command == "evaluate":
        return cmd_evaluate(args)
    return cmd_bench(args)


def main(argv=None) -> int:
    try:
        args = _resolve_globals(build_parser().parse_args(argv))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(name)s: %(message)s")
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return _dispatch(args)
        return _dispatch(args)
    except UsageError as exc:
        print(f"{PREFIX} {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CsvFormatError as exc:
        print(f"{PREFIX} {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"{PREFIX} {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except FileNotFoundError as exc:
        print(f"{PREFIX} file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"{PREFIX} {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
