"""Command-line pipeline: train, attack, score, roc, fis, selfcheck, blobs.

Exit codes: 0 success, 1 runtime error, 2 usage error. Every subcommand
writes a JSON run manifest (resolved parameters, inputs, output checksums,
duration) next to its main output, or to ``--manifest``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, attack, data, evaluation, fisher, nn, train
from .errors import EmptyDataError, FisherDetError

log = logging.getLogger("fisherdet")

QUANTITY_COLUMNS = {"trace": "trace", "form": "form", "nform": "normalized_form",
                    "normalized_form": "normalized_form"}


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------


def _dataset_arg(source, split):
    if source is None:
        source = str(data.default_data_dir())
    p = Path(source)
    stem_files = [Path(str(source) + "-images.idx"), Path(str(source) + "-labels.idx")]
    if not (p.exists() or all(f.exists() for f in stem_files)):
        raise UsageError(f"dataset not found: {source}")
    return data.resolve_dataset(source, split)


def _select(n, limit, seed):
    """Seeded subset of sample indices, returned in ascending order."""
    if limit is None or limit >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=limit, replace=False))


def _score_config(args) -> fisher.ScoreConfig:
    return fisher.ScoreConfig(
        class_mode=fisher.TWO_CLASS if args.two_class else fisher.FULL,
        derivative_mode=args.mode, fd_step=args.eps_prime, lam=args.lam)


def _write_manifest(args, outputs, started, path=None, extra=None):
    params = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "subcommand": args.command,
        "version": __version__,
        "parameters": params,
        "outputs": {str(p): data.file_sha256(p) for p in outputs if Path(p).exists()},
        "duration_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path = Path(path or getattr(args, "manifest", None) or (str(outputs[0]) + ".manifest.json"))
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


# -- subcommands --------------------------------------------------------------------


def cmd_train(args):
    started = time.perf_counter()
    ds = _dataset_arg(args.data, args.split)
    net = nn.build_architecture(args.arch, seed=args.seed)
    idx = _select(len(ds), args.limit, args.seed)
    ds = ds.subset(idx).reshaped(net.input_shape)
    test = _dataset_arg(args.test_data, "test").reshaped(net.input_shape) if args.test_data else None
    cfg = train.TrainConfig(learning_rate=args.lr, momentum=args.momentum,
                            batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    net, history = train.sgd_train(net, ds, cfg, test=test)
    train_acc = train.accuracy(net, ds)
    digest = data.save_model(net, args.out, extra={"train_config": asdict(cfg)})
    log_path = Path(args.log or str(args.out) + ".log.csv")
    train.write_training_log(history, log_path)
    print(f"model {args.out} sha256={digest} train_acc={train_acc:.4f}"
          + (f" test_acc={history[-1]['test_acc']:.4f}" if history and test is not None else ""))
    _write_manifest(args, [Path(args.out), Path(str(args.out) + ".bin"), log_path], started,
                    extra={"train_accuracy": train_acc, "seeds": {"seed": args.seed}})
    return 0


def cmd_attack(args):
    started = time.perf_counter()
    net = data.load_model(args.model)
    ds = _dataset_arg(args.data, args.split)
    idx = _select(len(ds), args.limit, args.seed)
    ds = ds.subset(idx)
    cfg = attack.AttackConfig(method=args.method, epsilon=args.eps, steps=args.steps,
                              momentum=args.momentum)
    res = attack.attack_batch(net, ds, cfg, label_source=args.label_source)
    img, lab = data.save_dataset(res.adversarial, args.out)
    csv_path = Path(str(args.out) + "-success.csv")
    attack.write_success_csv(res, csv_path)
    clean_acc = float(np.mean(res.clean_pred == ds.labels))
    adv_acc = float(np.mean(res.adv_pred == ds.labels))
    print(f"samples={len(ds)} clean_acc={clean_acc:.4f} adv_acc={adv_acc:.4f} "
          f"success_rate={res.success_rate:.4f}")
    _write_manifest(args, [img, lab, csv_path], started,
                    extra={"clean_accuracy": clean_acc, "adversarial_accuracy": adv_acc,
                           "selected_indices": idx.tolist()})
    return 0


def cmd_score(args):
    started = time.perf_counter()
    net = data.load_model(args.model)
    cfg = _score_config(args)
    ds = _dataset_arg(args.data, args.split)
    if len(ds) == 0:
        raise EmptyDataError("dataset is empty")
    idx = _select(len(ds), args.limit, args.seed)
    X = ds.inputs.reshape((len(ds),) + net.input_shape)
    rows = fisher.score_dataset(net, X[idx], ds.labels[idx], cfg,
                                is_adversarial=0 if args.adv_data else None, indices=idx)
    if args.adv_data:
        adv = _dataset_arg(args.adv_data, args.split)
        if len(adv) != len(ds):
            raise UsageError("--adv-data must be aligned 1:1 with --data")
        Xa = adv.inputs.reshape((len(adv),) + net.input_shape)
        rows += fisher.score_dataset(net, Xa[idx], adv.labels[idx], cfg, is_adversarial=1, indices=idx)
    keep = None if args.quantity == "all" else QUANTITY_COLUMNS[args.quantity]
    if keep:
        for r in rows:
            for col in ("trace", "form", "normalized_form"):
                if col != keep:
                    r[col] = ""
    fisher.write_scores_csv(rows, args.out)
    print(f"scored {len(rows)} samples -> {args.out}")
    _write_manifest(args, [Path(args.out)], started, extra={"score_config": fisher.config_dict(cfg)})
    return 0


def _load_population(path, column, flag):
    rows = fisher.read_scores_csv(path)
    if rows and column not in rows[0]:
        raise UsageError(f"{path} has no column {column!r}")
    vals = [float(r[column]) for r in rows
            if r.get("is_adversarial", "") in ("", flag) and r[column] != ""]
    return vals


def cmd_roc(args):
    started = time.perf_counter()
    column = QUANTITY_COLUMNS.get(args.quantity, args.quantity)
    clean = _load_population(args.clean, column, "0")
    adv = _load_population(args.adv, column, "1")
    curve = evaluation.roc(clean, adv)
    evaluation.write_roc_csv(curve, args.out)
    outputs = [Path(args.out)]
    if args.gnuplot:
        evaluation.write_gnuplot(curve, args.gnuplot)
        outputs.append(Path(args.gnuplot))
    if args.hist:
        both = np.concatenate([clean, adv])
        rng_ = (float(both.min()), float(both.max()))
        for name, pop in (("clean", clean), ("adv", adv)):
            edges, counts = evaluation.histogram(pop, args.bins, rng_)
            p = Path(f"{args.hist}-{name}.csv")
            evaluation.write_histogram_csv(edges, counts, p)
            outputs.append(p)
    print(f"AUC {curve.auc:.6f}")
    _write_manifest(args, outputs, started, extra={"auc": curve.auc})
    return 0


def cmd_fis(args):
    started = time.perf_counter()
    net = data.load_model(args.model)
    cfg = _score_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    views = {"clean": _dataset_arg(args.data, args.split)}
    if args.adv_data:
        views["adv"] = _dataset_arg(args.adv_data, args.split)
    maps = {}
    for name, ds in views.items():
        if not 0 <= args.input_index < len(ds):
            raise UsageError(f"--input-index {args.input_index} out of range for {len(ds)} samples")
        x = ds.inputs[args.input_index].reshape(net.input_shape)
        v = fisher.direction_v(net, x, cfg, normalized=not args.unnormalized)
        maps[name] = (x, fisher.fis(net, x, v, cfg))

    view = "absolute" if args.view == "abs" else "signed"
    scaling = "shared_scale" if args.scaling == "shared" else "per_image_scale"
    shared = None
    if scaling == "shared_scale":
        # one range for every map, so the adversarial and clean maps are comparable
        allv = np.concatenate([data.heatmap_view(m.values, data.HeatmapExportConfig(value_view=view)).ravel()
                               for _, m in maps.values()])
        shared = (float(allv.min()), float(allv.max()))
    outputs = []
    for name, (x, fmap) in maps.items():
        stem = out_dir / f"{name}-{args.input_index}"
        pgm_cfg = data.HeatmapExportConfig(scaling=scaling, value_view=view, format="pgm")
        csv_cfg = data.HeatmapExportConfig(scaling=scaling, value_view=view, format="csv")
        outputs.append(data.export_heatmap(fmap, pgm_cfg, f"{stem}-fis.pgm", scale_range=shared))
        outputs.append(data.export_heatmap(fmap, csv_cfg, f"{stem}-fis.csv"))
        img = Path(f"{stem}-image.pgm")
        data.write_pgm(img, data.to_gray(x, 0.0, 1.0))
        outputs.append(img)
        print(f"{name}: mean|FIS|={np.mean(np.abs(fmap.values)):.6g} -> {stem}-fis.pgm")
    _write_manifest(args, outputs, started, path=args.manifest or out_dir / "fis.manifest.json")
    return 0


def cmd_selfcheck(args):
    from .selfcheck import run_selfcheck

    started = time.perf_counter()
    results = run_selfcheck(corrupt_gradient=args.corrupt_gradient)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"selfcheck {'PASSED' if ok else 'FAILED'} in {time.perf_counter() - started:.1f}s")
    if args.manifest:
        _write_manifest(args, [], started, path=args.manifest,
                        extra={"results": [r.line() for r in results]})
    return 0 if ok else 1


def cmd_blobs(args):
    started = time.perf_counter()
    ds = data.synthetic_blobs(args.classes, args.per_class, args.dim, args.seed)
    img, lab = data.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples -> {img}")
    _write_manifest(args, [img, lab], started)
    return 0


# -- parser ---------------------------------------------------------------------------


def _add_score_flags(p):
    p.add_argument("--mode", choices=[fisher.BACKPROP, fisher.FINITE_DIFFERENCE],
                   default=fisher.FINITE_DIFFERENCE, help="derivative mode for the quadratic forms")
    p.add_argument("--eps-prime", type=float, default=1e-4, help="finite-difference step (default 1e-4)")
    p.add_argument("--lam", type=float, default=0.01, help="scale of the direction vector")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--two-class", dest="two_class", action="store_true", default=True,
                   help="reduce classes to (predicted, rest) [default]")
    g.add_argument("--full-classes", dest="two_class", action="store_false",
                   help="sum over all classes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fisherdet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    data_help = (f"MNIST directory or dataset stem (default ${data.DATA_DIR_ENV} or ~/data/mnist)")

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--data", help=data_help)
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--test-data", help="held-out dataset for per-epoch test accuracy")
    p.add_argument("--arch", default="mnist-cnn", help="mnist-cnn or mlp:IN-H-...-C")
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--limit", type=int, help="train on a seeded subset of this size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model manifest path")
    p.add_argument("--log", help="training log CSV (default <out>.log.csv)")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="generate adversarial examples")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help=data_help)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--method", default=attack.MI_FGSM, choices=[attack.FGSM, attack.MI_FGSM])
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--momentum", type=float, default=1.0)
    p.add_argument("--label-source", default=attack.TRUE_LABEL,
                   choices=[attack.TRUE_LABEL, attack.PREDICTED_LABEL])
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset stem")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("score", help="Fisher scores per sample")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help=data_help)
    p.add_argument("--adv-data", help="adversarial dataset aligned with --data")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--quantity", default="all", choices=["trace", "form", "nform", "all"])
    _add_score_flags(p)
    p.add_argument("--limit", type=int, help="score a seeded subset of this size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("roc", help="ROC curve and AUC from score CSVs")
    p.add_argument("--clean", required=True)
    p.add_argument("--adv", required=True)
    p.add_argument("--quantity", default="nform",
                   help="trace, form, nform or a column name")
    p.add_argument("--out", required=True, help="ROC CSV (threshold, fpr, tpr)")
    p.add_argument("--gnuplot", help="optional fpr/tpr data file")
    p.add_argument("--hist", help="stem for clean/adv histogram CSVs")
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("fis", help="Fisher information sensitivity heatmaps")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help=data_help)
    p.add_argument("--adv-data")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--input-index", type=int, required=True)
    p.add_argument("--scaling", choices=["shared", "per-image"], default="per-image")
    p.add_argument("--view", choices=["abs", "signed"], default="abs")
    p.add_argument("--unnormalized", action="store_true", help="use the raw lam-scaled direction")
    _add_score_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_fis)

    p = sub.add_parser("selfcheck", help="run the oracle identities on tiny networks")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("blobs", help="write a synthetic Gaussian-blob dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_blobs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FisherDetError, OSError, ValueError) as exc:
        print(f"{parser.prog} {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
