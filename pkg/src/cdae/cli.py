"""Command-line pipeline driver.

Subcommands mirror the pipeline stages: `synth` makes a labeled image
set, `train-cdae` fits the autoencoder, `encode` turns images into
per-gene feature rows, `classify` runs nested cross-validation per
category, `evaluate` renders reports, `gradcheck` verifies the layer
gradients, and `pipeline` chains the lot under one seed.

Exit codes: 0 success, 2 usage, 3 bad configuration, 4 unreadable or
inconsistent data, 5 numeric failure. Every run drops a `run.json`
provenance record in the output directory; it contains no timestamps so
reruns stay byte-identical.
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, classify, evaluation, features, network, synth, training
from .network import ModelFileError, SpecError
from .tensor import ShapeError
from .training import TrainingDiverged

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _resolve_threads(value) -> int:
    if value is not None:
        if value < 1:
            raise CliError(EXIT_CONFIG, f"--threads must be >= 1, got {value}")
        return value
    env = os.environ.get("CDAE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise CliError(EXIT_CONFIG, f"CDAE_THREADS={env!r} is not an integer") from None
        if n < 1:
            raise CliError(EXIT_CONFIG, f"CDAE_THREADS={env} must be >= 1")
        return n
    return os.cpu_count() or 1


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_record(out: Path, command: str, args, extra=None) -> None:
    record = {
        "command": command,
        "package_version": __version__,
        "python_version": sys.version.split()[0],
        "numpy_version": np.__version__,
        "arguments": {k: str(v) if isinstance(v, Path) else v
                      for k, v in sorted(vars(args).items()) if k != "func"},
    }
    if extra:
        record.update(extra)
    with open(out / "run.json", "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_spec(args) -> network.ArchitectureSpec:
    if getattr(args, "spec", None):
        path = Path(args.spec)
        if not path.is_file():
            raise CliError(EXIT_DATA, f"spec file not found: {path}")
        return network.parse_spec(path.read_text(encoding="utf-8"))
    return network.load_preset(args.preset)


def _load_manifest(args) -> tuple[list, Path]:
    path = Path(args.manifest)
    if not path.is_file():
        raise CliError(EXIT_DATA, f"manifest not found: {path}")
    try:
        rows = features.load_manifest(path)
    except ValueError as e:
        raise CliError(EXIT_DATA, str(e)) from None
    base = Path(args.data_dir) if args.data_dir else path.parent
    return rows, base


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    config = synth.SynthConfig(
        n_genes=args.genes,
        n_categories=args.categories,
        h=args.height,
        w=args.width,
        images_per_gene=args.images_per_gene,
        noise_sigma=args.noise_sigma,
        label_density=args.label_density,
        seed=args.seed,
    )
    manifest, table = synth.generate(config, out)
    _write_run_record(out, "synth", args)
    sizes = ", ".join(str(len(g)) for g in table.values())
    print(f"wrote {len(manifest)} images for {config.n_genes} genes to {out}")
    print(f"category sizes: {sizes}")
    return 0


def _train(args, spec, dataset, out: Path):
    try:
        config = training.TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            lr0=args.lr,
            decay=args.decay,
            corruption_rate=(
                args.corruption if args.corruption is not None else spec.corruption_rate
            ),
            seed=args.seed,
        )
    except ValueError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None
    model = network.Model.init(spec, seed=args.seed)
    log_path = out / "train_log.csv"
    log_path.unlink(missing_ok=True)
    model, history = training.train(model, dataset, config, log_path=log_path)
    network.save_model(model, out / "model.cdae")
    return model, history


def cmd_train(args) -> int:
    out = _out_dir(args)
    spec = _load_spec(args)
    manifest, base = _load_manifest(args)
    threads = _resolve_threads(args.threads)
    dataset = np.concatenate(
        features.load_dataset(spec, manifest, base_dir=base, threads=threads), axis=0
    )
    model, history = _train(args, spec, dataset, out)
    _write_run_record(out, "train-cdae", args, {"final_mean_mse": history.mean_mse[-1]})
    print(f"trained {model.meta.epochs} epochs on {dataset.shape[0]} images")
    print(f"mean reconstruction MSE {history.mean_mse[0]:.6f} -> {history.mean_mse[-1]:.6f}")
    print(f"model written to {out / 'model.cdae'}")
    return 0


def _encode(model, manifest, base, threads: int, out: Path, fmat: bool):
    matrix = features.build_feature_matrix(model, manifest, base_dir=base, threads=threads)
    features.save_features_csv(out / "features.csv", matrix)
    if fmat:
        features.save_features_fmat(out / "features.fmat", matrix)
    return matrix


def cmd_encode(args) -> int:
    out = _out_dir(args)
    if args.model:
        path = Path(args.model)
        if not path.is_file():
            raise CliError(EXIT_DATA, f"model file not found: {path}")
        model = network.load_model(path)
    else:
        # untrained encoder: random-projection features, useful as a baseline
        model = network.Model.init(_load_spec(args), seed=args.seed)
    manifest, base = _load_manifest(args)
    matrix = _encode(model, manifest, base, _resolve_threads(args.threads), out, args.fmat)
    _write_run_record(out, "encode", args)
    print(f"encoded {len(matrix.gene_ids)} genes x {matrix.dim} features")
    print(f"features written to {out / 'features.csv'}")
    return 0


def _parse_grid(text: str) -> tuple:
    try:
        grid = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad --lambda-grid {text!r}") from None
    if not grid or any(v < 0 for v in grid):
        raise CliError(EXIT_CONFIG, "--lambda-grid needs nonnegative values")
    return grid


def _classify(matrix, table, args, out: Path):
    filtered = classify.filter_categories(
        table, matrix.gene_ids, min_genes=args.min_genes, max_genes=args.max_genes
    )
    if not filtered:
        raise CliError(EXIT_DATA, "no categories within the allowed size range")
    results = classify.evaluate_categories(
        matrix,
        filtered,
        lambda_grid=_parse_grid(args.lambda_grid),
        k=args.folds,
        seed=args.seed,
        threads=_resolve_threads(args.threads),
    )
    if not results:
        raise CliError(EXIT_DATA, "every category was skipped during folding")
    classify.save_aucs_csv(out / "aucs.csv", results)
    return results


def cmd_classify(args) -> int:
    out = _out_dir(args)
    path = Path(args.features)
    if not path.is_file():
        raise CliError(EXIT_DATA, f"feature file not found: {path}")
    try:
        matrix = features.load_features_csv(path)
        table = classify.load_annotations(args.annotations)
    except (ValueError, FileNotFoundError) as e:
        raise CliError(EXIT_DATA, str(e)) from None
    results = _classify(matrix, table, args, out)
    mean_auc = float(np.mean([r.mean_auc for r in results]))
    _write_run_record(out, "classify", args, {"mean_auc": mean_auc})
    print(f"evaluated {len(results)} categories, mean AUC {mean_auc:.4f}")
    print(f"per-fold table written to {out / 'aucs.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    if len(args.dimension) != len(args.aucs):
        raise CliError(
            EXIT_USAGE, "--aucs and --dimension must be given the same number of times"
        )
    reports = []
    try:
        for path, dim in zip(args.aucs, args.dimension):
            reports.append(evaluation.summarize(classify.load_aucs_csv(path), dim))
    except (ValueError, FileNotFoundError) as e:
        raise CliError(EXIT_DATA, str(e)) from None
    evaluation.save_report(out / "report.csv", reports[0], markdown=False)
    if args.markdown:
        with open(out / "report.md", "w") as f:
            f.write("\n".join(evaluation.render_markdown(r) for r in reports))
    if len(reports) > 1:
        try:
            evaluation.emit_plot_data(reports, out / "plot_data.csv")
        except ValueError as e:
            raise CliError(EXIT_CONFIG, str(e)) from None
    _write_run_record(out, "evaluate", args)
    for r in reports:
        print(f"D={r.dimension}: mean AUC {r.mean_auc:.4f} over {len(r.categories)} categories")
    return 0


def cmd_gradcheck(args) -> int:
    overall, ok = 0.0, True
    for name, worst, gate in training.run_gradcheck(args.seed):
        passed = worst < gate
        ok = ok and passed
        overall = max(overall, worst)
        print(f"{name}: max rel err {worst:.3e} (gate {gate:g}) "
              f"{'ok' if passed else 'FAIL'}")
    print(f"max relative error: {overall:.3e}")
    return 0 if ok else EXIT_NUMERIC


def cmd_pipeline(args) -> int:
    out = _out_dir(args)
    threads = _resolve_threads(args.threads)
    t0 = time.monotonic()

    def tick(stage: str) -> None:
        print(f"[{time.monotonic() - t0:7.1f}s] {stage}", flush=True)

    tick("synthesizing dataset")
    data_dir = out / "data"
    config = synth.SynthConfig(
        n_genes=args.genes,
        n_categories=args.categories,
        h=args.height,
        w=args.width,
        images_per_gene=args.images_per_gene,
        noise_sigma=args.noise_sigma,
        label_density=args.label_density,
        seed=args.seed,
    )
    manifest, _ = synth.generate(config, data_dir)

    tick("loading images")
    spec = _load_spec(args)
    dataset = np.concatenate(
        features.load_dataset(spec, manifest, base_dir=data_dir, threads=threads), axis=0
    )

    tick(f"training {args.epochs} epochs on {dataset.shape[0]} images")
    model, history = _train(args, spec, dataset, out)

    tick("encoding features")
    matrix = _encode(model, manifest, data_dir, threads, out, fmat=False)

    tick("classifying categories")
    table = classify.load_annotations(data_dir / "annotations.csv")
    results = _classify(matrix, table, args, out)

    tick("writing reports")
    report = evaluation.summarize(results, matrix.dim)
    with open(out / "report.md", "w") as f:
        f.write(evaluation.render_markdown(report))
    _write_run_record(
        out, "pipeline", args,
        {"first_epoch_mse": history.mean_mse[0],
         "final_epoch_mse": history.mean_mse[-1],
         "mean_auc": report.mean_auc},
    )
    tick("done")
    print(f"MSE {history.mean_mse[0]:.6f} -> {history.mean_mse[-1]:.6f}, "
          f"mean AUC {report.mean_auc:.4f} over {len(report.categories)} categories")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_seed(p) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")


def _add_threads(p) -> None:
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: CDAE_THREADS or CPU count)")


def _add_out(p) -> None:
    p.add_argument("--out", required=True, help="output directory")


def _add_arch(p, required: bool) -> None:
    group = p.add_mutually_exclusive_group(required=required)
    group.add_argument("--spec", help="architecture text file")
    group.add_argument("--preset", choices=network.preset_names(),
                       help="shipped architecture name")


def _add_synth_flags(p) -> None:
    p.add_argument("--genes", type=int, default=200)
    p.add_argument("--categories", type=int, default=8)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--images-per-gene", type=int, default=2)
    p.add_argument("--noise-sigma", type=float, default=0.03)
    p.add_argument("--label-density", type=float, default=0.15)


def _add_train_flags(p) -> None:
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.05, help="initial learning rate")
    p.add_argument("--decay", type=float, default=0.9, help="per-epoch lr multiplier")
    p.add_argument("--corruption", type=float, default=None,
                   help="masking fraction (default: the spec's value)")


def _add_classify_flags(p) -> None:
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--min-genes", type=int, default=15)
    p.add_argument("--max-genes", type=int, default=500)
    p.add_argument("--lambda-grid",
                   default=",".join(repr(v) for v in classify.LAMBDA_GRID),
                   help="comma-separated regularization grid")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdae",
        description="Autoencoder features for expression images, with "
                    "per-category classification.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic labeled image set")
    _add_synth_flags(p)
    _add_seed(p)
    _add_out(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-cdae", help="train the denoising autoencoder")
    p.add_argument("--manifest", required=True, help="CSV of image_path,gene_id")
    p.add_argument("--data-dir", help="base directory for manifest paths")
    _add_arch(p, required=True)
    _add_train_flags(p)
    _add_seed(p)
    _add_threads(p)
    _add_out(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode images into per-gene features")
    p.add_argument("--manifest", required=True, help="CSV of image_path,gene_id")
    p.add_argument("--data-dir", help="base directory for manifest paths")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", help="trained model file")
    group.add_argument("--spec", help="architecture text file (untrained encoder)")
    group.add_argument("--preset", choices=network.preset_names(),
                       help="shipped architecture (untrained encoder)")
    p.add_argument("--fmat", action="store_true", help="also write binary features.fmat")
    _add_seed(p)
    _add_threads(p)
    _add_out(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("classify", help="nested-CV classification per category")
    p.add_argument("--features", required=True, help="features.csv from encode")
    p.add_argument("--annotations", required=True, help="CSV of category_id,gene_id")
    _add_classify_flags(p)
    _add_seed(p)
    _add_threads(p)
    _add_out(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="summarize AUC tables into reports")
    p.add_argument("--aucs", action="append", required=True,
                   help="aucs.csv from classify (repeatable)")
    p.add_argument("--dimension", action="append", type=int, required=True,
                   help="feature dimension for the matching --aucs (repeatable)")
    p.add_argument("--markdown", action="store_true", help="also write report.md")
    _add_out(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all layer kinds")
    _add_seed(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pipeline", help="synth + train + encode + classify + evaluate")
    _add_synth_flags(p)
    _add_arch(p, required=False)
    _add_train_flags(p)
    _add_classify_flags(p)
    _add_seed(p)
    _add_threads(p)
    _add_out(p)
    p.set_defaults(func=cmd_pipeline, preset="desk")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as e:
        print(f"cdae: {e}", file=sys.stderr)
        return e.code
    except (SpecError, synth.SynthError) as e:
        print(f"cdae: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"cdae: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ModelFileError, features.ImageFormatError, classify.FoldError,
            evaluation.UndefinedAucError, ShapeError, FileNotFoundError) as e:
        print(f"cdae: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"cdae: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
