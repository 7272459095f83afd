"""Command-line stages: fixtures, preprocessing, synthesis, training,
registration, evaluation and reporting.

Every stage writes into ``--out`` together with a ``run_config.json``.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import DegenerateHistogramError, IterativeConfig, OptimizationError
from .geometry import Image2D, TPSSolveError, WarpError, transform_from_dict
from .io import DataError, RunConfig, load_manifest, save_image
from .preprocess import DegenerateInputError

log = logging.getLogger("histreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (DataError, DegenerateInputError, FileNotFoundError, DegenerateHistogramError)
NUMERIC_ERRORS = (TPSSolveError, WarpError, OptimizationError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _relative(value, out: Path):
    if value is None:
        return None
    parts = [p.rpartition("=") for p in str(value).split(",")]
    return ",".join(
        f"{name}{eq}{os.path.relpath(path, out)}" if os.path.exists(path) else f"{name}{eq}{path}"
        for name, eq, path in parts
    )


def _record(out: Path, command: str, cfg: RunConfig, **inputs):
    # paths are stored relative to the output directory so that a rerun of
    # the same layout elsewhere produces identical bytes
    _write_json(out / "run_config.json", {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "inputs": {k: _relative(v, out) for k, v in inputs.items()},
    })


def _cases(manifest):
    cases = load_manifest(manifest)
    return sorted(cases, key=lambda c: (c.patient, c.slice_id))


# ---------------------------------------------------------------------------
# stages


def cmd_make_fixtures(args, cfg: RunConfig) -> int:
    from .fixtures import write_synthetic_cohort

    out = Path(args.out)
    manifest = write_synthetic_cohort(out, args.patients, args.slices, seed=cfg.seed)
    _record(out, "make-fixtures", cfg)
    print(manifest)
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig) -> int:
    from .preprocess import prepare_case

    out = Path(args.out)
    index = []
    for case in _cases(args.manifest):
        prep = prepare_case(case, cfg.canvas, cfg.margin_px)
        stem = f"{case.patient}_{case.slice_id}"
        for name in ("moving_canvas", "moving_mask_canvas", "fixed_canvas", "fixed_mask_canvas"):
            arr = getattr(prep, name)
            save_image(out / f"{stem}_{name}.png", np.round(arr * 255).astype(np.uint8))
            np.save(out / f"{stem}_{name}.npy", arr)
        index.append({
            "patient": case.patient,
            "slice_id": case.slice_id,
            "hist_crop_origin": list(prep.hist_crop.origin),
            "hist_crop_shape": list(prep.hist_crop.shape),
            "mri_crop_origin": list(prep.mri_crop.origin),
            "mri_crop_shape": list(prep.mri_crop.shape),
        })
    _write_json(out / "prepared.json", {"canvas": list(cfg.canvas), "slices": index})
    _record(out, "preprocess", cfg, manifest=args.manifest)
    return EXIT_OK


def _training_sources(args, cfg: RunConfig):
    if args.manifest:
        from .preprocess import prepare_case

        preps = [prepare_case(c, cfg.canvas, cfg.margin_px) for c in _cases(args.manifest)]
        return [Image2D(p.moving_mask_canvas) for p in preps], [Image2D(p.moving_canvas) for p in preps]
    from .fixtures import canvas_sources

    return canvas_sources(cfg.n_sources, cfg.seed, cfg.canvas)


def cmd_synth(args, cfg: RunConfig) -> int:
    from .synth import TransformBounds, bounds_to_dict, make_training_set, save_training_set

    out = Path(args.out)
    masks, textures = _training_sources(args, cfg)
    bounds = TransformBounds()
    for kind, images in (("affine", masks), ("tps", textures)):
        tuples = make_training_set(images, cfg.n_per_image, kind, cfg.seed)
        save_training_set(tuples, out / kind, {"bounds": bounds_to_dict(bounds), "seed": cfg.seed, "kind": kind})
        log.info("wrote %d %s tuples", len(tuples), kind)
    _record(out, "synth", cfg, manifest=args.manifest)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    import torch

    from .matchnet import ModelConfig
    from .synth import load_training_set
    from .training import TrainConfig, plot_loss_curves, train_stage

    torch.use_deterministic_algorithms(True)
    out = Path(args.out)
    data = Path(args.data)
    tcfg = TrainConfig(cfg.lr, cfg.lr_decay, cfg.batch_size, cfg.epochs, cfg.val_fraction, cfg.seed,
                       weight_decay=cfg.weight_decay)
    reports = []
    for kind in ("affine", "tps"):
        if not (data / kind / "index.json").exists():
            raise DataError(f"no {kind} training set under {data}")
        tuples = load_training_set(data / kind)
        mcfg = ModelConfig(kind=kind, canvas=tuples[0].moving.shape, extractor=cfg.extractor,
                           pretrained=cfg.pretrained)
        _, report = train_stage(tuples, kind, tcfg, mcfg, checkpoint=out / f"{kind}.pt")
        report.checkpoint = f"{kind}.pt"
        report.write(out)
        reports.append(report)
    plot_loss_curves(reports, out / "loss_curves.png")
    _record(out, "train", cfg, data=args.data)
    return EXIT_OK


def _register_one(job):
    """Worker entry point; returns the slice stem and its metric report."""
    case, backend, models_dir, cfg_dict, out = job
    import torch

    from .pipeline import evaluate_result, register_pair, register_pair_iterative, save_result

    torch.set_num_threads(1)
    cfg = RunConfig.from_dict(cfg_dict)
    if backend == "network":
        from .matchnet import load_model

        affine = load_model(Path(models_dir) / "affine.pt", "affine")
        tps = load_model(Path(models_dir) / "tps.pt", "tps")
        result = register_pair(case, affine, tps)
    else:
        result = register_pair_iterative(case, IterativeConfig(**cfg.iterative), cfg.canvas)
    stem = f"{case.patient}_{case.slice_id}"
    save_result(result, out, stem)
    return stem, evaluate_result(result), result.timing()


def _run_jobs(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _write_metrics(out: Path, reports, timing: dict | None = None):
    from .metrics import METRICS, aggregate_by_patient, summary, write_metrics_csv, write_summary_json

    patients = aggregate_by_patient(reports)
    write_metrics_csv(out / "metrics.csv", reports, patients, include_time=False)
    write_summary_json(out / "summary.json", summary(patients, [m for m in METRICS if m != "time_s"]))
    if timing is not None:
        # wall-clock numbers live apart from the reproducible artifacts
        _write_json(out / "timing.json", timing)


def cmd_register(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.backend == "network" and not args.models:
        raise UsageError("--models is required for the network backend")
    cases = _cases(args.manifest)
    jobs = [(c, args.backend, args.models, cfg.to_dict(), str(out)) for c in cases]
    results = _run_jobs(_register_one, jobs, args.workers)
    reports = [r for _, r, _ in results]
    by_patient: dict[str, list[float]] = {}
    for r, (_, _, t) in zip(reports, results):
        by_patient.setdefault(r.patient, []).append(t["wall_time_s"])
    timing = {
        "slices": {stem: t for stem, _, t in results},
        "patients_mean_s": {p: float(np.mean(v)) for p, v in by_patient.items()},
    }
    _write_metrics(out, reports, timing)
    _record(out, "register", cfg, manifest=args.manifest, backend=args.backend, models=args.models)
    return EXIT_OK


def _evaluate_one(job):
    case, results_dir, cfg_dict = job
    from .pipeline import RegistrationResult, evaluate_result, map_labels, _native_geometry
    from .preprocess import prepare_case

    cfg = RunConfig.from_dict(cfg_dict)
    stem = f"{case.patient}_{case.slice_id}"
    path = Path(results_dir) / f"{stem}.json"
    if not path.exists():
        raise DataError(f"no registration result for {stem} in {results_dir}")
    doc = json.loads(path.read_text())
    composite = transform_from_dict(doc["composite"])
    prep = prepare_case(case, cfg.canvas, cfg.margin_px)
    shape, spacing = _native_geometry(prep.mri_crop, prep.hist_crop.spacing)
    result = RegistrationResult(
        affine=transform_from_dict(doc["affine"]),
        tps=transform_from_dict(doc["tps"]),
        composite=composite,
        warped_hist=Image2D(np.zeros(shape), spacing),
        warped_labels={},
        wall_time_s=float("nan"),
        warped_mask=map_labels(prep.hist_mask_crop, composite, prep.mri_crop, native=False),
        prepared=prep,
        backend=doc.get("backend", ""),
    )
    report = evaluate_result(result)
    report.time_s = None
    return report


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(c, args.results, cfg.to_dict()) for c in _cases(args.manifest)]
    reports = _run_jobs(_evaluate_one, jobs, args.workers)
    _write_metrics(out, reports)
    _record(out, "evaluate", cfg, manifest=args.manifest, results=args.results)
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    from .metrics import box_plots, read_metrics_csv, summary

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_backend, rows = {}, []
    for spec in args.runs:
        name, _, directory = spec.rpartition("=") if "=" in spec else (Path(spec).name, "", spec)
        csv_path = Path(directory) / "metrics.csv"
        if not csv_path.exists():
            raise DataError(f"no metrics.csv in {directory}")
        _, patients = read_metrics_csv(csv_path)
        per_backend[name] = patients
        s = summary(patients)
        timing_path = Path(directory) / "timing.json"
        rows.append((name, s, timing_path.exists()))
    box_plots(per_backend, out / "metrics_boxplot.png")
    lines = ["| backend | patients | Dice | Hausdorff (mm) | urethra (mm) | landmark (mm) |",
             "|---|---|---|---|---|---|"]
    for name, s, _ in rows:
        cells = []
        for m in ("dice", "hausdorff_mm", "urethra_dev_mm", "landmark_err_mm"):
            cells.append("n/a" if s[m] is None else f"{s[m]['mean']:.3f} ± {s[m]['std']:.3f}")
        lines.append(f"| {name} | {s['n_patients']} | " + " | ".join(cells) + " |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    _write_json(out / "report.json", {name: s for name, s, _ in rows})
    _record(out, "report", cfg, runs=",".join(args.runs))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, default=1, help="parallel slice workers")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="histreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-fixtures", parents=[common], help="write a small synthetic cohort")
    p.add_argument("--patients", type=int, default=2)
    p.add_argument("--slices", type=int, default=2)
    p.set_defaults(func=cmd_make_fixtures)

    p = sub.add_parser("preprocess", parents=[common], help="orient, crop, mask and resample a cohort")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic training pairs")
    p.add_argument("--manifest", help="draw sources from this cohort instead of generated blobs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the affine and TPS stages")
    p.add_argument("--data", required=True, help="output directory of the synth stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", parents=[common], help="register every slice of a cohort")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend", choices=("network", "baseline"), default="network")
    p.add_argument("--models", help="directory holding affine.pt and tps.pt")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", parents=[common], help="recompute metrics from saved transforms")
    p.add_argument("--manifest", required=True)
    p.add_argument("--results", required=True, help="output directory of the register stage")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="compare backends across runs")
    p.add_argument("--runs", nargs="+", required=True, help="NAME=DIR entries with a metrics.csv each")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers < 1:
        parser.error("--workers must be at least 1")
    try:
        cfg = _load_config(args)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"histreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"histreg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"histreg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"histreg: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA

if __name__ == "__main__":
    sys.exit(main())
