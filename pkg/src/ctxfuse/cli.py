"""``ctxfuse`` command line: one subcommand per pipeline stage.

Exit status is 0 on success, 1 when an input fails validation and 2 on a
usage error. Diagnostics go to stderr; data goes to files, or to stdout when
``--out -`` is given.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .core import (ParseError, ValidationError, detections_to_dict, dumps, load_detections,
                   load_manifest)
from .evaluation import evaluate, format_markdown, format_table, threshold_grid, write_report
from .mnf import load_registry, partition_train, run_mnf
from .scene import (HistogramSceneClassifier, SceneProvider, SceneProviderConfig,
                    fit_histogram_classifier, load_scene_predictions, provider_for,
                    scene_predictions_to_dict)
from .scu import ScuOptions, fused_records, scu_update_batch
from .sim import PIPELINES, default_config, experiment, generate, load_config, write_outputs
from .stats import (cluster_key_to_dict, compute_cluster_key, compute_table, export_csv,
                    filter_scenes, load_table, table_to_dict)

log = logging.getLogger("ctxfuse")


def _emit(payload: str, out: str) -> None:
    if out == "-":
        sys.stdout.write(payload)
    else:
        Path(out).write_text(payload, encoding="utf-8")


def _thresholds(spec: str) -> list[float]:
    """``"20"`` -> 20-point grid from 1 to 0; otherwise comma-separated values."""
    if "," not in spec:
        try:
            return threshold_grid(int(spec))
        except ValueError:
            pass
    try:
        return [float(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"bad threshold list {spec!r}") from None


def cmd_stats(args):
    dataset = load_manifest(args.manifest)
    table = compute_table(dataset, args.split)
    if args.alpha is not None:
        table, retained = filter_scenes(table, dataset, args.alpha, args.split)
        log.info("retained scenes: %s", ", ".join(retained))
    _emit(dumps(table_to_dict(table)), args.out)
    if args.csv:
        export_csv(table, args.csv)
    if args.cluster_key:
        key = compute_cluster_key(dataset, args.split)
        _emit(dumps(cluster_key_to_dict(key)), args.cluster_key)


def cmd_scu(args):
    table = load_table(args.cooc)
    dataset = load_manifest(args.manifest) if args.manifest else None
    detections = load_detections(args.detections, dataset)
    scenes = load_scene_predictions(args.scenes, table.scenes)
    options = ScuOptions(args.score_floor, args.smoothing)
    results, summary = scu_update_batch(detections, scenes, table, options)
    _emit(dumps(detections_to_dict(fused_records(results))), args.out)
    if args.audit:
        _emit(dumps({"summary": summary.to_dict(), "results": [r.to_dict() for r in results]}),
              args.audit)
    log.info("rescored %d detections: %d changed, %d fallback", summary.total, summary.changed,
             summary.fallback)


def cmd_mnf_partition(args):
    dataset = load_manifest(args.manifest)
    spec = partition_train(dataset, args.alpha, args.out_dir)
    log.info("retained %d scenes, excluded %d", len(spec.retained_scenes), len(spec.excluded_scenes))


def cmd_mnf_route(args):
    dataset = load_manifest(args.manifest)
    registry = load_registry(args.registry, dataset)
    provider = provider_for(dataset, args.scene_mode, args.scenes, args.scene_state)
    records, counts = run_mnf(dataset, provider, registry, allow_fallback=not args.no_fallback,
                              split=args.split)
    _emit(dumps(detections_to_dict(records)), args.out)
    log.info("routing counts: %s", counts)


def cmd_eval(args):
    dataset = load_manifest(args.manifest)
    preds = load_detections(args.pred, dataset)
    key = compute_cluster_key(dataset, args.cluster_split)
    report = evaluate(dataset, preds, args.iou, args.split, key, _thresholds(args.thresholds))
    write_report(report, args.out_dir)
    sys.stderr.write(format_table({"eval": report}))


def cmd_report(args):
    dataset = load_manifest(args.manifest)
    key = compute_cluster_key(dataset, args.cluster_split)
    reports = {}
    for item in args.pred:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        report = evaluate(dataset, load_detections(path, dataset), args.iou, args.split, key,
                          _thresholds(args.thresholds))
        write_report(report, Path(args.out_dir) / name)
        reports[name] = report
    objects = list(dataset.object_classes)
    md = ["# Evaluation summary", "",
          f"IoU threshold {args.iou}, split `{args.split}`.", "",
          format_markdown(reports, objects)]
    Path(args.out_dir, "summary.md").write_text("\n".join(md), encoding="utf-8")
    Path(args.out_dir, "summary.txt").write_text(format_table(reports, objects), encoding="utf-8")


def cmd_scene_fit(args):
    dataset = load_manifest(args.manifest)
    train = dataset.select(args.split).images
    clf = fit_histogram_classifier(train, dataset.scene_classes, args.bins)
    _emit(dumps(clf.to_dict()), args.out)


def cmd_scene_predict(args):
    dataset = load_manifest(args.manifest)
    clf = HistogramSceneClassifier.load(args.state)
    provider = SceneProvider(SceneProviderConfig("histogram", histogram_bins=clf.bins),
                             dataset.scene_classes, clf)
    preds = provider.predict_all(dataset.select(args.split).images)
    _emit(dumps(scene_predictions_to_dict(preds)), args.out)


def cmd_simulate(args):
    config = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        config = type(config).from_dict({**config.to_dict(), "seed": args.seed})
    out = generate(config)
    write_outputs(out, args.out_dir)
    if args.experiment:
        summaries = [experiment(config, p, output=out).to_dict() for p in args.experiment]
        _emit(dumps({"seed": config.seed, "results": summaries}),
              str(Path(args.out_dir) / "experiment.json"))
        for s in summaries:
            log.info("%s: accuracy %.4f", s["pipeline"], s["accuracy"])


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="ctxfuse", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("stats", help="co-occurrence table from a manifest", formatter_class=fmt)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="train", choices=["train", "test", "all"])
    s.add_argument("--alpha", type=int, default=None,
                   help="drop scenes with fewer images than this (no filtering when omitted)")
    s.add_argument("--out", required=True, help="co-occurrence JSON, '-' for stdout")
    s.add_argument("--csv", help="also write the table as CSV")
    s.add_argument("--cluster-key", help="also write the per-object scene cluster key")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("scu", help="rescore detections with scene context", formatter_class=fmt)
    s.add_argument("--detections", required=True)
    s.add_argument("--scenes", required=True, help="scene-prediction file")
    s.add_argument("--cooc", required=True, help="co-occurrence JSON")
    s.add_argument("--manifest", help="validate image ids and labels against this manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--audit", help="write per-detection products and summary here")
    s.add_argument("--score-floor", type=float, default=1e-6)
    s.add_argument("--smoothing", type=float, default=0.0, help="Laplace pseudo-count for P(o|s)")
    s.set_defaults(func=cmd_scu)

    s = sub.add_parser("mnf-partition", help="per-scene training manifests", formatter_class=fmt)
    s.add_argument("--manifest", required=True)
    s.add_argument("--alpha", type=int, default=5)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_mnf_partition)

    s = sub.add_parser("mnf-route", help="route test images to scene sources", formatter_class=fmt)
    s.add_argument("--manifest", required=True)
    s.add_argument("--registry", required=True)
    s.add_argument("--scene-mode", default="file", choices=["ground_truth", "file", "histogram"])
    s.add_argument("--scenes", help="scene-prediction file (file mode)")
    s.add_argument("--scene-state", help="classifier state (histogram mode)")
    s.add_argument("--split", default="test", choices=["train", "test", "all"])
    s.add_argument("--no-fallback", action="store_true",
                   help="fail on scenes without a source instead of using the fallback")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mnf_route)

    for name, func, helptext in (("eval", cmd_eval, "precision/recall, confusion, PR curve"),
                                 ("report", cmd_report, "side-by-side tables for several runs")):
        s = sub.add_parser(name, help=helptext, formatter_class=fmt)
        s.add_argument("--manifest", required=True)
        if name == "eval":
            s.add_argument("--pred", required=True, help="detections file")
        else:
            s.add_argument("--pred", required=True, action="append",
                           help="NAME=detections-file, repeatable")
        s.add_argument("--iou", type=float, default=0.5)
        s.add_argument("--split", default="test", choices=["train", "test", "all"])
        s.add_argument("--cluster-split", default="train", choices=["train", "test", "all"],
                       help="split whose ground truth orders the confusion matrix")
        s.add_argument("--thresholds", default="20",
                       help="grid size, or comma-separated descending thresholds")
        s.add_argument("--out-dir", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("scene-fit", help="fit the histogram scene classifier", formatter_class=fmt)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="train", choices=["train", "test", "all"])
    s.add_argument("--bins", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scene_fit)

    s = sub.add_parser("scene-predict", help="predict scenes with a fitted classifier",
                       formatter_class=fmt)
    s.add_argument("--manifest", required=True)
    s.add_argument("--state", required=True)
    s.add_argument("--split", default="test", choices=["train", "test", "all"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scene_predict)

    s = sub.add_parser("simulate", help="generate a synthetic experiment", formatter_class=fmt)
    s.add_argument("--config", help="sim.json (default: the shipped config)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--experiment", action="append", choices=PIPELINES,
                   help="also run this pipeline and write experiment.json; repeatable")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (ValidationError, ParseError) as exc:
        print(f"ctxfuse {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ctxfuse {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def run(argv) -> int:
    """Exit status for ``argv``, folding argparse's SystemExit into the return value."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2


if __name__ == "__main__":
    sys.exit(main())
