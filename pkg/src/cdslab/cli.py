"""Command-line front end.

    cdslab train --config run.cfg [--override train.epochs=0 ...]
    cdslab train --replay runs/cds-s0/manifest.json --out-dir replay
    cdslab eval CHECKPOINT [--config run.cfg] [--override data.dir=...] [--out eval.csv]
    cdslab distill --teacher-config t.cfg --student-config s.cfg
    cdslab compare RUN_DIR [RUN_DIR ...] --out DIR [--reference baseline]
    cdslab export-curves RUN_DIR [RUN_DIR ...] --out PREFIX [--column ce_final]

Exit status: 0 success, 2 configuration or checkpoint problem, 3 missing or
malformed data, 4 non-finite numbers during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys

from . import trainer
from .config import TrainConfig, load_config, parse_config_text, set_key
from .data import DataConfig, load_datasets
from .errors import ConfigError, DataError, NumericError
from .metrics import CalibrationReport, add_deltas, curve_summary
from .network import atomic_write, load_checkpoint

log = logging.getLogger("cdslab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _config(path: str | None, overrides) -> TrainConfig:
    if path is None:
        return parse_config_text("", overrides)
    return load_config(path, overrides)


def cmd_train(args) -> int:
    if args.replay:
        art = trainer.replay_manifest(args.replay, args.out_dir)
    else:
        overrides = _normalize_overrides(args.override)
        if args.out_dir:
            overrides.append(f"run.out_dir={args.out_dir}")
        art = trainer.run_experiment(_config(args.config, overrides))
    s = art.summary
    print(f"{s['run']}: test_top1={s['test_top1']:.10g} test_ece={s['test_ece']:.10g} -> {art.run_dir}")
    return EXIT_OK


def _normalize_overrides(overrides) -> list[str]:
    """Accept bare ``epochs=0`` as shorthand for ``train.epochs=0``."""
    out = []
    for o in overrides or []:
        key = o.split("=", 1)[0].strip()
        out.append(o if "." in key else f"train.{o.strip()}")
    return out


def eval_checkpoint(checkpoint: str, cfg: TrainConfig | None = None, overrides=(),
                    keep_heads: bool = False) -> dict:
    expect = cfg.arch if cfg is not None else None
    net, meta = load_checkpoint(checkpoint, expect_arch=expect)
    if cfg is None:
        cfg = TrainConfig()
        if "data" in meta:
            cfg.data = DataConfig(**meta["data"])
        cfg.eval.bins = int(meta.get("eval_bins", cfg.eval.bins))
        for o in overrides:
            key, value = o.split("=", 1)
            set_key(cfg, key.strip(), value)
    _, test = load_datasets(cfg.data)
    acc, report = trainer.evaluate(net, test, cfg, discard_heads=not keep_heads)
    return {"checkpoint": checkpoint, "dataset": cfg.data.name, "samples": len(test), "heads_attached": keep_heads,
            "top1": acc, "ece": report.ece, "report": report}


def cmd_eval(args) -> int:
    cfg = _config(args.config, _normalize_overrides(args.override)) if args.config else None
    res = eval_checkpoint(args.checkpoint, cfg, _normalize_overrides(args.override), args.keep_heads)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval.csv")
    row = {k: v for k, v in res.items() if k != "report"}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in row.items():
        w.writerow([k, format(v, ".10g") if isinstance(v, float) else v])
    atomic_write(out, buf.getvalue())
    atomic_write(os.path.splitext(out)[0] + "_calibration.csv", res["report"].to_csv())
    print(f"top1={res['top1']:.10g} ece={res['ece']:.10g} samples={res['samples']} -> {out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    t_cfg = _config(args.teacher_config, _normalize_overrides(args.teacher_override))
    try:
        with open(args.student_config, encoding="utf-8") as fh:
            s_text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.student_config}: {exc}") from exc
    # default the teacher path to the teacher run's checkpoint; the student file may override it
    default = f"kd.teacher_checkpoint = {_teacher_ckpt(t_cfg)}\n"
    s_cfg = parse_config_text(default + s_text, _normalize_overrides(args.override))
    t_art, s_art = trainer.train_teacher_then_distill(t_cfg, s_cfg)
    if t_art is None:
        print(f"teacher: reused {s_cfg.kd.teacher_checkpoint}")
    else:
        print(f"teacher: test_top1={t_art.summary['test_top1']:.10g} -> {t_art.run_dir}")
    print(f"student: test_top1={s_art.summary['test_top1']:.10g} -> {s_art.run_dir}")
    return EXIT_OK


def _teacher_ckpt(t_cfg: TrainConfig) -> str:
    return os.path.join(t_cfg.run.out_dir, t_cfg.run_name, "final.ckpt")


def _require(run_dir: str, name: str) -> str:
    path = os.path.join(run_dir, name)
    if not os.path.isfile(path):
        raise DataError(f"missing {name} in run directory {run_dir}")
    return path


def _curve_series(run_dirs, column: str) -> dict[str, tuple[list[float], list[float]]]:
    series = {}
    for d in run_dirs:
        rows = trainer.read_curves(_require(d, "curves.csv"))
        label = os.path.basename(os.path.normpath(d))
        while label in series:
            label += "'"
        xs = [int(r["epoch"]) for r in rows if r.get(column)]
        ys = [float(r[column]) for r in rows if r.get(column)]
        series[label] = (xs, ys)
    return series


def compare_runs(run_dirs, out_dir: str, reference: str = "baseline", column: str = "ce_final") -> dict[str, str]:
    if not run_dirs:
        raise ConfigError("compare needs at least one run directory")
    from .plotting import loss_curves_svg, reliability_svg
    series = _curve_series(run_dirs, column)
    runs, reports = [], {}
    for d, label in zip(run_dirs, series):
        s = trainer.read_summary(_require(d, "summary.csv"))
        runs.append({"regime": s["regime"], "dataset": s["dataset"], "top1": s["test_top1"],
                     "train_ce": s["final_train_ce"], "ece": s["test_ece"]})
        with open(_require(d, "calibration.csv"), encoding="utf-8") as fh:
            reports[label] = CalibrationReport.from_csv(fh.read())
    try:
        table = add_deltas(curve_summary(runs), reference)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cols = list(dict.fromkeys(k for row in table for k in row))
    buf = io.StringIO()
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    for row in table:
        w.writerow({k: format(v, ".10g") if isinstance(v, float) else v for k, v in row.items()})
    paths = {"csv": os.path.join(out_dir, "comparison.csv"),
             "curves": os.path.join(out_dir, "loss_curves.svg"),
             "reliability": os.path.join(out_dir, "reliability.svg")}
    atomic_write(paths["csv"], buf.getvalue())
    atomic_write(paths["curves"], loss_curves_svg(series, ylabel=column))
    atomic_write(paths["reliability"], reliability_svg(reports))
    return paths


def cmd_compare(args) -> int:
    paths = compare_runs(args.run_dirs, args.out, args.reference, args.column)
    with open(paths["csv"], encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def export_curves(run_dirs, prefix: str, column: str = "ce_final") -> dict[str, str]:
    from .plotting import loss_curves_svg
    series = _curve_series(run_dirs, column)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "epoch", column])
    for label, (xs, ys) in series.items():
        for x, y in zip(xs, ys):
            w.writerow([label, x, format(y, ".10g")])
    paths = {"csv": prefix + ".csv", "svg": prefix + ".svg"}
    atomic_write(paths["csv"], buf.getvalue())
    atomic_write(paths["svg"], loss_curves_svg(series, ylabel=column))
    return paths


def cmd_export_curves(args) -> int:
    paths = export_curves(args.run_dirs, args.out, args.column)
    print(f"wrote {paths['csv']} and {paths['svg']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdslab", description="Contrastive deep supervision training lab")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config")
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--replay", metavar="MANIFEST", help="re-run the configuration stored in a manifest.json")
    t.add_argument("--out-dir", help="output root (overrides run.out_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its test set")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="expected architecture and data settings")
    e.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    e.add_argument("--keep-heads", action="store_true", help="evaluate without discarding training heads")
    e.add_argument("--out", help="metrics CSV (default: eval.csv next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("distill", help="train a cds teacher (unless its checkpoint exists), then a student")
    d.add_argument("--teacher-config", required=True)
    d.add_argument("--student-config", required=True)
    d.add_argument("--teacher-override", action="append", default=[], metavar="KEY=VALUE")
    d.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="student override")
    d.set_defaults(func=cmd_distill)

    c = sub.add_parser("compare", help="aggregate runs into a CSV and SVG plots")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--reference", default="baseline", help="regime the delta columns are taken against")
    c.add_argument("--column", default="ce_final", help="curves.csv column to plot")
    c.set_defaults(func=cmd_compare)

    x = sub.add_parser("export-curves", help="merge curves of several runs into one CSV and SVG")
    x.add_argument("run_dirs", nargs="+")
    x.add_argument("--out", required=True, help="output path prefix")
    x.add_argument("--column", default="ce_final")
    x.set_defaults(func=cmd_export_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
