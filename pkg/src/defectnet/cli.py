"""``defectnet`` command line: gen, train, eval, detect, sweep-beta.

Every command writes its artifacts under ``--out`` together with
``config.txt`` (the effective configuration) and ``manifest.txt`` (the
artifacts produced). Exit status is 0 on success, 1 on a runtime error and
2 on a usage error; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import plots
from .boxes import Box
from .checkpoint import load_state, read_checkpoint
from .config import ConfigError, RunConfig, config_mismatch, model_config_from_meta
from .data import (ParseError, build_dataset, combo_key, ensure_empty_dir, load_dataset, parse_combo, read_pgm,
                   save_dataset)
from .detector import CLASSES, Detection, Detector, detect
from .metrics import evaluate, write_report_csv
from .trainer import TrainingDiverged, run_detection, train

log = logging.getLogger("defectnet")


class CommandError(Exception):
    pass


def _write_manifest(out: Path, extra=()) -> None:
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.txt")
    files = sorted(set(files) | set(extra))
    (out / "manifest.txt").write_text("".join(f"{f}\n" for f in files))


def _parse_sets(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_config(args, extra=None) -> RunConfig:
    overrides = _parse_sets(getattr(args, "set", None))
    overrides.update(extra or {})
    return RunConfig.load(getattr(args, "config", None), overrides)


def _load_model(ckpt: Path, expect=None) -> Detector:
    if not ckpt.exists():
        raise CommandError(f"checkpoint not found: {ckpt}")
    meta, tensors = read_checkpoint(ckpt)
    model_config = model_config_from_meta(meta)
    if expect is not None:
        diffs = config_mismatch(meta, expect)
        if diffs:
            raise CommandError(f"checkpoint/config mismatch in keys: {', '.join(diffs)}")
    model = Detector(model_config)
    load_state(model, tensors)
    model.eval()
    return model


def _open_dataset(path):
    p = Path(path)
    if not (p / "annotations.jsonl").exists():
        raise CommandError(f"dataset not found: {p} (expected annotations.jsonl)")
    return load_dataset(p)


# ---------------------------------------------------------------- gen


def composition_table(counts: dict) -> str:
    """Label-set counts in three column groups (0-1 labels, 2 labels, 3+ labels) plus the total."""
    groups = [[], [], []]
    for k, v in counts.items():
        n = len(parse_combo(k))
        groups[min(max(n, 1), 3) - 1].append((k, v))
    rows = max(len(g) for g in groups) + 1
    lines = ["Label Set\t#Image\t" * 3]
    total = sum(counts.values())
    for r in range(rows):
        cells = []
        for gi, g in enumerate(groups):
            if r < len(g):
                cells.append(f"{g[r][0]}\t{g[r][1]}")
            elif gi == 2 and r == rows - 1:
                cells.append(f"Total\t{total}")
            else:
                cells.append("\t")
        lines.append("\t".join(cells))
    multi = sum(v for k, v in counts.items() if len(parse_combo(k)) >= 2)
    lines.append(f"multi-label: {multi}/{total} ({100.0 * multi / total if total else 0.0:.1f}%)")
    return "\n".join(line.rstrip() for line in lines) + "\n"


def cmd_gen(args) -> None:
    extra = {"data.seed": str(args.seed)} if args.seed is not None else {}
    if args.spec in ("default", "tiny"):
        extra["data.preset"] = args.spec
        cfg = _load_config(args, extra)
    else:
        path = Path(args.spec)
        if not path.exists():
            raise CommandError(f"spec file not found: {path}")
        cfg = RunConfig.load(path, {**_parse_sets(args.set), **extra})
    spec = cfg.dataset_spec()
    out = Path(args.out)
    ensure_empty_dir(out, args.force)
    dataset = build_dataset(spec)
    save_dataset(dataset, out)
    counts: dict = {}
    for s in dataset.samples:
        key = combo_key(s.labels)
        counts[key] = counts.get(key, 0) + 1
    ordered = {k: counts[k] for k in spec.counts if k in counts}
    ordered.update({k: v for k, v in counts.items() if k not in ordered})
    table = composition_table(ordered)
    (out / "composition.txt").write_text(table)
    cfg.write(out / "config.txt")
    _write_manifest(out)
    sys.stdout.write(table)


# ---------------------------------------------------------------- train


def _plot_training(train_log, out: Path) -> None:
    it = [r["iter"] for r in train_log.losses]
    series = {"total": (it, train_log.loss_series("total"))}
    for k in ("prop_cls", "prop_reg", "cls", "reg"):
        series[k] = (it, train_log.loss_series(k))
    plots.save(plots.line_chart(series, "training loss", "iteration", "loss"), out / "loss.svg")
    for module in ("multilevel", "attention"):
        traj = {}
        for m, wid in train_log.tracked_ids():
            if m != module:
                continue
            rows = [(i, v) for i, mm, w, v in train_log.weights if mm == m and w == wid]
            traj[wid] = ([r[0] for r in rows], [r[1] for r in rows])
        plots.save(plots.line_chart(traj, f"{module} weight trajectories", "iteration", "value"),
                   out / f"weights_{module}.svg")


def _train_into(dataset, cfg: RunConfig, out: Path, beta=None):
    model_config = cfg.model_config()
    if beta is not None:
        model_config.beta = float(beta)
    train_config = cfg.train_config()
    out.mkdir(parents=True, exist_ok=True)

    def progress(i, value, parts):
        if i % train_config.log_every == 0:
            log.info("iter %d loss %.6f", i, value)

    try:
        model, train_log = train(dataset, model_config, train_config, out, progress)
    except TrainingDiverged as exc:
        raise CommandError(f"{exc}; partial logs in {out}") from exc
    _plot_training(train_log, out)
    return model, train_log


def cmd_train(args) -> None:
    extra = {"model.variant": args.variant} if args.variant else {}
    cfg = _load_config(args, extra)
    dataset = _open_dataset(args.data)
    out = Path(args.out)
    ensure_empty_dir(out, args.force)
    cfg.write(out / "config.txt")
    _, train_log = _train_into(dataset, cfg, out)
    summary = {"iterations": len(train_log.losses), "variant": cfg.values["model.variant"],
               "final_loss": train_log.losses[-1]["total"] if train_log.losses else None,
               "val_map": train_log.metrics.get("val_map")}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _write_manifest(out)
    print(json.dumps(summary, sort_keys=True))


# ---------------------------------------------------------------- eval


def read_predictions(path) -> list:
    """JSON-lines ``{"image", "class", "score", "box"}`` grouped as ``(image_id, [Detection])``."""
    grouped: dict = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            det = Detection(Box(*map(float, rec["box"])), CLASSES.index(rec["class"]), float(rec["score"]))
            grouped.setdefault(str(rec["image"]), []).append(det)
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"{path}: line {n}: {exc}") from exc
    return list(grouped.items())


def cmd_eval(args) -> None:
    dataset = _open_dataset(args.data)
    samples = dataset.split(args.split)
    if not samples:
        raise CommandError(f"split {args.split!r} is empty")
    out = Path(args.out)
    ensure_empty_dir(out, args.force)
    elapsed = None
    if args.predictions:
        by_id = dict(read_predictions(args.predictions))
        dets = [(s.id, by_id.get(s.id, [])) for s in samples]
    else:
        if not args.ckpt:
            raise CommandError("eval needs --ckpt or --predictions")
        expect = _load_config(args).model_config() if args.config else None
        model = _load_model(Path(args.ckpt), expect)
        start = time.perf_counter()
        dets = run_detection(model, samples, score_floor=args.floor, batch_size=1)
        elapsed = (time.perf_counter() - start) / len(samples)
    annotations = {s.id: list(zip(s.boxes, s.labels)) for s in samples}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report = evaluate(dets, annotations, args.iou, args.conf)
    report.time_per_image = elapsed
    write_report_csv(report, out / "report.csv")
    ap = [None if report.ap[c] is None else 100 * report.ap[c] for c in CLASSES]
    rec = [None if report.recall[c] is None else 100 * report.recall[c] for c in CLASSES]
    plots.save(plots.bar_chart(CLASSES, {"AP (%)": ap, "recall (%)": rec}, "per-class AP and recall", "%"),
               out / "per_class.svg")
    _write_manifest(out)
    sys.stdout.write((out / "report.csv").read_text())


# ---------------------------------------------------------------- detect


def cmd_detect(args) -> None:
    model = _load_model(Path(args.ckpt))
    image = read_pgm(args.image)
    if image.shape[0] % 32 or image.shape[1] % 32:
        raise CommandError(f"image size {image.shape[1]}x{image.shape[0]} must be a multiple of 32")
    dets = detect(image, model, conf_thr=args.conf)
    name = Path(args.image).stem
    for d in dets:
        print(json.dumps(d.to_json(name), sort_keys=True))
    if args.svg:
        plots.save(plots.overlay(image, dets, name), args.svg)


# ---------------------------------------------------------------- sweep-beta


def parse_betas(text: str) -> list:
    vals = []
    for part in text.split(","):
        if part.strip():
            try:
                vals.append(float(part))
            except ValueError:
                raise CommandError(f"bad beta value {part!r}") from None
    if not vals:
        raise CommandError("--betas is empty")
    unique = list(dict.fromkeys(vals))
    if len(unique) != len(vals):
        warnings.warn(f"duplicate beta values removed: {vals} -> {unique}", UserWarning, stacklevel=2)
    return unique


def cmd_sweep_beta(args) -> None:
    betas = parse_betas(args.betas)
    cfg = _load_config(args)
    dataset = _open_dataset(args.data)
    out = Path(args.out)
    ensure_empty_dir(out, args.force)
    cfg.write(out / "config.txt")
    rows = []
    for b in betas:
        _, train_log = _train_into(dataset, cfg, out / f"beta_{b:g}", beta=b)
        final = train_log.losses[-1]["total"] if train_log.losses else float("nan")
        rows.append((b, final, train_log.metrics.get("val_map")))
    text = write_sweep(rows, out)
    _write_manifest(out)
    sys.stdout.write(text)


def write_sweep(rows, out: Path) -> str:
    """Write ``sweep.csv`` and ``sweep.svg`` for ``(beta, final_loss, map)`` rows; return the CSV text."""
    lines = ["beta,final_loss,val_map"]
    lines += [f"{b!r},{f:.17g},{'' if m is None else format(m, '.17g')}" for b, f, m in rows]
    text = "\n".join(lines) + "\n"
    (Path(out) / "sweep.csv").write_text(text)
    xs = [r[0] for r in rows]
    series = {"final loss": (xs, [r[1] for r in rows]),
              "val mAP": (xs, [np.nan if r[2] is None else r[2] for r in rows])}
    plots.save(plots.line_chart(series, "information factor sweep", "beta", "value"), Path(out) / "sweep.svg")
    return text


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="defectnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--force", action="store_true", help="allow a non-empty --out")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", default="default", help="'default', 'tiny' or a key = value spec file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=("full", "no_multilevel", "no_attention"))
    t.add_argument("--out", required=True)
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a predictions file")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--predictions", help="JSON-lines detections to score instead of running a model")
    e.add_argument("--split", default="test")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--conf", type=float, default=0.5)
    e.add_argument("--floor", type=float, default=0.05, help="lowest score kept for AP ranking")
    e.add_argument("--out", required=True)
    common(e)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="detect defects in one PGM image")
    d.add_argument("--image", required=True)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--conf", type=float, default=0.5)
    d.add_argument("--svg", help="write an SVG overlay here")
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("sweep-beta", help="train one model per information factor")
    s.add_argument("--data", required=True)
    s.add_argument("--betas", required=True, help="comma-separated values")
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_sweep_beta)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (CommandError, ConfigError, ParseError, FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"defectnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
