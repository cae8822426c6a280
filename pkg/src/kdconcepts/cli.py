"""Command-line entry point: ``kdconcepts <command> ...``."""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from kdconcepts._io import load_config, read_json, write_json
from kdconcepts.errors import (EstimatorError, IntegrityError, NumericError, SchemaVersionError,
                               TrainingError, UndefinedMetricError, ValidationError)

log = logging.getLogger("kdconcepts")


def _experiment_config(path):
    from kdconcepts.orchestrate import ExperimentConfig

    raw = load_config(path) if path else {}
    return ExperimentConfig.from_dict(raw), raw


def _split(cfg, data_dir):
    from kdconcepts.synthdata import load_dataset, split_dataset

    samples, _ = load_dataset(data_dir)
    return split_dataset(samples, cfg.train_fraction, cfg.split_seed)


def cmd_generate_data(args):
    from kdconcepts.synthdata import DatasetSpec, generate_dataset, save_dataset

    raw = load_config(args.config) if args.config else {}
    spec = DatasetSpec.from_dict(raw.get("dataset", raw if "num_classes" in raw else {}))
    samples, manifest = generate_dataset(spec)
    save_dataset(samples, manifest, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def _train_common(args, role):
    from kdconcepts.nets import load_checkpoint, save_checkpoint
    from kdconcepts.trainer import distill_student, train_baseline, train_teacher

    cfg, raw = _experiment_config(args.config)
    train, val = _split(cfg, args.data)
    tc = getattr(cfg, role)
    if args.seed is not None:
        tc = tc.replace(seed=args.seed)
    if role == "student" and args.layer:
        tc = tc.replace(target_layer=args.layer)
    spec = cfg.net.with_seed(tc.seed)
    if role == "teacher":
        series = train_teacher(train, spec, tc, val)
    elif role == "baseline":
        series = train_baseline(train, spec, tc, val)
    else:
        series = distill_student(load_checkpoint(args.teacher), train, tc, val, net_spec=spec)
    series.metadata["config_echo"] = raw
    save_checkpoint(series, args.out)
    h = series.metadata["history"]
    print(f"{role}: {series.epochs} epochs, final val acc {h['val_acc'][-1]:.4f} -> {args.out}")


def cmd_quantify(args):
    from kdconcepts.discard import EstimatorConfig, entropy_map, entropy_record, estimate_sigma_batch, render_heatmap
    from kdconcepts.nets import load_checkpoint

    cfg, raw = _experiment_config(args.config)
    est = cfg.estimator if "estimator" in raw else EstimatorConfig()
    series = load_checkpoint(args.ckpt)
    if not (0 <= args.epoch <= series.epochs):
        raise ValidationError("epoch", f"checkpoint has epochs 0..{series.epochs}")
    _, val = _split(cfg, args.data)
    subset = val[: args.images]
    pms = estimate_sigma_batch(series.model_at(args.epoch), args.layer, subset, est)
    out = Path(args.out)
    n_bad = 0
    for pm, s in zip(pms, subset):
        try:
            em = entropy_map(pm, s.fg_mask)
        except UndefinedMetricError as exc:
            log.warning("%s", exc)
            em = None
        n_bad += pm.status != "ok"
        stem = f"image_{s.index:06d}_epoch_{args.epoch:03d}_{args.layer}"
        rec = entropy_record(pm, em, args.epoch)
        rec["ckpt_spec_hash"] = series.net_spec.spec_hash()
        write_json(out / f"{stem}.json", rec)
        if args.heatmaps and em is not None:
            out.mkdir(parents=True, exist_ok=True)
            render_heatmap(em, out / f"{stem}.png")
    print(f"wrote {len(pms)} entropy records to {out} ({n_bad} not ok)")


def cmd_metrics(args):
    from kdconcepts.discard import entropy_map_from_record
    from kdconcepts.metrics import REPORT_COLUMNS, ConceptSet, extract_concepts, summarize_series
    from kdconcepts.nets import load_checkpoint

    series = load_checkpoint(args.ckpt) if args.ckpt else None
    recs = [read_json(p) for p in sorted(Path(args.entropy_dir).glob("*.json"))]
    if not recs:
        raise ValidationError("entropy_dir", f"no entropy records in {args.entropy_dir}")
    layers = sorted({r["layer"] for r in recs})
    rows, full = [], {}
    for layer in layers:
        lr = [r for r in recs if r["layer"] == layer]
        epochs = sorted({r["epoch"] for r in lr})
        refs = sorted({r["image_ref"] for r in lr})
        by = {(r["epoch"], r["image_ref"]): r for r in lr}
        sets, valid = [], np.zeros((len(epochs), len(refs)), bool)
        for e, ep in enumerate(epochs):
            row = []
            for i, ref in enumerate(refs):
                r = by.get((ep, ref))
                if r is None or "H" not in r or r["status"] != "ok":
                    row.append(ConceptSet(frozenset(), frozenset(), args.b, ep, ref))
                    continue
                valid[e, i] = True
                row.append(extract_concepts(entropy_map_from_record(r), b=args.b, epoch=ep))
            sets.append(row)
        snaps = series.snapshots if (series is not None and len(epochs) > 1 and epochs[0] >= 1) else None
        summ = summarize_series(sets, epochs, snaps, valid=valid, image_refs=refs)
        full[layer] = summ
        a = summ["aggregate"]
        rows.append([args.network, layer, a["N_fg_mean"], a["N_bg_mean"], a["lambda"], a["D_mean"],
                     a["D_std"], a["rho_mean"]])
    out = Path(args.out)
    if out.suffix == ".csv":
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            w.writerows([["n/a" if v is None else v for v in r] for r in rows])
    else:
        write_json(out, {"b": args.b, "network": args.network, "layers": full})
    for r in rows:
        print("  ".join("n/a" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v)) for v in r))


def cmd_run(args):
    from kdconcepts.orchestrate import run_experiment
    from kdconcepts.report import emit_report

    cfg, _ = _experiment_config(args.config)
    _, verdict = run_experiment(cfg, args.out)
    out, gaps = emit_report(args.out)
    for h, v in verdict["hypotheses"].items():
        frac = "n/a" if v["fraction"] is None else f"{v['fraction']:.2f}"
        print(f"{h}: fraction {frac} over {v['n_comparisons']} comparisons"
              f"{' (all tie)' if v['all_tie'] else ''}")
    print(f"report: {out}")


def cmd_report(args):
    from kdconcepts.report import emit_report

    out, gaps = emit_report(args.run, args.out)
    print(f"report written to {out}")
    for g in gaps:
        print(f"missing: {g}")


def build_parser():
    p = argparse.ArgumentParser(prog="kdconcepts", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="generate the synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    for name, role in (("train-teacher", "teacher"), ("distill", "student"), ("train-baseline", "baseline")):
        t = sub.add_parser(name, help=f"train the {role}")
        t.add_argument("--config")
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True, help="checkpoint file")
        t.add_argument("--seed", type=int)
        if role == "student":
            t.add_argument("--teacher", required=True, help="teacher checkpoint")
            t.add_argument("--layer", choices=("FC1", "FC2", "FC3"))
        t.set_defaults(func=lambda a, role=role: _train_common(a, role))

    q = sub.add_parser("quantify", help="entropy maps for one checkpoint epoch")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--epoch", type=int, required=True)
    q.add_argument("--layer", required=True, choices=("FC1", "FC2", "FC3"))
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--config", help="estimator section is read from here")
    q.add_argument("--images", type=int, default=64, help="first N validation images")
    q.add_argument("--heatmaps", action="store_true")
    q.set_defaults(func=cmd_quantify)

    m = sub.add_parser("metrics", help="metrics from a directory of entropy records")
    m.add_argument("--entropy-dir", required=True)
    m.add_argument("--ckpt", help="checkpoint series for weight distances")
    m.add_argument("--out", required=True, help="report.csv or report.json")
    m.add_argument("--b", type=float, default=0.2)
    m.add_argument("--network", default="net")
    m.set_defaults(func=cmd_metrics)

    r = sub.add_parser("run", help="run the full experiment")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="render tables and figures for a run directory")
    rp.add_argument("--run", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, SchemaVersionError, IntegrityError, EstimatorError, TrainingError,
            NumericError, UndefinedMetricError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
