"""End-to-end teacher / student / baseline experiment with resumable stages.

Run directory layout (also written into ``manifest.json``)::

    manifest.json               config echo, config hash, stage status
    timings.json                wall-clock seconds per stage (not part of any result)
    data/                       dataset manifest + per-sample .npy arrays
    seed_<s>/teacher.ckpt       checkpoint series w_0..w_M
    seed_<s>/baseline.ckpt
    seed_<s>/student_<L>.ckpt   student distilled at layer L
    seed_<s>/entropy/<net>_<L>/ sigma.npy, H.npy [E, N, G, G]; concepts.npy
                                (0 none, 1 fg concept, 2 bg concept); meta.json
    seed_<s>/metrics.json       per-image series and per-network aggregates
    metric_report.json          seed-aggregated table
    verdict.json                directional hypothesis checks
"""

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from kdconcepts import __version__
from kdconcepts._io import canonical_json, read_json, save_array, sha256_hex, write_json
from kdconcepts.discard import EstimatorConfig, entropy_map, estimate_sigma_batch
from kdconcepts.errors import UndefinedMetricError, ValidationError
from kdconcepts.metrics import ConceptSet, MetricReport, extract_concepts, summarize_series
from kdconcepts.nets import LAYERS, NetSpec, get_flat, load_checkpoint, save_checkpoint
from kdconcepts.synthdata import DatasetSpec, generate_dataset, load_dataset, save_dataset, split_dataset
from kdconcepts.trainer import TrainConfig, distill_student, train_baseline, train_teacher

log = logging.getLogger(__name__)

RUN_SCHEMA = 1
TEACHER_SEED_BASE = 10_000
STUDENT_SEED_BASE = 20_000  # shared by student and baseline: paired initialisation

# cheaper than the library default; see README for the accuracy trade-off
EXPERIMENT_ESTIMATOR = EstimatorConfig(mc_samples=4, steps=120, refine_steps=50, eval_samples=64)

HYPOTHESES = {
    "H1": (("N_fg_mean", ">"), ("lambda", ">")),
    "H2": (("D_mean", "<"), ("D_std", "<")),
    "H3": (("rho_mean", ">"),),
}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    net: NetSpec = field(default_factory=NetSpec)
    teacher: TrainConfig = field(default_factory=TrainConfig)
    student: TrainConfig = field(default_factory=TrainConfig)
    baseline: TrainConfig = field(default_factory=TrainConfig)
    target_layers: tuple = ("FC1", "FC2")
    estimator: EstimatorConfig = EXPERIMENT_ESTIMATOR
    b: float = 0.2
    seeds: tuple = (0, 1, 2, 3, 4)
    epochs_to_probe: object = "all"
    eval_images: int = 64
    train_fraction: float = 0.8
    split_seed: int = 0
    teacher_probe: str = "final"  # or "all"
    verdict_threshold: float = 0.6
    control: bool = False  # student := baseline (same seed, no distillation)

    def __post_init__(self):
        object.__setattr__(self, "target_layers", tuple(self.target_layers))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if isinstance(self.epochs_to_probe, (list, tuple)):
            object.__setattr__(self, "epochs_to_probe", tuple(sorted(int(e) for e in self.epochs_to_probe)))
        self.validate()

    def validate(self):
        if not self.seeds:
            raise ValidationError("seeds", "need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds", "seeds must be distinct")
        if not self.target_layers:
            raise ValidationError("target_layers", "need at least one target layer")
        for layer in self.target_layers:
            if layer not in ("FC1", "FC2"):
                raise ValidationError("target_layers", f"{layer!r} is not FC1 or FC2")
        if not self.b > 0:
            raise ValidationError("b", "threshold must be positive")
        if self.eval_images < 1:
            raise ValidationError("eval_images", "must be >= 1")
        if self.teacher_probe not in ("final", "all"):
            raise ValidationError("teacher_probe", "must be 'final' or 'all'")
        if not (0 <= self.verdict_threshold <= 1):
            raise ValidationError("verdict_threshold", "must lie in [0, 1]")
        if self.epochs_to_probe != "all":
            eps = self.epochs_to_probe
            if not isinstance(eps, tuple) or not eps:
                raise ValidationError("epochs_to_probe", "must be 'all' or a nonempty list")
            for role in (self.student, self.baseline):
                if eps[0] < 1 or eps[-1] != role.epochs:
                    raise ValidationError("epochs_to_probe", f"epochs must lie in [1, {role.epochs}] "
                                                             "and include the final epoch")
        if self.control and self.student.epochs != self.baseline.epochs:
            raise ValidationError("control", "control mode needs equal student/baseline epochs")
        if self.estimator.grid != self.dataset.grid:
            raise ValidationError("grid", "estimator grid and dataset grid differ")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = set(cls.__dataclass_fields__) | {"train"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown experiment field")
        kw = {}
        if "dataset" in d:
            kw["dataset"] = DatasetSpec.from_dict(d.pop("dataset"))
        if "net" in d:
            kw["net"] = NetSpec.from_dict(d.pop("net"))
        if "estimator" in d:
            kw["estimator"] = EstimatorConfig.from_dict({**EXPERIMENT_ESTIMATOR.to_dict(), **d.pop("estimator")})
        train = d.pop("train", {}) or {}
        for role in ("teacher", "student", "baseline"):
            sub = {**train.get("common", {}), **train.get(role, {}), **d.pop(role, {})}
            kw[role] = TrainConfig.from_dict(sub)
        extra = set(train) - {"common", "teacher", "student", "baseline"}
        if extra:
            raise ValidationError(sorted(extra)[0], "unknown train section")
        return cls(**kw, **d)

    def to_dict(self):
        return {
            "dataset": self.dataset.to_dict(),
            "net": self.net.to_dict(),
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "baseline": self.baseline.to_dict(),
            "target_layers": list(self.target_layers),
            "estimator": {k: list(v) if isinstance(v, tuple) else v for k, v in self.estimator.to_dict().items()},
            "b": self.b,
            "seeds": list(self.seeds),
            "epochs_to_probe": self.epochs_to_probe if self.epochs_to_probe == "all" else list(self.epochs_to_probe),
            "eval_images": self.eval_images,
            "train_fraction": self.train_fraction,
            "split_seed": self.split_seed,
            "teacher_probe": self.teacher_probe,
            "verdict_threshold": self.verdict_threshold,
            "control": self.control,
        }

    def config_hash(self):
        return sha256_hex(canonical_json(self.to_dict()).encode())[:16]

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def role_seeds(seed):
    return {"teacher": TEACHER_SEED_BASE + seed, "student": STUDENT_SEED_BASE + seed,
            "baseline": STUDENT_SEED_BASE + seed}


class _Run:
    """Persisted manifest plus helpers for skip-if-done stages."""

    def __init__(self, out_dir, config: ExperimentConfig):
        self.root = Path(out_dir)
        self.cfg = config
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = read_json(self.manifest_path)
            if self.manifest.get("config_hash") != config.config_hash():
                raise ValidationError("config", f"{self.root} holds a run with a different config")
        else:
            self.manifest = {
                "schema_version": RUN_SCHEMA,
                "package_version": __version__,
                "config": config.to_dict(),
                "config_hash": config.config_hash(),
                "layout": __doc__.split("::", 1)[1].strip("\n"),
                "stages": {},
                "status": "running",
            }
        timings = self.root / "timings.json"
        self.timings = read_json(timings) if timings.exists() else {}
        self.save()

    def save(self):
        write_json(self.manifest_path, self.manifest)
        write_json(self.root / "timings.json", self.timings)

    def done(self, stage):
        return self.manifest["stages"].get(stage) == "done"

    def mark(self, stage, seconds=None):
        self.manifest["stages"][stage] = "done"
        if seconds is not None:
            self.timings[stage] = round(seconds, 3)
        self.save()


def _load_or_make_data(run):
    data_dir = run.root / "data"
    if run.done("data"):
        samples, _ = load_dataset(data_dir)
    else:
        t0 = time.time()
        samples, manifest = generate_dataset(run.cfg.dataset)
        save_dataset(samples, manifest, data_dir)
        run.mark("data", time.time() - t0)
    train, val = split_dataset(samples, run.cfg.train_fraction, run.cfg.split_seed)
    if len(val) < run.cfg.eval_images:
        raise ValidationError("eval_images", f"only {len(val)} validation images available")
    return train, val, val[: run.cfg.eval_images]


def _stage_ckpt(run, stage, path, fn):
    if run.done(stage) and path.exists():
        return load_checkpoint(path)
    t0 = time.time()
    series = fn()
    save_checkpoint(series, path)
    run.mark(stage, time.time() - t0)
    return series


def _probe_epochs(run, series, role):
    M = series.epochs
    if role == "T" and run.cfg.teacher_probe == "final":
        return [M]
    if run.cfg.epochs_to_probe == "all" or role == "T":
        return list(range(1, M + 1))
    return list(run.cfg.epochs_to_probe)


def _lower_key(model, layer):
    flat = torch.nn.utils.parameters_to_vector(model.params_up_to(layer)).detach().numpy()
    return layer, sha256_hex(np.ascontiguousarray(flat).tobytes())


def probe_network(series, layer, epochs, subset, est_cfg, b, cache=None):
    """Entropy maps and concept sets of ``subset`` at each epoch in ``epochs``.

    ``cache`` maps a hash of the parameters feeding ``layer`` to earlier results,
    so epochs in which those parameters did not move are not re-estimated.
    """
    cache = {} if cache is None else cache
    G = est_cfg.grid
    E, N = len(epochs), len(subset)
    out = {k: np.zeros((E, N, G, G)) for k in ("sigma", "H")}
    out["concepts"] = np.zeros((E, N, G, G), dtype=np.uint8)
    meta = {k: [[None] * N for _ in range(E)] for k in ("tau", "achieved", "beta", "rounds", "status",
                                                         "H_bar", "total_H")}
    concept_sets = []
    hits = 0
    for e, epoch in enumerate(epochs):
        model = series.model_at(epoch)
        key = _lower_key(model, layer)
        if key in cache:
            pms, ems = cache[key]
            hits += 1
        else:
            pms = estimate_sigma_batch(model, layer, subset, est_cfg)
            ems = []
            for pm, s in zip(pms, subset):
                try:
                    ems.append(entropy_map(pm, s.fg_mask))
                except UndefinedMetricError:
                    ems.append(None)
            cache[key] = (pms, ems)
        row = []
        for i, (pm, em) in enumerate(zip(pms, ems)):
            out["sigma"][e, i] = pm.sigma
            for k in ("tau", "achieved", "beta"):
                meta[k][e][i] = float(pm.__dict__[k])
            meta["rounds"][e][i] = int(pm.rounds)
            meta["status"][e][i] = pm.status if em is not None else "no_background"
            if em is None:
                out["H"][e, i] = np.nan
                row.append(ConceptSet(frozenset(), frozenset(), b, epoch, subset[i].index))
                continue
            out["H"][e, i] = em.H
            meta["H_bar"][e][i] = em.H_bar
            meta["total_H"][e][i] = em.total_H
            cs = extract_concepts(em, b=b, epoch=epoch)
            codes = np.zeros(G * G, dtype=np.uint8)
            codes[list(cs.fg_cells)] = 1
            codes[list(cs.bg_cells)] = 2
            out["concepts"][e, i] = codes.reshape(G, G)
            row.append(cs)
        concept_sets.append(row)
    meta["epochs"] = [int(e) for e in epochs]
    meta["image_refs"] = [int(s.index) for s in subset]
    meta["layer"] = layer
    meta["b"] = b
    meta["cache_hits"] = hits
    return out, meta, concept_sets


def concept_sets_from_codes(codes, epochs, image_refs, b):
    """Rebuild ConceptSet lists from a stored ``concepts.npy`` array."""
    out = []
    for e, epoch in enumerate(epochs):
        row = []
        for i, ref in enumerate(image_refs):
            flat = np.asarray(codes[e, i]).ravel()
            row.append(ConceptSet(frozenset(np.flatnonzero(flat == 1).tolist()),
                                  frozenset(np.flatnonzero(flat == 2).tolist()), b, epoch, ref))
        out.append(row)
    return out


def _stage_probe(run, seed_dir, stage, name, series, layer, role, subset, est_cfg, cache):
    d = seed_dir / "entropy" / name
    epochs = _probe_epochs(run, series, role)
    if run.done(stage) and (d / "meta.json").exists():
        meta = read_json(d / "meta.json")
        codes = np.load(d / "concepts.npy", allow_pickle=False)
        return meta, concept_sets_from_codes(codes, meta["epochs"], meta["image_refs"], meta["b"])
    t0 = time.time()
    arrays, meta, sets = probe_network(series, layer, epochs, subset, est_cfg, run.cfg.b, cache)
    for k, v in arrays.items():
        save_array(d / f"{k}.npy", v)
    write_json(d / "meta.json", meta)
    run.mark(stage, time.time() - t0)
    log.info("%s: probed %d epochs (%d cached) in %.1fs", stage, len(epochs), meta["cache_hits"],
             time.time() - t0)
    return meta, sets


def _network_summary(meta, sets, series):
    valid = np.array([[s == "ok" for s in row] for row in meta["status"]])
    return summarize_series(sets, meta["epochs"], series.snapshots if len(meta["epochs"]) > 1 else None,
                            valid=valid, image_refs=meta["image_refs"])


def run_seed(run, seed, train, val, subset):
    cfg = run.cfg
    sd = run.root / f"seed_{seed}"
    metrics_path = sd / "metrics.json"
    if run.done(f"seed_{seed}/metrics") and metrics_path.exists():
        return read_json(metrics_path)
    rs = role_seeds(seed)
    est = dataclasses.replace(cfg.estimator, seed=cfg.estimator.seed + seed)
    cache = {}

    T = _stage_ckpt(run, f"seed_{seed}/teacher", sd / "teacher.ckpt", lambda: train_teacher(
        train, cfg.net.with_seed(rs["teacher"]), cfg.teacher.replace(seed=rs["teacher"]), val))
    B = _stage_ckpt(run, f"seed_{seed}/baseline", sd / "baseline.ckpt", lambda: train_baseline(
        train, cfg.net.with_seed(rs["baseline"]), cfg.baseline.replace(seed=rs["baseline"]), val))

    networks = {}
    for layer in cfg.target_layers:
        if cfg.control:
            s_cfg = cfg.baseline.replace(seed=rs["student"], target_layer=layer, distill_epochs=0)
        else:
            s_cfg = cfg.student.replace(seed=rs["student"], target_layer=layer)
        S = _stage_ckpt(run, f"seed_{seed}/student_{layer}", sd / f"student_{layer}.ckpt",
                        lambda: distill_student(T, train, s_cfg, val, net_spec=cfg.net.with_seed(rs["student"])))
        for role, series in (("T", T), ("S", S), ("B", B)):
            name = f"{role}_{layer}"
            meta, sets = _stage_probe(run, sd, f"seed_{seed}/entropy/{name}", name, series, layer, role,
                                      subset, est, cache)
            summary = _network_summary(meta, sets, series)
            summary["final_val_acc"] = series.metadata["history"]["val_acc"][-1]
            summary["estimator_status"] = _status_counts(meta["status"])
            networks[f"{role}|{layer}"] = summary

    record = {"schema_version": RUN_SCHEMA, "seed": seed, "role_seeds": rs,
              "estimator_seed": est.seed, "networks": networks}
    write_json(metrics_path, record)
    run.mark(f"seed_{seed}/metrics")
    return record


def _status_counts(status):
    out = {}
    for row in status:
        for s in row:
            out[s] = out.get(s, 0) + 1
    return dict(sorted(out.items()))


def seed_aggregates(record):
    return {tuple(k.split("|")): v["aggregate"] for k, v in record["networks"].items()}


def _compare(a, b, op):
    return a > b if op == ">" else a < b


def compute_verdict(seed_records, layers, threshold, complete=True):
    """Directional hypothesis checks over every (seed, layer) pair.

    Pure function of the stored per-seed metric records. A comparison in which
    every quantity is exactly equal for S and B is flagged as a tie (and does
    not hold).
    """
    out = {"complete": bool(complete), "threshold": threshold, "hypotheses": {}}
    for h, terms in HYPOTHESES.items():
        comps, holds, ties = [], 0, 0
        for rec in seed_records:
            agg = seed_aggregates(rec)
            for layer in layers:
                s, bl = agg.get(("S", layer)), agg.get(("B", layer))
                if s is None or bl is None:
                    continue
                vals = {q: (s[q], bl[q]) for q, _ in terms}
                if any(v is None for pair in vals.values() for v in pair):
                    comps.append({"seed": rec["seed"], "layer": layer, "status": "undefined", "values": vals})
                    continue
                ok = all(_compare(vals[q][0], vals[q][1], op) for q, op in terms)
                tie = all(vals[q][0] == vals[q][1] for q, _ in terms)
                holds += ok
                ties += tie
                comps.append({"seed": rec["seed"], "layer": layer, "holds": bool(ok), "tie": bool(tie),
                              "status": "tie" if tie else ("holds" if ok else "fails"), "values": vals})
        defined = [c for c in comps if c["status"] != "undefined"]
        n = len(defined)
        stats = {}
        for q, _ in terms:
            sv = np.array([c["values"][q][0] for c in defined], dtype=np.float64)
            bv = np.array([c["values"][q][1] for c in defined], dtype=np.float64)
            stats[q] = {"S_mean": float(sv.mean()) if n else None, "S_std": float(sv.std()) if n else None,
                        "B_mean": float(bv.mean()) if n else None, "B_std": float(bv.std()) if n else None,
                        "diff_mean": float((sv - bv).mean()) if n else None,
                        "diff_std": float((sv - bv).std()) if n else None}
        frac = holds / n if n else None
        out["hypotheses"][h] = {
            "predicate": " and ".join(f"{q}(S) {op} {q}(B)" for q, op in terms),
            "fraction": frac,
            "n_comparisons": n,
            "n_undefined": len(comps) - n,
            "n_ties": ties,
            "all_tie": bool(n > 0 and ties == n),
            "pass": bool(frac is not None and frac >= threshold and complete),
            "stats": stats,
            "comparisons": comps,
        }
    return out


def _aggregate(run, records, complete):
    cfg = run.cfg
    echo = {"b": cfg.b, "tau_fraction": cfg.estimator.tau_fraction, "G": cfg.estimator.grid,
            "seeds": [r["seed"] for r in records], "eval_images": cfg.eval_images,
            "epochs_to_probe": cfg.to_dict()["epochs_to_probe"], "teacher_probe": cfg.teacher_probe,
            "control": cfg.control, "estimator": cfg.to_dict()["estimator"]}
    report = MetricReport.from_seed_records([seed_aggregates(r) for r in records], echo)
    rep = report.to_dict()
    rep["complete"] = complete
    write_json(run.root / "metric_report.json", rep)
    verdict = compute_verdict(records, cfg.target_layers, cfg.verdict_threshold, complete)
    write_json(run.root / "verdict.json", verdict)
    return report, verdict


def run_experiment(config: ExperimentConfig, out_dir):
    """Run (or resume) the full experiment in ``out_dir``; returns ``(report, verdict)``."""
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    if config.epochs_to_probe != "all":
        log.warning("probing a subset of epochs: peak epoch and rho become approximations")
    run = _Run(out_dir, config)
    run.manifest["status"] = "running"
    run.save()
    records = []
    try:
        train, val, subset = _load_or_make_data(run)
        for seed in config.seeds:
            t0 = time.time()
            records.append(run_seed(run, seed, train, val, subset))
            log.info("seed %d finished in %.1fs", seed, time.time() - t0)
    except Exception as exc:
        run.manifest["status"] = "failed"
        run.manifest["failure"] = {"error": type(exc).__name__, "message": str(exc),
                                   "completed_seeds": [r["seed"] for r in records]}
        run.save()
        if records:
            _aggregate(run, records, complete=False)
        else:
            write_json(run.root / "verdict.json", {"complete": False, "hypotheses": {}})
        raise
    report, verdict = _aggregate(run, records, complete=True)
    run.manifest["status"] = "complete"
    run.manifest.pop("failure", None)
    run.save()
    return report, verdict


def load_run_config(run_dir):
    return ExperimentConfig.from_dict(read_json(Path(run_dir) / "manifest.json")["config"])


__all__ = ["ExperimentConfig", "run_experiment", "compute_verdict", "probe_network", "role_seeds",
           "EXPERIMENT_ESTIMATOR", "LAYERS"]
