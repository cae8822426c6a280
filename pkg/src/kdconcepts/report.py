"""Tables and figures rendered from the stored records of a run directory.

Nothing here recomputes a metric: every number comes from ``metric_report.json``,
``verdict.json`` or a per-seed ``metrics.json``; figures read the stored
``H.npy`` / ``concepts.npy`` arrays.
"""

import csv
import io
import logging
from pathlib import Path

import numpy as np

from kdconcepts._io import atomic_write_bytes, read_json
from kdconcepts.metrics import REPORT_COLUMNS, MetricReport

log = logging.getLogger(__name__)

_NOTES = [
    "Concept unit is one cell of the {G}x{G} grid; b = {b}; tau = {tau} x ||f*||^2 per image.",
    "Entropy maps are probed on a fixed subset of {n} validation images, shared by all seeds and networks.",
    "D_std holds the population variance of the per-image weight distances; its square root is in metrics.json.",
    "The teacher is probed at its final epoch only ({tp}), so its D and rho columns are n/a.",
    "Images are synthetic and centred; no bounding-box crops (1.2x / 1.5x) are applied, unlike real-image setups.",
    "Absolute magnitudes are toy-scale and not comparable to large pretrained networks; only the direction of "
    "each S-vs-B comparison is assessed.",
]


def _savefig(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    atomic_write_bytes(path, buf.getvalue())


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _fmt(v):
    return "n/a" if v is None else f"{v:.4g}"


def _gaps(root, manifest):
    cfg = manifest["config"]
    missing = []
    for f in ("metric_report.json", "verdict.json"):
        if not (root / f).exists():
            missing.append(f)
    for s in cfg["seeds"]:
        sd = root / f"seed_{s}"
        if not (sd / "metrics.json").exists():
            missing.append(f"seed_{s}/metrics.json")
        for layer in cfg["target_layers"]:
            for net in ("T", "S", "B"):
                if not (sd / "entropy" / f"{net}_{layer}" / "meta.json").exists():
                    missing.append(f"seed_{s}/entropy/{net}_{layer}")
    return missing


def _write_tables(out, report: MetricReport):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in report.table(with_std=False):
        w.writerow(row)
    atomic_write_bytes(out / "table.csv", buf.getvalue().encode())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["network", "layer"] + [f"{c}_seed_std" for c in REPORT_COLUMNS[2:]] + ["n_seeds"])
    for (net, layer), row in report.rows.items():
        w.writerow([net, layer] + [repr(row[c]["std"]) if row[c]["std"] is not None else "n/a"
                                   for c in REPORT_COLUMNS[2:]] + [row["N_fg"]["n"]])
    atomic_write_bytes(out / "table_std.csv", buf.getvalue().encode())


def _net_order(key):
    net, layer = key.split("|")
    return layer, "TSB".index(net) if net in "TSB" else 9


def _markdown(manifest, report, verdict, seed_recs, gaps):
    cfg = manifest["config"]
    header = ["network", "layer", "N_fg ↑", "N_bg ↓", "λ ↑", "D_mean ↓", "D_std ↓", "ρ ↑"]
    lines = ["# Concept quantification report", ""]
    if not verdict.get("complete", False) or gaps:
        lines += ["**Run incomplete.** Missing artifacts:", ""] + [f"- {g}" for g in gaps] + [""]
    lines += ["## Metrics (mean ± std over seeds)", "",
              "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in report.table()]
    lines += ["", "## Hypothesis checks (student S vs baseline B)", "",
              "| hypothesis | predicate | fraction holding | comparisons | ties | pass (≥ {}) |".format(
                  verdict.get("threshold")), "|---|---|---|---|---|---|"]
    for h, v in verdict.get("hypotheses", {}).items():
        lines.append(f"| {h} | {v['predicate']} | {_fmt(v['fraction'])} | {v['n_comparisons']} | "
                     f"{v['n_ties']}{' (all tie)' if v['all_tie'] else ''} | {v['pass']} |")
    lines += ["", "Per-quantity S and B means over (seed, layer) comparisons:", "",
              "| hypothesis | quantity | S mean ± std | B mean ± std | S − B mean ± std |", "|---|---|---|---|---|"]
    for h, v in verdict.get("hypotheses", {}).items():
        for q, st in v["stats"].items():
            lines.append(f"| {h} | {q} | {_fmt(st['S_mean'])} ± {_fmt(st['S_std'])} | "
                         f"{_fmt(st['B_mean'])} ± {_fmt(st['B_std'])} | "
                         f"{_fmt(st['diff_mean'])} ± {_fmt(st['diff_std'])} |")
    lines += ["", "## Per-seed details", "",
              "| seed | network | layer | final val acc | excluded (final / series / λ / ρ) | estimator status |",
              "|---|---|---|---|---|---|"]
    for rec in seed_recs:
        for key, net in sorted(rec["networks"].items(), key=lambda kv: _net_order(kv[0])):
            n, layer = key.split("|")
            ex = net["aggregate"]["excluded"]
            st = ", ".join(f"{k}: {c}" for k, c in net["estimator_status"].items())
            lines.append(f"| {rec['seed']} | {n} | {layer} | {_fmt(net['final_val_acc'])} | "
                         f"{ex['final_invalid']} / {ex['series_invalid']} / {ex['lambda_zero_concepts']} / "
                         f"{ex['rho_empty_union']} | {st} |")
    est = cfg["estimator"]
    lines += ["", "## Notes", ""]
    lines += ["- " + n.format(G=est["grid"], b=cfg["b"], tau=est["tau_fraction"], n=cfg["eval_images"],
                              tp=cfg["teacher_probe"]) for n in _NOTES]
    if cfg["control"]:
        lines.append("- Control run: the student is the baseline, so every comparison is expected to tie.")
    lines += ["", "Figures: `fig2_<layer>.png` (foreground concepts vs cumulative weight distance), "
              "`fig3_<layer>.png` (concept union vs final set), `heatmaps_<layer>.png` (entropy maps).", ""]
    return "\n".join(lines)


def _fig2(plt, out, seed_rec, layer, n_curves=8):
    nets = [n for n in ("S", "B") if f"{n}|{layer}" in seed_rec["networks"]]
    fig, axes = plt.subplots(1, len(nets), figsize=(5 * len(nets), 3.6), squeeze=False)
    for ax, net in zip(axes[0], nets):
        rec = seed_rec["networks"][f"{net}|{layer}"]
        cum = rec["cumulative_weight_distance"]
        epochs = rec["epochs"]
        if cum is None:
            ax.set_title(f"{net} {layer}: no series")
            continue
        x = [cum[e] for e in epochs]
        for img in rec["images"][:n_curves]:
            line, = ax.plot(x, img["n_fg"], marker=".", lw=1)
            if img["m_hat"] is not None:
                ax.plot([cum[img["m_hat"]]], [img["n_fg"][epochs.index(img["m_hat"])]], "o",
                        color=line.get_color(), mfc="none", ms=8)
        ax.set_xlabel("cumulative weight distance")
        ax.set_ylabel("N_fg")
        ax.set_title(f"{net} at {layer}, seed {seed_rec['seed']} (circles: peak epoch)")
    fig.tight_layout()
    _savefig(fig, out / f"fig2_{layer}.png")
    plt.close(fig)


def _fig3(plt, out, run_root, seed, layer, n_images=4):
    nets = ("S", "B")
    fig, axes = plt.subplots(len(nets), n_images, figsize=(2.4 * n_images, 2.7 * len(nets)), squeeze=False)
    for r, net in enumerate(nets):
        d = run_root / f"seed_{seed}" / "entropy" / f"{net}_{layer}"
        if not (d / "concepts.npy").exists():
            continue
        codes = np.load(d / "concepts.npy", allow_pickle=False)
        fg = codes == 1
        union, final = fg.any(0), fg[-1]
        for c in range(min(n_images, codes.shape[1])):
            img = np.zeros(union[c].shape)
            img[union[c]] = 1  # learned then discarded
            img[final[c]] = 2  # kept at the final epoch
            ax = axes[r, c]
            ax.imshow(img, cmap="viridis", vmin=0, vmax=2, interpolation="nearest")
            n_u, n_f = int(union[c].sum()), int(final[c].sum())
            ax.set_title(f"{net} |S_M|/|∪S|={n_f}/{n_u}", fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.suptitle(f"Foreground concepts at {layer}: final set (yellow) vs discarded detours (teal)", fontsize=9)
    fig.tight_layout(rect=(0, 0, 1, 0.94))
    _savefig(fig, out / f"fig3_{layer}.png")
    plt.close(fig)


def _heatmaps(plt, out, run_root, seed, layer, n_images=4):
    nets = ("T", "S", "B")
    fig, axes = plt.subplots(len(nets), n_images, figsize=(2.4 * n_images, 2.6 * len(nets)), squeeze=False)
    for r, net in enumerate(nets):
        d = run_root / f"seed_{seed}" / "entropy" / f"{net}_{layer}"
        for c in range(n_images):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if not (d / "H.npy").exists():
                continue
            H = np.load(d / "H.npy", allow_pickle=False)
            if c < H.shape[1]:
                ax.imshow(H[-1, c], cmap="gray", interpolation="nearest")
                ax.set_title(f"{net} {layer} img {c}", fontsize=8)
    fig.suptitle("Final-epoch entropy maps (dark = information kept)", fontsize=9)
    fig.tight_layout(rect=(0, 0, 1, 0.94))
    _savefig(fig, out / f"heatmaps_{layer}.png")
    plt.close(fig)


def emit_report(run_dir, out_dir=None):
    """Write tables, a markdown summary and figures under ``<run_dir>/report``.

    Returns ``(out_dir, gaps)`` where ``gaps`` lists missing artifacts.
    """
    root = Path(run_dir)
    out = Path(out_dir) if out_dir else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_json(root / "manifest.json")
    gaps = _gaps(root, manifest)
    cfg = manifest["config"]
    seed_recs = [read_json(root / f"seed_{s}" / "metrics.json") for s in cfg["seeds"]
                 if (root / f"seed_{s}" / "metrics.json").exists()]
    if (root / "metric_report.json").exists():
        report = MetricReport.from_dict(read_json(root / "metric_report.json"))
    else:
        report = MetricReport(rows={}, config={})
    verdict = read_json(root / "verdict.json") if (root / "verdict.json").exists() else {"complete": False}
    _write_tables(out, report)
    atomic_write_bytes(out / "report.md", _markdown(manifest, report, verdict, seed_recs, gaps).encode())
    if seed_recs:
        plt = _plt()
        with plt.style.context("default"):
            first = seed_recs[0]
            for layer in cfg["target_layers"]:
                _fig2(plt, out, first, layer)
                _fig3(plt, out, root, first["seed"], layer)
                _heatmaps(plt, out, root, first["seed"], layer)
    if gaps:
        log.warning("report has %d missing artifacts", len(gaps))
    return out, gaps
