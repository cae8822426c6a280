"""Concept counts, discriminativeness ratio, weight distance and detour ratio."""

from dataclasses import dataclass

import numpy as np

from kdconcepts.errors import UndefinedMetricError, ValidationError


@dataclass(frozen=True)
class ConceptSet:
    fg_cells: frozenset
    bg_cells: frozenset
    b: float
    epoch: int = None
    image_ref: int = None

    @property
    def cells(self):
        return self.fg_cells | self.bg_cells

    @property
    def n_fg(self):
        return len(self.fg_cells)

    @property
    def n_bg(self):
        return len(self.bg_cells)


@dataclass(frozen=True)
class DStats:
    mean: float
    var: float  # canonical "D_std" value (population variance)
    std: float  # square root of var, auxiliary


def extract_concepts(em, mask=None, b=0.2, epoch=None):
    """Cells with ``H_bar - H_i > b``, split by foreground/background.

    ``mask`` may be a pixel mask ``[H, W]`` or a cell grid ``[G, G]`` of
    foreground flags; when omitted, ``em.fg_cells`` is used.
    """
    if not b > 0:
        raise ValidationError("b", "threshold must be positive")
    if em.H_bar is None or not np.isfinite(em.H_bar):
        raise UndefinedMetricError("H_bar undefined for this map")
    H = np.asarray(em.H, dtype=np.float64)
    if mask is None:
        fg = np.asarray(em.fg_cells, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape == H.shape:
            fg = mask
        else:
            from kdconcepts.discard import cell_background

            fg = ~cell_background(mask, H.shape[0])
    hit = (em.H_bar - H) > b
    flat_fg = np.flatnonzero((hit & fg).ravel())
    flat_bg = np.flatnonzero((hit & ~fg).ravel())
    return ConceptSet(frozenset(flat_fg.tolist()), frozenset(flat_bg.tolist()), b, epoch,
                      getattr(em, "image_ref", None))


def compute_lambda(counts):
    """Mean of ``N_fg / (N_fg + N_bg)`` over images.

    Images with no concepts at all are excluded; returns ``(lambda, n_excluded)``.
    """
    ratios = []
    excluded = 0
    for n_fg, n_bg in counts:
        tot = n_fg + n_bg
        if tot == 0:
            excluded += 1
        else:
            ratios.append(n_fg / tot)
    if not ratios:
        raise UndefinedMetricError("every image has zero concepts; lambda undefined")
    return float(np.mean(ratios)), excluded


def peak_epoch(n_fg_series):
    """1-based epoch of the maximum foreground count; ties go to the earliest epoch."""
    s = list(n_fg_series)
    if not s:
        raise ValidationError("series", "must be nonempty")
    return int(np.argmax(s)) + 1


def step_lengths(snapshots):
    """``||w_k - w_{k-1}|| / ||w_0||`` for k = 1..M, accumulated in float64."""
    w = [np.asarray(s, dtype=np.float64) for s in snapshots]
    norm0 = np.linalg.norm(w[0])
    if not norm0 > 0:
        raise UndefinedMetricError("initial parameter norm is zero; weight distance undefined")
    return np.array([np.linalg.norm(w[k] - w[k - 1]) for k in range(1, len(w))]) / norm0


def weight_distance(ckpts, m_hat):
    """Normalised cumulative path length ``sum_{k<=m_hat} ||w_k - w_{k-1}|| / ||w_0||``."""
    snaps = ckpts.snapshots if hasattr(ckpts, "snapshots") else ckpts
    M = len(snaps) - 1
    if not (1 <= m_hat <= M):
        raise ValidationError("m_hat", f"must lie in [1, {M}]")
    return float(np.sum(step_lengths(snaps[: m_hat + 1])))


def cumulative_weight_distance(ckpts):
    """Weight distance at every epoch 0..M (0 at initialisation)."""
    snaps = ckpts.snapshots if hasattr(ckpts, "snapshots") else ckpts
    return np.concatenate([[0.0], np.cumsum(step_lengths(snaps))])


def compute_D(distances):
    d = np.asarray(list(distances), dtype=np.float64)
    if d.size == 0:
        raise ValidationError("distances", "need at least one image")
    # shifted-data moments: equal distances give exactly zero variance
    dev = d - d[0]
    shift = float(dev.mean())
    mean = float(d[0] + shift)
    var = max(float(np.mean(dev * dev) - shift * shift), 0.0)
    return DStats(mean=mean, var=var, std=float(np.sqrt(var)))


def compute_rho(concept_sets):
    """``|S_M| / |S_1 u ... u S_M|`` over foreground concept cells; last set is the final epoch."""
    sets = [frozenset(s.fg_cells) if isinstance(s, ConceptSet) else frozenset(s) for s in concept_sets]
    if not sets:
        raise ValidationError("concept_sets", "need at least one epoch")
    union = frozenset().union(*sets)
    if not union:
        raise UndefinedMetricError("no foreground concepts in any epoch; rho undefined")
    return len(sets[-1]) / len(union)


def _nan_to_none(v):
    return None if v is None or (isinstance(v, float) and not np.isfinite(v)) else v


def summarize_series(concepts, epochs, snapshots=None, valid=None, image_refs=None):
    """All per-network metrics from concept sets probed at ``epochs``.

    Parameters
    ----------
    concepts : list (over probed epochs) of lists (over images) of ConceptSet
    epochs : ascending epoch numbers; the last one is taken as the final epoch ``M``.
    snapshots : parameter snapshots ``w_0..w_M``; without them D is not computed.
    valid : optional bool array ``[E, N]``; images with any invalid epoch are
        excluded from the series metrics, images invalid at the final epoch from
        the count metrics.

    Returns a plain dict (JSON-ready) with per-image records and aggregates.
    """
    E, N = len(concepts), len(concepts[0])
    if len(epochs) != E:
        raise ValidationError("epochs", "one epoch number per probed concept list")
    valid = np.ones((E, N), bool) if valid is None else np.asarray(valid, bool)
    refs = list(range(N)) if image_refs is None else list(image_refs)
    series_ok = E > 1
    cum = cumulative_weight_distance(snapshots) if (snapshots is not None and series_ok) else None

    per_image, counts, dists, rhos = [], [], [], []
    excl = {"final_invalid": 0, "series_invalid": 0, "lambda_zero_concepts": 0, "rho_empty_union": 0}
    for i in range(N):
        rec = {"image_ref": int(refs[i]),
               "n_fg": [concepts[e][i].n_fg for e in range(E)],
               "n_bg": [concepts[e][i].n_bg for e in range(E)],
               "m_hat": None, "weight_distance": None, "rho": None}
        if valid[-1, i]:
            counts.append((rec["n_fg"][-1], rec["n_bg"][-1]))
        else:
            excl["final_invalid"] += 1
        if series_ok and valid[:, i].all():
            k = peak_epoch(rec["n_fg"])
            rec["m_hat"] = int(epochs[k - 1])
            if cum is not None:
                rec["weight_distance"] = float(cum[rec["m_hat"]])
                dists.append(rec["weight_distance"])
            try:
                rec["rho"] = compute_rho([concepts[e][i] for e in range(E)])
                rhos.append(rec["rho"])
            except UndefinedMetricError:
                excl["rho_empty_union"] += 1
        elif series_ok:
            excl["series_invalid"] += 1
        per_image.append(rec)

    agg = {"n_images": N, "N_fg_mean": None, "N_bg_mean": None, "lambda": None,
           "D_mean": None, "D_std": None, "D_sqrt_var": None, "rho_mean": None}
    if counts:
        c = np.asarray(counts, dtype=np.float64)
        agg["N_fg_mean"] = float(c[:, 0].mean())
        agg["N_bg_mean"] = float(c[:, 1].mean())
        try:
            agg["lambda"], excl["lambda_zero_concepts"] = compute_lambda(counts)
        except UndefinedMetricError:
            excl["lambda_zero_concepts"] = len(counts)
    if dists:
        d = compute_D(dists)
        agg.update(D_mean=d.mean, D_std=d.var, D_sqrt_var=d.std)
    if rhos:
        agg["rho_mean"] = float(np.mean(rhos))
    agg["excluded"] = excl
    return {"epochs": [int(e) for e in epochs], "aggregate": agg, "images": per_image,
            "cumulative_weight_distance": None if cum is None else [float(v) for v in cum]}


REPORT_COLUMNS = ("network", "layer", "N_fg", "N_bg", "lambda", "D_mean", "D_std", "rho")
_AGG_KEYS = {"N_fg": "N_fg_mean", "N_bg": "N_bg_mean", "lambda": "lambda", "D_mean": "D_mean",
             "D_std": "D_std", "rho": "rho_mean"}


@dataclass
class MetricReport:
    """Table of seed-averaged metrics per (network, layer) plus a config echo.

    ``rows[(network, layer)][col]`` holds ``{"mean", "std", "n", "per_seed"}``;
    ``std`` is the population standard deviation across seeds.
    """

    rows: dict
    config: dict

    @classmethod
    def from_seed_records(cls, records, config):
        """``records``: list of ``{(network, layer): aggregate dict}`` per seed."""
        keys = []
        for r in records:
            keys += [k for k in r if k not in keys]
        order = {"T": 0, "S": 1, "B": 2}
        keys.sort(key=lambda k: (k[1], order.get(k[0], 9)))
        rows = {}
        for key in keys:
            row = {}
            for col, src in _AGG_KEYS.items():
                vals = [r[key][src] if key in r else None for r in records]
                got = np.array([v for v in vals if v is not None], dtype=np.float64)
                row[col] = {"mean": float(got.mean()) if got.size else None,
                            "std": float(got.std()) if got.size else None,
                            "n": int(got.size), "per_seed": vals}
            rows[key] = row
        return cls(rows=rows, config=config)

    def to_dict(self):
        return {"columns": list(REPORT_COLUMNS), "config": self.config,
                "rows": [{"network": k[0], "layer": k[1], **v} for k, v in self.rows.items()]}

    @classmethod
    def from_dict(cls, d):
        rows = {(r["network"], r["layer"]): {c: r[c] for c in _AGG_KEYS} for r in d["rows"]}
        return cls(rows=rows, config=d["config"])

    def table(self, with_std=True):
        """Rows of formatted strings in ``REPORT_COLUMNS`` order."""
        out = []
        for (net, layer), row in self.rows.items():
            cells = [net, layer]
            for col in REPORT_COLUMNS[2:]:
                m, s = row[col]["mean"], row[col]["std"]
                if m is None:
                    cells.append("n/a")
                elif with_std:
                    cells.append(f"{m:.4g} ± {s:.2g}")
                else:
                    cells.append(repr(m))
            out.append(cells)
        return out
