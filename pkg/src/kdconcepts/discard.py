"""Per-grid-cell information discarding.

For an input ``x`` and a feature map ``f`` we look for Gaussian perturbation
scales ``sigma`` (one per grid cell) that maximise the input entropy
``sum_i log sigma_i`` while the perturbed feature stays inside the budget
``E||f(x + sigma * eps) - f(x)||^2 = tau``.

The program is solved with a penalty objective

    L(sigma) = E||f(x') - f*||^2 / tau - (beta / n) * sum_i log sigma_i

minimised by Adam on ``log sigma`` with Monte-Carlo gradients. The multiplier
``beta`` is then bisected (in log space, warm-starting ``sigma``) until the
measured constraint value lands within ``delta`` of ``tau``. For a linear map
the exact minimiser satisfies the constraint at ``beta = 2``, which is the
starting multiplier.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from kdconcepts.errors import EstimatorError, NumericError, UndefinedMetricError, ValidationError
from kdconcepts.nets import feature_at, layer_index

HALF_LOG_2PI_E = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class EstimatorConfig:
    grid: int = 16
    mc_samples: int = 32
    steps: int = 1000
    refine_steps: int = 300
    learning_rate: float = 0.1
    final_lr_fraction: float = 0.05
    adam_betas: tuple = (0.9, 0.9)
    pixel_range: float = 1.0
    sigma_init: float = 0.1  # x pixel_range
    sigma_min: float = 1e-4
    sigma_max: float = 2.0  # x pixel_range
    delta: float = 0.2
    max_rounds: int = 8
    eval_samples: int = 256
    tau_fraction: float = 0.05
    beta_init: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.grid < 1:
            raise ValidationError("grid", "must be >= 1")
        if self.mc_samples < 1 or self.eval_samples < 1:
            raise ValidationError("mc_samples", "sample counts must be >= 1")
        if self.steps < 2:
            raise ValidationError("steps", "must be >= 2")
        if not (0 < self.sigma_min < self.sigma_max * self.pixel_range):
            raise ValidationError("sigma_min", "need 0 < sigma_min < sigma_max")
        if not (0 < self.delta < 1):
            raise ValidationError("delta", "must lie in (0, 1)")
        if self.tau_fraction <= 0:
            raise ValidationError("tau_fraction", "must be positive")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown estimator field")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def log_bounds(self):
        return math.log(self.sigma_min), math.log(self.sigma_max * self.pixel_range)


@dataclass
class PerturbationModel:
    sigma: np.ndarray  # [G, G]
    tau: float
    layer_id: str
    image_ref: int
    achieved: float = float("nan")
    beta: float = float("nan")
    rounds: int = 0
    status: str = "ok"

    @property
    def ratio(self):
        return self.achieved / self.tau


@dataclass
class EntropyMap:
    H: np.ndarray  # [G, G]
    H_bar: float
    total_H: float
    fg_cells: np.ndarray  # bool [G, G]
    image_ref: int = -1


def default_tau(feature, fraction=0.05):
    """Relative budget ``fraction * ||f*||^2``."""
    f = np.asarray(feature, dtype=np.float64)
    return float(fraction * np.sum(f * f))


def _upsample(sigma, cell_h, cell_w):
    # sigma [B, G, G] -> [B, 1, 1, H, W] broadcastable against [B, K, C, H, W]
    return sigma.repeat_interleave(cell_h, -2).repeat_interleave(cell_w, -1)[:, None, None]


def _lr_at(step, n_steps, cfg):
    # cosine decay from lr to lr * final_lr_fraction
    t = step / max(n_steps - 1, 1)
    lo = cfg.learning_rate * cfg.final_lr_fraction
    return lo + 0.5 * (cfg.learning_rate - lo) * (1.0 + math.cos(math.pi * t))


class _Noise:
    """Independent per-image noise streams, so results do not depend on batch mates."""

    def __init__(self, seeds, shape, dtype):
        self.gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
        self.shape = shape
        self.dtype = dtype

    def draw(self, active, k):
        return torch.stack([torch.randn((k, *self.shape), generator=self.gens[i], dtype=self.dtype)
                            for i in active])


def _constraint(feature_fn, x, f_star, log_sigma, eps, cell):
    sig = _upsample(log_sigma.exp(), *cell)
    xp = x[:, None] + sig * eps
    feat = feature_fn(xp)
    return ((feat - f_star) ** 2).sum(-1).mean(-1)


def optimize_sigma(feature_fn, x, tau, config=None, seeds=None):
    """Batched estimator core.

    Parameters
    ----------
    feature_fn : callable
        Maps perturbed inputs ``[B, K, C, H, W]`` to features ``[B, K, L]``.
    x : tensor ``[B, C, H, W]``
    tau : array-like ``[B]`` of positive budgets.
    config : EstimatorConfig
    seeds : per-image noise seeds (default ``config.seed + b``).

    Returns
    -------
    dict with numpy arrays ``sigma [B, G, G]``, ``achieved [B]``, ``beta [B]``,
    ``rounds [B]`` and a list ``status`` (``"ok"``, ``"unattainable"``).
    """
    cfg = config or EstimatorConfig()
    x = torch.as_tensor(x)
    B, C, H, W = x.shape
    G = cfg.grid
    if H % G or W % G:
        raise ValidationError("grid", f"image {H}x{W} not divisible into {G}x{G} cells")
    cell = (H // G, W // G)
    n = G * G
    dtype = x.dtype
    tau_t = torch.as_tensor(np.asarray(tau, dtype=np.float64), dtype=dtype).reshape(B)
    if not torch.all(tau_t > 0):
        raise ValidationError("tau", "feature budget must be positive")
    if seeds is None:
        seeds = [cfg.seed + b for b in range(B)]
    noise = _Noise(seeds, (C, H, W), dtype)
    eval_gens = _Noise([s + 7919 for s in seeds], (C, H, W), dtype)
    lo_log, hi_log = cfg.log_bounds

    with torch.no_grad():
        f_star = feature_fn(x[:, None])  # [B, 1, L]

    log_sigma = torch.full((B, G, G), math.log(cfg.sigma_init * cfg.pixel_range), dtype=dtype)
    beta = np.full(B, cfg.beta_init)
    beta_lo = np.zeros(B)
    beta_hi = np.full(B, np.inf)
    achieved = np.full(B, np.nan)
    rounds = np.zeros(B, dtype=int)
    status = ["pending"] * B
    active = list(range(B))

    for rnd in range(cfg.max_rounds):
        if not active:
            break
        idx = torch.tensor(active)
        n_steps = cfg.steps if rnd == 0 else cfg.refine_steps
        ls = log_sigma[idx].clone().requires_grad_(True)
        opt = torch.optim.Adam([ls], lr=cfg.learning_rate, betas=tuple(cfg.adam_betas))
        xa, fa, ta = x[idx], f_star[idx], tau_t[idx]
        ba = torch.as_tensor(beta[active], dtype=dtype)
        avg = torch.zeros_like(ls)
        n_avg = 0
        for step in range(n_steps):
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, n_steps, cfg)
            eps = noise.draw(active, cfg.mc_samples)
            dist = _constraint(feature_fn, xa, fa, ls, eps, cell)
            loss = (dist / ta - ba / n * ls.sum((-2, -1))).sum()
            opt.zero_grad()
            loss.backward()
            if not torch.isfinite(ls.grad).all():
                raise NumericError(f"non-finite sigma gradient at round {rnd}, step {step}")
            opt.step()
            with torch.no_grad():
                ls.clamp_(lo_log, hi_log)
                if step >= n_steps // 2:
                    avg += ls
                    n_avg += 1
        with torch.no_grad():
            ls_final = avg / n_avg
            log_sigma[idx] = ls_final
            eps = eval_gens.draw(active, cfg.eval_samples)
            ach = _constraint(feature_fn, xa, fa, ls_final, eps, cell).double().numpy()
        still = []
        for j, b in enumerate(active):
            achieved[b] = ach[j]
            rounds[b] = rnd + 1
            r = ach[j] / float(tau_t[b])
            if not np.isfinite(r):
                raise NumericError(f"non-finite constraint value for image {b}")
            if 1 - cfg.delta <= r <= 1 + cfg.delta:
                status[b] = "ok"
                continue
            at_cap = bool(torch.all(log_sigma[b] >= hi_log - 1e-9))
            if r < 1 - cfg.delta and at_cap:
                status[b] = "unattainable"
                continue
            if r > 1 + cfg.delta:
                beta_hi[b] = beta[b]
            else:
                beta_lo[b] = beta[b]
            if np.isinf(beta_hi[b]):
                beta[b] *= 4.0
            elif beta_lo[b] == 0:
                beta[b] /= 4.0
            else:
                beta[b] = math.sqrt(beta_lo[b] * beta_hi[b])
            still.append(b)
        active = still
    for b in active:
        status[b] = "unattainable"

    return {
        "sigma": log_sigma.exp().detach().double().numpy(),
        "achieved": achieved,
        "beta": beta.copy(),
        "rounds": rounds,
        "status": status,
    }


def model_feature_fn(model, layer_id):
    layer_index(layer_id)

    def fn(xp):
        B, K = xp.shape[:2]
        return feature_at(model, layer_id, xp.reshape(B * K, *xp.shape[2:])).reshape(B, K, -1)

    return fn


def _sample_seed(cfg, image_ref, layer_id):
    return int(cfg.seed) * 1_000_003 + int(image_ref) * 7 + layer_index(layer_id)


def estimate_sigma_batch(model, layer_id, samples, config=None, taus=None):
    """Estimate perturbation models for several samples sharing one network.

    Failed estimates are returned with ``status != "ok"`` rather than raised.
    """
    cfg = config or EstimatorConfig()
    x = torch.as_tensor(np.stack([s.pixels for s in samples]))
    fn = model_feature_fn(model, layer_id)
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            f_star = fn(x[:, None])[:, 0].double().numpy()
        if taus is None:
            taus = [default_tau(f, cfg.tau_fraction) for f in f_star]
        taus = np.asarray(taus, dtype=np.float64)
        ok = taus > 0
        out = [None] * len(samples)
        if ok.any():
            pos = np.flatnonzero(ok)
            res = optimize_sigma(fn, x[pos], taus[pos], cfg,
                                 seeds=[_sample_seed(cfg, samples[i].index, layer_id) for i in pos])
            for j, i in enumerate(pos):
                out[i] = PerturbationModel(
                    sigma=res["sigma"][j], tau=float(taus[i]), layer_id=layer_id,
                    image_ref=samples[i].index, achieved=float(res["achieved"][j]),
                    beta=float(res["beta"][j]), rounds=int(res["rounds"][j]), status=res["status"][j])
        for i in np.flatnonzero(~ok):
            out[i] = PerturbationModel(
                sigma=np.full((cfg.grid, cfg.grid), cfg.sigma_max * cfg.pixel_range), tau=0.0,
                layer_id=layer_id, image_ref=samples[i].index, achieved=0.0, status="zero_feature")
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    return out


def estimate_sigma(model, layer_id, sample, tau=None, opt_config=None):
    """Estimate the per-cell noise scales for one sample at one FC layer.

    Raises :class:`EstimatorError` if the budget cannot be met within the clamps.
    """
    if tau is not None and not tau > 0:
        raise ValidationError("tau", "must be positive")
    (pm,) = estimate_sigma_batch(model, layer_id, [sample], opt_config,
                                 taus=None if tau is None else [tau])
    if pm.status != "ok":
        raise EstimatorError(
            f"constraint unattainable for image {pm.image_ref} at {layer_id}: "
            f"achieved {pm.achieved:.4g} vs tau {pm.tau:.4g}",
            achieved=pm.achieved, tau=pm.tau)
    return pm


def linear_oracle_sigma(W, tau, sigma_max=2.0):
    """Exact maximiser of ``sum log sigma_i`` s.t. ``sum sigma_i^2 ||W[:, i]||^2 = tau``.

    Without active clamps this is ``sigma_i = sqrt(tau / (m ||W[:, i]||^2))`` with
    ``m`` the number of nonzero columns. Zero columns cannot move the feature and
    are set to ``sigma_max``; columns whose solution would exceed ``sigma_max``
    are clamped and the remaining budget is shared by the others.

    Returns ``(sigma, flags)`` where ``flags`` marks zero columns.
    """
    W = np.asarray(W, dtype=np.float64)
    c2 = np.sum(W * W, axis=0)
    zero = c2 == 0
    sigma = np.full(c2.shape, float(sigma_max))
    free = ~zero
    budget = float(tau)
    while free.any():
        s2c2 = budget / free.sum()
        cand = np.sqrt(s2c2 / c2[free])
        over = cand > sigma_max
        if not over.any():
            sigma[free] = cand
            break
        idx = np.flatnonzero(free)[over]
        sigma[idx] = sigma_max
        budget -= float(np.sum(sigma_max ** 2 * c2[idx]))
        free[idx] = False
    return sigma, zero


def cell_background(mask, grid):
    """True for grid cells in which more than half the pixels are background."""
    m = np.asarray(mask, dtype=bool)
    H, W = m.shape
    if H % grid or W % grid:
        raise ValidationError("grid", f"mask {H}x{W} not divisible into {grid}x{grid} cells")
    bg = (~m).reshape(grid, H // grid, grid, W // grid).mean(axis=(1, 3))
    return bg > 0.5


def entropy_map(pm: PerturbationModel, mask) -> EntropyMap:
    sigma = np.asarray(pm.sigma, dtype=np.float64)
    if not np.all(sigma > 0):
        raise ValidationError("sigma", "must be strictly positive")
    H = np.log(sigma) + HALF_LOG_2PI_E
    bg = cell_background(mask, sigma.shape[0])
    if not bg.any():
        raise UndefinedMetricError(f"image {pm.image_ref}: no background-majority cells, H_bar undefined")
    return EntropyMap(H=H, H_bar=float(H[bg].mean()), total_H=float(H.sum()),
                      fg_cells=~bg, image_ref=pm.image_ref)


def render_heatmap(em: EntropyMap, out_path, cell_px=8):
    """Write a grayscale PNG of ``em.H``; dark means low entropy (information kept)."""
    from PIL import Image

    H = np.asarray(em.H, dtype=np.float64)
    span = H.max() - H.min()
    if span > 0:
        norm = (H - H.min()) / span
    else:
        norm = np.full(H.shape, 0.5)
    px = np.round(norm * 255).astype(np.uint8)
    px = np.kron(px, np.ones((cell_px, cell_px), dtype=np.uint8))
    Image.fromarray(px, mode="L").save(out_path, format="PNG")
    return out_path


def entropy_record(pm: PerturbationModel, em: EntropyMap = None, epoch=None):
    rec = {
        "image_ref": int(pm.image_ref),
        "layer": pm.layer_id,
        "epoch": epoch,
        "tau": pm.tau,
        "achieved": pm.achieved,
        "beta": pm.beta,
        "rounds": pm.rounds,
        "status": pm.status,
        "sigma": pm.sigma.tolist(),
    }
    if em is not None:
        rec.update(H=em.H.tolist(), H_bar=em.H_bar, total_H=em.total_H,
                   fg_cells=em.fg_cells.astype(int).tolist())
    return rec


def entropy_map_from_record(rec) -> EntropyMap:
    return EntropyMap(H=np.asarray(rec["H"], dtype=np.float64), H_bar=float(rec["H_bar"]),
                      total_H=float(rec["total_H"]), fg_cells=np.asarray(rec["fg_cells"], dtype=bool),
                      image_ref=int(rec["image_ref"]))
