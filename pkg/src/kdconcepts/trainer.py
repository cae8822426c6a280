"""Teacher, two-phase distilled student, and raw-data baseline training."""

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from kdconcepts.errors import TrainingError, ValidationError
from kdconcepts.nets import LAYERS, CheckpointSeries, NetSpec, build_net, feature_at, get_flat

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.03
    optimizer: str = "sgd"
    optimizer_kwargs: dict = field(default_factory=dict)
    seed: int = 0
    target_layer: str = "FC1"
    distill_epochs: int = None  # None -> epochs // 2
    init_from_teacher: bool = False
    distill_optimizer: str = "adam"  # None -> optimizer
    distill_learning_rate: float = 1e-3  # None -> learning_rate
    distill_optimizer_kwargs: dict = None  # None -> optimizer_kwargs

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ValidationError("epochs", "must be an integer >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size", "must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate", "must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError("optimizer", f"unknown optimizer {self.optimizer!r}")
        if self.distill_optimizer not in (None, "sgd", "adam"):
            raise ValidationError("distill_optimizer", f"unknown optimizer {self.distill_optimizer!r}")
        if self.target_layer not in LAYERS:
            raise ValidationError("target_layer", f"must be one of {LAYERS}")
        if self.distill_learning_rate is not None and not self.distill_learning_rate > 0:
            raise ValidationError("distill_learning_rate", "must be positive")
        if self.distill_epochs is not None and not (0 <= self.distill_epochs <= self.epochs):
            raise ValidationError("distill_epochs", "must lie in [0, epochs]")

    @property
    def phase1_epochs(self):
        return self.epochs // 2 if self.distill_epochs is None else self.distill_epochs

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown train field")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def replace(self, **kw):
        return replace(self, **kw)


def _tensors(samples):
    x = torch.as_tensor(np.stack([s.pixels for s in samples]))
    y = torch.as_tensor(np.array([s.label for s in samples], dtype=np.int64))
    return x, y


def _make_optimizer(params, cfg, lr=None, kwargs=None, name=None):
    lr = cfg.learning_rate if lr is None else lr
    kwargs = cfg.optimizer_kwargs if kwargs is None else kwargs
    if (name or cfg.optimizer) == "sgd":
        return torch.optim.SGD(params, lr=lr, **kwargs)
    return torch.optim.Adam(params, lr=lr, **kwargs)


def _batches(n, batch_size, gen):
    perm = torch.randperm(n, generator=gen)
    return [perm[i: i + batch_size] for i in range(0, n, batch_size)]


@torch.no_grad()
def evaluate(model, x, y, batch_size=512):
    model.eval()
    loss, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits = model(x[i: i + batch_size])
        loss += F.cross_entropy(logits, y[i: i + batch_size], reduction="sum").item()
        correct += (logits.argmax(1) == y[i: i + batch_size]).sum().item()
    return loss / len(x), correct / len(x)


@torch.no_grad()
def distill_loss(student, teacher, layer, x, batch_size=512):
    tot = 0.0
    for i in range(0, len(x), batch_size):
        xb = x[i: i + batch_size]
        tot += ((feature_at(teacher, layer, xb) - feature_at(student, layer, xb)) ** 2).sum().item()
    return tot / len(x)


def _check_finite(value, epoch, what):
    if not np.isfinite(value):
        raise TrainingError(epoch, f"non-finite {what} ({value})")


def _check_labels(samples, spec):
    labels = {s.label for s in samples}
    if max(labels) >= spec.num_classes:
        raise ValidationError("fc_dims", f"FC3 width {spec.num_classes} < number of labels")


def _ce_epoch(model, params, opt, x, y, cfg, gen, epoch):
    model.train()
    total = 0.0
    for idx in _batches(len(x), cfg.batch_size, gen):
        loss = F.cross_entropy(model(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += loss.item() * len(idx)
    total /= len(x)
    _check_finite(total, epoch, "classification loss")
    return total


def _classifier_run(train, net_spec, cfg, val, role):
    if not train:
        raise ValidationError("dataset", "training set is empty")
    _check_labels(train, net_spec)
    x, y = _tensors(train)
    xv, yv = _tensors(val) if val else (None, None)
    model = build_net(net_spec)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = list(model.parameters())
    opt = _make_optimizer(params, cfg)
    snapshots = [get_flat(model)]
    hist = {"train_loss": [], "train_acc": [], "val_loss": [], "val_acc": [], "phase": []}
    for epoch in range(1, cfg.epochs + 1):
        _ce_epoch(model, params, opt, x, y, cfg, gen, epoch)
        _record(hist, model, x, y, xv, yv, "classify")
        snapshots.append(get_flat(model))
        log.info("%s epoch %d: train_loss=%.4f val_acc=%s", role, epoch, hist["train_loss"][-1],
                 hist["val_acc"][-1])
    return CheckpointSeries(net_spec, snapshots, _metadata(role, cfg, hist))


def _record(hist, model, x, y, xv, yv, phase):
    tl, ta = evaluate(model, x, y)
    hist["train_loss"].append(tl)
    hist["train_acc"].append(ta)
    if xv is not None:
        vl, va = evaluate(model, xv, yv)
    else:
        vl, va = None, None
    hist["val_loss"].append(vl)
    hist["val_acc"].append(va)
    hist["phase"].append(phase)


def _metadata(role, cfg, hist):
    return {"role": role, "train_config": cfg.to_dict(), "history": hist}


def train_teacher(train, net_spec: NetSpec, config: TrainConfig, val=None) -> CheckpointSeries:
    """Cross-entropy training from scratch; snapshots ``w_0..w_M``."""
    return _classifier_run(train, net_spec, config, val, "teacher")


def train_baseline(train, net_spec: NetSpec, config: TrainConfig, val=None) -> CheckpointSeries:
    """Same protocol as the teacher, using the student's architecture and its own seed."""
    return _classifier_run(train, net_spec, config, val, "baseline")


def distill_student(teacher: CheckpointSeries, train, config: TrainConfig, val=None,
                    net_spec: NetSpec = None) -> CheckpointSeries:
    """Two-phase feature distillation at ``config.target_layer``.

    Phase 1 (``config.phase1_epochs`` epochs) updates only the parameters at and
    below the target layer, minimising the batch mean of
    ``||f_T(x) - f_S(x)||^2``; labels are never read. Phase 2 freezes those
    parameters and trains the layers above with cross-entropy.

    With ``phase1_epochs == 0`` there is no distillation and nothing is frozen,
    so the student is trained exactly like a baseline.
    """
    t_spec = teacher.net_spec
    spec = net_spec or t_spec.with_seed(config.seed)
    if spec.architecture_hash() != t_spec.architecture_hash():
        raise ValidationError("net_spec", "student architecture does not match the teacher")
    if not train:
        raise ValidationError("dataset", "training set is empty")
    _check_labels(train, spec)
    layer = config.target_layer
    t_model = teacher.model_at(teacher.epochs)
    for p in t_model.parameters():
        p.requires_grad_(False)

    x, y = _tensors(train)
    xv, yv = _tensors(val) if val else (None, None)
    if config.init_from_teacher:
        model = teacher.model_at(teacher.epochs)
    else:
        model = build_net(spec)
    gen = torch.Generator().manual_seed(config.seed)
    hist = {"train_loss": [], "train_acc": [], "val_loss": [], "val_acc": [], "phase": [],
            "distill_loss": [], "distill_loss_initial": distill_loss(model, t_model, layer, x)}
    snapshots = [get_flat(model)]
    n1 = config.phase1_epochs

    if n1 == 0:
        params = list(model.parameters())
        opt = _make_optimizer(params, config)
        for epoch in range(1, config.epochs + 1):
            _ce_epoch(model, params, opt, x, y, config, gen, epoch)
            _record(hist, model, x, y, xv, yv, "classify")
            hist["distill_loss"].append(None)
            snapshots.append(get_flat(model))
        return CheckpointSeries(spec, snapshots, _metadata("student", config, hist))

    lower = model.params_up_to(layer)
    upper = model.params_above(layer)
    opt = _make_optimizer(lower, config, config.distill_learning_rate,
                          config.distill_optimizer_kwargs, config.distill_optimizer)
    for p in upper:
        p.requires_grad_(False)
    for epoch in range(1, n1 + 1):
        model.train()
        for idx in _batches(len(x), config.batch_size, gen):
            xb = x[idx]
            loss = ((feature_at(t_model, layer, xb) - feature_at(model, layer, xb)) ** 2).sum(1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        dl = distill_loss(model, t_model, layer, x)
        _check_finite(dl, epoch, "distillation loss")
        hist["distill_loss"].append(dl)
        _record(hist, model, x, y, xv, yv, "distill")
        snapshots.append(get_flat(model))
        log.info("student[%s] distill epoch %d: loss=%.5f", layer, epoch, dl)

    for p in lower:
        p.requires_grad_(False)
    for p in upper:
        p.requires_grad_(True)
    if upper:
        opt = _make_optimizer(upper, config)
    for epoch in range(n1 + 1, config.epochs + 1):
        if upper:
            _ce_epoch(model, upper, opt, x, y, config, gen, epoch)
        _record(hist, model, x, y, xv, yv, "classify")
        hist["distill_loss"].append(None)
        snapshots.append(get_flat(model))
    for p in model.parameters():
        p.requires_grad_(True)
    return CheckpointSeries(spec, snapshots, _metadata("student", config, hist))
