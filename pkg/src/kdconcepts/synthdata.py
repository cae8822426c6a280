"""Deterministic synthetic classification images with exact foreground masks.

Each class is a shape family built from parts: a central body disk with
``label + 2`` radial limbs. The background is filled with class-independent
clutter (bars and blobs drawn from the same distribution for every class), so
the only label signal lives on the foreground.
"""

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from kdconcepts._io import load_array, read_json, save_array, write_json
from kdconcepts.errors import SchemaVersionError, ValidationError

MANIFEST_SCHEMA = 1
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 2
    images_per_class: int = 1000
    image_size: int = 32
    fg_area_range: tuple = (0.2, 0.4)
    noise_level: float = 0.05
    seed: int = 0
    channels: int = 1
    grid: int = 16

    def __post_init__(self):
        object.__setattr__(self, "fg_area_range", tuple(float(v) for v in self.fg_area_range))
        self.validate()

    def validate(self):
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ValidationError("num_classes", "must be an integer >= 2")
        if not isinstance(self.images_per_class, int) or self.images_per_class < 1:
            raise ValidationError("images_per_class", "must be an integer >= 1")
        if not isinstance(self.image_size, int) or self.image_size < 4:
            raise ValidationError("image_size", "must be an integer >= 4")
        if len(self.fg_area_range) != 2:
            raise ValidationError("fg_area_range", "must be a pair (min, max)")
        lo, hi = self.fg_area_range
        if not (0.0 < lo < hi < 1.0):
            raise ValidationError("fg_area_range", "need 0 < min < max < 1")
        if not (0.0 <= self.noise_level < 1.0):
            raise ValidationError("noise_level", "must lie in [0, 1)")
        if self.channels not in (1, 3):
            raise ValidationError("channels", "must be 1 or 3")
        if self.grid < 1 or self.image_size % self.grid:
            raise ValidationError("image_size", f"must be divisible by grid={self.grid}")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown dataset field")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["fg_area_range"] = list(self.fg_area_range)
        return d


@dataclass
class ImageSample:
    index: int
    pixels: np.ndarray  # float32 [C, H, W] in [0, 1]
    label: int
    fg_mask: np.ndarray  # bool [H, W]

    @property
    def fg_fraction(self) -> float:
        return float(self.fg_mask.mean())


def _shape_mask(size, cx, cy, scale, n_limbs, theta0, body_r, limb_len, limb_w):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    body = dx * dx + dy * dy <= (body_r * scale) ** 2
    parts = [body]
    for j in range(n_limbs):
        a = theta0 + 2.0 * np.pi * j / n_limbs
        ux, uy = np.cos(a), np.sin(a)
        along = dx * ux + dy * uy
        across = -dx * uy + dy * ux
        parts.append((along >= 0) & (along <= limb_len * scale) & (np.abs(across) <= 0.5 * limb_w * scale))
    return np.logical_or.reduce(parts), parts


def _draw_clutter(img, rng, size):
    for _ in range(int(rng.integers(3, 7))):
        val = rng.uniform(0.2, 0.8)
        cx, cy = rng.uniform(0, size, 2)
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        if rng.random() < 0.5:
            # short bar, same geometry family as a limb
            a = rng.uniform(0, np.pi)
            length = rng.uniform(0.15, 0.35) * size
            width = rng.uniform(1.5, 3.0)
            along = (xx - cx) * np.cos(a) + (yy - cy) * np.sin(a)
            across = -(xx - cx) * np.sin(a) + (yy - cy) * np.cos(a)
            m = (np.abs(along) <= 0.5 * length) & (np.abs(across) <= 0.5 * width)
        else:
            r = rng.uniform(1.0, 0.08 * size)
            m = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[m] = val


def _make_sample(spec: DatasetSpec, index: int, label: int) -> ImageSample:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    lo, hi = spec.fg_area_range
    target = rng.uniform(lo, hi)
    n_limbs = label + 2
    theta0 = rng.uniform(0, 2 * np.pi)
    body_r = rng.uniform(0.10, 0.14) * size
    limb_len = rng.uniform(0.30, 0.38) * size
    limb_w = rng.uniform(0.10, 0.14) * size
    cx, cy = size / 2 + rng.uniform(-0.08, 0.08, 2) * size

    def frac(s):
        return _shape_mask(size, cx, cy, s, n_limbs, theta0, body_r, limb_len, limb_w)[0].mean()

    # nested shapes about a fixed centre: area is monotone in scale
    s_lo, s_hi = 0.05, 4.0
    for _ in range(40):
        mid = 0.5 * (s_lo + s_hi)
        if frac(mid) < target:
            s_lo = mid
        else:
            s_hi = mid
    mask = None
    for s in (s_hi, s_lo, 0.5 * (s_lo + s_hi)):
        m = _shape_mask(size, cx, cy, s, n_limbs, theta0, body_r, limb_len, limb_w)
        if lo <= m[0].mean() <= hi:
            mask, parts = m
            break
    if mask is None:
        raise ValidationError("fg_area_range", f"cannot realise area fraction for sample {index}")

    img = np.full((size, size), rng.uniform(0.0, 0.3))
    _draw_clutter(img, rng, size)
    body_val = rng.uniform(0.6, 0.95)
    limb_val = np.clip(body_val + rng.uniform(-0.25, -0.1), 0.3, 1.0)
    for p in parts[1:]:
        img[p] = limb_val
    img[parts[0]] = body_val
    if spec.noise_level > 0:
        img = img + rng.normal(0.0, spec.noise_level, img.shape)
    img = np.clip(img, 0.0, 1.0)

    if spec.channels == 3:
        tint = rng.uniform(0.7, 1.0, 3)
        pixels = img[None] * tint[:, None, None]
    else:
        pixels = img[None]
    return ImageSample(index=index, pixels=pixels.astype(np.float32), label=label, fg_mask=mask)


def generate_dataset(spec: DatasetSpec):
    """Generate ``num_classes * images_per_class`` samples and a manifest.

    Labels are interleaved (sample ``i`` has label ``i % num_classes``). Every
    sample is generated from its own seed derived from ``(spec.seed, i)``.
    """
    if isinstance(spec, dict):
        spec = DatasetSpec.from_dict(spec)
    spec.validate()
    n = spec.num_classes * spec.images_per_class
    samples = [_make_sample(spec, i, i % spec.num_classes) for i in range(n)]
    counts = {str(c): spec.images_per_class for c in range(spec.num_classes)}
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "spec": spec.to_dict(),
        "counts": counts,
        "samples": [{"id": s.index, "label": s.label} for s in samples],
    }
    return samples, manifest


def split_dataset(samples, train_fraction, seed):
    """Stratified, deterministic train/validation split."""
    if not (0.0 < train_fraction < 1.0):
        raise ValidationError("train_fraction", "must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    by_label = {}
    for pos, s in enumerate(samples):
        by_label.setdefault(s.label, []).append(pos)
    train_pos, val_pos = [], []
    for label in sorted(by_label):
        pos = np.array(by_label[label])
        perm = rng.permutation(len(pos))
        k = int(round(train_fraction * len(pos)))
        train_pos.extend(pos[perm[:k]].tolist())
        val_pos.extend(pos[perm[k:]].tolist())
    return [samples[i] for i in sorted(train_pos)], [samples[i] for i in sorted(val_pos)]


def save_dataset(samples, manifest, out_dir):
    out = Path(out_dir)
    records = []
    for s in samples:
        px = f"samples/{s.index:06d}_pixels.npy"
        mk = f"samples/{s.index:06d}_mask.npy"
        save_array(out / px, s.pixels)
        save_array(out / mk, s.fg_mask.astype(np.uint8))
        records.append({"id": s.index, "label": s.label, "pixels": px, "mask": mk})
    write_json(out / MANIFEST_NAME, {**manifest, "samples": records})


def load_dataset(data_dir):
    """Load samples written by :func:`save_dataset`; returns ``(samples, manifest)``."""
    root = Path(data_dir)
    manifest = read_json(root / MANIFEST_NAME)
    if manifest.get("schema_version") != MANIFEST_SCHEMA:
        raise SchemaVersionError(manifest.get("schema_version"), MANIFEST_SCHEMA)
    samples = [
        ImageSample(
            index=r["id"],
            pixels=load_array(root / r["pixels"]).astype(np.float32),
            label=int(r["label"]),
            fg_mask=load_array(root / r["mask"]).astype(bool),
        )
        for r in manifest["samples"]
    ]
    return samples, manifest
