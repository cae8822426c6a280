"""Small CNNs with three addressable FC layers, plus checkpoint series I/O."""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from kdconcepts._io import atomic_write_bytes, canonical_json, sha256_hex
from kdconcepts.errors import IntegrityError, LayerLookupError, SchemaVersionError, ValidationError

LAYERS = ("FC1", "FC2", "FC3")
CHECKPOINT_SCHEMA = 1
_MAGIC = b"KDCK"

_ACTIVATIONS = {
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
    "softplus": nn.Softplus,
}


@dataclass(frozen=True)
class NetSpec:
    conv_blocks: tuple = ((8, 3, 2), (16, 3, 2), (16, 3, 2))
    fc_dims: tuple = (256, 128, 2)
    activation: str = "relu"
    seed: int = 0
    in_channels: int = 1
    image_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(tuple(int(v) for v in b) for b in self.conv_blocks))
        object.__setattr__(self, "fc_dims", tuple(int(v) for v in self.fc_dims))
        self.validate()

    @property
    def num_classes(self):
        return self.fc_dims[2]

    def validate(self):
        if len(self.fc_dims) != 3:
            raise ValidationError("fc_dims", "exactly three FC widths (FC1, FC2, FC3) are required")
        if any(d < 1 for d in self.fc_dims):
            raise ValidationError("fc_dims", "widths must be positive")
        if self.fc_dims[2] < 2:
            raise ValidationError("fc_dims", "FC3 width is the class count and must be >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ValidationError("activation", f"unknown activation {self.activation!r}")
        for b in self.conv_blocks:
            if len(b) != 3 or min(b) < 1:
                raise ValidationError("conv_blocks", f"bad block {b}; need (out_channels, kernel, stride)")
        if self.conv_output_size() < 1:
            raise ValidationError("conv_blocks", "conv stack reduces the image to nothing")

    def conv_output_size(self):
        side = self.image_size
        for _, k, s in self.conv_blocks:
            side = (side + 2 * (k // 2) - k) // s + 1
        return side

    def with_seed(self, seed):
        return NetSpec(**{**self.to_dict(), "seed": seed})

    def to_dict(self):
        d = asdict(self)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        d["fc_dims"] = list(self.fc_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown net field")
        return cls(**d)

    def architecture_hash(self):
        d = self.to_dict()
        d.pop("seed")
        return sha256_hex(canonical_json(d).encode())[:16]

    def spec_hash(self):
        return sha256_hex(canonical_json(self.to_dict()).encode())[:16]


class ConceptNet(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        act = _ACTIVATIONS[spec.activation]
        layers = []
        c_in = spec.in_channels
        for c_out, k, s in spec.conv_blocks:
            layers += [nn.Conv2d(c_in, c_out, k, stride=s, padding=k // 2), act()]
            c_in = c_out
        self.conv = nn.Sequential(*layers)
        flat = c_in * spec.conv_output_size() ** 2
        d1, d2, d3 = spec.fc_dims
        self.fc1 = nn.Linear(flat, d1)
        self.fc2 = nn.Linear(d1, d2)
        self.fc3 = nn.Linear(d2, d3)
        self.act = act()
        gain = "relu" if spec.activation == "relu" else "linear"
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity=gain)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return self.features(x, "FC3")

    def features(self, x, layer="FC3"):
        depth = layer_index(layer)
        h = self.act(self.fc1(self.conv(x).flatten(1)))
        if depth == 0:
            return h
        h = self.act(self.fc2(h))
        if depth == 1:
            return h
        return self.fc3(h)

    def groups(self):
        """Parameter groups in declaration order: conv, FC1, FC2, FC3."""
        return [list(self.conv.parameters()), list(self.fc1.parameters()),
                list(self.fc2.parameters()), list(self.fc3.parameters())]

    def params_up_to(self, layer):
        """Parameters at and below ``layer`` (everything the layer's feature depends on)."""
        g = self.groups()
        return [p for grp in g[: layer_index(layer) + 2] for p in grp]

    def params_above(self, layer):
        g = self.groups()
        return [p for grp in g[layer_index(layer) + 2:] for p in grp]


def layer_index(layer):
    try:
        return LAYERS.index(layer)
    except ValueError:
        raise LayerLookupError(f"unknown layer {layer!r}; expected one of {LAYERS}") from None


def build_net(spec: NetSpec) -> ConceptNet:
    if isinstance(spec, dict):
        spec = NetSpec.from_dict(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        model = ConceptNet(spec)
    return model


def feature_at(model, layer_id, x):
    """Post-activation feature of ``layer_id``; FC3 is returned without activation (logits)."""
    return model.features(x, layer_id)


def get_flat(model) -> np.ndarray:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().cpu().numpy().copy()


def set_flat(model, vec):
    t = torch.as_tensor(np.asarray(vec), dtype=next(model.parameters()).dtype)
    torch.nn.utils.vector_to_parameters(t, model.parameters())


def flat_slice(model, layer):
    """Index range of the flat vector covering parameters at and below ``layer``."""
    n = sum(p.numel() for p in model.params_up_to(layer))
    return slice(0, n)


def num_params(model):
    return sum(p.numel() for p in model.parameters())


@dataclass
class CheckpointSeries:
    """Per-epoch parameter snapshots ``w_0..w_M`` of one network."""

    net_spec: NetSpec
    snapshots: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def epochs(self):
        return len(self.snapshots) - 1

    def model_at(self, epoch) -> ConceptNet:
        model = build_net(self.net_spec)
        set_flat(model, self.snapshots[epoch])
        model.eval()
        return model

    def validate(self):
        if not self.snapshots:
            raise ValidationError("snapshots", "series is empty")
        n = self.snapshots[0].size
        if any(s.size != n for s in self.snapshots):
            raise ValidationError("snapshots", "snapshot dimensionality differs across epochs")
        if not np.linalg.norm(self.snapshots[0].astype(np.float64)) > 0:
            raise ValidationError("snapshots", "initial parameter norm is zero")


def save_checkpoint(series: CheckpointSeries, path):
    """Write ``magic | u32 header length | JSON header | float32 snapshots | sha256``."""
    series.validate()
    arr = np.stack([np.asarray(s, dtype="<f4") for s in series.snapshots])
    header = {
        "schema_version": CHECKPOINT_SCHEMA,
        "spec_hash": series.net_spec.spec_hash(),
        "architecture_hash": series.net_spec.architecture_hash(),
        "net_spec": series.net_spec.to_dict(),
        "epochs": series.epochs,
        "num_params": int(arr.shape[1]),
        "dtype": "<f4",
        "metadata": series.metadata,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = _MAGIC + struct.pack("<I", len(hb)) + hb + arr.tobytes()
    atomic_write_bytes(path, body + bytes.fromhex(sha256_hex(body)))


def load_checkpoint(path) -> CheckpointSeries:
    raw = Path(path).read_bytes()
    if len(raw) < 40 or raw[:4] != _MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if bytes.fromhex(sha256_hex(body)) != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack("<I", body[4:8])
    header = json.loads(body[8: 8 + hlen])
    if header.get("schema_version") != CHECKPOINT_SCHEMA:
        raise SchemaVersionError(header.get("schema_version"), CHECKPOINT_SCHEMA)
    spec = NetSpec.from_dict(header["net_spec"])
    if spec.spec_hash() != header["spec_hash"]:
        raise IntegrityError(f"{path}: spec hash does not match stored net spec")
    arr = np.frombuffer(body[8 + hlen:], dtype=header["dtype"])
    arr = arr.reshape(header["epochs"] + 1, header["num_params"]).astype(np.float32)
    return CheckpointSeries(spec, [row.copy() for row in arr], header["metadata"])
