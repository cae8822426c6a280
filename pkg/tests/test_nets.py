import numpy as np
import pytest
import torch

from kdconcepts.errors import IntegrityError, LayerLookupError, SchemaVersionError, ValidationError
from kdconcepts.nets import (CheckpointSeries, NetSpec, build_net, feature_at, flat_slice, get_flat,
                             load_checkpoint, num_params, save_checkpoint, set_flat)


def test_default_shapes():
    net = build_net(NetSpec())
    x = torch.zeros(3, 1, 32, 32)
    assert feature_at(net, "FC1", x).shape == (3, 256)
    assert feature_at(net, "FC2", x).shape == (3, 128)
    assert net(x).shape == (3, 2)


def test_post_activation_features():
    net = build_net(NetSpec(seed=1))
    x = torch.rand(4, 1, 32, 32)
    assert feature_at(net, "FC1", x).min() >= 0
    assert feature_at(net, "FC2", x).min() >= 0
    assert feature_at(net, "FC3", x).min() < 0  # logits are not rectified


def test_build_is_seeded_and_isolated():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = get_flat(build_net(NetSpec(seed=5)))
    after = torch.rand(1)
    b = get_flat(build_net(NetSpec(seed=5)))
    assert np.array_equal(a, b)
    assert torch.equal(before, after)  # global RNG untouched
    assert not np.array_equal(a, get_flat(build_net(NetSpec(seed=6))))


def test_unknown_layer():
    net = build_net(NetSpec())
    with pytest.raises(LayerLookupError):
        feature_at(net, "FC4", torch.zeros(1, 1, 32, 32))


@pytest.mark.parametrize("kw,field", [
    ({"fc_dims": (4, 4)}, "fc_dims"),
    ({"fc_dims": (4, 4, 1)}, "fc_dims"),
    ({"activation": "gelu"}, "activation"),
    ({"conv_blocks": ((4, 3),)}, "conv_blocks"),
])
def test_spec_validation(kw, field):
    with pytest.raises(ValidationError) as ei:
        NetSpec(**kw)
    assert ei.value.field == field


def test_param_partition(tiny_net):
    net = build_net(tiny_net)
    total = num_params(net)
    for layer in ("FC1", "FC2", "FC3"):
        lo, hi = net.params_up_to(layer), net.params_above(layer)
        assert sum(p.numel() for p in lo) + sum(p.numel() for p in hi) == total
        assert flat_slice(net, layer).stop == sum(p.numel() for p in lo)
    assert net.params_above("FC3") == []


def test_flat_roundtrip(tiny_net):
    net = build_net(tiny_net)
    v = get_flat(net) * 2
    set_flat(net, v)
    assert np.array_equal(get_flat(net), v)


def test_architecture_hash_ignores_seed():
    assert NetSpec(seed=1).architecture_hash() == NetSpec(seed=2).architecture_hash()
    assert NetSpec(seed=1).spec_hash() != NetSpec(seed=2).spec_hash()


def _series(spec, n=3):
    net = build_net(spec)
    w = get_flat(net)
    return CheckpointSeries(spec, [w + 0.01 * k for k in range(n)], {"role": "test", "x": [1, 2]})


def test_checkpoint_roundtrip(tmp_path, tiny_net):
    s = _series(tiny_net)
    save_checkpoint(s, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.net_spec == s.net_spec and back.epochs == 2 and back.metadata == s.metadata
    for a, b in zip(s.snapshots, back.snapshots):
        assert np.array_equal(a, b)
    m = back.model_at(1)
    assert np.array_equal(get_flat(m), s.snapshots[1])


def test_checkpoint_corruption(tmp_path, tiny_net):
    p = tmp_path / "a.ckpt"
    save_checkpoint(_series(tiny_net), p)
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(p)
    p.write_bytes(b"garbage")
    with pytest.raises(IntegrityError):
        load_checkpoint(p)


def test_checkpoint_schema(tmp_path, tiny_net, monkeypatch):
    import kdconcepts.nets as nets

    p = tmp_path / "a.ckpt"
    monkeypatch.setattr(nets, "CHECKPOINT_SCHEMA", 7)
    save_checkpoint(_series(tiny_net), p)
    monkeypatch.setattr(nets, "CHECKPOINT_SCHEMA", 1)
    with pytest.raises(SchemaVersionError):
        load_checkpoint(p)


def test_series_validation(tiny_net):
    s = _series(tiny_net)
    s.snapshots[1] = s.snapshots[1][:-1]
    with pytest.raises(ValidationError):
        s.validate()
    z = CheckpointSeries(tiny_net, [np.zeros(num_params(build_net(tiny_net)), np.float32)])
    with pytest.raises(ValidationError):
        z.validate()
