import dataclasses

import numpy as np
import pytest

from kdconcepts.errors import TrainingError, ValidationError
from kdconcepts.nets import NetSpec, build_net, flat_slice
from kdconcepts.trainer import TrainConfig, distill_student, train_baseline, train_teacher

CFG = TrainConfig(epochs=4, batch_size=16, learning_rate=0.05, seed=1)


@pytest.fixture(scope="module")
def teacher(tiny_data, tiny_net):
    _, _, train, val = tiny_data
    return train_teacher(train, tiny_net.with_seed(7), CFG.replace(seed=7), val)


def test_teacher_records_all_epochs(teacher):
    assert teacher.epochs == 4 and len(teacher.snapshots) == 5
    h = teacher.metadata["history"]
    assert len(h["train_loss"]) == 4 and h["phase"] == ["classify"] * 4
    assert h["train_loss"][-1] < h["train_loss"][0] + 1e-9
    assert teacher.metadata["train_config"]["seed"] == 7


def test_training_deterministic(tiny_data, tiny_net):
    _, _, train, _ = tiny_data
    a = train_baseline(train, tiny_net, CFG)
    b = train_baseline(train, tiny_net, CFG)
    assert all(np.array_equal(x, y) for x, y in zip(a.snapshots, b.snapshots))


@pytest.mark.parametrize("layer", ["FC1", "FC2"])
def test_phase_structure(teacher, tiny_data, layer):
    _, _, train, _ = tiny_data
    s = distill_student(teacher, train, CFG.replace(target_layer=layer, distill_epochs=2))
    net = build_net(s.net_spec)
    lo = flat_slice(net, layer)
    up = slice(lo.stop, None)
    w = s.snapshots
    # phase 1: upper params untouched, lower params move
    assert np.array_equal(w[0][up], w[2][up])
    assert not np.array_equal(w[0][lo], w[2][lo])
    # phase 2: lower params frozen bitwise, upper params move
    for k in (3, 4):
        assert np.array_equal(w[2][lo], w[k][lo])
    assert not np.array_equal(w[2][up], w[4][up])
    h = s.metadata["history"]
    assert h["phase"] == ["distill", "distill", "classify", "classify"]
    assert h["distill_loss"][1] < h["distill_loss_initial"]


def test_phase1_ignores_labels(teacher, tiny_data):
    _, _, train, _ = tiny_data
    perm = np.random.default_rng(0).permutation(len(train))
    shuffled = [dataclasses.replace(s, label=train[perm[i]].label) for i, s in enumerate(train)]
    cfg = CFG.replace(distill_epochs=2)
    a = distill_student(teacher, train, cfg)
    b = distill_student(teacher, shuffled, cfg)
    for k in range(3):
        assert np.array_equal(a.snapshots[k], b.snapshots[k])


def test_copy_of_teacher_has_zero_distill_loss(teacher, tiny_data):
    _, _, train, _ = tiny_data
    s = distill_student(teacher, train, CFG.replace(init_from_teacher=True, distill_epochs=1))
    assert s.metadata["history"]["distill_loss_initial"] < 1e-8


def test_zero_distill_epochs_is_baseline(teacher, tiny_data, tiny_net):
    _, _, train, _ = tiny_data
    cfg = CFG.replace(seed=3, distill_epochs=0)
    s = distill_student(teacher, train, cfg)
    b = train_baseline(train, tiny_net.with_seed(3), cfg)
    assert all(np.array_equal(x, y) for x, y in zip(s.snapshots, b.snapshots))


def test_fc3_target_has_no_phase2(teacher, tiny_data):
    _, _, train, _ = tiny_data
    s = distill_student(teacher, train, CFG.replace(target_layer="FC3", distill_epochs=2))
    assert np.array_equal(s.snapshots[2], s.snapshots[4])


def test_architecture_mismatch(teacher, tiny_data):
    _, _, train, _ = tiny_data
    other = NetSpec(conv_blocks=((4, 3, 2), (4, 3, 2)), fc_dims=(12, 8, 2), image_size=16)
    with pytest.raises(ValidationError):
        distill_student(teacher, train, CFG, net_spec=other)


def test_divergence_raises(tiny_data, tiny_net):
    _, _, train, _ = tiny_data
    with pytest.raises(TrainingError) as ei:
        train_teacher(train, tiny_net, CFG.replace(learning_rate=1e12))
    assert ei.value.epoch >= 1


def test_label_count_check(tiny_data):
    _, _, train, _ = tiny_data
    labels = [dataclasses.replace(s, label=5) for s in train[:4]]
    with pytest.raises(ValidationError):
        train_teacher(labels, NetSpec(conv_blocks=((4, 3, 2),), fc_dims=(8, 8, 2), image_size=16), CFG)


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"learning_rate": 0}, {"optimizer": "rmsprop"},
                                {"target_layer": "FC9"}, {"distill_epochs": 9}])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        TrainConfig(**{**{"epochs": 4}, **kw})
