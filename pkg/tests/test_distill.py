from __future__ import annotations

import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import perturbed
from oracles import assert_rel_close, central_difference
from statsmerging import checkpoint as ck
from statsmerging.checkpoint import ArchSpec, Dataset, as_pretrained, init_checkpoint
from statsmerging.distill import (
    DistillConfig,
    PseudoLabeledSet,
    align_architectures,
    batch_kl,
    ce_loss,
    distill_loss_and_grads,
    distill_objective,
    generate_pseudo_labels,
    hetero_distill,
    kl_loss,
    load_pseudo_set,
    save_pseudo_set,
    select_rows,
)
from statsmerging.errors import CompatibilityError, ParameterError, ShapeError
from statsmerging.numerics import make_rng


def test_ce_loss_examples():
    assert ce_loss([1.0, 0.0], 0) == 0.0
    assert ce_loss([0.5, 0.5], 0) == pytest.approx(np.log(2), rel=1e-15)
    assert ce_loss([0.25, 0.75], 1) == pytest.approx(-np.log(0.75), rel=1e-15)
    assert ce_loss([0.25, 0.75], 1) == pytest.approx(0.2877, abs=5e-5)
    assert ce_loss([1.0, 0.0], 1) == pytest.approx(-np.log(1e-12))
    with pytest.raises(ParameterError):
        ce_loss([0.5, 0.5], 2)


def test_kl_loss_examples():
    assert kl_loss([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert kl_loss([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), rel=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(100):
        p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        assert kl_loss(p, q) >= 0.0
    with pytest.raises(ShapeError):
        kl_loss([0.5, 0.5], [1.0])


def _one_layer(weight, bias=None):
    weight = np.asarray(weight, dtype=np.float64)
    arch = ArchSpec.mlp([weight.shape[1], weight.shape[0]])
    bias = np.zeros((1, weight.shape[0])) if bias is None else np.asarray(bias, dtype=np.float64).reshape(1, -1)
    return init_checkpoint(arch, 0).with_params([weight, bias], role="task")


def test_pseudo_labels_from_logits():
    teacher = _one_layer(np.zeros((2, 1)), [2.0, 0.5])
    ps = generate_pseudo_labels([teacher], [np.ones((5, 1))], fraction=1.0)
    e = np.exp(1.5)
    np.testing.assert_allclose(ps.soft_label, np.tile([e / (e + 1), 1 / (e + 1)], (5, 1)), rtol=1e-15)
    np.testing.assert_allclose(ps.soft_label[0], [0.8176, 0.1824], atol=5e-5)
    assert not ps.hard_label.any() and ps.label_source == "teacher"


def test_pseudo_labels_sizes_and_ties():
    teacher = init_checkpoint(ArchSpec.mlp([3, 4]), 0, zero=True)
    x = np.random.default_rng(1).standard_normal((40, 3))
    ps = generate_pseudo_labels([teacher], [x], fraction=1.0)
    assert len(ps) == 40
    np.testing.assert_array_equal(ps.soft_label, np.full((40, 4), 0.25))
    assert not ps.hard_label.any()
    two = generate_pseudo_labels([teacher, teacher], [x, x[:10]], fraction=0.5, seed=3)
    assert len(two) == 20 + 5
    np.testing.assert_array_equal(two.source_task, [0] * 20 + [1] * 5)
    assert two == generate_pseudo_labels([teacher, teacher], [x, x[:10]], fraction=0.5, seed=3)


def test_pseudo_label_invariants():
    base = as_pretrained(init_checkpoint(ArchSpec.mlp([3, 6, 4]), 2))
    teachers = [perturbed(base, s, scale=1.0) for s in range(3)]
    rng = np.random.default_rng(0)
    ps = generate_pseudo_labels(teachers, [rng.standard_normal((30, 3)) for _ in range(3)], 0.3, seed=1)
    np.testing.assert_allclose(ps.soft_label.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(ps.hard_label, np.argmax(ps.soft_label, axis=1))


def test_generator_never_sees_labels():
    params = inspect.signature(generate_pseudo_labels).parameters
    assert "labels" not in " ".join(params)
    # a Dataset is refused: only bare input matrices are accepted
    ds = Dataset(np.ones((4, 3)), [0, 1, 2, 3], 4)
    teacher = init_checkpoint(ArchSpec.mlp([3, 4]), 0)
    with pytest.raises((TypeError, ValueError)):
        generate_pseudo_labels([teacher], [ds], 1.0)


def test_perfect_teacher_labels_match_ground_truth():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, 300)
    x = rng.standard_normal((300, 2)) + 4.0 * np.where(labels[:, None] == 1, 1.0, -1.0)
    train = Dataset(x, labels, 2)
    base = as_pretrained(init_checkpoint(ArchSpec.mlp([2, 8, 2]), 0))
    teacher = ck.fine_tune(base, train, 50, 1e-2, 0)
    assert np.mean(np.argmax(ck.forward(teacher, x), axis=1) == labels) == 1.0
    ps = generate_pseudo_labels([teacher], [x], 1.0)
    np.testing.assert_array_equal(ps.hard_label, labels)


def test_select_rows():
    rows = select_rows(10, 0.35, make_rng(0))
    assert rows.size == 4 and np.all(np.diff(rows) > 0)
    with pytest.raises(ParameterError):
        select_rows(3, 0.1, make_rng(0))
    with pytest.raises(ParameterError):
        select_rows(3, 0.0, make_rng(0))


def test_pseudo_set_validation_and_roundtrip(tmp_path):
    with pytest.raises(ShapeError):
        PseudoLabeledSet(np.ones((2, 3)), [0, 0], [0, 1], np.ones((3, 2)) / 2, 2)
    base = as_pretrained(init_checkpoint(ArchSpec.mlp([3, 4]), 2))
    ps = generate_pseudo_labels([perturbed(base, 1)], [np.random.default_rng(0).standard_normal((9, 3))], 1.0)
    save_pseudo_set(ps, tmp_path / "p.smrg")
    back = load_pseudo_set(tmp_path / "p.smrg")
    assert back == ps
    np.testing.assert_array_equal(back.soft_label, ps.soft_label)


def test_distill_weights():
    cfg = DistillConfig()
    assert cfg.alpha == 0.7 and cfg.temperature == 4.0
    rng = np.random.default_rng(3)
    zs, zt = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    y = rng.integers(0, 5, 6)
    ce_only, _ = distill_objective(zs, zt, y, 1.0, 4.0)
    kl_only, _ = distill_objective(zs, zt, y, 0.0, 4.0)
    mixed, _ = distill_objective(zs, zt, y, 0.7, 4.0)
    assert mixed == pytest.approx(0.7 * ce_only + 0.3 * kl_only, rel=1e-12)
    kl_raw = batch_kl(ck.softmax(zt, 4.0), ck.softmax(zs, 4.0))
    assert kl_only == pytest.approx(16.0 * kl_raw, rel=1e-12)
    assert (1 - 0.7) * 4.0**2 == pytest.approx(4.8)


def test_distill_identical_teacher_student_is_stationary():
    base = as_pretrained(init_checkpoint(ArchSpec.mlp([2, 3, 2]), 1))
    x = np.random.default_rng(0).standard_normal((5, 2))
    teacher_logits = ck.logits(base, x)
    loss, grads = distill_loss_and_grads(base, teacher_logits, x, np.zeros(5, dtype=int), 0.0, 1.0)
    assert loss == 0.0
    assert all(not g.any() for g in grads)


def test_distill_temperature_limit():
    rng = np.random.default_rng(1)
    zs, zt = rng.standard_normal((4, 3)), 5 * rng.standard_normal((4, 3))
    assert batch_kl(ck.softmax(zt, 1e6), ck.softmax(zs, 1e6)) <= 1e-6


def test_distill_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    student = perturbed(as_pretrained(init_checkpoint(ArchSpec.mlp([2, 4, 2]), 3)), 1, scale=0.3)
    x = rng.standard_normal((6, 2))
    y = rng.integers(0, 2, 6)
    zt = rng.standard_normal((6, 2)) * 2
    _, grads = distill_loss_and_grads(student, zt, x, y, 0.5, 2.0)
    analytic = np.concatenate([g.ravel() for g in grads])

    def loss(vec):
        return distill_loss_and_grads(student.from_flat(vec), zt, x, y, 0.5, 2.0)[0]

    numeric = central_difference(loss, student.flat(), h=1e-6)
    assert_rel_close(analytic, numeric, rel=1e-4)


def _blobs(seed, n=200, dim=4, classes=3):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n)
    centers = 3.0 * rng.standard_normal((classes, dim))
    return Dataset(centers[labels] + 0.5 * rng.standard_normal((n, dim)), labels, classes)


def test_hetero_distill_contract():
    data = _blobs(0)
    teacher_base = as_pretrained(init_checkpoint(ArchSpec.mlp([4, 16, 16, 3]), 1))
    teacher = ck.fine_tune(teacher_base, data, 30, 5e-3, 0, task_id="t0")
    student_init = as_pretrained(init_checkpoint(ArchSpec.mlp([4, 8, 8, 8, 3]), 2))
    cfg = DistillConfig(epochs=60, lr=5e-3)
    student = hetero_distill(teacher, student_init, data, cfg)
    assert student.arch == student_init.arch and student.meta.role == "distilled"
    assert student.meta.base_fingerprint == student_init.meta.base_fingerprint
    assert student.meta.task_id == "t0"
    acc_t = np.mean(np.argmax(ck.forward(teacher, data.inputs), 1) == data.labels)
    acc_s = np.mean(np.argmax(ck.forward(student, data.inputs), 1) == data.labels)
    assert acc_s >= acc_t - 0.05
    assert student == hetero_distill(teacher, student_init, data, cfg)


def test_hetero_distill_alpha_one_is_supervised_training():
    data = _blobs(1, n=64)
    init = as_pretrained(init_checkpoint(ArchSpec.mlp([4, 5, 3]), 2))
    teacher_a = perturbed(init, 1, scale=2.0)
    teacher_b = perturbed(init, 2, scale=2.0)
    cfg = DistillConfig(alpha=1.0, epochs=3)
    assert hetero_distill(teacher_a, init, data, cfg) == hetero_distill(teacher_b, init, data, cfg)


def test_hetero_distill_errors():
    data = _blobs(0)
    init = as_pretrained(init_checkpoint(ArchSpec.mlp([4, 5, 3]), 2))
    with pytest.raises(CompatibilityError):
        hetero_distill(init_checkpoint(ArchSpec.mlp([4, 2]), 0), init, data)
    with pytest.raises(ParameterError):
        DistillConfig(alpha=1.5)
    with pytest.raises(ParameterError):
        DistillConfig(temperature=0.0)


def test_align_architectures_branches():
    data = _blobs(0, n=60)
    target = as_pretrained(init_checkpoint(ArchSpec.mlp([4, 5, 3]), 2))
    same = [perturbed(target, 1), perturbed(target, 2)]
    assert align_architectures(same, target, [data, data]) == same
    foreign = init_checkpoint(ArchSpec.mlp([4, 9, 3]), 5)
    out = align_architectures([same[0], foreign], target, [data, data], DistillConfig(epochs=2))
    assert out[0] is same[0]
    assert out[1].arch == target.arch and ck.merge_compatible(out[0], out[1])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_kl_is_nonnegative(c, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(c)), rng.dirichlet(np.ones(c))
    assert kl_loss(p, q) >= 0.0
