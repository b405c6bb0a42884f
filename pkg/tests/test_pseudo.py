import numpy as np
import pytest

from mscada.model import ModelConfig, init_model, EmaTeacher
from mscada.pseudo import (
    ClassRegistry,
    StrongTransform,
    apply_strong_transform,
    class_filter,
    confidence_gate,
    fuse_predictions,
    fuse_teacher_predictions,
    identity_transform,
    sample_strong_transform,
    trans_labels,
)
from mscada.tensor import IGNORE_LABEL, InvalidLabelError, Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def probs_to_logits(p):
    return np.log(np.asarray(p, dtype=np.float64))


class TestRegistry:
    def test_subset_required(self):
        with pytest.raises(ValueError):
            ClassRegistry(union_classes=(0, 1, 2), target_classes=(0, 3))

    def test_union_must_be_dense(self):
        with pytest.raises(ValueError):
            ClassRegistry(union_classes=(0, 2, 3), target_classes=(0, 2))

    def test_remap_bijection(self):
        reg = ClassRegistry(tuple(range(6)), (0, 1, 2, 3, 4))
        ids = np.array([0, 1, 2, 3, 4])
        assert np.array_equal(reg.from_target_space(reg.to_target_space(ids)), ids)
        assert reg.outliers == (5,)

    def test_to_target_rejects_outliers(self):
        reg = ClassRegistry(tuple(range(3)), (0, 2))
        with pytest.raises(InvalidLabelError):
            reg.to_target_space(np.array([1]))


class TestFusion:
    def test_hand_case_two_branches(self):
        # branch 1 wins with prob 0.7 on class 0
        b1 = probs_to_logits([[0.7, 0.2, 0.1]]).reshape(1, 1, 3, 1, 1)
        b2 = probs_to_logits([[0.4, 0.5, 0.1]]).reshape(1, 1, 3, 1, 1)
        label, conf = fuse_predictions(np.concatenate([b1, b2]))
        assert label[0, 0, 0] == 0
        assert conf[0, 0, 0] == pytest.approx(0.7, rel=1e-12)

    def test_identical_branches_idempotent(self):
        logits = rng(0).standard_normal((1, 2, 4, 3, 3))
        stack = np.concatenate([logits, logits])
        label, _ = fuse_predictions(stack)
        single, _ = fuse_predictions(logits)
        assert np.array_equal(label, single)

    def test_three_branch_max(self):
        r = rng(1)
        stack = r.standard_normal((3, 2, 5, 4, 4))
        label, conf = fuse_predictions(stack)
        # brute force per pixel
        from mscada.tensor import log_softmax_data
        probs = np.exp(log_softmax_data(stack, axis=2))
        for b in range(2):
            for i in range(4):
                for j in range(4):
                    per_branch = probs[:, b, :, i, j]
                    best = max(range(3), key=lambda k: (per_branch[k].max(), -k))
                    assert conf[b, i, j] == per_branch.max()
                    assert label[b, i, j] == per_branch[best].argmax()

    def test_tie_breaks_to_lower_branch(self):
        p = [[0.6, 0.4]]
        b1 = probs_to_logits(p).reshape(1, 1, 2, 1, 1)
        stack = np.concatenate([b1, b1[::-1][:, :, ::-1]])  # branch2: probs reversed
        label, conf = fuse_predictions(stack)
        # both branches have max prob 0.6; branch 1 (class 0) must win
        assert label[0, 0, 0] == 0

    def test_confidence_monotonic_in_branches(self):
        r = rng(2)
        stack = r.standard_normal((2, 1, 4, 5, 5))
        _, conf2 = fuse_predictions(stack)
        extra = r.standard_normal((1, 1, 4, 5, 5))
        _, conf3 = fuse_predictions(np.concatenate([stack, extra]))
        assert np.all(conf3 >= conf2 - 1e-15)

    def test_teacher_wrapper_shapes(self):
        cfg = ModelConfig(num_sources=2, backbone_channels=4, expert_channels=3,
                          num_union_classes=4, num_target_classes=4, height=8, width=8)
        teacher = EmaTeacher(init_model(cfg, seed=0))
        x = rng(3).uniform(size=(2, 3, 8, 8))
        label, conf = fuse_teacher_predictions(teacher, x)
        assert label.shape == (2, 8, 8)
        assert conf.shape == (2, 8, 8)
        assert label.max() < 4
        assert np.all((conf > 0) & (conf <= 1))

    def test_fusion_strategies_run(self):
        stack = rng(4).standard_normal((2, 1, 3, 4, 4))
        for strat in ("confidence", "best_expert", "summation", "ensemble"):
            label, conf = fuse_predictions(stack, strat)
            assert label.shape == (1, 4, 4)
            assert np.all((0 <= label) & (label < 3))
        with pytest.raises(ValueError, match="unknown fusion"):
            fuse_predictions(stack, "nope")


class TestClassFilter:
    def test_equality_scenario_is_identity(self):
        reg = ClassRegistry(tuple(range(4)), tuple(range(4)))
        labels = rng(5).integers(0, 4, size=(6, 6))
        assert np.array_equal(class_filter(labels, reg), labels)

    def test_outlier_becomes_ignore(self):
        reg = ClassRegistry(tuple(range(6)), tuple(range(5)))
        labels = np.array([[5, 4], [0, 5]])
        out = class_filter(labels, reg)
        assert np.array_equal(out, [[IGNORE_LABEL, 4], [0, IGNORE_LABEL]])

    def test_all_outlier_all_ignored(self):
        reg = ClassRegistry(tuple(range(3)), (0,))
        out = class_filter(np.full((3, 3), 2), reg)
        assert np.all(out == IGNORE_LABEL)

    def test_out_of_union_raises(self):
        reg = ClassRegistry(tuple(range(3)), (0, 1))
        with pytest.raises(InvalidLabelError):
            class_filter(np.array([[9]]), reg)

    def test_output_domain_invariant(self):
        reg = ClassRegistry(tuple(range(6)), (0, 2, 4))
        labels = rng(6).integers(0, 6, size=(50,))
        out = class_filter(labels, reg)
        assert set(np.unique(out)) <= {0, 2, 4, IGNORE_LABEL}


class TestConfidenceGate:
    def test_strictly_greater(self):
        gate = confidence_gate(np.array([0.969, 0.968, 0.967]))
        assert gate.tolist() == [1.0, 0.0, 0.0]

    def test_all_ones(self):
        assert np.all(confidence_gate(np.ones((4, 4))) == 1.0)

    def test_hand_count_3x3(self):
        conf = np.array([[0.99, 0.5, 0.97], [0.968, 1.0, 0.0], [0.9681, 0.2, 0.969]])
        gate = confidence_gate(conf)
        assert gate.sum() == 5.0


class TestStrongTransform:
    def test_identity_unchanged(self):
        t = identity_transform(8, 8)
        img = rng(7).uniform(size=(3, 8, 8))
        labels = rng(8).integers(0, 4, size=(8, 8))
        weights = rng(9).uniform(size=(8, 8))
        assert np.array_equal(apply_strong_transform(t, img), img)
        y2, w2 = trans_labels(t, labels, weights)
        assert np.array_equal(y2, labels)
        assert np.array_equal(w2, weights)

    def test_rot180_involution(self):
        t = StrongTransform(False, False, 2, (0, 0, 8, 8), (1, 1, 1), (0, 0, 0), 0.0)
        labels = rng(10).integers(0, 4, size=(8, 8))
        w = np.ones((8, 8))
        once, _ = trans_labels(t, labels, w)
        twice, _ = trans_labels(t, once, w)
        assert np.array_equal(twice, labels)

    def test_horizontal_flip_index_arithmetic(self):
        t = StrongTransform(True, False, 0, (0, 0, 4, 6), (1, 1, 1), (0, 0, 0), 0.0)
        labels = np.arange(24).reshape(4, 6)
        y2, _ = trans_labels(t, labels, np.ones((4, 6)))
        for r in range(4):
            for c in range(6):
                assert y2[r, c] == labels[r, 6 - 1 - c]

    def test_photometric_never_touches_labels(self):
        t = StrongTransform(False, False, 0, (0, 0, 8, 8), (1.2, 0.8, 1.1),
                            (0.05, -0.05, 0.0), 0.9)
        labels = rng(11).integers(0, 4, size=(8, 8))
        y2, _ = trans_labels(t, labels, np.ones((8, 8)))
        assert np.array_equal(y2, labels)

    def test_crop_resize_labels_stay_valid(self):
        t = StrongTransform(False, True, 1, (2, 1, 5, 5), (1, 1, 1), (0, 0, 0), 0.0)
        labels = rng(12).integers(0, 4, size=(8, 8))
        y2, w2 = trans_labels(t, labels, np.ones((8, 8)))
        assert y2.shape == (8, 8)
        assert set(np.unique(y2)) <= set(range(4)) | {IGNORE_LABEL}
        assert np.all(w2 == 1.0)

    def test_sampling_respects_bounds(self):
        r = rng(13)
        for _ in range(100):
            t = sample_strong_transform(32, 32, r)
            top, left, ch, cw = t.crop
            assert ch >= 8 and cw >= 8
            assert 0 <= top <= 32 - ch
            assert 0 <= left <= 32 - cw
            assert 0 <= t.rot_quarters < 4
            assert all(0.8 <= g <= 1.2 for g in t.gains)
            assert 0.0 <= t.blur_sigma <= 1.0

    def test_nonsquare_restricted_to_half_turns(self):
        r = rng(14)
        rots = {sample_strong_transform(16, 32, r).rot_quarters for _ in range(50)}
        assert rots <= {0, 2}

    def test_image_transform_preserves_range(self):
        r = rng(15)
        img = r.uniform(size=(3, 16, 16))
        for _ in range(20):
            t = sample_strong_transform(16, 16, r)
            out = apply_strong_transform(t, img)
            assert out.shape == (3, 16, 16)
            assert out.min() >= -1e-12 and out.max() <= 1.0 + 1e-12

    def test_trans_commutes_with_class_filter(self):
        reg = ClassRegistry(tuple(range(6)), tuple(range(5)))
        labels = rng(16).integers(0, 6, size=(8, 8))
        t = StrongTransform(True, False, 3, (1, 1, 6, 6), (1, 1, 1), (0, 0, 0), 0.0)
        w = np.ones((8, 8))
        a, _ = trans_labels(t, class_filter(labels, reg), w)
        b = class_filter(trans_labels(t, labels, w)[0], reg)
        assert np.array_equal(a, b)

    def test_remapped_pseudo_labels_index_head(self):
        reg = ClassRegistry(tuple(range(6)), (0, 1, 2, 3, 4))
        fused = rng(17).integers(0, 6, size=(10, 10))
        filtered = class_filter(fused, reg)
        remapped = reg.to_target_space(filtered)
        valid = remapped[remapped != IGNORE_LABEL]
        assert valid.size == 0 or (valid.min() >= 0 and valid.max() < reg.num_target)
