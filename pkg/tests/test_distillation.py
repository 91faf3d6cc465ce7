"""Distillation: KD loss oracles, sample filtering, refinement regression."""

import numpy as np
import pytest

from dmm.data import dirichlet_partition, make_blobs, split_by_plan
from dmm.distillation import (
    DistillError,
    DistillJob,
    FilterConfig,
    entropy,
    filter_samples,
    kd_loss,
    mean_kl,
    refine,
)
from dmm.inversion import InversionConfig, synthesize
from dmm.merging import plan_and_merge
from dmm.network import TrainConfig, init_checkpoint, mlp_spec, predict_proba, train
from dmm.tensor import Tensor, grad_check


def logits_for(probs):
    return Tensor(np.log(np.asarray(probs, dtype=np.float32)))


class TestKdLoss:
    def test_zero_at_equality(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((8, 4)).astype(np.float32)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        loss = kd_loss(p, Tensor(logits), 1.0)
        assert 0.0 <= loss.item() <= 1e-7

    def test_hand_case(self):
        # 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1) = 0.5108256...
        loss = kd_loss(np.array([[0.5, 0.5]]), logits_for([[0.9, 0.1]]), 1.0)
        np.testing.assert_allclose(loss.item(), 0.5108256, rtol=1e-5)

    def test_nonnegative_random_cases(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            b, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
            p_t = rng.dirichlet(np.ones(c), size=b)
            s = rng.standard_normal((b, c)).astype(np.float32)
            assert kd_loss(p_t, Tensor(s), float(rng.uniform(0.5, 4))).item() >= 0.0

    def test_gradient_matches_finite_differences(self):
        p_t = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4], [0.25, 0.5, 0.25]])
        for seed in range(10):
            err = grad_check(lambda s: kd_loss(p_t, s, 2.0), [(4, 3)], seed=seed)
            assert err <= 1e-4

    def test_unnormalized_teacher_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            kd_loss(np.array([[0.5, 0.6]]), logits_for([[0.5, 0.5]]), 1.0)

    def test_mean_kl_agrees_with_graph_loss(self):
        rng = np.random.default_rng(2)
        p_t = rng.dirichlet(np.ones(3), size=6)
        logits = rng.standard_normal((6, 3)).astype(np.float32)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p_s = e / e.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(
            mean_kl(p_t, p_s), kd_loss(p_t, Tensor(logits), 1.0).item(), rtol=1e-4
        )


class TestFilterSamples:
    def test_extremes(self):
        cfg = FilterConfig(0.9, 0.5, min_kept=0)
        teacher = np.array([[1.0, 0.0]])
        student = np.array([[0.5, 0.5]])
        assert filter_samples(teacher, student, cfg).mask.all()

    def test_uniform_teacher_dropped(self):
        cfg = FilterConfig(0.6, 0.0, min_kept=0)
        teacher = np.array([[0.5, 0.5], [0.5, 0.5]])
        student = np.array([[0.5, 0.5], [0.9, 0.1]])
        result = filter_samples(teacher, student, cfg)
        assert not result.mask.any()

    def test_entropy_hand_case(self):
        # H(0.6, 0.4) = 0.67301 >= 0.9 ln 2 = 0.62383, teacher 0.85 >= 0.8
        np.testing.assert_allclose(entropy(np.array([[0.6, 0.4]])), [0.6730117], rtol=1e-6)
        cfg = FilterConfig(0.8, 0.9, min_kept=0)
        result = filter_samples(np.array([[0.85, 0.15]]), np.array([[0.6, 0.4]]), cfg)
        assert result.mask.all() and not result.relaxed

    def test_monotone_in_thresholds(self):
        rng = np.random.default_rng(3)
        teacher = rng.dirichlet(np.ones(3), size=60)
        student = rng.dirichlet(np.ones(3), size=60)
        for lo, hi in ((0.4, 0.6), (0.5, 0.9)):
            loose = filter_samples(teacher, student, FilterConfig(lo, 0.3, 0)).mask
            tight = filter_samples(teacher, student, FilterConfig(hi, 0.3, 0)).mask
            assert not np.any(tight & ~loose)
            loose_h = filter_samples(teacher, student, FilterConfig(0.5, lo, 0)).mask
            tight_h = filter_samples(teacher, student, FilterConfig(0.5, hi, 0)).mask
            assert not np.any(tight_h & ~loose_h)

    def test_relaxation_keeps_top_min_kept(self):
        teacher = np.array([[0.99, 0.01], [0.95, 0.05], [0.55, 0.45], [0.52, 0.48]])
        student = np.array([[0.99, 0.01], [0.98, 0.02], [0.97, 0.03], [0.96, 0.04]])
        cfg = FilterConfig(0.9, 0.9, min_kept=2)  # nothing passes outright
        result = filter_samples(teacher, student, cfg)
        assert result.relaxed
        assert result.mask.sum() == 2
        assert result.mask[0] and result.mask[1]  # highest-confidence teachers


@pytest.fixture(scope="module")
def distill_suite():
    # frozen single-teacher refinement suite
    train_ds, test_ds = make_blobs(3, 4, 80, 0.6, seed=0)
    plan = dirichlet_partition(train_ds, 2, 0.1, seed=0, min_size=20)
    parts = split_by_plan(train_ds, plan)
    spec = mlp_spec(4, [8], 3)
    w0 = init_checkpoint(spec, 0)
    models = [
        train(w0, part, TrainConfig(lr=0.05, batch_size=8, epochs=15, seed=10 + k))
        for k, part in enumerate(parts)
    ]
    merged, _ = plan_and_merge(models, w0)
    pseudo = synthesize(merged, InversionConfig(batch_size=96, steps=150, lr=0.05, seed=0))
    holdout = synthesize(merged, InversionConfig(batch_size=96, steps=150, lr=0.05, seed=99))
    return models, merged, pseudo, holdout


class TestRefine:
    def test_holdout_kl_halves(self, distill_suite):
        models, merged, pseudo, holdout = distill_suite
        job = DistillJob(
            student=merged, teachers=[models[0]], pseudo=[pseudo],
            steps=150, lr=0.02, batch_size=48, seed=0,
        )
        refined, report = refine(job, holdout=holdout)
        assert report["post_kl"] <= 0.5 * report["pre_kl"]
        assert report["kept_counts"][0] > 0

    def test_zero_lr_identity(self, distill_suite):
        models, merged, pseudo, _ = distill_suite
        job = DistillJob(
            student=merged, teachers=[models[0]], pseudo=[pseudo],
            steps=5, lr=0.0, batch_size=32, seed=0,
        )
        refined, _ = refine(job)
        for k in merged.params:
            assert (refined.params[k] == merged.params[k]).all()

    def test_buffers_bit_identical(self, distill_suite):
        models, merged, pseudo, _ = distill_suite
        job = DistillJob(
            student=merged, teachers=[models[0]], pseudo=[pseudo],
            steps=20, lr=0.02, batch_size=32, seed=1,
        )
        refined, _ = refine(job)
        for i in merged.buffers:
            assert (refined.buffers[i].mean == merged.buffers[i].mean).all()
            assert (refined.buffers[i].var == merged.buffers[i].var).all()
            assert refined.buffers[i].count == merged.buffers[i].count

    def test_deterministic(self, distill_suite):
        models, merged, pseudo, _ = distill_suite
        job = dict(student=merged, teachers=[models[0]], pseudo=[pseudo],
                   steps=10, lr=0.02, batch_size=32, seed=2)
        a, _ = refine(DistillJob(**job))
        b, _ = refine(DistillJob(**job))
        for k in a.params:
            assert (a.params[k] == b.params[k]).all()

    def test_no_transferable_samples(self, distill_suite):
        models, merged, pseudo, _ = distill_suite
        job = DistillJob(
            student=merged, teachers=[models[0]], pseudo=[pseudo],
            steps=5, lr=0.01,
            filter_config=FilterConfig(0.999, 1.0, min_kept=0),
        )
        with pytest.raises(DistillError, match="transferable"):
            refine(job)

    def test_teacher_spec_mismatch(self, distill_suite):
        models, merged, pseudo, _ = distill_suite
        other = init_checkpoint(mlp_spec(4, [12], 3), 0)
        job = DistillJob(student=merged, teachers=[other], pseudo=[pseudo], steps=1, lr=0.01)
        with pytest.raises(DistillError, match="spec"):
            refine(job)

    def test_needs_teachers(self):
        with pytest.raises(ValueError, match="teacher"):
            DistillJob(student=None, teachers=[], pseudo=[])
