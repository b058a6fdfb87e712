"""Tests for masking, contrastive/diversity losses, and CTC."""

import math

import numpy as np
import pytest

from speechadapt import autodiff as ad
from speechadapt import objectives as obj
from speechadapt.autodiff import Tensor
from speechadapt.errors import ContractError, DegenerateInputError, InfeasibleTargetError


class TestSampleMask:
    def test_zero_probability_forces_exactly_one_span(self):
        plan = obj.sample_mask(50, 0.0, 10, seed=3)
        assert plan.n_masked == 10
        # the masked region is one contiguous run
        runs = np.diff(np.flatnonzero(plan.mask))
        assert np.all(runs == 1)

    def test_probability_one_masks_everything(self):
        plan = obj.sample_mask(20, 1.0, 1, seed=0)
        assert plan.n_masked == 20

    def test_deterministic_per_seed(self):
        a = obj.sample_mask(100, 0.1, 5, seed=42)
        b = obj.sample_mask(100, 0.1, 5, seed=42)
        np.testing.assert_array_equal(a.mask, b.mask)

    def test_coverage_matches_monte_carlo_oracle(self):
        """Empirical masked fraction tracks an independent simulation."""
        t, p, m = 500, 0.065, 10

        def oracle(n_trials, seed):
            rng = np.random.default_rng(seed)
            total = 0
            for _ in range(n_trials):
                mask = np.zeros(t, dtype=bool)
                for s in np.flatnonzero(rng.random(t) < p):
                    mask[s:s + m] = True
                total += mask.sum()
            return total / (n_trials * t)

        measured = np.mean([obj.sample_mask(t, p, m, seed=s).n_masked / t
                            for s in range(1000)])
        assert abs(measured - oracle(4000, seed=777)) < 0.05

    def test_span_length_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            obj.sample_mask(5, 0.1, 6, seed=0)


class TestDistractors:
    def test_never_self_and_in_range(self):
        rng = np.random.default_rng(0)
        idx = obj.sample_distractors(37, 10, rng)
        assert idx.shape == (37, 10)
        assert np.all(idx >= 0) and np.all(idx < 37)
        assert np.all(idx != np.arange(37)[:, None])

    def test_uniform_over_other_positions(self):
        rng = np.random.default_rng(1)
        idx = obj.sample_distractors(5, 2000, rng)
        counts = np.bincount(idx[0], minlength=5)
        assert counts[0] == 0
        assert np.all(np.abs(counts[1:] / 2000 - 0.25) < 0.05)


def _contrastive_batch(context, targets, distractor_index, temperature):
    return obj.ContrastiveBatch(
        context=Tensor(context, requires_grad=True),
        targets=Tensor(targets, requires_grad=True),
        distractor_index=np.asarray(distractor_index),
        temperature=temperature,
    )


class TestContrastiveLoss:
    def test_equal_similarities_single_distractor_gives_ln2(self):
        # context orthogonal-ish so cos(c, true) == cos(c, distractor)
        context = np.array([[1.0, 0.0], [1.0, 0.0]])
        targets = np.array([[1.0, 1.0], [1.0, -1.0]])
        batch = _contrastive_batch(context, targets, [[1], [0]], 1.0)
        loss = obj.contrastive_loss(batch)
        np.testing.assert_allclose(loss.item(), math.log(2), atol=1e-12)

    def test_uniform_similarities_k99_gives_ln100(self):
        rng = np.random.default_rng(5)
        p, k, d = 4, 99, 3
        targets = np.tile(rng.standard_normal(d), (p, 1))  # identical rows
        context = rng.standard_normal((p, d))
        idx = obj.sample_distractors(p, k, rng) % p
        batch = _contrastive_batch(context, targets, idx, 0.7)
        np.testing.assert_allclose(obj.contrastive_loss(batch).item(),
                                   math.log(100), atol=1e-9)

    def test_separated_case_matches_softmax_arithmetic(self):
        """cos(c,true)=1, cos(c,distractor)=-1, kappa=1 -> ln(1+e^-2)."""
        context = np.array([[2.0, 0.0], [-2.0, 0.0]])
        targets = np.array([[1.0, 0.0], [-3.0, 0.0]])
        batch = _contrastive_batch(context, targets, [[1], [0]], 1.0)
        np.testing.assert_allclose(obj.contrastive_loss(batch).item(),
                                   math.log(1 + math.exp(-2.0)), atol=1e-12)

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            p, k, d = 12, 4, 6
            batch = _contrastive_batch(rng.standard_normal((p, d)),
                                       rng.standard_normal((p, d)),
                                       obj.sample_distractors(p, k, rng), 0.1)
            assert obj.contrastive_loss(batch).item() >= 0.0

    def test_zero_norm_vector_rejected(self):
        context = np.array([[1.0, 0.0], [0.0, 0.0]])
        targets = np.array([[1.0, 0.0], [1.0, 1.0]])
        with pytest.raises(DegenerateInputError):
            obj.contrastive_loss(_contrastive_batch(context, targets, [[1], [0]], 1.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        p, k, d = 6, 3, 4
        batch = _contrastive_batch(rng.standard_normal((p, d)),
                                   rng.standard_normal((p, d)),
                                   obj.sample_distractors(p, k, rng), 0.2)

        def builder():
            return obj.contrastive_loss(batch), [batch.context, batch.targets]

        assert ad.grad_check(builder, eps=1e-6) < 1e-4


class TestDiversityLoss:
    def test_uniform_gives_zero(self):
        probs = Tensor(np.full((3, 20), 1 / 20))
        np.testing.assert_allclose(obj.diversity_loss(probs).item(), 0.0, atol=1e-9)

    def test_one_hot_v20_gives_095(self):
        probs = np.zeros((2, 20))
        probs[:, 7] = 1.0
        np.testing.assert_allclose(obj.diversity_loss(Tensor(probs)).item(),
                                   0.95, atol=1e-9)

    def test_uniform_two_entries(self):
        probs = Tensor(np.array([[0.5, 0.5]]))
        np.testing.assert_allclose(obj.diversity_loss(probs).item(), 0.0, atol=1e-9)

    def test_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = rng.random((2, 8))
            p /= p.sum(axis=1, keepdims=True)
            val = obj.diversity_loss(Tensor(p)).item()
            assert -1e-9 <= val <= 1 - 1 / 8 + 1e-9

    def test_negative_probabilities_rejected(self):
        with pytest.raises(ContractError):
            obj.diversity_loss(Tensor(np.array([[1.2, -0.2]])))


def _uniform_log_probs(t, n_labels):
    return Tensor(np.full((t, n_labels), -math.log(n_labels)))


class TestCtcLoss:
    def test_certain_single_frame(self):
        """T=1, p(a)=1 gives loss 0."""
        lp = Tensor(np.log(np.array([[1e-300, 1.0]])))
        assert abs(obj.ctc_loss(lp, [1]).item()) < 1e-9

    def test_two_frame_hand_case(self):
        """T=2, uniform over {blank, a}: paths (a,a),(a,-),(-,a) -> -ln 0.75."""
        lp = _uniform_log_probs(2, 2)
        np.testing.assert_allclose(obj.ctc_loss(lp, [1]).item(),
                                   -math.log(0.75), atol=1e-9)

    def test_repeat_needs_separating_blank(self):
        with pytest.raises(InfeasibleTargetError):
            obj.ctc_loss(_uniform_log_probs(2, 2), [1, 1])

    def test_matches_brute_force_on_hand_case(self):
        lp = _uniform_log_probs(2, 2)
        assert abs(obj.ctc_brute_force(lp, [1]) - (-math.log(0.75))) < 1e-12

    def test_brute_force_and_forward_agree_randomized(self):
        """200 random feasible instances agree to 1e-9."""
        rng = np.random.default_rng(2024)
        checked = 0
        while checked < 200:
            t = int(rng.integers(1, 7))
            vocab = int(rng.integers(1, 4))
            u = int(rng.integers(1, 4))
            target = rng.integers(1, vocab + 1, size=u)
            if obj.ctc_min_frames(target) > t:
                continue
            logits = rng.standard_normal((t, vocab + 1)) * 2
            lp = Tensor(logits - np.log(np.exp(logits).sum(axis=1, keepdims=True)))
            np.testing.assert_allclose(obj.ctc_loss(lp, target).item(),
                                       obj.ctc_brute_force(lp, target), atol=1e-9)
            checked += 1

    def test_brute_force_infeasible_matches(self):
        lp = _uniform_log_probs(2, 3)
        with pytest.raises(InfeasibleTargetError):
            obj.ctc_brute_force(lp, [1, 2, 1])
        with pytest.raises(InfeasibleTargetError):
            obj.ctc_loss(lp, [1, 2, 1])

    def test_brute_force_refuses_long_sequences(self):
        with pytest.raises(ContractError):
            obj.ctc_brute_force(_uniform_log_probs(9, 2), [1])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        for seed in range(5):
            t, vocab = 7, 3
            logits = Tensor(rng.standard_normal((t, vocab + 1)), requires_grad=True)
            target = [1, 2, 2, 3]

            def builder():
                lp = ad.log_softmax(logits, axis=1)
                return obj.ctc_loss(lp, target), [logits]

            assert ad.grad_check(builder, eps=1e-6) < 1e-4

    def test_occupancy_gradient_direct(self):
        """Gradient w.r.t. raw log_probs (entries independent) vs finite differences."""
        rng = np.random.default_rng(32)
        logits = rng.standard_normal((5, 3))
        lp_vals = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        lp = Tensor(lp_vals, requires_grad=True)

        def builder():
            return obj.ctc_loss(lp, [1, 2]), [lp]

        assert ad.grad_check(builder, eps=1e-6) < 1e-4

    def test_min_frames(self):
        assert obj.ctc_min_frames([1]) == 1
        assert obj.ctc_min_frames([1, 1]) == 3
        assert obj.ctc_min_frames([1, 2, 1]) == 3
        assert obj.ctc_min_frames([2, 2, 2]) == 5
