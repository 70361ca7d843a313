import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gmmas.errors import TrainingStepError, ValidationError
from gmmas.losses import (
    TaskUncertainties,
    class_weights_from_counts,
    dice_loss,
    multitask_loss,
    weighted_cross_entropy,
)


def softmax_probs(shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(shape, generator=g, dtype=torch.float64)
    return torch.softmax(logits, dim=0)


def dice_oracle(probs: np.ndarray, mask: np.ndarray, eps: float) -> float:
    """Direct per-class voxel-sum evaluation of the folded Dice loss."""
    acc = 0.0
    for j in range(4):
        y = (mask == j).astype(np.float64)
        p = probs[j]
        acc += (p * y).sum() / (p.sum() + y.sum() + eps)
    return 1.0 - (2.0 / 4.0) * acc


class TestDiceLoss:
    def test_perfect_overlap_near_zero(self):
        mask = torch.randint(0, 4, (4, 4, 4), generator=torch.Generator().manual_seed(1))
        one_hot = torch.nn.functional.one_hot(mask, 4).permute(3, 0, 1, 2).double()
        loss = dice_loss(one_hot, mask, epsilon=1e-5)
        assert 0.0 <= float(loss) < 1e-4

    def test_disjoint_masks_loss_near_one(self):
        # probs concentrated on class 1, truth entirely class 2
        probs = torch.zeros(4, 4, 4, 4, dtype=torch.float64)
        probs[1] = 1.0
        mask = torch.full((4, 4, 4), 2, dtype=torch.long)
        loss = dice_loss(probs, mask, epsilon=1e-9)
        assert float(loss) > 0.999

    def test_random_fixture_matches_direct_sum_oracle(self):
        probs = softmax_probs((4, 4, 4, 4), seed=7)
        mask = torch.randint(0, 4, (4, 4, 4), generator=torch.Generator().manual_seed(8))
        ours = float(dice_loss(probs, mask, epsilon=1e-5))
        oracle = dice_oracle(probs.numpy(), mask.numpy(), eps=1e-5)
        assert abs(ours - oracle) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            dice_loss(torch.zeros(4, 4, 4, 4), torch.zeros(2, 2, 2, dtype=torch.long))

    def test_gradient_matches_finite_differences(self):
        g = torch.Generator().manual_seed(3)
        logits = torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
        mask = torch.randint(0, 4, (3, 3, 3), generator=g)

        def f(lg):
            return dice_loss(torch.softmax(lg, dim=0), mask)

        assert torch.autograd.gradcheck(f, (logits,), eps=1e-6, atol=1e-7)

    @given(seed=st.integers(0, 5000))
    @settings(max_examples=25, deadline=None)
    def test_loss_in_unit_interval(self, seed):
        probs = softmax_probs((4, 4, 4, 4), seed=seed)
        mask = torch.randint(0, 4, (4, 4, 4), generator=torch.Generator().manual_seed(seed))
        loss = float(dice_loss(probs, mask))
        assert -1e-9 <= loss <= 1.0 + 1e-9


class TestClassWeights:
    def test_uniform_counts_give_unit_weights(self):
        w = class_weights_from_counts([5, 5])
        assert torch.allclose(w, torch.ones(2, dtype=torch.float64))

    def test_inverse_frequency_example(self):
        # counts (3, 1): w = (4/(2*3), 4/(2*1)) = (2/3, 2)
        w = class_weights_from_counts([3, 1])
        assert torch.allclose(w, torch.tensor([2 / 3, 2.0], dtype=torch.float64))

    def test_frequency_weighted_mean_is_one(self):
        counts = np.array([7, 3])
        w = class_weights_from_counts(counts).numpy()
        assert abs((w * counts / counts.sum()).sum() - 1.0) < 1e-12

    def test_literal_frequency_mode(self):
        w = class_weights_from_counts([3, 1], literal_frequency=True)
        assert torch.allclose(w, torch.tensor([0.75, 0.25], dtype=torch.float64))

    def test_zero_count_class_rejected(self):
        with pytest.raises(ValidationError):
            class_weights_from_counts([4, 0])


class TestWeightedCrossEntropy:
    def test_perfect_prediction_zero_loss(self):
        loss = weighted_cross_entropy(torch.tensor([1.0, 0.0]), [1.0, 0.0])
        assert float(loss) < 1e-9

    def test_uniform_counts_reduce_to_plain_ce(self):
        # -log 0.5 = ln 2
        loss = weighted_cross_entropy(
            torch.tensor([0.5, 0.5], dtype=torch.float64), [1.0, 0.0],
            class_weights_from_counts([5, 5]),
        )
        assert abs(float(loss) - np.log(2)) < 1e-12

    def test_weighted_example_hand_evaluated(self):
        # counts (3,1), y = class 1: w_1 = 2 -> loss = 2 ln 2
        loss = weighted_cross_entropy(
            torch.tensor([0.5, 0.5], dtype=torch.float64), [0.0, 1.0],
            class_weights_from_counts([3, 1]),
        )
        assert abs(float(loss) - 2 * np.log(2)) < 1e-12

    def test_soft_targets_from_cutmix(self):
        p = torch.tensor([0.7, 0.3], dtype=torch.float64)
        loss = weighted_cross_entropy(p, [0.6, 0.4])
        expected = -(0.6 * np.log(0.7) + 0.4 * np.log(0.3))
        assert abs(float(loss) - expected) < 1e-12

    def test_missing_targets_excluded_from_mean(self):
        probs = torch.tensor([[0.5, 0.5], [0.9, 0.1]], dtype=torch.float64)
        targets = np.array([[1.0, 0.0], [np.nan, np.nan]])
        loss = weighted_cross_entropy(probs, targets)
        assert abs(float(loss) - np.log(2)) < 1e-12

    def test_all_missing_returns_none(self):
        probs = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        assert weighted_cross_entropy(probs, np.array([[np.nan, np.nan]])) is None

    def test_gradient_matches_finite_differences(self):
        logits = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
        targets = np.array([[1.0, 0.0], [0.3, 0.7], [0.0, 1.0]])
        w = class_weights_from_counts([3, 2])

        def f(lg):
            return weighted_cross_entropy(torch.softmax(lg, dim=1), targets, w)

        assert torch.autograd.gradcheck(f, (logits,), eps=1e-6, atol=1e-7)


class TestMultitaskLoss:
    def test_unit_sigmas_give_half_sum(self):
        u = TaskUncertainties()
        raw = {t: torch.tensor(float(i + 1), dtype=torch.float64)
               for i, t in enumerate(u.tasks)}
        total, breakdown = multitask_loss(raw, u)
        assert abs(float(total) - sum(range(1, 6)) / 2) < 1e-9
        assert abs(breakdown.total - float(total)) < 1e-12

    def test_single_task_stationary_point(self):
        # grid-search oracle over sigma for L = 4: minimum at sigma = 2
        L = 4.0
        grid = np.linspace(1e-3, 10.0, 200_000)
        vals = L / (2 * grid**2) + np.log(grid)
        best = grid[np.argmin(vals)]
        assert abs(best - 2.0) <= 0.01
        assert abs(vals.min() - 1.1931) <= 1e-3

        u = TaskUncertainties(tasks=("seg",))
        with torch.no_grad():
            u.log_var["seg"].fill_(np.log(best**2))
        total, _ = multitask_loss({"seg": torch.tensor(L, dtype=torch.float64)}, u)
        assert abs(float(total) - vals.min()) < 1e-6

    def test_sigma_gradient_stationary_at_sqrt_L(self):
        u = TaskUncertainties(tasks=("grade",))
        L = 2.5
        with torch.no_grad():
            u.log_var["grade"].fill_(np.log(L))  # sigma = sqrt(L)
        total, _ = multitask_loss({"grade": torch.tensor(L, dtype=torch.float64)}, u)
        total.backward()
        assert abs(float(u.log_var["grade"].grad)) < 1e-12

    def test_unsupervised_task_contributes_zero_and_no_grad(self):
        u = TaskUncertainties()
        # L = 2 so sigma = 1 is NOT the stationary point and seg gets gradient
        raw = {"seg": torch.tensor(2.0, dtype=torch.float64), "grade": None}
        total, breakdown = multitask_loss(raw, u)
        total.backward()
        assert breakdown.raw["grade"] is None
        assert breakdown.effective["grade"] == 0.0
        assert u.log_var["grade"].grad is None or float(u.log_var["grade"].grad) == 0.0
        assert float(u.log_var["seg"].grad) != 0.0

    def test_breakdown_total_consistency(self):
        u = TaskUncertainties()
        with torch.no_grad():
            for t in u.tasks:
                u.log_var[t].fill_(0.3)
        raw = {t: torch.tensor(0.5 + i, dtype=torch.float64) for i, t in enumerate(u.tasks)}
        total, b = multitask_loss(raw, u)
        recomputed = sum(b.effective.values()) + sum(b.regularizers.values())
        assert abs(b.total - recomputed) < 1e-6

    def test_nan_loss_names_task(self):
        u = TaskUncertainties()
        raw = {"idh": torch.tensor(float("nan"), dtype=torch.float64)}
        with pytest.raises(TrainingStepError) as err:
            multitask_loss(raw, u)
        assert err.value.task == "idh"

    def test_masking_invariant_to_unsupervised_permutation(self):
        # swapping which tasks are unsupervised leaves supervised terms fixed
        u = TaskUncertainties()
        a = {"seg": torch.tensor(1.0, dtype=torch.float64), "grade": None, "idh": None}
        b = {"idh": None, "grade": None, "seg": torch.tensor(1.0, dtype=torch.float64)}
        ta, ba = multitask_loss(a, u)
        tb, bb = multitask_loss(b, u)
        assert float(ta) == float(tb)
        assert ba.effective == bb.effective

    def test_sigma_gradients_match_finite_differences(self):
        u = TaskUncertainties(tasks=("seg", "grade"))
        raw = {
            "seg": torch.tensor(1.7, dtype=torch.float64),
            "grade": torch.tensor(0.4, dtype=torch.float64),
        }
        total, _ = multitask_loss(raw, u)
        total.backward()
        eps = 1e-6
        for t in ("seg", "grade"):
            analytic = float(u.log_var[t].grad)
            with torch.no_grad():
                u.log_var[t] += eps
            up, _ = multitask_loss(raw, u)
            with torch.no_grad():
                u.log_var[t] -= 2 * eps
            down, _ = multitask_loss(raw, u)
            with torch.no_grad():
                u.log_var[t] += eps
            numeric = (float(up) - float(down)) / (2 * eps)
            assert abs(analytic - numeric) / max(abs(numeric), 1e-12) < 1e-3

    def test_total_decreases_with_raw_loss_at_fixed_sigma(self):
        u = TaskUncertainties(tasks=("seg",))
        t1, _ = multitask_loss({"seg": torch.tensor(2.0, dtype=torch.float64)}, u)
        t2, _ = multitask_loss({"seg": torch.tensor(1.0, dtype=torch.float64)}, u)
        assert float(t2) < float(t1)
