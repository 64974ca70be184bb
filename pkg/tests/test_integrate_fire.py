"""Integrate-and-fire segmentation against a naive step-by-step oracle."""

import math
import time

import numpy as np
import pytest
import torch

from scdkit.exceptions import NumericalError
from scdkit.integrate_fire import (
    IntegrateFireConfig,
    integrate_and_fire,
    marks_to_frame_scores,
    trace_integrate_and_fire,
)


def naive_fire(h_rows, d_values, threshold=1.0, first_frame_init=True):
    """Plain-float reference: one literal pass, no shared code with the kit.

    ``h_rows`` is a list of lists, ``d_values`` a list of floats.  Returns
    (embeddings, marks, residual) with embeddings as lists of lists.
    """
    dim = len(h_rows[0])
    h_acc = list(h_rows[0]) if first_frame_init else [0.0] * dim
    d_acc = 0.0
    embeddings = []
    marks = [0] * len(d_values)
    for t, d_t in enumerate(d_values):
        d_prev = d_acc
        d_acc = d_acc + d_t
        h_acc = [h_acc[k] + (1.0 - d_t) * h_rows[t][k] for k in range(dim)]
        if d_acc > threshold:
            embeddings.append(h_acc)
            h_acc = list(h_rows[t])
            part1 = threshold - d_prev
            d_acc = d_t - part1
            marks[t] = 1
    embeddings.append(h_acc)
    return embeddings, marks, d_acc


def run_kit(h_rows, d_values, threshold=1.0, init="first_frame"):
    cfg = IntegrateFireConfig(threshold=threshold, integration_init=init)
    h = torch.tensor(h_rows, dtype=torch.float64)
    d = torch.tensor(d_values, dtype=torch.float64)
    return integrate_and_fire(h, d, cfg)


class TestHandWorkedCases:
    def test_zero_scores_accumulate_everything(self):
        out = run_kit([[1.0], [2.0], [3.0]], [0.0, 0.0, 0.0])
        assert out.fired_count == 0
        assert out.embeddings.shape == (1, 1)
        # h_acc walks 1 -> 2 -> 4 -> 7 with the first frame counted twice
        assert out.embeddings[0, 0].item() == pytest.approx(7.0, abs=1e-12)
        assert out.marks.tolist() == [0, 0, 0]

    def test_single_fire_with_split(self):
        out = run_kit([[1.0], [2.0], [3.0]], [0.3, 0.5, 0.4])
        assert out.fired_count == 1
        assert out.boundaries == (2,)
        assert out.marks.tolist() == [0, 0, 1]
        assert out.embeddings[:, 0].tolist() == pytest.approx([4.5, 3.0], abs=1e-12)
        assert out.residual == pytest.approx(0.2, abs=1e-12)

    def test_exact_threshold_does_not_fire(self):
        out = run_kit([[1.0], [1.0]], [0.5, 0.5])
        assert out.fired_count == 0
        assert out.embeddings.shape[0] == 1

    def test_zero_init_skips_first_frame_seed(self):
        out = run_kit([[1.0], [2.0], [3.0]], [0.0, 0.0, 0.0], init="zero")
        assert out.embeddings[0, 0].item() == pytest.approx(6.0, abs=1e-12)


class TestOracleEquivalence:
    def test_thousand_random_instances_match_to_1e9(self):
        rng = np.random.default_rng(20240817)
        start = time.time()
        for trial in range(1000):
            length = int(rng.integers(1, 13))
            dim = int(rng.integers(1, 5))
            h_rows = rng.standard_normal((length, dim)).tolist()
            d_values = (rng.uniform(0.0, 1.0, size=length)).tolist()
            threshold = float(rng.uniform(0.5, 2.0)) if trial % 3 else 1.0
            want_e, want_marks, want_residual = naive_fire(h_rows, d_values, threshold)
            got = run_kit(h_rows, d_values, threshold)
            assert got.marks.tolist() == want_marks, f"trial {trial}"
            assert got.embeddings.shape[0] == len(want_e)
            diff = np.abs(got.embeddings.numpy() - np.array(want_e)).max()
            assert diff <= 1e-9, f"trial {trial}: max embedding gap {diff}"
            assert abs(got.residual - want_residual) <= 1e-9
        assert time.time() - start < 10.0

    def test_mass_conservation_on_random_instances(self):
        rng = np.random.default_rng(7)
        for trial in range(1000):
            length = int(rng.integers(1, 13))
            d_values = rng.uniform(0.0, 1.0, size=length)
            h_rows = rng.standard_normal((length, 2))
            out = run_kit(h_rows.tolist(), d_values.tolist())
            total = math.fsum(d_values.tolist())
            conserved = out.fired_count * 1.0 + out.residual
            assert abs(total - conserved) <= 1e-9, f"trial {trial}"

    def test_fires_depend_only_on_score_prefix(self):
        rng = np.random.default_rng(11)
        h_rows = rng.standard_normal((12, 3)).tolist()
        d_values = rng.uniform(0.0, 1.0, size=12).tolist()
        full = run_kit(h_rows, d_values)
        for cut in range(1, 12):
            part = run_kit(h_rows[:cut], d_values[:cut])
            want = tuple(b for b in full.boundaries if b < cut)
            assert part.boundaries == want, f"prefix {cut}"


class TestGradientFlow:
    def test_gradients_reach_scores_and_frames(self):
        h = torch.tensor([[1.0], [2.0], [3.0]], dtype=torch.float64, requires_grad=True)
        d = torch.tensor([0.3, 0.5, 0.4], dtype=torch.float64, requires_grad=True)
        out = integrate_and_fire(h, d, IntegrateFireConfig())
        out.embeddings.sum().backward()
        assert torch.isfinite(h.grad).all()
        assert torch.isfinite(d.grad).all()
        # the firing frame contributes -h_t through its integration weight
        assert d.grad[1].item() == pytest.approx(-2.0, abs=1e-12)

    def test_finite_differences_match_along_fixed_pattern(self):
        rng = np.random.default_rng(3)
        h_np = rng.standard_normal((6, 2))
        d_np = rng.uniform(0.2, 0.8, size=6)
        cfg = IntegrateFireConfig()

        def total(h_vals, d_vals):
            h = torch.tensor(h_vals, dtype=torch.float64, requires_grad=True)
            d = torch.tensor(d_vals, dtype=torch.float64, requires_grad=True)
            out = integrate_and_fire(h, d, cfg)
            value = (out.embeddings * out.embeddings).sum()
            value.backward()
            return float(value.detach()), h.grad.numpy(), d.grad.numpy(), out.boundaries

        _, h_grad, d_grad, pattern = total(h_np, d_np)
        eps = 1e-6
        for idx in range(6):
            bumped = d_np.copy()
            bumped[idx] += eps
            up, _, _, pat_up = total(h_np, bumped)
            bumped[idx] -= 2 * eps
            down, _, _, pat_down = total(h_np, bumped)
            assert pat_up == pattern and pat_down == pattern
            fd = (up - down) / (2 * eps)
            assert fd == pytest.approx(d_grad[idx], rel=1e-5, abs=1e-7)


class TestValidation:
    def test_negative_scores_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            run_kit([[1.0], [1.0]], [0.2, -0.1])

    def test_non_finite_scores_carry_frame_index(self):
        with pytest.raises(NumericalError, match="frame 1"):
            run_kit([[1.0], [1.0]], [0.2, float("nan")])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            run_kit([[1.0], [1.0], [1.0]], [0.2, 0.2])


class TestTrace:
    def test_trace_matches_hand_worked_steps(self):
        steps = trace_integrate_and_fire([0.3, 0.5, 0.4], IntegrateFireConfig())
        assert [s.fired for s in steps] == [False, False, True]
        assert [s.acc_before for s in steps] == pytest.approx([0.3, 0.8, 1.2])
        last = steps[-1]
        assert last.part_used == pytest.approx(0.2, abs=1e-12)
        assert last.part_carried == pytest.approx(0.2, abs=1e-12)
        assert last.acc_after == pytest.approx(0.2, abs=1e-12)

    def test_trace_row_per_frame(self):
        steps = trace_integrate_and_fire([0.0] * 7, IntegrateFireConfig())
        assert len(steps) == 7
        assert not any(s.fired for s in steps)

    def test_trace_agrees_with_tensor_path(self):
        rng = np.random.default_rng(23)
        d_values = rng.uniform(0.0, 1.0, size=10).tolist()
        steps = trace_integrate_and_fire(d_values, IntegrateFireConfig())
        out = run_kit(rng.standard_normal((10, 2)).tolist(), d_values)
        assert tuple(s.index for s in steps if s.fired) == out.boundaries
        assert steps[-1].acc_after == pytest.approx(out.residual, abs=1e-12)


class TestMarkPlacement:
    def test_mark_lands_on_last_covered_frame(self):
        assert marks_to_frame_scores([0, 1], 2, 4).tolist() == [0.0, 0.0, 0.0, 1.0]

    def test_all_zero_marks(self):
        assert marks_to_frame_scores([0, 0, 0], 2, 6).tolist() == [0.0] * 6

    def test_identity_at_factor_one(self):
        assert marks_to_frame_scores([1, 0, 1], 1, 3).tolist() == [1.0, 0.0, 1.0]

    def test_ragged_tail_clamps_to_final_frame(self):
        scores = marks_to_frame_scores([0, 0, 1], 4, 9)
        assert scores.tolist() == [0.0] * 8 + [1.0]

    def test_inconsistent_lengths_rejected(self):
        with pytest.raises(ValueError, match="inconsistent"):
            marks_to_frame_scores([0, 1], 2, 10)
