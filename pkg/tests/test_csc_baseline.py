"""
Tests for the single-layer l1 convolutional sparse coder.
"""

import numpy as np
import pytest

from csc4net.core.exceptions import DimensionError
from csc4net.models.tensors import FilterBank
from csc4net.schemas.config import STANDALONE_CSC_LAMBDA, CscParams
from csc4net.services.csc_baseline import (
    CscProblem,
    csc_objective,
    init_filters,
    project_unit_ball,
    reconstruct,
    soft_threshold,
    solve_codes_l1,
    solve_csc,
    solve_filters,
)
from csc4net.services.metrics import psnr
from csc4net.services.tensor_ops import conv2_same_adjoint


def loop_reconstruct(filters, codes):
    """sum_k f_k * z_k in the same frame, by explicit loops"""
    _, h, w = codes.shape
    out = np.zeros((h, w))
    for f, z in zip(filters, codes):
        fh, fw = f.shape
        oh, ow = (fh - 1) // 2, (fw - 1) // 2
        for i in range(h):
            for j in range(w):
                for a in range(fh):
                    for b in range(fw):
                        r, c = i + oh - a, j + ow - b
                        if 0 <= r < h and 0 <= c < w:
                            out[i, j] += f[a, b] * z[r, c]
    return out


@pytest.fixture
def triangular_filter():
    """2x2 filter whose "same" convolution operator is well conditioned"""
    f = np.array([[1.0, 0.5], [0.25, 0.1]])
    return f / np.linalg.norm(f)


class TestObjective:
    def test_zero_codes(self, rng):
        images = [rng.standard_normal((6, 6)) for _ in range(3)]
        problem = CscProblem(tuple(images), 2, (3, 3), 0.1)
        codes = [np.zeros((2, 6, 6)) for _ in images]
        expected = 0.5 * sum(float(np.sum(x * x)) for x in images)
        assert csc_objective(problem, init_filters(2, (3, 3), 0), codes) == pytest.approx(expected)

    def test_standalone_lambda_default(self, rng):
        problem = CscProblem.from_params([rng.standard_normal((6, 6))], 2, (2, 2), CscParams())
        assert problem.lmbda == STANDALONE_CSC_LAMBDA
        assert CscProblem.from_params([rng.standard_normal((6, 6))], 2, (2, 2), CscParams(lmbda=0.0)).lmbda == 0.0

    def test_exact_synthesis_has_zero_objective(self, rng):
        f = init_filters(1, (3, 3), 4)
        z = rng.standard_normal((1, 7, 7))
        x = reconstruct(f, z)
        problem = CscProblem((x,), 1, (3, 3), 0.0)
        assert csc_objective(problem, f, [z]) == pytest.approx(0.0, abs=1e-20)

    def test_reconstruct_matches_loops(self, rng):
        filters = rng.standard_normal((2, 3, 2))
        codes = rng.standard_normal((2, 5, 6))
        np.testing.assert_allclose(reconstruct(filters, codes), loop_reconstruct(filters, codes), atol=1e-12)

    def test_objective_matches_loop_oracle(self, rng):
        filters = rng.standard_normal((2, 3, 3)) * 0.3
        codes = [rng.standard_normal((2, 5, 5)) for _ in range(2)]
        images = [rng.standard_normal((5, 5)) for _ in range(2)]
        problem = CscProblem(tuple(images), 2, (3, 3), 0.25)
        expected = 0.0
        for x, z in zip(images, codes):
            r = x - loop_reconstruct(filters, z)
            expected += 0.5 * np.sum(r * r) + 0.25 * np.sum(np.abs(z))
        assert csc_objective(problem, filters, codes) == pytest.approx(expected, rel=1e-12)

    def test_unit_filter_reconstructs_code(self, rng):
        z = rng.standard_normal((1, 4, 4))
        np.testing.assert_allclose(reconstruct(np.ones((1, 1, 1)), z), z[0], atol=1e-12)

    def test_code_shape_mismatch(self, rng):
        problem = CscProblem((rng.standard_normal((5, 5)),), 2, (3, 3), 0.1)
        with pytest.raises(DimensionError):
            csc_objective(problem, init_filters(2, (3, 3), 0), [np.zeros((2, 4, 5))])

    def test_support_larger_than_image(self):
        with pytest.raises(DimensionError):
            CscProblem((np.ones((3, 3)),), 1, (4, 4), 0.1)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            CscProblem((np.ones((3, 3)),), 1, (2, 2), -0.1)


class TestCodeUpdate:
    """Proximal-gradient code solves"""

    def test_soft_threshold_closed_form(self):
        v = np.array([-3.0, -0.5, 0.0, 0.2, 2.0])
        np.testing.assert_allclose(soft_threshold(v, 1.0), [-2.0, 0.0, 0.0, 0.0, 1.0])

    def test_large_lambda_gives_zero_codes(self, rng):
        x = rng.standard_normal((8, 8))
        f = init_filters(2, (3, 3), 1)
        bound = max(float(np.max(np.abs(conv2_same_adjoint(x, k)))) for k in f)
        problem = CscProblem((x,), 2, (3, 3), bound * 1.01)
        codes = solve_codes_l1(problem, f)
        assert not np.any(codes[0])

    def test_single_pixel_unit_filter(self):
        problem = CscProblem((np.array([[0.7]]),), 1, (1, 1), 0.0)
        codes = solve_codes_l1(problem, np.ones((1, 1, 1)))
        assert codes[0][0, 0, 0] == pytest.approx(0.7, abs=1e-12)

    def test_planted_codes_reconstruct(self, rng, triangular_filter):
        z = rng.standard_normal((1, 12, 12)) * (rng.random((1, 12, 12)) < 0.3)
        x = reconstruct(triangular_filter[None], z)
        problem = CscProblem((x,), 1, (2, 2), 1e-6)
        codes = solve_codes_l1(problem, triangular_filter[None], max_iter=3000, tol=1e-15)
        assert psnr(x, reconstruct(triangular_filter[None], codes[0])) > 40.0

    @pytest.mark.parametrize("seed", range(3))
    def test_complete_bank_reconstructs_as_lambda_vanishes(self, seed):
        haar = np.array([
            [[0.5, 0.5], [0.5, 0.5]],
            [[0.5, -0.5], [0.5, -0.5]],
            [[0.5, 0.5], [-0.5, -0.5]],
            [[0.5, -0.5], [-0.5, 0.5]],
        ])
        x = np.random.default_rng(seed).uniform(size=(16, 16))
        problem = CscProblem((x,), 4, (2, 2), 1e-6)
        codes = solve_codes_l1(problem, haar, max_iter=500, tol=1e-14)
        rmse = float(np.sqrt(np.mean((x - reconstruct(haar, codes[0])) ** 2)))
        assert rmse < 1e-3

    def test_codes_keep_order(self, rng):
        images = [np.full((4, 4), float(i + 1)) for i in range(4)]
        problem = CscProblem(tuple(images), 1, (1, 1), 0.0)
        codes = solve_codes_l1(problem, np.ones((1, 1, 1)))
        for i, z in enumerate(codes):
            np.testing.assert_allclose(z[0], images[i], atol=1e-9)


class TestFilterUpdate:
    """Least-squares filter solves with the unit-ball projection"""

    def test_delta_code_returns_clamped_patch(self, rng):
        x = rng.uniform(0.5, 1.0, size=(6, 6))
        code = np.zeros((1, 6, 6))
        code[0, 3, 3] = 1.0
        problem = CscProblem((x,), 1, (3, 3), 0.0)
        bank = solve_filters(problem, [code], np.zeros((1, 3, 3)))
        patch = x[2:5, 2:5]
        np.testing.assert_allclose(bank.filters[0], patch / np.linalg.norm(patch), atol=1e-6)

    def test_delta_code_small_patch_is_not_scaled(self):
        x = np.zeros((6, 6))
        x[2:5, 2:5] = 0.1
        code = np.zeros((1, 6, 6))
        code[0, 3, 3] = 1.0
        problem = CscProblem((x,), 1, (3, 3), 0.0)
        bank = solve_filters(problem, [code], np.zeros((1, 3, 3)))
        np.testing.assert_allclose(bank.filters[0], np.full((3, 3), 0.1), atol=1e-6)

    def test_zero_codes_leave_filters(self):
        f0 = init_filters(2, (3, 3), 9)
        problem = CscProblem((np.ones((5, 5)),), 2, (3, 3), 0.1)
        bank = solve_filters(problem, [np.zeros((2, 5, 5))], f0)
        np.testing.assert_array_equal(bank.filters, f0)

    def test_planted_filter_recovered(self, rng):
        f_true = init_filters(1, (3, 3), 2)
        z = rng.standard_normal((1, 16, 16)) * (rng.random((1, 16, 16)) < 0.3)
        x = reconstruct(f_true, z)
        problem = CscProblem((x,), 1, (3, 3), 0.0)
        bank = solve_filters(problem, [z], init_filters(1, (3, 3), 77))
        recovered = bank.filters[0].ravel()
        corr = abs(float(recovered @ f_true[0].ravel())) / np.linalg.norm(recovered)
        assert corr >= 0.99

    def test_projection(self):
        f = np.stack([np.full((2, 2), 1.0), np.full((2, 2), 0.1)])
        projected = project_unit_ball(f)
        assert np.linalg.norm(projected[0]) == pytest.approx(1.0)
        np.testing.assert_array_equal(projected[1], f[1])

    def test_filters_respect_unit_ball(self, rng):
        images = [rng.uniform(0, 5, size=(8, 8)) for _ in range(2)]
        problem = CscProblem(tuple(images), 2, (3, 3), 0.05)
        solution = solve_csc(problem, CscParams(max_outer=5))
        norms = np.sum(solution.filters.matrix ** 2, axis=1)
        assert np.all(norms <= 1.0 + 1e-9)


class TestAlternatingSolver:
    def test_objective_trace_is_monotone(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            images = [rng.standard_normal((8, 8)) for _ in range(2)]
            problem = CscProblem(tuple(images), 2, (3, 3), 0.1)
            solution = solve_csc(problem, CscParams(max_outer=10, max_inner=30, seed=seed))
            trace = solution.objective_trace
            for previous, current in zip(trace, trace[1:]):
                assert current <= previous + 1e-9 * max(1.0, abs(previous))

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(50))
    def test_objective_trace_is_monotone_on_grid(self, seed):
        rng = np.random.default_rng(100 + seed)
        size = int(rng.integers(6, 13))
        n_filters = int(rng.integers(1, 5))
        side = int(rng.integers(1, 4))
        images = [rng.standard_normal((size, size)) for _ in range(int(rng.integers(1, 4)))]
        problem = CscProblem(tuple(images), n_filters, (side, side), float(rng.uniform(0.01, 0.5)))
        solution = solve_csc(problem, CscParams(max_outer=10, max_inner=30, seed=seed))
        trace = solution.objective_trace
        for previous, current in zip(trace, trace[1:]):
            assert current <= previous + 1e-9 * max(1.0, abs(previous))

    def test_returns_filter_bank_and_codes(self, rng):
        images = [rng.standard_normal((6, 6)) for _ in range(3)]
        problem = CscProblem(tuple(images), 3, (2, 2), 0.1)
        solution = solve_csc(problem, CscParams(max_outer=3))
        assert isinstance(solution.filters, FilterBank)
        assert not solution.filters.orthogonal_mode
        assert [z.shape for z in solution.codes] == [(3, 6, 6)] * 3
        assert 1 <= len(solution.objective_trace) <= 3

    def test_deterministic(self, rng):
        images = [rng.standard_normal((6, 6)) for _ in range(2)]
        problem = CscProblem(tuple(images), 2, (3, 3), 0.1)
        a = solve_csc(problem, CscParams(max_outer=4, seed=3))
        b = solve_csc(problem, CscParams(max_outer=4, seed=3))
        np.testing.assert_array_equal(a.filters.data, b.filters.data)
        assert a.objective_trace == b.objective_trace
