"""
Tests for SPD embeddings, the affine-invariant distance and the manifold loss.
"""

import numpy as np
import pytest

from csc4net.core.exceptions import DegenerateInputError, DimensionError, NumericError
from csc4net.schemas.config import DistanceMode, ManifoldParams
from csc4net.services.manifold import (
    SpdMatrix,
    apply_associator,
    channel_covariance,
    manifold_loss,
    pair_distances,
    spd_dist,
    spd_embed,
    spd_expm,
    spd_logm,
    spd_powm,
)


def random_spd(rng, n):
    g = rng.standard_normal((n, n))
    return g @ g.T + np.eye(n)


class TestEmbedding:
    def test_constant_code_gives_ridge(self):
        params = ManifoldParams(ridge=1e-3)
        m = spd_embed(np.full((3, 4, 4), 2.5), params)
        np.testing.assert_allclose(m.data, 1e-3 * np.eye(3), atol=1e-15)

    def test_identical_channels(self, rng):
        channel = rng.standard_normal((5, 5))
        code = np.stack([channel, channel])
        v = float(np.var(channel, ddof=1))
        w = np.linalg.eigvalsh(spd_embed(code, ManifoldParams(ridge=1e-6)).data)
        np.testing.assert_allclose(w, [1e-6, 2 * v + 1e-6], rtol=1e-9, atol=1e-12)

    def test_covariance_scales_quadratically(self, rng):
        code = rng.standard_normal((3, 4, 4))
        np.testing.assert_allclose(channel_covariance(3.0 * code), 9.0 * channel_covariance(code), rtol=1e-12)

    def test_single_position(self):
        with pytest.raises(DegenerateInputError):
            spd_embed(np.ones((2, 1, 1)))

    def test_single_channel_is_one_by_one(self, rng):
        m = spd_embed(rng.standard_normal((1, 3, 3)))
        assert m.dim == 1

    def test_every_embedding_is_spd(self):
        rng = np.random.default_rng(3)
        params = ManifoldParams()
        for i in range(500):
            channels = int(rng.integers(1, 6))
            h, w = (int(v) for v in rng.integers(1, 6, size=2))
            if h * w < 2:
                w = 2
            code = rng.standard_normal((channels, h, w)) * 10.0 ** rng.uniform(-3, 3)
            if i % 10 == 0:
                code[0] = code[-1]
            m = spd_embed(code, params)
            assert float(np.max(np.abs(m.data - m.data.T))) <= 1e-10
            assert float(np.linalg.eigvalsh(m.data).min()) >= 1e-12


class TestSpdMatrix:
    def test_rejects_asymmetric(self):
        with pytest.raises(NumericError):
            SpdMatrix(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(NumericError):
            SpdMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_rejects_non_square(self):
        with pytest.raises(DimensionError):
            SpdMatrix(np.ones((2, 3)))


class TestMatrixFunctions:
    def test_log_of_identity(self):
        np.testing.assert_allclose(spd_logm(SpdMatrix(np.eye(3))), np.zeros((3, 3)), atol=1e-15)

    def test_log_of_diagonal(self):
        out = spd_logm(SpdMatrix(np.diag([np.e, np.e ** 2])))
        np.testing.assert_allclose(out, np.diag([1.0, 2.0]), atol=1e-12)

    def test_exp_inverts_log(self, rng):
        a = random_spd(rng, 4)
        np.testing.assert_allclose(spd_expm(spd_logm(SpdMatrix(a))), a, rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("condition", [1.0, 1e2, 1e4, 1e6])
    @pytest.mark.parametrize("seed", range(5))
    def test_round_trip_up_to_condition(self, condition, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        a = (q * np.logspace(0.0, np.log10(condition), n)) @ q.T
        a = 0.5 * (a + a.T)
        back = spd_expm(spd_logm(SpdMatrix(a)))
        assert np.linalg.norm(back - a) <= 1e-8 * np.linalg.norm(a)

    def test_inverse_square_root(self, rng):
        a = random_spd(rng, 3)
        root = spd_powm(SpdMatrix(a), -0.5)
        np.testing.assert_allclose(root @ a @ root, np.eye(3), atol=1e-10)


class TestDistance:
    """Affine-invariant Riemannian distance"""

    def test_zero_on_equal(self, rng):
        a = SpdMatrix(random_spd(rng, 4))
        assert spd_dist(a, a) == pytest.approx(0.0, abs=1e-10)

    def test_scaled_identity(self):
        c = 3.0
        d = spd_dist(SpdMatrix(np.eye(4)), SpdMatrix(c * np.eye(4)))
        assert d == pytest.approx(np.sqrt(4) * abs(np.log(c)))

    def test_symmetric(self, rng):
        a = SpdMatrix(random_spd(rng, 3))
        b = SpdMatrix(random_spd(rng, 3))
        assert spd_dist(a, b) == pytest.approx(spd_dist(b, a), rel=1e-9)

    def test_congruence_invariance(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            a = random_spd(rng, 3)
            b = random_spd(rng, 3)
            m = rng.standard_normal((3, 3)) + 3.0 * np.eye(3)
            before = spd_dist(SpdMatrix(a), SpdMatrix(b))
            after = spd_dist(SpdMatrix(m @ a @ m.T), SpdMatrix(m @ b @ m.T))
            assert after == pytest.approx(before, abs=1e-7)

    def test_triangle_inequality(self):
        for seed in range(200):
            rng = np.random.default_rng(seed)
            a, b, c = (SpdMatrix(random_spd(rng, 3)) for _ in range(3))
            assert spd_dist(a, c) <= spd_dist(a, b) + spd_dist(b, c) + 1e-9

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            spd_dist(SpdMatrix(np.eye(2)), SpdMatrix(np.eye(3)))

    def test_verbatim_mode(self, rng):
        target = np.diag([np.e, np.e ** 4])
        transformed = random_spd(rng, 2)
        params = ManifoldParams(distance_mode=DistanceMode.VERBATIM)
        # log(target) = diag(1, 4) so its inverse square root is diag(1, 1/2)
        inv_sqrt = np.diag([1.0, 0.5])
        expected = np.linalg.norm(inv_sqrt @ transformed @ inv_sqrt)
        assert spd_dist(SpdMatrix(target), SpdMatrix(transformed), params) == pytest.approx(expected)


class TestManifoldLoss:
    def test_apply_associator_per_position(self, rng):
        p = rng.standard_normal((3, 2))
        code = rng.standard_normal((2, 4, 5))
        out = apply_associator(p, code)
        assert out.shape == (3, 4, 5)
        np.testing.assert_allclose(out[:, 2, 3], p @ code[:, 2, 3])

    def test_associator_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            apply_associator(np.eye(3), rng.standard_normal((2, 3, 3)))

    def test_zero_when_targets_are_mapped_sources(self, rng):
        p = rng.standard_normal((3, 3)) + 2 * np.eye(3)
        xs = [rng.standard_normal((3, 5, 5)) for _ in range(2)]
        ys = [apply_associator(p, x) for x in xs]
        loss = manifold_loss([xs], [ys], [p], weights=np.eye(2))
        assert loss < 1e-8

    def test_one_pair_equals_distance(self, rng):
        x = rng.standard_normal((2, 4, 4))
        y = rng.standard_normal((2, 4, 4))
        p = np.eye(2)
        expected = spd_dist(spd_embed(y), spd_embed(x))
        assert manifold_loss([[x]], [[y]], [p]) == pytest.approx(expected)

    def test_two_layers_weighted_product(self, rng):
        x1 = [rng.standard_normal((2, 4, 4)) for _ in range(2)]
        y1 = [rng.standard_normal((2, 4, 4)) for _ in range(2)]
        x2 = [rng.standard_normal((3, 3, 3)) for _ in range(2)]
        y2 = [rng.standard_normal((3, 3, 3)) for _ in range(2)]
        p1 = np.eye(2)
        p2 = rng.standard_normal((3, 3)) + 2 * np.eye(3)
        w = np.array([[0.7, 0.3], [0.1, 0.9]])
        expected = 0.0
        for i in range(2):
            for j in range(2):
                d1 = spd_dist(spd_embed(y1[j]), spd_embed(apply_associator(p1, x1[i])))
                d2 = spd_dist(spd_embed(y2[j]), spd_embed(apply_associator(p2, x2[i])))
                expected += w[i, j] * d1 * d2
        assert manifold_loss([x1, x2], [y1, y2], [p1, p2], weights=w) == pytest.approx(expected, rel=1e-10)

    def test_pair_distance_matrix_shape(self, rng):
        xs = [rng.standard_normal((2, 3, 3)) for _ in range(3)]
        ys = [rng.standard_normal((2, 3, 3)) for _ in range(4)]
        assert pair_distances(xs, ys, np.eye(2)).shape == (3, 4)

    def test_weight_shape_mismatch(self, rng):
        xs = [rng.standard_normal((2, 3, 3)) for _ in range(2)]
        with pytest.raises(DimensionError):
            manifold_loss([xs], [xs], [np.eye(2)], weights=np.ones((3, 2)))

    def test_layer_count_mismatch(self, rng):
        xs = [rng.standard_normal((2, 3, 3))]
        with pytest.raises(DimensionError):
            manifold_loss([xs, xs], [xs], [np.eye(2)])
