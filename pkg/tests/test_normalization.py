"""
Tests for intra-modal unit normalization.
"""

import numpy as np
import pytest

from csc4net.core.exceptions import DegenerateInputError, DimensionError
from csc4net.schemas.config import IunMode, IunParams
from csc4net.services.normalization import iun, iun_scalars

VERBATIM = IunParams(mode=IunMode.VERBATIM)


class TestStrictUnit:
    def test_unit_code_unchanged(self):
        z = np.zeros((2, 3, 3))
        z[0, 1, 1] = 1.0
        assert iun_scalars([z]) == [1.0]
        np.testing.assert_array_equal(iun([z])[0], z)

    def test_norm_two_code_halved(self):
        z = np.zeros((1, 2, 2))
        z[0, 0, 0] = 2.0
        out = iun([z])[0]
        assert out[0, 0, 0] == pytest.approx(1.0)
        assert iun_scalars([z]) == [0.5]

    def test_every_output_on_unit_sphere(self, rng):
        codes = [rng.standard_normal((3, 4, 4)) * s for s in (0.01, 1.0, 250.0)]
        for z in iun(codes):
            assert np.linalg.norm(z) == pytest.approx(1.0, abs=1e-10)

    def test_unit_norms_over_many_codes(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
            codes = [rng.standard_normal(shape) * 10.0 ** rng.uniform(-4, 4) for _ in range(10)]
            for z in iun(codes):
                assert abs(np.linalg.norm(z) - 1.0) <= 1e-10

    def test_scale_invariance(self, rng):
        z = rng.standard_normal((2, 5, 5))
        np.testing.assert_allclose(iun([7.0 * z])[0], iun([3.0 * z])[0], atol=1e-12)

    def test_idempotent(self, rng):
        once = iun([rng.standard_normal((2, 3, 3)) for _ in range(4)])
        twice = iun(once)
        for a, b in zip(once, twice):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_directions_preserved(self, rng):
        z = rng.standard_normal((2, 3, 3))
        out = iun([z])[0]
        assert float(np.sum(out * z)) > 0
        np.testing.assert_allclose(out * np.linalg.norm(z), z, atol=1e-12)

    def test_zero_code_names_sample(self, rng):
        codes = [rng.standard_normal((1, 2, 2)), np.zeros((1, 2, 2)), rng.standard_normal((1, 2, 2))]
        with pytest.raises(DegenerateInputError) as exc:
            iun(codes)
        assert exc.value.index == 1
        assert "sample 1" in str(exc.value)

    def test_empty_batch(self):
        with pytest.raises(DimensionError):
            iun([])


class TestVerbatim:
    """The printed scaling 1 / (batch max * sqrt(1 - ||Z||^2)) with the radicand clamped"""

    def test_closed_form(self):
        a = np.array([[[0.5]]])
        b = np.array([[[0.25]]])
        scalars = iun_scalars([a, b], VERBATIM)
        assert scalars[0] == pytest.approx(1.0 / (0.5 * np.sqrt(0.75)))
        assert scalars[1] == pytest.approx(1.0 / (0.5 * np.sqrt(1.0 - 0.0625)))

    def test_radicand_clamped_to_epsilon(self):
        params = IunParams(mode=IunMode.VERBATIM, epsilon=1e-6)
        z = np.array([[[2.0]]])
        assert iun_scalars([z], params)[0] == pytest.approx(1.0 / (2.0 * np.sqrt(1e-6)))

    def test_scalars_positive(self, rng):
        codes = [rng.standard_normal((2, 3, 3)) for _ in range(5)]
        assert all(s > 0 for s in iun_scalars(codes, VERBATIM))
