"""
Tests for phantom generation, modality maps, splits and dataset directories.
"""

import numpy as np
import pytest

from csc4net.core.exceptions import DatasetIOError, DimensionError
from csc4net.schemas.config import ModalityMap, PhantomSpec
from csc4net.services.phantoms import (
    MANIFEST_NAME,
    apply_modality_map,
    gen_phantom_pair,
    generate_pairs,
    make_split,
    read_dataset,
    write_dataset,
)


class TestGeneration:
    def test_identity_map_without_noise(self):
        a, b, _ = gen_phantom_pair(PhantomSpec(seed=3))
        np.testing.assert_array_equal(a, b)

    def test_inversion(self):
        a, b, _ = gen_phantom_pair(PhantomSpec(seed=4, modality_map=ModalityMap.parse("inversion")))
        np.testing.assert_allclose(b, 1.0 - a, atol=1e-15)

    def test_gamma_per_pixel(self):
        a, b, _ = gen_phantom_pair(PhantomSpec(size=16, seed=5, modality_map=ModalityMap.parse("gamma:2.0")))
        for i in range(16):
            for j in range(16):
                assert b[i, j] == pytest.approx(a[i, j] ** 2.0, abs=1e-15)

    def test_blur_then_remap(self, rng):
        image = rng.uniform(size=(16, 16))
        out = apply_modality_map(image, ModalityMap.parse("blur_then_remap:0,1"))
        np.testing.assert_allclose(out, image)

    def test_values_in_unit_interval(self):
        for map_text in ("identity", "inversion", "gamma:0.5", "blur_then_remap:1.0,2.0"):
            spec = PhantomSpec(seed=7, noise_sigma=0.2, modality_map=ModalityMap.parse(map_text))
            a, b, _ = gen_phantom_pair(spec)
            assert a.min() >= 0.0 and a.max() <= 1.0
            assert b.min() >= 0.0 and b.max() <= 1.0

    def test_noise_changes_b_only(self):
        clean = gen_phantom_pair(PhantomSpec(seed=8))
        noisy = gen_phantom_pair(PhantomSpec(seed=8, noise_sigma=0.05))
        np.testing.assert_array_equal(clean[0], noisy[0])
        assert not np.array_equal(clean[1], noisy[1])

    def test_deterministic(self):
        spec = PhantomSpec(seed=9, noise_sigma=0.1, modality_map=ModalityMap.parse("gamma:1.5"))
        for x, y in zip(gen_phantom_pair(spec), gen_phantom_pair(spec)):
            np.testing.assert_array_equal(x, y)

    def test_seeds_differ(self):
        assert not np.array_equal(gen_phantom_pair(PhantomSpec(seed=1))[0], gen_phantom_pair(PhantomSpec(seed=2))[0])

    def test_mask_has_three_classes(self):
        a, _, mask = gen_phantom_pair(PhantomSpec(seed=10))
        assert mask.shape == a.shape
        assert mask.dtype == np.int64
        assert set(np.unique(mask).tolist()) == {0, 1, 2}

    def test_lesion_adds_a_class(self):
        _, _, mask = gen_phantom_pair(PhantomSpec(seed=10, with_lesion=True))
        assert int(mask.max()) == 3

    def test_size_floor(self):
        with pytest.raises(ValueError):
            PhantomSpec(size=8)

    def test_generate_pairs_ids(self):
        pairs = generate_pairs(5, PhantomSpec(size=16))
        assert [p.phantom_id for p in pairs] == list(range(5))
        assert not np.array_equal(pairs[0].a, pairs[1].a)


class TestSplit:
    """Unpaired train halves and paired held-out sets"""

    @pytest.fixture
    def pairs(self):
        return generate_pairs(10, PhantomSpec(size=16, n_shapes=2))

    def test_counts(self, pairs):
        split = make_split(pairs, (0.6, 0.2, 0.2), seed=0)
        assert split.counts() == {"train_x": 3, "train_y": 3, "validation": 2, "test": 2}

    def test_training_halves_are_unpaired(self, pairs):
        split = make_split(pairs, seed=0)
        assert all(r.b is None and r.mask is None and r.a is not None for r in split.train_x)
        assert all(r.a is None and r.mask is None and r.b is not None for r in split.train_y)
        assert all(r.a is not None and r.b is not None and r.mask is not None for r in split.test)

    def test_roles_disjoint(self, pairs):
        for seed in range(100):
            split = make_split(pairs, seed=seed)
            ids = [[r.phantom_id for r in split.role(role)] for role in ("train_x", "train_y", "validation", "test")]
            flat = [i for group in ids for i in group]
            assert len(flat) == len(set(flat)) == 10

    def test_seeded(self, pairs):
        a = make_split(pairs, seed=3)
        b = make_split(pairs, seed=3)
        assert [r.phantom_id for r in a.test] == [r.phantom_id for r in b.test]

    def test_too_few_samples(self, pairs):
        with pytest.raises(DimensionError):
            make_split(pairs[:2], (0.6, 0.2, 0.2))

    def test_fractions_must_sum_to_one(self, pairs):
        with pytest.raises(ValueError):
            make_split(pairs, (0.5, 0.2, 0.2))

    def test_unknown_role(self, pairs):
        with pytest.raises(ValueError):
            make_split(pairs).role("train")


class TestDatasetDirectory:
    def test_round_trip(self, tmp_path):
        split = make_split(generate_pairs(10, PhantomSpec(size=16, seed=2)), seed=1)
        count = write_dataset(tmp_path, split)
        assert count == 3 + 3 + 2 * 3 + 2 * 3
        back = read_dataset(tmp_path)
        assert back.counts() == split.counts()
        original = {r.phantom_id: r for r in split.test}
        for record in back.test:
            np.testing.assert_array_equal(record.a, original[record.phantom_id].a)
            np.testing.assert_array_equal(record.mask, original[record.phantom_id].mask)
            assert record.mask.dtype == np.int64

    def test_manifest_lines(self, tmp_path):
        split = make_split(generate_pairs(10, PhantomSpec(size=16, seed=2)), seed=1)
        write_dataset(tmp_path, split)
        text = (tmp_path / MANIFEST_NAME).read_bytes().decode("utf-8")
        assert "\r" not in text
        lines = text.splitlines()
        role, rel, phantom_id, modality = lines[0].split("\t")
        assert role == "train_x"
        assert modality == "a"
        assert rel == f"train_x/phantom_{int(phantom_id):04d}_a.csl4"
        assert (tmp_path / rel).is_file()

    def test_f32_storage(self, tmp_path):
        split = make_split(generate_pairs(10, PhantomSpec(size=16, seed=2)), seed=1)
        write_dataset(tmp_path, split, dtype="f32")
        back = read_dataset(tmp_path)
        original = {r.phantom_id: r for r in split.test}
        for record in back.test:
            np.testing.assert_allclose(record.b, original[record.phantom_id].b, atol=1e-7)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetIOError):
            read_dataset(tmp_path)

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / MANIFEST_NAME).write_text("train_x\tonly-two-fields\n", encoding="utf-8")
        with pytest.raises(DatasetIOError):
            read_dataset(tmp_path)

    def test_unknown_role_in_manifest(self, tmp_path):
        (tmp_path / MANIFEST_NAME).write_text("bogus\tx.csl4\t0\ta\n", encoding="utf-8")
        with pytest.raises(DatasetIOError):
            read_dataset(tmp_path)
