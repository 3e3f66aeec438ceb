"""Dataset format round-trips, synthetic generation, and sampling protocol."""

import itertools
import math

import numpy as np
import pytest

from mvdistill.data import (
    MultiViewDataset,
    SyntheticSpec,
    eligible_classes,
    enumerate_eval_combinations,
    generate_synthetic,
    sample_training_views,
    split_train_val,
    synthesize,
)
from mvdistill.seeding import substream


def small_spec(**kw):
    base = dict(num_classes=4, images_per_class=5, size=8, seed=7)
    base.update(kw)
    return SyntheticSpec(**base)


class TestBinaryFormat:
    def test_write_read_write_is_byte_identical(self, tmp_path):
        ds = synthesize(small_spec())
        p1, p2 = tmp_path / "a.mvds", tmp_path / "b.mvds"
        ds.save(p1)
        MultiViewDataset.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_preserves_everything(self, tmp_path):
        ds = synthesize(small_spec())
        path = tmp_path / "ds.mvds"
        ds.save(path)
        back = MultiViewDataset.load(path)
        assert back.num_classes == ds.num_classes
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.images, ds.images)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.mvds"
        path.write_bytes(b"XXXX" + b"\x00" * 40)
        with pytest.raises(ValueError, match="magic"):
            MultiViewDataset.load(path)

    def test_truncated_file_rejected(self, tmp_path):
        ds = synthesize(small_spec())
        path = tmp_path / "trunc.mvds"
        ds.save(path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValueError, match="bytes"):
            MultiViewDataset.load(path)

    def test_missing_file_has_path_context(self, tmp_path):
        with pytest.raises(OSError, match="nowhere.mvds"):
            MultiViewDataset.load(tmp_path / "nowhere.mvds")


class TestSyntheticGeneration:
    def test_same_spec_same_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.mvds", tmp_path / "b.mvds"
        generate_synthetic(SyntheticSpec(num_classes=8, images_per_class=6, seed=7), p1)
        generate_synthetic(SyntheticSpec(num_classes=8, images_per_class=6, seed=7), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_seed_different_data(self):
        a = synthesize(small_spec(seed=1))
        b = synthesize(small_spec(seed=2))
        assert np.abs(a.images - b.images).max() > 0

    def test_identity_transform_repeats_prototype(self):
        spec = small_spec(rotate=False, jitter=0, noise_std=0.0,
                          ambiguous_fraction=0.0)
        ds = synthesize(spec)
        for c in range(spec.num_classes):
            imgs = ds.images[ds.indices_of(c)]
            for img in imgs[1:]:
                np.testing.assert_array_equal(img, imgs[0])

    def test_prototypes_pairwise_distinct(self):
        spec = small_spec(rotate=False, jitter=0, noise_std=0.0,
                          ambiguous_fraction=0.0)
        ds = synthesize(spec)
        protos = [ds.images[ds.indices_of(c)][0] for c in range(spec.num_classes)]
        dmin = min(
            float(np.linalg.norm(a - b))
            for i, a in enumerate(protos) for b in protos[i + 1:]
        )
        assert dmin > 0

    def test_views_within_class_are_distinguishable(self):
        ds = synthesize(small_spec())
        for c in range(4):
            imgs = ds.images[ds.indices_of(c)]
            assert np.abs(imgs[0] - imgs[1]).max() > 0

    def test_pixels_clamped_to_unit_interval(self):
        ds = synthesize(small_spec(noise_std=0.5))
        assert ds.images.min() >= 0.0
        assert ds.images.max() <= 1.0

    def test_variable_class_sizes(self):
        spec = SyntheticSpec(num_classes=3, images_per_class=(2, 5, 3), size=8, seed=1)
        ds = synthesize(spec)
        np.testing.assert_array_equal(ds.class_sizes(), [2, 5, 3])

    def test_ambiguous_views_lean_toward_other_class(self):
        clean = synthesize(small_spec(ambiguous_fraction=0.0, noise_std=0.0,
                                      jitter=0, rotate=False))
        mixed = synthesize(small_spec(ambiguous_fraction=0.4, noise_std=0.0,
                                      jitter=0, rotate=False))
        # rendering order is identical, so non-ambiguous tails must agree
        assert np.abs(clean.images - mixed.images).max() > 0


class TestSamplingProtocol:
    def test_class_with_exact_count_always_same_set(self):
        ds = synthesize(small_spec(images_per_class=3))
        rng = substream(0, "sample")
        expected = set(ds.indices_of(1))
        for _ in range(10):
            picks = sample_training_views(ds, 1, 3, rng)
            assert set(int(i) for i in picks) == expected

    def test_small_class_excluded_not_error(self):
        spec = SyntheticSpec(num_classes=3, images_per_class=(2, 5, 5), size=8, seed=3)
        ds = synthesize(spec)
        assert eligible_classes(ds, 3) == [1, 2]

    def test_sampling_uniform_over_subsets(self):
        """10k draws of 3-of-5: each of the 10 subsets lands near 1/10."""
        ds = synthesize(small_spec(images_per_class=5))
        rng = substream(1, "freq")
        counts = {}
        draws = 10000
        for _ in range(draws):
            picks = tuple(sorted(int(i) for i in sample_training_views(ds, 0, 3, rng)))
            counts[picks] = counts.get(picks, 0) + 1
        assert len(counts) == math.comb(5, 3)
        for freq in counts.values():
            assert abs(freq / draws - 0.1) < 0.02

    def test_requesting_more_views_than_images_raises(self):
        ds = synthesize(small_spec(images_per_class=2))
        with pytest.raises(ValueError, match="fewer"):
            sample_training_views(ds, 0, 3, substream(0, "x"))


class TestEvalCombinations:
    def test_counts_and_order(self):
        ds = synthesize(small_spec(images_per_class=5))
        combos = enumerate_eval_combinations(ds, 2, 3)
        assert len(combos) == math.comb(5, 3)
        assert combos == sorted(combos)
        pool = [int(i) for i in ds.indices_of(2)]
        assert combos == list(itertools.combinations(pool, 3))

    def test_exact_size_gives_single_combo(self):
        ds = synthesize(small_spec(images_per_class=3))
        assert len(enumerate_eval_combinations(ds, 0, 3)) == 1

    def test_cap_truncates(self):
        ds = synthesize(small_spec(images_per_class=6))
        assert len(enumerate_eval_combinations(ds, 0, 3, cap=4)) == 4

    def test_stable_across_calls(self):
        ds = synthesize(small_spec(images_per_class=5))
        assert (enumerate_eval_combinations(ds, 1, 2)
                == enumerate_eval_combinations(ds, 1, 2))

    def test_too_small_class_yields_nothing(self):
        ds = synthesize(small_spec(images_per_class=2))
        assert enumerate_eval_combinations(ds, 0, 3) == []


class TestSplit:
    def test_stratified_tail_split(self):
        ds = synthesize(small_spec(num_classes=3, images_per_class=20))
        train, val = split_train_val(ds, 0.1)
        np.testing.assert_array_equal(train.class_sizes(), [18, 18, 18])
        np.testing.assert_array_equal(val.class_sizes(), [2, 2, 2])
        assert train.num_images + val.num_images == ds.num_images

    def test_tiny_classes_keep_everything_in_train(self):
        ds = synthesize(small_spec(images_per_class=6))
        train, val = split_train_val(ds, 0.1)
        assert val.num_images == 0
        assert train.num_images == ds.num_images

    def test_deterministic(self):
        ds = synthesize(small_spec(num_classes=3, images_per_class=20))
        t1, v1 = split_train_val(ds, 0.1)
        t2, v2 = split_train_val(ds, 0.1)
        np.testing.assert_array_equal(t1.labels, t2.labels)
        np.testing.assert_array_equal(v1.images, v2.images)

    def test_eligibility_consistent_for_same_inputs(self):
        ds = synthesize(small_spec(images_per_class=(2, 5, 5, 5)))
        assert eligible_classes(ds, 3) == eligible_classes(ds, 3)

    def test_bad_fraction_rejected(self):
        ds = synthesize(small_spec())
        with pytest.raises(ValueError, match="fraction"):
            split_train_val(ds, 1.0)
