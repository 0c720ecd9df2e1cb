import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from classforget.data import (ClassPartition, ImageDataset, LimitedSubsetSpec,
                              UNSEEN_AUGMENTATIONS, augment_unseen,
                              batch_iterator, build_limited_subset,
                              export_folder_dataset, load_folder_dataset,
                              random_affine, rotate_images, synthetic_dataset,
                              to_grayscale)
from classforget.errors import (AugmentationConflictError,
                                InsufficientDataError, InvalidPartitionError)


def flat_dataset(per_class: list[int], image_shape=(1, 2, 2)) -> ImageDataset:
    images, labels = [], []
    for c, n in enumerate(per_class):
        images.append(torch.rand(n, *image_shape))
        labels.extend([c] * n)
    return ImageDataset(torch.cat(images), torch.tensor(labels), len(per_class))


class TestPartition:
    def test_last_k(self):
        p = ClassPartition.last_k(10, 2)
        assert p.excluded_ids == (8, 9)
        assert p.remaining_ids == tuple(range(8))
        assert p.n_e == 2 and p.n_ne == 8

    def test_invariants(self):
        with pytest.raises(InvalidPartitionError):
            ClassPartition((0, 1), (1, 2))  # overlap
        with pytest.raises(InvalidPartitionError):
            ClassPartition((), (0, 1))
        with pytest.raises(InvalidPartitionError):
            ClassPartition((0,), ())
        with pytest.raises(InvalidPartitionError):
            ClassPartition((0, 5), (1, 2))  # hole in the label set

    def test_flags(self):
        p = ClassPartition.from_excluded(4, [1, 3])
        flags = p.excluded_flags(torch.tensor([0, 1, 2, 3, 1]))
        assert flags.tolist() == [False, True, False, True, True]


class TestLimitedSubset:
    def test_fraction_rounding(self):
        ds = flat_dataset([100] * 3)
        spec = LimitedSubsetSpec(fraction_per_class=0.10, seed=0)
        subset = build_limited_subset(ds, spec)
        assert all(len(subset.per_class[c]) == 10 for c in range(3))

    def test_per_class_count_three(self):
        # the few-shot regime: exactly 3 images per class survive
        ds = flat_dataset([30, 29, 31])
        subset = build_limited_subset(
            ds, LimitedSubsetSpec(per_class_count=3, seed=1))
        assert all(len(subset.per_class[c]) == 3 for c in range(3))

    def test_ceiling_guarantees_one_example(self):
        ds = flat_dataset([3, 3])
        subset = build_limited_subset(
            ds, LimitedSubsetSpec(fraction_per_class=0.01, seed=0))
        assert all(len(v) == 1 for v in subset.per_class.values())

    def test_deterministic(self):
        ds = flat_dataset([50, 40])
        spec = LimitedSubsetSpec(fraction_per_class=0.3, seed=9)
        a = build_limited_subset(ds, spec)
        b = build_limited_subset(ds, spec)
        assert a.per_class == b.per_class
        assert torch.equal(a.indices, b.indices)

    def test_count_exceeding_class_size_raises(self):
        ds = flat_dataset([5, 5])
        with pytest.raises(InsufficientDataError):
            build_limited_subset(ds, LimitedSubsetSpec(per_class_count=6, seed=0))

    def test_exactly_one_selector(self):
        with pytest.raises(InsufficientDataError):
            LimitedSubsetSpec(fraction_per_class=0.5, per_class_count=3)
        with pytest.raises(InsufficientDataError):
            LimitedSubsetSpec()

    def test_export_indices_format(self, tmp_path):
        ds = flat_dataset([4, 4])
        subset = build_limited_subset(
            ds, LimitedSubsetSpec(per_class_count=2, seed=0))
        out = tmp_path / "subset.txt"
        subset.export_indices(out)
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 4
        for line in lines:
            c, i = line.split(",")
            assert int(c) in (0, 1) and 0 <= int(i) < 4


class TestAugmentations:
    def test_grayscale_idempotent_on_gray_input(self):
        gray = torch.rand(3, 1, 5, 5).expand(-1, 3, -1, -1).contiguous()
        out = augment_unseen(gray, "grayscale")
        assert torch.allclose(out, gray, atol=1e-6)

    def test_vertical_flip_is_involution(self):
        x = torch.rand(4, 3, 6, 6)
        twice = augment_unseen(augment_unseen(x, "vertical-flip"),
                               "vertical-flip")
        assert torch.equal(twice, x)

    def test_rotation_zero_degrees_is_identity(self):
        x = torch.rand(2, 3, 5, 5)
        assert torch.equal(rotate_images(x, 0), x)

    def test_rotation_kind_is_quarter_turn(self):
        x = torch.rand(2, 3, 5, 5)
        once = augment_unseen(x, "rotation")
        assert torch.equal(once, torch.rot90(x, 1, dims=(-2, -1)))
        four = x
        for _ in range(4):
            four = augment_unseen(four, "rotation")
        assert torch.equal(four, x)

    def test_affine_deterministic_and_shape_preserving(self):
        x = torch.rand(5, 3, 8, 8)
        a = random_affine(x, seed=3)
        b = random_affine(x, seed=3)
        assert torch.equal(a, b)
        assert a.shape == x.shape
        assert not torch.equal(a, x)

    def test_conflict_with_training_augmentations(self):
        x = torch.rand(1, 3, 4, 4)
        with pytest.raises(AugmentationConflictError):
            augment_unseen(x, "vertical-flip",
                           trained_augmentations=("vertical-flip",))
        with pytest.raises(AugmentationConflictError):
            augment_unseen(x, "not-a-kind")

    @pytest.mark.parametrize("kind", UNSEEN_AUGMENTATIONS)
    def test_shape_preserved_for_all_kinds(self, kind):
        x = torch.rand(3, 3, 7, 7)
        out = augment_unseen(x, kind, seed=1)
        assert out.shape == x.shape
        assert torch.isfinite(out).all()


class TestBatchIterator:
    def setup_method(self):
        self.ds = flat_dataset([40, 40, 20])
        self.partition = ClassPartition.last_k(3, 1)
        self.subset = build_limited_subset(
            self.ds, LimitedSubsetSpec(fraction_per_class=1.0, seed=0))

    def test_single_batch_when_size_matches(self):
        ds = flat_dataset([32, 32])
        subset = build_limited_subset(
            ds, LimitedSubsetSpec(fraction_per_class=1.0, seed=0))
        part = ClassPartition.last_k(2, 1)
        batches = list(batch_iterator(subset, part, 64, seed=0))
        assert len(batches) == 1 and batches[0].s == 64

    def test_no_excluded_examples_in_subset(self):
        from classforget.data import LimitedSubset
        ds = flat_dataset([30, 30])
        # hand-build a subset holding only remaining-class (label 0) examples
        idx = ds.indices_for_class(0)
        subset = LimitedSubset(ds, {0: list(range(30))}, idx,
                               LimitedSubsetSpec(fraction_per_class=1.0))
        part = ClassPartition.last_k(2, 1)
        for batch in batch_iterator(subset, part, 16, seed=0):
            assert batch.s_e == 0 and batch.s_ne == batch.s

    def test_batch_count_matches_ceiling(self):
        # a 5000-example subset at batch 64 -> ceil(5000/64) = 79 batches
        ds = flat_dataset([50] * 100, image_shape=(1, 1, 1))
        subset = build_limited_subset(
            ds, LimitedSubsetSpec(fraction_per_class=1.0, seed=0))
        part = ClassPartition.last_k(100, 20)
        batches = list(batch_iterator(subset, part, 64, seed=1))
        assert len(batches) == math.ceil(5000 / 64) == 79

    def test_epoch_covers_each_example_once(self):
        seen = torch.cat([b.images.flatten(1).sum(1)
                          for b in batch_iterator(self.subset, self.partition,
                                                  16, seed=3)])
        expected = self.subset.images().flatten(1).sum(1)
        assert torch.allclose(seen.sort().values, expected.sort().values)

    def test_seed_determinism(self):
        a = [b.labels for b in batch_iterator(self.subset, self.partition, 16,
                                              seed=5)]
        b = [b.labels for b in batch_iterator(self.subset, self.partition, 16,
                                              seed=5)]
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_counts_consistent(self):
        for batch in batch_iterator(self.subset, self.partition, 13, seed=2):
            assert batch.s_e + batch.s_ne == batch.s
            assert batch.s_e == int(batch.excluded_flags.sum())

    def test_empty_subset_raises(self):
        ds = flat_dataset([4])
        subset = build_limited_subset(
            ds, LimitedSubsetSpec(fraction_per_class=1.0, seed=0))
        subset.indices = torch.zeros(0, dtype=torch.long)
        with pytest.raises(InsufficientDataError):
            next(batch_iterator(subset, ClassPartition.last_k(2, 1), 4, seed=0))

    @given(st.integers(1, 64), st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_flag_partition_consistency(self, batch_size, seed):
        for batch in batch_iterator(self.subset, self.partition, batch_size,
                                    seed=seed):
            expected = self.partition.excluded_flags(batch.labels)
            assert torch.equal(batch.excluded_flags, expected)


class TestSyntheticAndFolder:
    def test_synthetic_counts_and_range(self):
        train, test = synthetic_dataset(num_classes=3, train_per_class=8,
                                        test_per_class=4, image_hw=12, seed=0)
        assert len(train) == 24 and len(test) == 12
        assert train.images.min() >= 0 and train.images.max() <= 1
        assert train.class_counts() == [8, 8, 8]

    def test_synthetic_deterministic(self):
        a, _ = synthetic_dataset(num_classes=2, train_per_class=5,
                                 test_per_class=2, image_hw=8, seed=7)
        b, _ = synthetic_dataset(num_classes=2, train_per_class=5,
                                 test_per_class=2, image_hw=8, seed=7)
        assert torch.equal(a.images, b.images)

    def test_folder_round_trip(self, tmp_path):
        train, test = synthetic_dataset(num_classes=3, train_per_class=6,
                                        test_per_class=3, image_hw=8, seed=2)
        export_folder_dataset(train, tmp_path, "train")
        export_folder_dataset(test, tmp_path, "test")
        train2, test2 = load_folder_dataset(tmp_path)
        assert len(train2) == len(train) and len(test2) == len(test)
        assert train2.num_classes == 3
        assert torch.equal(train2.labels, train.labels)
        # PNG quantizes to 8-bit: half a step of tolerance
        assert (train2.images - train.images).abs().max() <= (0.5 / 255) + 1e-6

    def test_missing_folder_raises(self, tmp_path):
        with pytest.raises(InsufficientDataError):
            load_folder_dataset(tmp_path)
