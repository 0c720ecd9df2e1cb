"""Datasets, the limited training subset, batching, and augmentations.

The limited-data setting: after training on the full dataset, only a small
per-class sample remains available for forgetting and evaluation. Subset
selection is a pure function of (dataset, spec) so two runs with the same
config pick the same examples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from collections.abc import Iterator, Sequence

import torch

from .errors import (AugmentationConflictError, InsufficientDataError,
                     InvalidPartitionError)

UNSEEN_AUGMENTATIONS = ("grayscale", "vertical-flip", "rotation", "random-affine")


@dataclass(frozen=True)
class ClassPartition:
    """Disjoint excluded/remaining split covering the full label set."""

    excluded_ids: tuple[int, ...]
    remaining_ids: tuple[int, ...]

    def __post_init__(self):
        exc, rem = set(self.excluded_ids), set(self.remaining_ids)
        if exc & rem:
            raise InvalidPartitionError(f"classes in both sides: {sorted(exc & rem)}")
        if not exc:
            raise InvalidPartitionError("at least one excluded class required")
        if not rem:
            raise InvalidPartitionError("at least one remaining class required")
        full = exc | rem
        if full != set(range(len(full))):
            raise InvalidPartitionError("partition does not cover a contiguous "
                                        "label set starting at 0")
        object.__setattr__(self, "excluded_ids", tuple(sorted(exc)))
        object.__setattr__(self, "remaining_ids", tuple(sorted(rem)))

    @property
    def n_e(self) -> int:
        return len(self.excluded_ids)

    @property
    def n_ne(self) -> int:
        return len(self.remaining_ids)

    @property
    def num_classes(self) -> int:
        return self.n_e + self.n_ne

    @classmethod
    def last_k(cls, num_classes: int, k: int) -> "ClassPartition":
        """Exclude the last ``k`` classes of the label ordering."""
        return cls(tuple(range(num_classes - k, num_classes)),
                   tuple(range(num_classes - k)))

    @classmethod
    def from_excluded(cls, num_classes: int, excluded: Sequence[int]) -> "ClassPartition":
        exc = tuple(sorted(set(int(c) for c in excluded)))
        rem = tuple(c for c in range(num_classes) if c not in set(exc))
        return cls(exc, rem)

    def excluded_flags(self, labels: torch.Tensor) -> torch.Tensor:
        exc = torch.as_tensor(self.excluded_ids, device=labels.device)
        return torch.isin(labels, exc)


@dataclass
class ImageDataset:
    """In-memory labeled image set: float32 images in [0, 1], int64 labels."""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise InsufficientDataError("images/labels length mismatch")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise InsufficientDataError("label outside declared class count")

    def __len__(self) -> int:
        return len(self.labels)

    def indices_for_class(self, class_id: int) -> torch.Tensor:
        return torch.nonzero(self.labels == class_id, as_tuple=False).flatten()

    def class_counts(self) -> list[int]:
        return [int((self.labels == c).sum()) for c in range(self.num_classes)]


# --------------------------------------------------------------------------
# Synthetic desk-scale dataset
# --------------------------------------------------------------------------

def _class_recipe(generator: torch.Generator, class_id: int, num_classes: int):
    """Per-class pattern parameters: grating angle/frequency, tint, blob site."""
    angle = math.pi * class_id / num_classes
    freq = 2.0 + 3.0 * torch.rand((), generator=generator).item()
    tint = 0.35 + 0.65 * torch.rand(3, generator=generator)
    blob_angle = 2 * math.pi * class_id / num_classes
    blob = (0.5 + 0.3 * math.cos(blob_angle), 0.5 + 0.3 * math.sin(blob_angle))
    return angle, freq, tint, blob


def synthetic_dataset(num_classes: int = 10, train_per_class: int = 500,
                      test_per_class: int = 100, image_hw: int = 32,
                      seed: int = 0, noise: float = 1.0
                      ) -> tuple[ImageDataset, ImageDataset]:
    """Procedural image classification task.

    Each class mixes an oriented grating, a Gaussian blob at a class-specific
    location and a color tint. Per-example jitter of angle, frequency, phase,
    blob position/strength, tint, contrast and brightness plus heavy pixel
    noise keeps a well-trained small CNN in the 85-95% range with
    non-saturated confidence, so forgetting dynamics resemble a real task
    instead of a memorized one.
    """
    recipe_gen = torch.Generator().manual_seed(seed)
    recipes = [_class_recipe(recipe_gen, c, num_classes) for c in range(num_classes)]

    ys, xs = torch.meshgrid(torch.linspace(0, 1, image_hw),
                            torch.linspace(0, 1, image_hw), indexing="ij")

    def u(g, *shape):
        return 2 * torch.rand(*shape, generator=g) - 1  # U[-1, 1]

    def make_split(count_per_class: int, split_tag: int) -> ImageDataset:
        images, labels = [], []
        for c, (angle, freq, tint, blob) in enumerate(recipes):
            n = count_per_class
            g = torch.Generator().manual_seed(seed * 1_000_003 + c * 9_176 + split_tag)
            a = angle + 0.2 * u(g, n)
            f = freq + 0.4 * u(g, n)
            phase = 2 * math.pi * torch.rand(n, generator=g)
            bu = blob[0] + 0.22 * u(g, n)
            bv = blob[1] + 0.22 * u(g, n)
            bamp = 0.35 + 0.45 * torch.rand(n, generator=g)
            contrast = 0.5 + 0.7 * torch.rand(n, generator=g)
            shift = 0.2 * u(g, n)
            tints = (tint + 0.2 * u(g, n, 3)).clamp(0.05, 1.0)

            coord = (xs * torch.cos(a).view(n, 1, 1)
                     + ys * torch.sin(a).view(n, 1, 1))
            grating = torch.sin(2 * math.pi * f.view(n, 1, 1) * coord
                                + phase.view(n, 1, 1))
            d2 = (xs - bu.view(n, 1, 1)) ** 2 + (ys - bv.view(n, 1, 1)) ** 2
            bump = torch.exp(-d2 / (2 * 0.10 ** 2))
            gray = (0.32 * contrast.view(n, 1, 1) * grating
                    + bamp.view(n, 1, 1) * bump)
            base = (0.45 + gray + shift.view(n, 1, 1)).unsqueeze(1)
            img = tints.view(n, 3, 1, 1) * base
            img = img + noise * torch.randn(n, 3, image_hw, image_hw, generator=g)
            images.append(img.clamp(0.0, 1.0))
            labels.extend([c] * n)
        return ImageDataset(torch.cat(images), torch.tensor(labels), num_classes)

    return make_split(train_per_class, 1), make_split(test_per_class, 2)


# --------------------------------------------------------------------------
# Folder-backed datasets: one subdirectory per class under train/ and test/
# --------------------------------------------------------------------------

def export_folder_dataset(dataset: ImageDataset, root: str | Path,
                          split: str) -> None:
    """Write a dataset as root/<split>/class_<id>/<index>.png."""
    from PIL import Image
    import numpy as np

    root = Path(root)
    for c in range(dataset.num_classes):
        cls_dir = root / split / f"class_{c:04d}"
        cls_dir.mkdir(parents=True, exist_ok=True)
        for j, idx in enumerate(dataset.indices_for_class(c).tolist()):
            arr = (dataset.images[idx].clamp(0, 1) * 255).round().to(torch.uint8)
            Image.fromarray(arr.permute(1, 2, 0).numpy()).save(
                cls_dir / f"{j:05d}.png")


def load_folder_dataset(root: str | Path) -> tuple[ImageDataset, ImageDataset]:
    """Load train/test splits from a per-class directory layout."""
    from PIL import Image
    import numpy as np

    root = Path(root)

    def load_split(split: str) -> ImageDataset:
        split_dir = root / split
        if not split_dir.is_dir():
            raise InsufficientDataError(f"missing split directory {split_dir}")
        class_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
        if not class_dirs:
            raise InsufficientDataError(f"no class directories under {split_dir}")
        images, labels = [], []
        for c, cls_dir in enumerate(class_dirs):
            files = sorted(cls_dir.glob("*.png"))
            if not files:
                raise InsufficientDataError(f"no images in {cls_dir}")
            for f in files:
                arr = np.asarray(Image.open(f).convert("RGB"), dtype="float32") / 255.0
                images.append(torch.from_numpy(arr).permute(2, 0, 1))
                labels.append(c)
        return ImageDataset(torch.stack(images), torch.tensor(labels),
                            len(class_dirs))

    return load_split("train"), load_split("test")


# --------------------------------------------------------------------------
# Limited subset
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LimitedSubsetSpec:
    """How much training data survives into the limited-data setting.

    Exactly one of ``fraction_per_class`` / ``per_class_count`` is set.
    ``excluded_last_k`` records the default tail-of-label-ordering partition
    the subset is used with.
    """

    fraction_per_class: float | None = None
    per_class_count: int | None = None
    seed: int = 0
    excluded_last_k: int = 2

    def __post_init__(self):
        if (self.fraction_per_class is None) == (self.per_class_count is None):
            raise InsufficientDataError(
                "exactly one of fraction_per_class/per_class_count must be set")
        if self.fraction_per_class is not None and not (0 < self.fraction_per_class <= 1):
            raise InsufficientDataError("fraction_per_class must be in (0, 1]")
        if self.per_class_count is not None and self.per_class_count < 1:
            raise InsufficientDataError("per_class_count must be >= 1")


@dataclass
class LimitedSubset:
    """Selected example indices into a dataset, grouped per class."""

    dataset: ImageDataset
    per_class: dict[int, list[int]]  # class id -> within-class positions
    indices: torch.Tensor            # global dataset indices, class-ascending
    spec: LimitedSubsetSpec

    def __len__(self) -> int:
        return len(self.indices)

    def images(self) -> torch.Tensor:
        return self.dataset.images[self.indices]

    def labels(self) -> torch.Tensor:
        return self.dataset.labels[self.indices]

    def class_images(self, class_id: int) -> torch.Tensor:
        cls_idx = self.dataset.indices_for_class(class_id)
        pos = torch.as_tensor(self.per_class[class_id], dtype=torch.long)
        return self.dataset.images[cls_idx[pos]]

    def export_indices(self, path: str | Path) -> None:
        """Audit file: one 'class_id,example_index' line per selected example.

        example_index is the position inside the class's example list.
        """
        lines = [f"{c},{i}" for c in sorted(self.per_class)
                 for i in self.per_class[c]]
        from .checkpoint import atomic_write_text
        atomic_write_text(path, "\n".join(lines) + "\n")


def build_limited_subset(dataset: ImageDataset,
                         spec: LimitedSubsetSpec) -> LimitedSubset:
    """Seeded without-replacement per-class sample; ceiling rounding.

    Deterministic in (dataset, spec); each class keeps at least one example.
    """
    per_class: dict[int, list[int]] = {}
    global_idx: list[int] = []
    for c in range(dataset.num_classes):
        cls_idx = dataset.indices_for_class(c)
        n_c = len(cls_idx)
        if n_c == 0:
            raise InsufficientDataError(f"class {c} has no examples")
        if spec.per_class_count is not None:
            k = spec.per_class_count
            if k > n_c:
                raise InsufficientDataError(
                    f"per_class_count={k} exceeds class {c} size {n_c}")
        else:
            k = math.ceil(spec.fraction_per_class * n_c)
        g = torch.Generator().manual_seed(spec.seed * 1_000_003 + c)
        pos = sorted(torch.randperm(n_c, generator=g)[:k].tolist())
        per_class[c] = pos
        global_idx.extend(cls_idx[pos].tolist())
    return LimitedSubset(dataset, per_class,
                         torch.as_tensor(global_idx, dtype=torch.long), spec)


# --------------------------------------------------------------------------
# Augmentations
# --------------------------------------------------------------------------

def to_grayscale(images: torch.Tensor) -> torch.Tensor:
    """Luminance replicated across the three channels."""
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=images.dtype)
    lum = (images * weights.view(1, 3, 1, 1)).sum(dim=1, keepdim=True)
    return lum.expand(-1, images.shape[1], -1, -1).clone()


def rotate_images(images: torch.Tensor, degrees: int) -> torch.Tensor:
    """Rotation by a multiple of 90 degrees (label preserving, exact)."""
    if degrees % 90 != 0:
        raise ValueError("only multiples of 90 degrees are supported")
    k = (degrees // 90) % 4
    return torch.rot90(images, k, dims=(-2, -1)).contiguous()


def random_affine(images: torch.Tensor, seed: int,
                  max_translate: float = 0.1,
                  max_shear_deg: float = 10.0) -> torch.Tensor:
    """Bounded per-image shear/translation, seeded, bilinear resample."""
    import torch.nn.functional as F

    n = images.shape[0]
    g = torch.Generator().manual_seed(seed)
    tx = (torch.rand(n, generator=g) * 2 - 1) * max_translate
    ty = (torch.rand(n, generator=g) * 2 - 1) * max_translate
    shear = torch.tan(((torch.rand(n, generator=g) * 2 - 1)
                       * max_shear_deg) * math.pi / 180.0)
    theta = torch.zeros(n, 2, 3, dtype=images.dtype)
    theta[:, 0, 0] = 1.0
    theta[:, 0, 1] = shear
    theta[:, 0, 2] = tx
    theta[:, 1, 1] = 1.0
    theta[:, 1, 2] = ty
    grid = F.affine_grid(theta, list(images.shape), align_corners=False)
    return F.grid_sample(images, grid, mode="bilinear",
                         padding_mode="zeros", align_corners=False)


def augment_unseen(images: torch.Tensor, kind: str, seed: int = 0,
                   trained_augmentations: Sequence[str] = ()) -> torch.Tensor:
    """Apply a label-preserving transform the model never saw in training.

    ``trained_augmentations`` is the augmentation list recorded when the
    original model was trained; requesting one of those raises
    AugmentationConflictError because the transform would not perturb the
    model into revealing class-relevant parameters.
    """
    if kind not in UNSEEN_AUGMENTATIONS:
        raise AugmentationConflictError(
            f"unknown augmentation kind {kind!r}; choose from {UNSEEN_AUGMENTATIONS}")
    if kind in set(trained_augmentations):
        raise AugmentationConflictError(
            f"augmentation {kind!r} was part of the training augmentations "
            f"{tuple(trained_augmentations)}")
    if kind == "grayscale":
        return to_grayscale(images)
    if kind == "vertical-flip":
        return torch.flip(images, dims=(-2,)).contiguous()
    if kind == "rotation":
        return rotate_images(images, 90)
    return random_affine(images, seed)


def random_crop_flip(images: torch.Tensor, generator: torch.Generator,
                     pad: int = 4) -> torch.Tensor:
    """Training-time augmentation: zero-pad, random crop, random h-flip."""
    import torch.nn.functional as F

    n, _, h, w = images.shape
    padded = F.pad(images, (pad, pad, pad, pad))
    out = torch.empty_like(images)
    offs = torch.randint(0, 2 * pad + 1, (n, 2), generator=generator)
    flips = torch.rand(n, generator=generator) < 0.5
    for i in range(n):
        dy, dx = int(offs[i, 0]), int(offs[i, 1])
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = torch.flip(crop, dims=(-1,)) if flips[i] else crop
    return out


# --------------------------------------------------------------------------
# Mini-batches
# --------------------------------------------------------------------------

@dataclass
class MiniBatch:
    images: torch.Tensor
    labels: torch.Tensor
    excluded_flags: torch.Tensor

    @property
    def s(self) -> int:
        return len(self.labels)

    @property
    def s_e(self) -> int:
        return int(self.excluded_flags.sum())

    @property
    def s_ne(self) -> int:
        return self.s - self.s_e


def batch_iterator(subset: LimitedSubset, partition: ClassPartition,
                   batch_size: int, seed: int) -> Iterator[MiniBatch]:
    """One epoch of seed-shuffled batches covering every example exactly once."""
    if batch_size < 1:
        raise InsufficientDataError("batch_size must be >= 1")
    n = len(subset)
    if n == 0:
        raise InsufficientDataError("cannot iterate an empty subset")
    g = torch.Generator().manual_seed(seed)
    order = torch.randperm(n, generator=g)
    images, labels = subset.images(), subset.labels()
    flags = partition.excluded_flags(labels)
    for start in range(0, n, batch_size):
        sel = order[start:start + batch_size]
        yield MiniBatch(images[sel], labels[sel], flags[sel])
