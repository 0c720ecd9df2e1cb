import pytest
import torch
import torch.nn as nn

from classforget.data import (ClassPartition, LimitedSubsetSpec,
                              build_limited_subset, synthetic_dataset)
from classforget.training import TrainConfig, train_original


def assert_bit_identical(a: torch.Tensor, b: torch.Tensor, msg: str = ""):
    __tracebackhide__ = True
    if a.dtype.is_floating_point:
        same = torch.equal(a.view(torch.int32 if a.dtype == torch.float32
                                  else torch.int64),
                           b.view(torch.int32 if b.dtype == torch.float32
                                  else torch.int64))
    else:
        same = torch.equal(a, b)
    assert same, f"tensors differ bitwise {msg}"


class TinyLinearNet(nn.Module):
    """Minimal model honoring the package conventions (features + head)."""

    def __init__(self, in_dim: int, num_classes: int, bias: bool = True):
        super().__init__()
        self.head = nn.Linear(in_dim, num_classes, bias=bias)
        self.num_classes = num_classes

    def features(self, x):
        return x.flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


@pytest.fixture(scope="session")
def tiny_task():
    """Small trained model + data shared by metrics/baseline tests.

    4 classes, 16x16 images, a few seconds of training; accurate enough
    (>80%) to exercise the evaluation and baseline contracts.
    """
    torch.manual_seed(0)
    train, test = synthetic_dataset(num_classes=4, train_per_class=120,
                                    test_per_class=40, image_hw=16, seed=5,
                                    noise=0.25)
    partition = ClassPartition.last_k(4, 1)
    cfg = TrainConfig(epochs=10, lr_decay_epochs=(6, 9), seed=3,
                      batch_size=64)
    model = train_original(train, "convnet-xs", cfg)
    subset = build_limited_subset(
        train, LimitedSubsetSpec(fraction_per_class=0.25, seed=4))
    return {"train": train, "test": test, "model": model,
            "partition": partition, "subset": subset, "arch": "convnet-xs"}
