"""Original-model training and the shared supervised training loop.

The desk-scale recipe is a 1/10 miniature of the usual 300-epoch small-image
schedule: 30 epochs of SGD (momentum 0.9, weight decay 1e-4), lr 0.1 decayed
by 5x at epochs 9/15/21/24/27, random-crop + horizontal-flip augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ClassPartition, ImageDataset, random_crop_flip
from .erwp import kd_loss
from .data import MiniBatch
from .models import build_model


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 5.0
    lr_decay_epochs: tuple[int, ...] = (9, 15, 21, 24, 27)
    augmentations: tuple[str, ...] = ("random-crop", "horizontal-flip")
    seed: int = 0


def _apply_train_augment(images: torch.Tensor, augmentations: tuple[str, ...],
                         generator: torch.Generator) -> torch.Tensor:
    if "random-crop" in augmentations or "horizontal-flip" in augmentations:
        # random_crop_flip implements both; crop is a no-op only if pad=0
        return random_crop_flip(images, generator)
    return images


def train_classifier(model: nn.Module, images: torch.Tensor,
                     labels: torch.Tensor, cfg: TrainConfig,
                     teacher: nn.Module | None = None,
                     kd_beta: float = 0.0, kappa: float = 2.0,
                     kd_partition: ClassPartition | None = None,
                     augment: bool = True,
                     freeze_bn_stats: bool = False) -> nn.Module:
    """SGD training of ``model`` on a fixed tensor dataset.

    When a teacher is given, a remaining-class-sliced distillation term with
    weight ``kd_beta`` is added for every example (zero weight degenerates to
    plain cross-entropy training with an identical update sequence).
    """
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr,
                          momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    if teacher is not None:
        teacher.eval()
    lr = cfg.lr
    n = len(labels)
    for epoch in range(1, cfg.epochs + 1):
        if epoch in cfg.lr_decay_epochs:
            lr = lr / cfg.lr_decay_factor
            for group in opt.param_groups:
                group["lr"] = lr
        g = torch.Generator().manual_seed(cfg.seed * 100_003 + epoch)
        order = torch.randperm(n, generator=g)
        model.train()
        if freeze_bn_stats:
            for module in model.modules():
                if isinstance(module, nn.modules.batchnorm._BatchNorm):
                    module.eval()
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            x, y = images[sel], labels[sel]
            if augment:
                x = _apply_train_augment(x, cfg.augmentations, g)
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if teacher is not None and kd_beta != 0.0 and kd_partition is not None:
                with torch.no_grad():
                    t_logits = teacher(x)
                batch = MiniBatch(x, y, kd_partition.excluded_flags(y))
                _, _, l_kd = kd_loss(logits, t_logits, batch, kd_partition,
                                     kappa)
                loss = loss + kd_beta * l_kd
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


def train_original(train_set: ImageDataset, arch: str,
                   cfg: TrainConfig) -> nn.Module:
    """Train the original model on every class with the full recipe."""
    model = build_model(arch, train_set.num_classes, seed=cfg.seed)
    return train_classifier(model, train_set.images, train_set.labels, cfg)
