#!/usr/bin/env python3
"""Full-data retraining (FDR) reference.

WARNING: this script VIOLATES the limited-data setting on purpose. It
retrains from scratch on the COMPLETE training data of the remaining
classes and exists only as an analysis reference point for the feature-level
forgetting metric (the prototype accuracy a never-trained-on-those-classes
model still reaches). Do not compare it as a baseline; it is not one.

    python scripts/fdr_reference.py --config configs/desk.cfg
"""

import argparse
from pathlib import Path

import torch

from classforget.checkpoint import CheckpointMeta, save_checkpoint
from classforget.config import RunConfig
from classforget.data import ImageDataset, build_limited_subset
from classforget.metrics import (build_prototypes, fc_accuracy,
                                 prototype_accuracy)
from classforget.models import build_model
from classforget.training import train_classifier


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    cfg = RunConfig.from_file(args.config)
    out = Path(args.out) if args.out else Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = cfg.load_dataset()
    partition = cfg.partition(train_set.num_classes)

    keep = ~partition.excluded_flags(train_set.labels)
    remaining = ImageDataset(train_set.images[keep], train_set.labels[keep],
                             train_set.num_classes)
    print(f"retraining from scratch on the FULL remaining-class data "
          f"({len(remaining)} images) -- this violates the limited-data "
          f"setting and is for analysis only")

    model = build_model(cfg["arch"], train_set.num_classes, seed=cfg["seed"] + 1)
    train_classifier(model, remaining.images, remaining.labels,
                     cfg.train_config())

    subset = build_limited_subset(train_set, cfg.subset_spec())
    fa = fc_accuracy(model, test_set, partition.excluded_ids)
    ca = fc_accuracy(model, test_set, partition.remaining_ids)
    bank = build_prototypes(model, subset)
    fpa = prototype_accuracy(model, bank, test_set, partition.excluded_ids)
    print(f"FDR reference: FA_e={fa:.2f}%  FPA_e={fpa:.2f}%  CA_ne={ca:.2f}%")

    save_checkpoint(model, out / "fdr_reference.ckpt",
                    CheckpointMeta(arch=cfg["arch"],
                                   num_classes=train_set.num_classes,
                                   seed=cfg["seed"] + 1,
                                   config_hash=cfg.config_hash(),
                                   train_augmentations=cfg["train.augmentations"],
                                   extra={"role": "fdr-reference",
                                          "violates_limited_data": True}))
    print(f"checkpoint written to {out / 'fdr_reference.ckpt'}")


if __name__ == "__main__":
    main()
