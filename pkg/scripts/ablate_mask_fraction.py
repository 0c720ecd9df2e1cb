#!/usr/bin/env python3
"""Reduced-mask ablation: run the forgetting loop with only the top 25% and
50% (by saliency) of each layer's selected parameters and compare the final
feature-level forgetting against the full mask.

Requires a finished run directory (original checkpoint + mask).

    python scripts/ablate_mask_fraction.py --config configs/desk.cfg
"""

import argparse
from pathlib import Path

import torch

from classforget.checkpoint import atomic_write_text, load_checkpoint
from classforget.config import RunConfig
from classforget.data import build_limited_subset
from classforget.erwp import ModelPair, erwp_run
from classforget.metrics import (build_prototypes, fc_accuracy,
                                 prototype_accuracy)
from classforget.relevance import (class_gradient_saliency, load_mask,
                                   shrink_mask_per_layer, union_masks)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--fractions", default="0.25,0.5,1.0")
    args = parser.parse_args()

    cfg = RunConfig.from_file(args.config)
    out = Path(args.out) if args.out else Path(cfg["out_dir"])
    original, meta = load_checkpoint(out / "original.ckpt",
                                     expect_arch=cfg["arch"])
    mask, _ = load_mask(out / "relevance.mask.json")
    train_set, test_set = cfg.load_dataset()
    partition = cfg.partition(train_set.num_classes)
    subset = build_limited_subset(train_set, cfg.subset_spec())

    # a combined saliency ranking over the excluded classes orders the mask
    sals = []
    for class_id in partition.excluded_ids:
        sal = class_gradient_saliency(
            original, subset.class_images(class_id), class_id,
            cfg["relevance.augmentation"],
            seed=cfg["relevance.seed"] * 7_919 + class_id,
            trained_augmentations=meta.train_augmentations)
        sals.append(sal)
    combined = sals[0]
    for sal in sals[1:]:
        for name in combined.tensors:
            combined.tensors[name] = torch.maximum(combined.tensors[name],
                                                   sal.tensors[name])

    rows = [f"# config_hash={cfg.config_hash()} seed={cfg['seed']}",
            "mask_fraction,params,fa_e,fpa_e,ca_ne"]
    for fraction in (float(f) for f in args.fractions.split(",")):
        sub_mask = (mask if fraction >= 1.0
                    else shrink_mask_per_layer(mask, combined, fraction))
        student, _ = erwp_run(ModelPair.from_model(original), subset, sub_mask,
                              partition, cfg.unlearn_config())
        fa = fc_accuracy(student, test_set, partition.excluded_ids)
        ca = fc_accuracy(student, test_set, partition.remaining_ids)
        bank = build_prototypes(student, subset)
        fpa = prototype_accuracy(student, bank, test_set,
                                 partition.excluded_ids)
        rows.append(f"{fraction:g},{sub_mask.num_selected()},"
                    f"{fa:.2f},{fpa:.2f},{ca:.2f}")
        print(rows[-1])

    atomic_write_text(out / "ablate_mask_fraction.csv", "\n".join(rows) + "\n")
    print(f"written to {out / 'ablate_mask_fraction.csv'}")


if __name__ == "__main__":
    main()
