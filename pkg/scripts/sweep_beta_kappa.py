#!/usr/bin/env python3
"""Sweep the distillation weight and temperature around their defaults.

Reproduces the hyper-parameter sensitivity study: one forgetting run per
(beta, kappa) value on the configured task, reporting the metric triple.
Requires a trained original checkpoint and a mask (run train-original and
identify first, or point --out at a finished run directory).

    python scripts/sweep_beta_kappa.py --config configs/desk.cfg \
        --betas 8,9,10,11,12 --kappas 1,1.5,2,2.5,3
"""

import argparse
from pathlib import Path

from classforget.checkpoint import atomic_write_text, load_checkpoint
from classforget.config import RunConfig
from classforget.data import build_limited_subset
from classforget.erwp import ModelPair, erwp_run
from classforget.metrics import (build_prototypes, fc_accuracy,
                                 prototype_accuracy)
from classforget.relevance import load_mask


def triple(model, subset, test_set, partition):
    fa = fc_accuracy(model, test_set, partition.excluded_ids)
    ca = fc_accuracy(model, test_set, partition.remaining_ids)
    bank = build_prototypes(model, subset)
    fpa = prototype_accuracy(model, bank, test_set, partition.excluded_ids)
    return fa, fpa, ca


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--betas", default="8,9,10,11,12")
    parser.add_argument("--kappas", default="1.0,1.5,2.0,2.5,3.0")
    args = parser.parse_args()

    cfg = RunConfig.from_file(args.config)
    out = Path(args.out) if args.out else Path(cfg["out_dir"])
    original, _ = load_checkpoint(out / "original.ckpt", expect_arch=cfg["arch"])
    mask, _ = load_mask(out / "relevance.mask.json")
    train_set, test_set = cfg.load_dataset()
    partition = cfg.partition(train_set.num_classes)
    subset = build_limited_subset(train_set, cfg.subset_spec())

    fa0, fpa0, ca0 = triple(original, subset, test_set, partition)
    rows = [f"# config_hash={cfg.config_hash()} seed={cfg['seed']}",
            "sweep,value,fa_e,fpa_e,ca_ne",
            f"original,-,{fa0:.2f},{fpa0:.2f},{ca0:.2f}"]
    print(rows[-1])

    base = cfg.unlearn_config()
    for beta in (float(b) for b in args.betas.split(",")):
        ucfg = base.__class__(**{**base.__dict__, "beta": beta})
        student, _ = erwp_run(ModelPair.from_model(original), subset, mask,
                              partition, ucfg)
        fa, fpa, ca = triple(student, subset, test_set, partition)
        rows.append(f"beta,{beta:g},{fa:.2f},{fpa:.2f},{ca:.2f}")
        print(rows[-1])
    for kappa in (float(k) for k in args.kappas.split(",")):
        ucfg = base.__class__(**{**base.__dict__, "kappa": kappa})
        student, _ = erwp_run(ModelPair.from_model(original), subset, mask,
                              partition, ucfg)
        fa, fpa, ca = triple(student, subset, test_set, partition)
        rows.append(f"kappa,{kappa:g},{fa:.2f},{fpa:.2f},{ca:.2f}")
        print(rows[-1])

    atomic_write_text(out / "sweep_beta_kappa.csv", "\n".join(rows) + "\n")
    print(f"written to {out / 'sweep_beta_kappa.csv'}")


if __name__ == "__main__":
    main()
