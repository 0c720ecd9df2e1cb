"""Reference approaches the forgetting method is compared against.

Nine baselines grouped the way the comparison table renders them:

* no training: WD (delete the head rows of the excluded classes);
* full train schedule on limited remaining-class data: TSLNRC(-KD) from
  random init, TOLNRC(-KD) from the original weights;
* few-epoch fine-tuning of the original: FOLMRCSC(-KD) on all limited data
  with the excluded labels merged into one class, FOLNRC(-KD) on
  remaining-class data only.

Head rows are "deleted" by zeroing the weights and pinning the bias to a
large negative value so the class can never win the argmax while tensor
shapes stay checkpoint-compatible.
"""

from __future__ import annotations

import copy
import io
from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import ClassPartition, LimitedSubset
from .errors import BaselineSpecError, ComparisonError
from .metrics import MetricsReport
from .models import build_model, head_param_names, param_store
from .training import TrainConfig, train_classifier

DELETED_BIAS = -1e9

BASELINE_IDS = ("WD", "TSLNRC", "TSLNRC-KD", "TOLNRC", "TOLNRC-KD",
                "FOLMRCSC", "FOLMRCSC-KD", "FOLNRC", "FOLNRC-KD")


@dataclass(frozen=True)
class BaselineSpec:
    id: str
    init: str | None            # 'random' | 'original-weights' | None (WD)
    schedule: str | None        # 'full-train' | 'fine-tune' | None (WD)
    uses_kd: bool
    data_scope: str | None      # 'remaining-only' | 'all-with-merged-excluded'

    def __post_init__(self):
        if self.id not in BASELINE_IDS:
            raise BaselineSpecError(f"unknown baseline id {self.id!r}")


BASELINES: dict[str, BaselineSpec] = {
    "WD": BaselineSpec("WD", None, None, False, None),
    "TSLNRC": BaselineSpec("TSLNRC", "random", "full-train", False,
                           "remaining-only"),
    "TSLNRC-KD": BaselineSpec("TSLNRC-KD", "random", "full-train", True,
                              "remaining-only"),
    "TOLNRC": BaselineSpec("TOLNRC", "original-weights", "full-train", False,
                           "remaining-only"),
    "TOLNRC-KD": BaselineSpec("TOLNRC-KD", "original-weights", "full-train",
                              True, "remaining-only"),
    "FOLMRCSC": BaselineSpec("FOLMRCSC", "original-weights", "fine-tune",
                             False, "all-with-merged-excluded"),
    "FOLMRCSC-KD": BaselineSpec("FOLMRCSC-KD", "original-weights", "fine-tune",
                                True, "all-with-merged-excluded"),
    "FOLNRC": BaselineSpec("FOLNRC", "original-weights", "fine-tune", False,
                           "remaining-only"),
    "FOLNRC-KD": BaselineSpec("FOLNRC-KD", "original-weights", "fine-tune",
                              True, "remaining-only"),
}


@dataclass
class BaselineRunConfig:
    """Shared knobs: the full-train recipe mirrors the original training;
    fine-tuning uses the forgetting loop's budget and learning rate (the
    comparison stays fair and the choice is recorded in run metadata)."""

    train: TrainConfig
    arch: str = "convnet-s"
    finetune_epochs: int = 10
    finetune_lr: float = 1e-4
    finetune_momentum: float = 0.9
    freeze_bn_stats: bool = False
    kd_beta: float = 10.0
    kappa: float = 2.0
    seed: int = 0
    batch_size: int = 64


def delete_head_rows(model: nn.Module, class_ids) -> None:
    """Zero the head weight rows and pin biases so the classes never predict."""
    w_name, b_name = head_param_names(model)
    params = param_store(model)
    with torch.no_grad():
        for c in class_ids:
            params[w_name][c, :] = 0.0
            params[b_name][c] = DELETED_BIAS


def merged_class_remap(labels: torch.Tensor,
                       partition: ClassPartition) -> tuple[torch.Tensor, int]:
    """Map every excluded label onto one merged class id.

    The merged class reuses the smallest excluded id's head row; afterwards
    the effective label set has n_ne + 1 classes.
    """
    merged_id = min(partition.excluded_ids)
    remapped = labels.clone()
    exc = torch.as_tensor(partition.excluded_ids)
    remapped[torch.isin(labels, exc)] = merged_id
    return remapped, merged_id


def run_baseline(spec: BaselineSpec, original_model: nn.Module,
                 limited_subset: LimitedSubset, partition: ClassPartition,
                 cfg: BaselineRunConfig) -> nn.Module:
    """Produce the baseline's model; the original is never modified."""
    if spec.id not in BASELINES or BASELINES[spec.id] != spec:
        raise BaselineSpecError(f"inconsistent baseline spec {spec}")

    if spec.id == "WD":
        model = copy.deepcopy(original_model)
        delete_head_rows(model, partition.excluded_ids)
        model.eval()
        return model

    images, labels = limited_subset.images(), limited_subset.labels()
    teacher = copy.deepcopy(original_model) if spec.uses_kd else None
    kd_beta = cfg.kd_beta if spec.uses_kd else 0.0

    if spec.data_scope == "remaining-only":
        keep = ~partition.excluded_flags(labels)
        images, labels = images[keep], labels[keep]
    elif spec.data_scope == "all-with-merged-excluded":
        labels, merged_id = merged_class_remap(labels, partition)
    else:
        raise BaselineSpecError(f"baseline {spec.id} has no data scope")

    if spec.init == "random":
        num_classes = limited_subset.dataset.num_classes
        model = build_model(cfg.arch, num_classes, seed=cfg.seed + 77)
    else:
        model = copy.deepcopy(original_model)

    if spec.data_scope == "all-with-merged-excluded":
        # delete the non-merged excluded rows; reuse the merged row from zero
        delete_head_rows(model, [c for c in partition.excluded_ids
                                 if c != merged_id])
        w_name, b_name = head_param_names(model)
        params = param_store(model)
        with torch.no_grad():
            params[w_name][merged_id, :] = 0.0
            params[b_name][merged_id] = 0.0

    if spec.schedule == "full-train":
        train_cfg = cfg.train
    else:
        train_cfg = TrainConfig(epochs=cfg.finetune_epochs,
                                batch_size=cfg.batch_size,
                                lr=cfg.finetune_lr,
                                momentum=cfg.finetune_momentum,
                                weight_decay=0.0,
                                lr_decay_epochs=(),
                                augmentations=cfg.train.augmentations,
                                seed=cfg.seed)
    train_classifier(model, images, labels, train_cfg, teacher=teacher,
                     kd_beta=kd_beta, kappa=cfg.kappa, kd_partition=partition,
                     augment=spec.schedule == "full-train",
                     freeze_bn_stats=spec.schedule == "fine-tune"
                     and cfg.freeze_bn_stats)
    return model


# --------------------------------------------------------------------------
# Comparison table
# --------------------------------------------------------------------------

_ROW_GROUPS = ((None, ("original",)),
               ("No Training", ("WD",)),
               ("Full Train Schedule",
                ("TSLNRC", "TSLNRC-KD", "TOLNRC", "TOLNRC-KD")),
               ("Only Fine-Tuning",
                ("FOLMRCSC", "FOLMRCSC-KD", "FOLNRC", "FOLNRC-KD")),
               (None, ("erwp",)))


def _partition_signature(report: MetricsReport):
    return (str(report.metadata.get("excluded_ids")),
            str(report.metadata.get("test_set")))


def compare_table(reports: dict[str, MetricsReport]) -> tuple[str, str]:
    """Aligned-text and CSV renderings, rows in the canonical group order."""
    known = {rid for _, rids in _ROW_GROUPS for rid in rids}
    unknown = set(reports) - known
    if unknown:
        raise ComparisonError(f"unknown report ids {sorted(unknown)}")
    signatures = {rid: _partition_signature(r) for rid, r in reports.items()}
    if len(set(signatures.values())) > 1:
        raise ComparisonError(f"reports from mixed partitions/test sets: "
                              f"{signatures}")

    text = io.StringIO()
    csv = io.StringIO()
    header = f"{'Method':<14}{'FA_e':>9}{'FPA_e':>9}{'CA_ne':>9}"
    text.write(header + "\n" + "-" * len(header) + "\n")
    csv.write("method,fa_e,fpa_e,ca_ne\n")
    for group, rids in _ROW_GROUPS:
        present = [rid for rid in rids if rid in reports]
        if not present:
            continue
        if group:
            text.write(f"[{group}]\n")
        for rid in present:
            r = reports[rid]
            label = "ERwP" if rid == "erwp" else rid
            text.write(f"{label:<14}{r.fa_e:>8.2f}%{r.fpa_e:>8.2f}%"
                       f"{r.ca_ne:>8.2f}%\n")
            csv.write(f"{label},{r.fa_e:.4f},{r.fpa_e:.4f},{r.ca_ne:.4f}\n")
    return text.getvalue(), csv.getvalue()
