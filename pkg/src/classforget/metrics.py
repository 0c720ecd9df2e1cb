"""The three-metric forgetting protocol.

``ca_ne`` (constraint accuracy, remaining classes) is checked first: a model
that loses it is unusable no matter how well it forgot. ``fa_e`` (forgetting
accuracy, classification head on excluded classes) must approach zero.
``fpa_e`` (forgetting prototype accuracy) probes the feature level: a
nearest-class-prototype classifier built from limited-data features can still
recognize excluded classes even when the head cannot, so it must drop well
below the original model's value.

All accuracies here are percentages in [0, 100].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from collections.abc import Iterable

import torch
import torch.nn as nn

from .checkpoint import atomic_write_text
from .data import ClassPartition, ImageDataset, LimitedSubset
from .errors import InsufficientDataError
from .models import extract_features, predict_logits


@dataclass
class GateThresholds:
    """Pass/fail margins of the protocol, in accuracy points."""

    ca_margin: float = 3.0    # ca_ne may trail the original by at most this
    fa_ceiling: float = 2.0   # fa_e must not exceed this
    fpa_drop: float = 15.0    # fpa_e must sit at least this far below original


@dataclass
class GateResult:
    name: str
    passed: bool
    detail: str


@dataclass
class PrototypeBank:
    """One mean feature vector per class, stacked in class-id order."""

    prototypes: torch.Tensor  # [num_classes, feature_dim]
    class_ids: tuple[int, ...]

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass
class MetricsReport:
    fa_e: float
    fpa_e: float
    ca_ne: float
    original_fa_e: float | None = None
    original_fpa_e: float | None = None
    original_ca_ne: float | None = None
    gates: list[GateResult] = field(default_factory=list)
    per_epoch: list[tuple[float, float, float]] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.fa_e, self.fpa_e, self.ca_ne):
            if not (0.0 <= v <= 100.0):
                raise ValueError(f"accuracy {v} outside [0, 100]")

    def gates_passed(self) -> bool:
        return bool(self.gates) and all(g.passed for g in self.gates)

    def to_json(self) -> str:
        doc = {
            "fa_e": self.fa_e, "fpa_e": self.fpa_e, "ca_ne": self.ca_ne,
            "original": {"fa_e": self.original_fa_e,
                         "fpa_e": self.original_fpa_e,
                         "ca_ne": self.original_ca_ne},
            "gates": [{"name": g.name, "passed": g.passed, "detail": g.detail}
                      for g in self.gates],
            "per_epoch": [list(t) for t in self.per_epoch],
            "metadata": self.metadata,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        return cls(
            fa_e=doc["fa_e"], fpa_e=doc["fpa_e"], ca_ne=doc["ca_ne"],
            original_fa_e=doc["original"]["fa_e"],
            original_fpa_e=doc["original"]["fpa_e"],
            original_ca_ne=doc["original"]["ca_ne"],
            gates=[GateResult(g["name"], g["passed"], g["detail"])
                   for g in doc["gates"]],
            per_epoch=[tuple(t) for t in doc["per_epoch"]],
            metadata=doc["metadata"])

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text())


def fc_accuracy(model: nn.Module, test_set: ImageDataset, ids: Iterable[int],
                restrict_argmax_to: Iterable[int] | None = None,
                batch_size: int = 256) -> float:
    """Top-1 accuracy (%) of the classification head on a label slice.

    Predictions take the argmax over the full label set unless
    ``restrict_argmax_to`` narrows the candidate classes.
    """
    ids = sorted(set(int(i) for i in ids))
    sel = torch.isin(test_set.labels, torch.as_tensor(ids))
    if not bool(sel.any()):
        raise InsufficientDataError(f"no test examples with labels in {ids}")
    images = test_set.images[sel]
    labels = test_set.labels[sel]
    logits = predict_logits(model, images, batch_size=batch_size)
    if restrict_argmax_to is not None:
        cand = torch.as_tensor(sorted(set(int(i) for i in restrict_argmax_to)),
                               dtype=torch.long)
        preds = cand[logits[:, cand].argmax(dim=1)]
    else:
        preds = logits.argmax(dim=1)
    return float((preds == labels).float().mean()) * 100.0


def build_prototypes(model: nn.Module, subset: LimitedSubset,
                     normalize: bool = False) -> PrototypeBank:
    """Per-class mean of penultimate-layer features over the limited subset."""
    num_classes = subset.dataset.num_classes
    protos = []
    for c in range(num_classes):
        if c not in subset.per_class or not subset.per_class[c]:
            raise InsufficientDataError(f"limited subset misses class {c}")
        feats = extract_features(model, subset.class_images(c))
        if normalize:
            feats = feats / feats.norm(dim=1, keepdim=True).clamp_min(1e-12)
        protos.append(feats.mean(dim=0))
    return PrototypeBank(torch.stack(protos), tuple(range(num_classes)))


def prototype_accuracy(model: nn.Module, bank: PrototypeBank,
                       test_set: ImageDataset, ids: Iterable[int],
                       normalize: bool = False,
                       batch_size: int = 256) -> float:
    """Accuracy (%) of the nearest-prototype classifier on a label slice.

    Every class in the bank competes; distance is Euclidean in feature space.
    """
    ids = sorted(set(int(i) for i in ids))
    sel = torch.isin(test_set.labels, torch.as_tensor(ids))
    if not bool(sel.any()):
        raise InsufficientDataError(f"no test examples with labels in {ids}")
    feats = extract_features(model, test_set.images[sel], batch_size=batch_size)
    if normalize:
        feats = feats / feats.norm(dim=1, keepdim=True).clamp_min(1e-12)
    dists = torch.cdist(feats.double(), bank.prototypes.double())
    class_ids = torch.as_tensor(bank.class_ids)
    preds = class_ids[dists.argmin(dim=1)]
    return float((preds == test_set.labels[sel]).float().mean()) * 100.0


def evaluate_protocol(model: nn.Module, original_model: nn.Module,
                      limited_subset: LimitedSubset, test_set: ImageDataset,
                      partition: ClassPartition,
                      gates: GateThresholds = GateThresholds(),
                      normalize_features: bool = False,
                      metadata: dict | None = None) -> MetricsReport:
    """Compute ca_ne, then fa_e, then fpa_e, and flag the gates in that order."""
    ca_ne = fc_accuracy(model, test_set, partition.remaining_ids)
    fa_e = fc_accuracy(model, test_set, partition.excluded_ids)
    bank = build_prototypes(model, limited_subset, normalize=normalize_features)
    fpa_e = prototype_accuracy(model, bank, test_set, partition.excluded_ids,
                               normalize=normalize_features)

    orig_ca = fc_accuracy(original_model, test_set, partition.remaining_ids)
    orig_fa = fc_accuracy(original_model, test_set, partition.excluded_ids)
    orig_bank = build_prototypes(original_model, limited_subset,
                                 normalize=normalize_features)
    orig_fpa = prototype_accuracy(original_model, orig_bank, test_set,
                                  partition.excluded_ids,
                                  normalize=normalize_features)

    gate_list = [
        GateResult("ca_ne", ca_ne >= orig_ca - gates.ca_margin,
                   f"ca_ne={ca_ne:.2f}% vs original {orig_ca:.2f}% "
                   f"(margin {gates.ca_margin})"),
        GateResult("fa_e", fa_e <= gates.fa_ceiling,
                   f"fa_e={fa_e:.2f}% (ceiling {gates.fa_ceiling}%)"),
        GateResult("fpa_e", fpa_e <= orig_fpa - gates.fpa_drop,
                   f"fpa_e={fpa_e:.2f}% vs original {orig_fpa:.2f}% "
                   f"(required drop {gates.fpa_drop})"),
    ]
    return MetricsReport(fa_e=fa_e, fpa_e=fpa_e, ca_ne=ca_ne,
                         original_fa_e=orig_fa, original_fpa_e=orig_fpa,
                         original_ca_ne=orig_ca, gates=gate_list,
                         metadata=metadata or {})


def history_csv(per_epoch: list[tuple[float, float, float]],
                config_hash: str = "", seed: int | None = None) -> str:
    """Per-epoch metric triple as CSV (one row per epoch)."""
    lines = []
    if config_hash or seed is not None:
        lines.append(f"# config_hash={config_hash} seed={seed}")
    lines.append("epoch,fa_e,fpa_e,ca_ne")
    for i, (fa, fpa, ca) in enumerate(per_epoch, start=1):
        lines.append(f"{i},{fa:.4f},{fpa:.4f},{ca:.4f}")
    return "\n".join(lines) + "\n"


def plot_history(per_epoch: list[tuple[float, float, float]],
                 path: str | Path, config_hash: str = "",
                 seed: int | None = None) -> None:
    """Three curves (fa_e, fpa_e, ca_ne) against the epoch index."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = list(range(1, len(per_epoch) + 1))
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (label, style) in enumerate([("FA_e", "o-"), ("FPA_e", "s-"),
                                        ("CA_ne", "^-")]):
        ax.plot(epochs, [t[i] for t in per_epoch], style, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(-2, 102)
    ax.legend()
    ax.grid(alpha=0.3)
    footer = f"config_hash={config_hash} seed={seed}"
    fig.text(0.01, 0.01, footer, fontsize=6, color="gray")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
