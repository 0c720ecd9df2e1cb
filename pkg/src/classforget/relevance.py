"""Identification of the parameters a restricted class depends on.

For each restricted class: transform its limited training images with an
augmentation the model never saw, backpropagate the cross-entropy of the
averaged prediction, and rank parameters by absolute gradient. A per-layer
doubling-plus-bisection search then finds the shortest saliency-sorted prefix
whose zeroing collapses the class accuracy below a threshold. Masks for all
restricted classes are OR-combined; the classification-head row of each
restricted class is always included.

Accuracies in this module are fractions in [0, 1]; the evaluation module
reports percentages.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .checkpoint import atomic_write_text
from .data import LimitedSubset, ClassPartition, augment_unseen
from .errors import InsufficientDataError, MaskError
from .models import head_param_names, layer_of, param_store, predict_logits

_MASK_FORMAT = "classforget-mask-v1"


@dataclass
class SaliencyMap:
    """Absolute parameter gradients for one restricted class."""

    tensors: dict[str, torch.Tensor]
    class_id: int
    augmentation: str


@dataclass
class RelevanceSearchConfig:
    """Knobs of the per-layer prefix search.

    ``eval_set`` holds the class's augmented limited training images; the
    search measures class accuracy on exactly these images.
    """

    init_fraction: float = 0.20
    accuracy_threshold: float = 0.10
    eval_set: torch.Tensor | None = None

    def __post_init__(self):
        if not (0 < self.init_fraction <= 1):
            raise MaskError("init_fraction must be in (0, 1]")
        if not (0 < self.accuracy_threshold <= 1):
            raise MaskError("accuracy_threshold must be in (0, 1]")


@dataclass
class MaskProvenance:
    class_id: int
    augmentation: str
    layer_fractions: dict[str, float] = field(default_factory=dict)
    saturated_layers: list[str] = field(default_factory=list)
    tested: dict[str, list[tuple[int, float]]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"class_id": self.class_id, "augmentation": self.augmentation,
                "layer_fractions": self.layer_fractions,
                "saturated_layers": self.saturated_layers,
                "tested": {k: [[c, a] for c, a in v]
                           for k, v in self.tested.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "MaskProvenance":
        return cls(class_id=int(d["class_id"]), augmentation=d["augmentation"],
                   layer_fractions={k: float(v)
                                    for k, v in d["layer_fractions"].items()},
                   saturated_layers=list(d["saturated_layers"]),
                   tested={k: [(int(c), float(a)) for c, a in v]
                           for k, v in d.get("tested", {}).items()})


@dataclass
class RelevanceMask:
    """Per-tensor boolean selection over a model's named parameters."""

    tensors: dict[str, torch.Tensor]
    provenance: list[MaskProvenance] = field(default_factory=list)

    def num_selected(self) -> int:
        return int(sum(m.sum() for m in self.tensors.values()))

    def num_total(self) -> int:
        return int(sum(m.numel() for m in self.tensors.values()))

    def layer_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for name, m in self.tensors.items():
            counts[layer_of(name)] = counts.get(layer_of(name), 0) + int(m.sum())
        return counts


def all_false_mask(model: nn.Module) -> RelevanceMask:
    return RelevanceMask({name: torch.zeros_like(p, dtype=torch.bool)
                          for name, p in model.named_parameters()})


def all_true_mask(model: nn.Module) -> RelevanceMask:
    return RelevanceMask({name: torch.ones_like(p, dtype=torch.bool)
                          for name, p in model.named_parameters()})


@contextmanager
def _grads_enabled(model: nn.Module):
    """Temporarily make every parameter differentiable; restore flags after."""
    flags = [(p, p.requires_grad) for p in model.parameters()]
    for p, _ in flags:
        p.requires_grad_(True)
    try:
        yield
    finally:
        for p, had in flags:
            p.requires_grad_(had)


def class_gradient_saliency(model: nn.Module, class_images: torch.Tensor,
                            class_id: int, augmentation: str, seed: int = 0,
                            trained_augmentations=()) -> SaliencyMap:
    """|gradient| of the averaged-prediction cross-entropy for one class.

    Per-example softmax probabilities over the augmented images are averaged
    into a single prediction vector; the negative log of the class's averaged
    probability is backpropagated. Parameters are read, never written.
    """
    if len(class_images) == 0:
        raise InsufficientDataError("saliency needs at least one class image")
    aug = augment_unseen(class_images, augmentation, seed=seed,
                         trained_augmentations=trained_augmentations)
    was_training = model.training
    model.eval()
    try:
        with _grads_enabled(model), torch.enable_grad():
            params = param_store(model)
            logits = model(aug)
            probs = torch.softmax(logits, dim=1)
            avg = probs.mean(dim=0)
            loss = -torch.log(avg[class_id].clamp_min(1e-12))
            grads = torch.autograd.grad(loss, list(params.values()),
                                        allow_unused=True)
    finally:
        model.train(was_training)
    tensors = {}
    for (name, p), g in zip(params.items(), grads):
        tensors[name] = (torch.zeros_like(p) if g is None else g.abs()).detach()
    return SaliencyMap(tensors, class_id=class_id, augmentation=augmentation)


def _class_accuracy(model: nn.Module, images: torch.Tensor, class_id: int) -> float:
    preds = predict_logits(model, images).argmax(dim=1)
    return float((preds == class_id).float().mean())


def _sorted_layer_entries(saliency: SaliencyMap) -> dict[str, list[tuple[str, int]]]:
    """Per layer: (tensor name, flat index) sorted by descending saliency.

    Ties break on (tensor name, flat index) so the ordering is deterministic.
    """
    by_layer: dict[str, list[tuple[float, str, int]]] = {}
    for name, sal in saliency.tensors.items():
        flat = sal.flatten()
        entries = by_layer.setdefault(layer_of(name), [])
        entries.extend((float(v), name, i) for i, v in enumerate(flat.tolist()))
    out = {}
    for layer, entries in by_layer.items():
        entries.sort(key=lambda t: (-t[0], t[1], t[2]))
        out[layer] = [(name, idx) for _, name, idx in entries]
    return out


@contextmanager
def _zeroed_prefix(model: nn.Module, entries: list[tuple[str, int]], count: int):
    """Zero the first ``count`` entries in place; restore bit-exactly on exit."""
    params = param_store(model)
    touched: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, idx in entries[:count]:
            if name not in touched:
                touched[name] = params[name].detach().clone()
            params[name].view(-1)[idx] = 0.0
    try:
        yield
    finally:
        with torch.no_grad():
            for name, saved in touched.items():
                params[name].copy_(saved)


def select_relevant_params(model: nn.Module, saliency: SaliencyMap,
                           cfg: RelevanceSearchConfig) -> RelevanceMask:
    """Per-layer shortest saliency prefix whose zeroing breaks the class.

    Starting from ``init_fraction`` of the layer, the candidate count doubles
    while the class accuracy (on ``cfg.eval_set``) stays at or above the
    threshold, capped at the full layer; once below, a bisection between the
    last failing and first succeeding counts returns the smaller succeeding
    count. Layers whose full zeroing never breaks the class are taken whole
    and flagged as saturated. Other layers stay intact during each layer's
    probes and all weights are restored afterwards.
    """
    params = param_store(model)
    for name, sal in saliency.tensors.items():
        if name not in params or tuple(sal.shape) != tuple(params[name].shape):
            raise MaskError(f"saliency shape mismatch for {name!r}")
    if cfg.eval_set is None or len(cfg.eval_set) == 0:
        raise InsufficientDataError("relevance search needs a non-empty eval set")

    mask = all_false_mask(model)
    prov = MaskProvenance(class_id=saliency.class_id,
                          augmentation=saliency.augmentation)
    layers = _sorted_layer_entries(saliency)

    for layer, entries in layers.items():
        n = len(entries)
        tested: list[tuple[int, float]] = []

        def breaks(count: int) -> bool:
            with _zeroed_prefix(model, entries, count):
                acc = _class_accuracy(model, cfg.eval_set, saliency.class_id)
            tested.append((count, acc))
            return acc < cfg.accuracy_threshold

        count = min(n, max(1, math.ceil(cfg.init_fraction * n)))
        if breaks(count):
            chosen = count
        else:
            lo = count  # largest failing count
            broke = False
            while count < n:
                count = min(n, count * 2)
                if breaks(count):
                    broke = True
                    break
                lo = count
            if not broke:
                # even the whole layer cannot break the class
                chosen = n
                prov.saturated_layers.append(layer)
            else:
                hi = count  # smallest succeeding count so far
                while hi - lo > 1:
                    mid = (lo + hi) // 2
                    if breaks(mid):
                        hi = mid
                    else:
                        lo = mid
                chosen = hi
        for name, idx in entries[:chosen]:
            mask.tensors[name].view(-1)[idx] = True
        prov.layer_fractions[layer] = chosen / n
        prov.tested[layer] = tested

    mask.provenance.append(prov)
    return mask


def add_head_row(mask: RelevanceMask, model: nn.Module, class_id: int) -> None:
    """Force-select the classification-head weight row and bias of a class."""
    w_name, b_name = head_param_names(model)
    mask.tensors[w_name][class_id, :] = True
    mask.tensors[b_name][class_id] = True


def union_masks(masks: list[RelevanceMask]) -> RelevanceMask:
    """Entrywise OR; provenance lists are concatenated."""
    if not masks:
        raise MaskError("union of zero masks is undefined")
    names = set(masks[0].tensors)
    for m in masks[1:]:
        if set(m.tensors) != names:
            raise MaskError("masks cover different tensor-name sets")
        for name in names:
            if tuple(m.tensors[name].shape) != tuple(masks[0].tensors[name].shape):
                raise MaskError(f"mask shape mismatch for {name!r}")
    combined = {name: masks[0].tensors[name].clone() for name in masks[0].tensors}
    for m in masks[1:]:
        for name in combined:
            combined[name] |= m.tensors[name]
    prov = [p for m in masks for p in m.provenance]
    return RelevanceMask(combined, prov)


def identify_relevant_parameters(model: nn.Module, subset: LimitedSubset,
                                 partition: ClassPartition,
                                 init_fraction: float, accuracy_threshold: float,
                                 augmentation: str, seed: int,
                                 trained_augmentations=()) -> RelevanceMask:
    """Full identification pipeline over all restricted classes.

    Saliency + prefix search per class (on that class's augmented limited
    images), head row forced in, then the per-class masks are OR-combined.
    """
    class_masks = []
    for class_id in partition.excluded_ids:
        images = subset.class_images(class_id)
        if len(images) == 0:
            raise InsufficientDataError(f"no limited images for class {class_id}")
        aug_seed = seed * 7_919 + class_id
        sal = class_gradient_saliency(model, images, class_id, augmentation,
                                      seed=aug_seed,
                                      trained_augmentations=trained_augmentations)
        eval_set = augment_unseen(images, augmentation, seed=aug_seed,
                                  trained_augmentations=trained_augmentations)
        cfg = RelevanceSearchConfig(init_fraction=init_fraction,
                                    accuracy_threshold=accuracy_threshold,
                                    eval_set=eval_set)
        mask = select_relevant_params(model, sal, cfg)
        add_head_row(mask, model, class_id)
        class_masks.append(mask)
    return union_masks(class_masks)


def ablate_high_low(model: nn.Module, saliency: SaliencyMap, k: int,
                    eval_set: torch.Tensor) -> tuple[float, float]:
    """Class accuracy after zeroing the k most vs k least salient parameters.

    Ranking is over the whole model. The model is restored after each probe.
    """
    entries: list[tuple[float, str, int]] = []
    for name, sal in saliency.tensors.items():
        entries.extend((float(v), name, i)
                       for i, v in enumerate(sal.flatten().tolist()))
    if k > len(entries):
        raise MaskError(f"k={k} exceeds parameter count {len(entries)}")
    entries.sort(key=lambda t: (-t[0], t[1], t[2]))
    top = [(name, idx) for _, name, idx in entries[:k]]
    bottom = [(name, idx) for _, name, idx in entries[::-1][:k]]
    with _zeroed_prefix(model, top, k):
        acc_high = _class_accuracy(model, eval_set, saliency.class_id)
    with _zeroed_prefix(model, bottom, k):
        acc_low = _class_accuracy(model, eval_set, saliency.class_id)
    return acc_high, acc_low


def shrink_mask_per_layer(mask: RelevanceMask, saliency: SaliencyMap,
                          fraction: float) -> RelevanceMask:
    """Keep only the top ``fraction`` (by saliency) of each layer's selection.

    Supports the reduced-mask ablation; provenance is carried over.
    """
    out = {name: torch.zeros_like(m) for name, m in mask.tensors.items()}
    by_layer: dict[str, list[tuple[float, str, int]]] = {}
    for name, m in mask.tensors.items():
        sal = saliency.tensors[name].flatten()
        sel = torch.nonzero(m.flatten(), as_tuple=False).flatten().tolist()
        by_layer.setdefault(layer_of(name), []).extend(
            (float(sal[i]), name, i) for i in sel)
    for layer, entries in by_layer.items():
        entries.sort(key=lambda t: (-t[0], t[1], t[2]))
        keep = math.ceil(fraction * len(entries))
        for _, name, idx in entries[:keep]:
            out[name].view(-1)[idx] = True
    return RelevanceMask(out, list(mask.provenance))


# --------------------------------------------------------------------------
# Mask file format: canonical JSON, byte-identical across reruns
# --------------------------------------------------------------------------

def save_mask(mask: RelevanceMask, path: str | Path, *, arch: str,
              threshold: float, init_fraction: float, augmentation: str,
              config_hash: str = "", seed: int = 0) -> None:
    doc = {
        "format": _MASK_FORMAT,
        "header": {"arch": arch, "threshold": threshold,
                   "init_fraction": init_fraction,
                   "augmentation": augmentation,
                   "config_hash": config_hash, "seed": seed},
        "provenance": [p.to_json() for p in mask.provenance],
        "tensors": {
            name: {"shape": list(m.shape),
                   "true_indices": torch.nonzero(
                       m.flatten(), as_tuple=False).flatten().tolist()}
            for name, m in sorted(mask.tensors.items())
        },
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True,
                                       separators=(",", ":")) + "\n")


def load_mask(path: str | Path) -> tuple[RelevanceMask, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MaskError(f"cannot read mask file {path}: {exc}") from exc
    if doc.get("format") != _MASK_FORMAT:
        raise MaskError(f"{path}: not a relevance mask file")
    tensors = {}
    for name, entry in doc["tensors"].items():
        m = torch.zeros(int(torch.tensor(entry["shape"]).prod()), dtype=torch.bool)
        if entry["true_indices"]:
            m[torch.as_tensor(entry["true_indices"], dtype=torch.long)] = True
        tensors[name] = m.reshape(entry["shape"])
    prov = [MaskProvenance.from_json(p) for p in doc.get("provenance", [])]
    return RelevanceMask(tensors, prov), doc["header"]


def export_mask_text(mask: RelevanceMask, path: str | Path) -> None:
    """Audit export: one 'tensor_name,flat_index' line per selected entry."""
    lines = []
    for name in sorted(mask.tensors):
        for idx in torch.nonzero(mask.tensors[name].flatten(),
                                 as_tuple=False).flatten().tolist():
            lines.append(f"{name},{idx}")
    atomic_write_text(path, "\n".join(lines) + "\n")
