"""Flat key-value run configuration.

The config file is plain text: one ``section.key = value`` per line, ``#``
comments, blank lines ignored. Unknown keys are hard errors so typos never
silently fall back to defaults. The canonical serialization (sorted keys) is
hashed and the hash is embedded in every artifact a run produces.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import atomic_write_text
from .data import (ClassPartition, ImageDataset, LimitedSubsetSpec,
                   load_folder_dataset, synthetic_dataset)
from .erwp import UnlearnConfig
from .errors import ConfigError
from .metrics import GateThresholds
from .training import TrainConfig


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(tok) for tok in s.split(",") if tok.strip()) if s else ()


def _parse_str_list(s: str) -> tuple[str, ...]:
    return tuple(tok.strip() for tok in s.split(",") if tok.strip())


def _parse_lr_schedule(s: str) -> tuple[tuple[int, float], ...]:
    # format: "3:1.1e-5,7:1e-6" -> lr switches from those epochs onward
    out = []
    for tok in s.split(","):
        tok = tok.strip()
        if not tok:
            continue
        epoch, lr = tok.split(":")
        out.append((int(epoch), float(lr)))
    return tuple(out)


def _opt(parser):
    return lambda s: None if s.strip() == "" else parser(s)


_KEYS: dict[str, tuple] = {
    # (parser, default)
    "seed": (int, 0),
    "out_dir": (str, "runs/default"),
    "arch": (str, "convnet-s"),
    "dataset.kind": (str, "synthetic"),
    "dataset.root": (str, ""),
    "dataset.classes": (int, 10),
    "dataset.train_per_class": (int, 500),
    "dataset.test_per_class": (int, 100),
    "dataset.image_size": (int, 32),
    "dataset.seed": (int, 1234),
    "dataset.noise": (float, 1.0),
    "partition.excluded_last_k": (int, 2),
    "partition.excluded_ids": (_parse_int_list, ()),
    "subset.fraction_per_class": (_opt(float), 0.10),
    "subset.per_class_count": (_opt(int), None),
    "subset.seed": (int, 11),
    "train.epochs": (int, 30),
    "train.batch_size": (int, 64),
    "train.lr": (float, 0.1),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 1e-4),
    "train.lr_decay_factor": (float, 5.0),
    "train.lr_decay_epochs": (_parse_int_list, (9, 15, 21, 24, 27)),
    "train.augmentations": (_parse_str_list, ("random-crop", "horizontal-flip")),
    "relevance.init_fraction": (float, 0.20),
    "relevance.accuracy_threshold": (float, 0.10),
    "relevance.augmentation": (str, "grayscale"),
    "relevance.seed": (int, 7),
    "unlearn.beta": (float, 10.0),
    "unlearn.kappa": (float, 2.0),
    "unlearn.lr": (float, 1e-4),
    "unlearn.epochs": (int, 10),
    "unlearn.batch_size": (int, 64),
    "unlearn.momentum": (float, 0.9),
    "unlearn.lr_schedule": (_parse_lr_schedule, ()),
    "unlearn.bn_updates": (_parse_bool, False),
    "baselines.list": (_parse_str_list, ("WD", "FOLMRCSC", "FOLNRC")),
    "baselines.epochs": (int, 10),
    "baselines.kd_beta": (_opt(float), None),  # default: unlearn.beta
    "gates.ca_margin": (float, 3.0),
    "gates.fa_ceiling": (float, 2.0),
    "gates.fpa_drop": (float, 15.0),
    "eval.batch_size": (int, 256),
    "eval.normalize_features": (_parse_bool, False),
    "eval.separate_prototype_subset": (_parse_bool, False),
}


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{e}:{lr:g}" for e, lr in value)
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


@dataclass
class RunConfig:
    """Parsed run configuration; see _KEYS for the full key set."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def default(cls) -> "RunConfig":
        return cls({k: default for k, (_, default) in _KEYS.items()})

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls.default()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', "
                                  f"got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _KEYS:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            parser, _ = _KEYS[key]
            try:
                cfg.values[key] = parser(value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for "
                                  f"{key!r}: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, source=str(path))

    def validate(self) -> None:
        if self["dataset.kind"] not in ("synthetic", "folder"):
            raise ConfigError(f"dataset.kind must be synthetic|folder, "
                              f"got {self['dataset.kind']!r}")
        if self["dataset.kind"] == "folder" and not self["dataset.root"]:
            raise ConfigError("dataset.root required for folder datasets")
        frac, count = self["subset.fraction_per_class"], self["subset.per_class_count"]
        if (frac is None) == (count is None):
            raise ConfigError("exactly one of subset.fraction_per_class / "
                              "subset.per_class_count must be set (use an "
                              "empty value to unset one)")

    def canonical_text(self) -> str:
        lines = [f"{k} = {_render(self.values[k])}" for k in sorted(_KEYS)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, f"# config_hash={self.config_hash()}\n"
                          + self.canonical_text())

    # -- assembly into runtime objects ------------------------------------

    def load_dataset(self) -> tuple[ImageDataset, ImageDataset]:
        if self["dataset.kind"] == "folder":
            return load_folder_dataset(self["dataset.root"])
        return synthetic_dataset(
            num_classes=self["dataset.classes"],
            train_per_class=self["dataset.train_per_class"],
            test_per_class=self["dataset.test_per_class"],
            image_hw=self["dataset.image_size"],
            seed=self["dataset.seed"],
            noise=self["dataset.noise"])

    def partition(self, num_classes: int) -> ClassPartition:
        explicit = self["partition.excluded_ids"]
        if explicit:
            return ClassPartition.from_excluded(num_classes, explicit)
        return ClassPartition.last_k(num_classes, self["partition.excluded_last_k"])

    def excluded_count(self) -> int:
        explicit = self["partition.excluded_ids"]
        return len(explicit) if explicit else self["partition.excluded_last_k"]

    def subset_spec(self) -> LimitedSubsetSpec:
        return LimitedSubsetSpec(
            fraction_per_class=self["subset.fraction_per_class"],
            per_class_count=self["subset.per_class_count"],
            seed=self["subset.seed"],
            excluded_last_k=self["partition.excluded_last_k"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"], batch_size=self["train.batch_size"],
            lr=self["train.lr"], momentum=self["train.momentum"],
            weight_decay=self["train.weight_decay"],
            lr_decay_factor=self["train.lr_decay_factor"],
            lr_decay_epochs=self["train.lr_decay_epochs"],
            augmentations=self["train.augmentations"], seed=self["seed"])

    def unlearn_config(self) -> UnlearnConfig:
        return UnlearnConfig(
            beta=self["unlearn.beta"], kappa=self["unlearn.kappa"],
            lr=self["unlearn.lr"], epochs=self["unlearn.epochs"],
            lr_schedule=self["unlearn.lr_schedule"], seed=self["seed"],
            batch_size=self["unlearn.batch_size"],
            momentum=self["unlearn.momentum"],
            bn_updates=self["unlearn.bn_updates"])

    def gate_thresholds(self) -> GateThresholds:
        return GateThresholds(ca_margin=self["gates.ca_margin"],
                              fa_ceiling=self["gates.fa_ceiling"],
                              fpa_drop=self["gates.fpa_drop"])
