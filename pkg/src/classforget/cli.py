"""Command-line surface driving the full pipeline.

Subcommands: train-original, identify, unlearn, evaluate, baselines, report.
Every artifact (checkpoint, mask, report, CSV, plot) embeds the config hash
and seed, so a run is reconstructable from its config file. Exit codes:
0 success / gates passed, 2 config, 3 data, 4 checkpoint, 5 mask,
6 gate failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import torch

from . import baselines as bl
from .checkpoint import (CheckpointMeta, atomic_write_text, load_checkpoint,
                         save_checkpoint)
from .config import RunConfig
from .data import build_limited_subset
from .erwp import LossComponents, ModelPair, erwp_run
from .errors import (CheckpointFormatError, ClassForgetError, ConfigError,
                     BaselineSpecError, ComparisonError, InsufficientDataError,
                     MaskError)
from .metrics import (MetricsReport, evaluate_protocol, fc_accuracy,
                      build_prototypes, prototype_accuracy, history_csv,
                      plot_history)
from .relevance import (all_false_mask, export_mask_text,
                        identify_relevant_parameters, load_mask, save_mask)
from .training import train_original

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_MASK = 5
EXIT_GATES = 6


def _out_dir(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override) if override else Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    if getattr(args, "seed_override", None) is not None:
        cfg.values["seed"] = args.seed_override
    return cfg


def _metric_triple(model, subset, test_set, partition, normalize=False):
    fa = fc_accuracy(model, test_set, partition.excluded_ids)
    ca = fc_accuracy(model, test_set, partition.remaining_ids)
    bank = build_prototypes(model, subset, normalize=normalize)
    fpa = prototype_accuracy(model, bank, test_set, partition.excluded_ids,
                             normalize=normalize)
    return fa, fpa, ca


def _run_metadata(cfg: RunConfig, test_set, partition, mask_id: str = ""):
    return {
        "config_hash": cfg.config_hash(),
        "seed": cfg["seed"],
        "mask_id": mask_id,
        "excluded_ids": list(partition.excluded_ids),
        "test_set": f"{cfg['dataset.kind']}:{len(test_set)}"
                    f"x{test_set.num_classes}:seed{cfg['dataset.seed']}",
    }


def _mask_file_id(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:12]


def _evaluate_and_report(cfg, model, original, subset, test_set, partition,
                         mask_id: str = "", per_epoch=None) -> MetricsReport:
    report = evaluate_protocol(
        model, original, subset, test_set, partition,
        gates=cfg.gate_thresholds(),
        normalize_features=cfg["eval.normalize_features"],
        metadata=_run_metadata(cfg, test_set, partition, mask_id))
    if per_epoch:
        report.per_epoch = list(per_epoch)
    return report


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_train_original(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args.out)
    cfg.save(out / "config.snapshot.cfg")
    train_set, test_set = cfg.load_dataset()
    partition = cfg.partition(train_set.num_classes)

    print(f"training original model ({cfg['arch']}, "
          f"{cfg['train.epochs']} epochs, {len(train_set)} images)")
    model = train_original(train_set, cfg["arch"], cfg.train_config())

    meta = CheckpointMeta(arch=cfg["arch"], num_classes=train_set.num_classes,
                          seed=cfg["seed"], config_hash=cfg.config_hash(),
                          train_augmentations=cfg["train.augmentations"],
                          extra={"role": "original"})
    ckpt = out / "original.ckpt"
    save_checkpoint(model, ckpt, meta)

    subset = build_limited_subset(train_set, cfg.subset_spec())
    fa, fpa, ca = _metric_triple(model, subset, test_set, partition,
                                 cfg["eval.normalize_features"])
    report = MetricsReport(fa_e=fa, fpa_e=fpa, ca_ne=ca,
                           metadata=_run_metadata(cfg, test_set, partition))
    report.save(out / "original.report.json")
    print(f"original model: FA_e={fa:.2f}% FPA_e={fpa:.2f}% CA_ne={ca:.2f}%")
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def cmd_identify(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args.out)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "original.ckpt"
    model, meta = load_checkpoint(ckpt_path, expect_arch=cfg["arch"])
    train_set, _ = cfg.load_dataset()
    mask_path = out / "relevance.mask.json"

    if cfg.excluded_count() == 0:
        print("warning: no excluded classes configured; writing an empty mask")
        mask = all_false_mask(model)
        save_mask(mask, mask_path, arch=meta.arch,
                  threshold=cfg["relevance.accuracy_threshold"],
                  init_fraction=cfg["relevance.init_fraction"],
                  augmentation=cfg["relevance.augmentation"],
                  config_hash=cfg.config_hash(), seed=cfg["seed"])
        return EXIT_OK

    partition = cfg.partition(train_set.num_classes)
    subset = build_limited_subset(train_set, cfg.subset_spec())
    subset.export_indices(out / "subset.indices.txt")

    mask = identify_relevant_parameters(
        model, subset, partition,
        init_fraction=cfg["relevance.init_fraction"],
        accuracy_threshold=cfg["relevance.accuracy_threshold"],
        augmentation=cfg["relevance.augmentation"],
        seed=cfg["relevance.seed"],
        trained_augmentations=meta.train_augmentations)

    save_mask(mask, mask_path, arch=meta.arch,
              threshold=cfg["relevance.accuracy_threshold"],
              init_fraction=cfg["relevance.init_fraction"],
              augmentation=cfg["relevance.augmentation"],
              config_hash=cfg.config_hash(), seed=cfg["seed"])
    export_mask_text(mask, out / "relevance.mask.txt")

    total = mask.num_total()
    for prov in mask.provenance:
        print(f"class {prov.class_id}: per-layer selected fractions")
        for layer, frac in sorted(prov.layer_fractions.items()):
            tag = " (saturated)" if layer in prov.saturated_layers else ""
            print(f"  {layer:<12} {frac:7.2%}{tag}")
    print(f"mask: {mask.num_selected()}/{total} parameters "
          f"({mask.num_selected() / total:.2%}) -> {mask_path}")
    return EXIT_OK


def cmd_unlearn(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args.out)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "original.ckpt"
    mask_path = Path(args.mask) if args.mask else out / "relevance.mask.json"
    if not mask_path.exists():
        raise MaskError(f"mask file {mask_path} not found; run identify first")

    teacher, meta = load_checkpoint(ckpt_path, expect_arch=cfg["arch"])
    student, _ = load_checkpoint(ckpt_path, expect_arch=cfg["arch"])
    mask, _header = load_mask(mask_path)
    mask_id = _mask_file_id(mask_path)

    train_set, test_set = cfg.load_dataset()
    partition = cfg.partition(train_set.num_classes)
    subset = build_limited_subset(train_set, cfg.subset_spec())
    pair = ModelPair(teacher=teacher, student=student)
    ucfg = cfg.unlearn_config()

    def eval_epoch(epoch, model):
        triple = _metric_triple(model, subset, test_set, partition,
                                cfg["eval.normalize_features"])
        print(f"epoch {epoch:2d}: FA_e={triple[0]:6.2f}%  "
              f"FPA_e={triple[1]:6.2f}%  CA_ne={triple[2]:6.2f}%")
        return triple

    final, history = erwp_run(pair, subset, mask, partition, ucfg,
                              epoch_callback=eval_epoch)

    atomic_write_text(out / "unlearn.losses.csv",
                      history.losses_csv(cfg.config_hash(), cfg["seed"]))
    atomic_write_text(out / "unlearn.metrics.csv",
                      history_csv(history.reports, cfg.config_hash(), cfg["seed"]))
    plot_history(history.reports, out / "unlearn.curves.png",
                 cfg.config_hash(), cfg["seed"])

    final_meta = CheckpointMeta(arch=meta.arch, num_classes=meta.num_classes,
                                seed=cfg["seed"], config_hash=cfg.config_hash(),
                                train_augmentations=meta.train_augmentations,
                                extra={"role": "unlearned", "mask_id": mask_id})
    save_checkpoint(final, out / "unlearned.ckpt", final_meta)

    report = _evaluate_and_report(cfg, final, teacher, subset, test_set,
                                  partition, mask_id, history.reports)
    report.save(out / "unlearn.report.json")
    for gate in report.gates:
        print(f"gate {gate.name}: {'PASS' if gate.passed else 'FAIL'} "
              f"({gate.detail})")
    print(f"final checkpoint written to {out / 'unlearned.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args.out)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "unlearned.ckpt"
    orig_path = Path(args.original) if args.original else out / "original.ckpt"
    model, _ = load_checkpoint(ckpt_path, expect_arch=cfg["arch"])
    original, _ = load_checkpoint(orig_path, expect_arch=cfg["arch"])

    train_set, test_set = cfg.load_dataset()
    partition = cfg.partition(train_set.num_classes)
    subset = build_limited_subset(train_set, cfg.subset_spec())

    report = _evaluate_and_report(cfg, model, original, subset, test_set,
                                  partition)
    report.save(out / "evaluate.report.json")
    print(f"FA_e={report.fa_e:.2f}%  FPA_e={report.fpa_e:.2f}%  "
          f"CA_ne={report.ca_ne:.2f}%")
    for gate in report.gates:
        print(f"gate {gate.name}: {'PASS' if gate.passed else 'FAIL'} "
              f"({gate.detail})")
    return EXIT_OK if report.gates_passed() else EXIT_GATES


def cmd_baselines(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args.out)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "original.ckpt"
    original, meta = load_checkpoint(ckpt_path, expect_arch=cfg["arch"])

    train_set, test_set = cfg.load_dataset()
    partition = cfg.partition(train_set.num_classes)
    subset = build_limited_subset(train_set, cfg.subset_spec())

    requested = (args.baselines.split(",") if args.baselines
                 else list(cfg["baselines.list"]))
    for rid in requested:
        if rid not in bl.BASELINES:
            raise BaselineSpecError(f"unknown baseline id {rid!r}")

    kd_beta = cfg["baselines.kd_beta"]
    run_cfg = bl.BaselineRunConfig(
        train=cfg.train_config(), arch=cfg["arch"],
        finetune_epochs=cfg["baselines.epochs"], finetune_lr=cfg["unlearn.lr"],
        finetune_momentum=cfg["unlearn.momentum"],
        kd_beta=cfg["unlearn.beta"] if kd_beta is None else kd_beta,
        kappa=cfg["unlearn.kappa"], seed=cfg["seed"],
        batch_size=cfg["unlearn.batch_size"])

    reports: dict[str, MetricsReport] = {}
    fa, fpa, ca = _metric_triple(original, subset, test_set, partition,
                                 cfg["eval.normalize_features"])
    reports["original"] = MetricsReport(
        fa_e=fa, fpa_e=fpa, ca_ne=ca,
        metadata=_run_metadata(cfg, test_set, partition))

    bl_dir = out / "baselines"
    for rid in requested:
        print(f"running baseline {rid}")
        model = bl.run_baseline(bl.BASELINES[rid], original, subset,
                                partition, run_cfg)
        report = _evaluate_and_report(cfg, model, original, subset, test_set,
                                      partition)
        report.save(bl_dir / f"{rid}.report.json")
        save_checkpoint(model, bl_dir / f"{rid}.ckpt",
                        CheckpointMeta(arch=meta.arch,
                                       num_classes=meta.num_classes,
                                       seed=cfg["seed"],
                                       config_hash=cfg.config_hash(),
                                       train_augmentations=meta.train_augmentations,
                                       extra={"role": f"baseline:{rid}"}))
        reports[rid] = report

    # the forgetting run itself, for the final comparison row
    mask_path = Path(args.mask) if args.mask else out / "relevance.mask.json"
    if not mask_path.exists():
        print("no mask file found; identifying relevant parameters first")
        mask = identify_relevant_parameters(
            original, subset, partition,
            init_fraction=cfg["relevance.init_fraction"],
            accuracy_threshold=cfg["relevance.accuracy_threshold"],
            augmentation=cfg["relevance.augmentation"],
            seed=cfg["relevance.seed"],
            trained_augmentations=meta.train_augmentations)
        save_mask(mask, mask_path, arch=meta.arch,
                  threshold=cfg["relevance.accuracy_threshold"],
                  init_fraction=cfg["relevance.init_fraction"],
                  augmentation=cfg["relevance.augmentation"],
                  config_hash=cfg.config_hash(), seed=cfg["seed"])
    mask, _header = load_mask(mask_path)
    print("running ERwP")
    student, _ = load_checkpoint(ckpt_path, expect_arch=cfg["arch"])
    pair = ModelPair(teacher=original, student=student)

    def eval_epoch(epoch, model):
        return _metric_triple(model, subset, test_set, partition,
                              cfg["eval.normalize_features"])

    final, history = erwp_run(pair, subset, mask, partition,
                              cfg.unlearn_config(), epoch_callback=eval_epoch)
    erwp_report = _evaluate_and_report(cfg, final, original, subset, test_set,
                                       partition, _mask_file_id(mask_path),
                                       history.reports)
    erwp_report.save(bl_dir / "erwp.report.json")
    reports["erwp"] = erwp_report
    plot_history(history.reports, out / "comparison.curves.png",
                 cfg.config_hash(), cfg["seed"])

    text, csv = bl.compare_table(reports)
    atomic_write_text(out / "comparison.txt",
                      f"# config_hash={cfg.config_hash()} seed={cfg['seed']}\n"
                      + text)
    atomic_write_text(out / "comparison.csv",
                      f"# config_hash={cfg.config_hash()} seed={cfg['seed']}\n"
                      + csv)
    print(text)
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg, args.out)
    reports: dict[str, MetricsReport] = {}
    if (out / "original.report.json").exists():
        reports["original"] = MetricsReport.load(out / "original.report.json")
    if (out / "unlearn.report.json").exists():
        reports["erwp"] = MetricsReport.load(out / "unlearn.report.json")
    bl_dir = out / "baselines"
    if bl_dir.is_dir():
        for path in sorted(bl_dir.glob("*.report.json")):
            rid = path.name.replace(".report.json", "")
            reports[rid] = MetricsReport.load(path)
    if not reports:
        raise InsufficientDataError(f"no reports found under {out}")
    text, csv = bl.compare_table(reports)
    atomic_write_text(out / "comparison.txt",
                      f"# config_hash={cfg.config_hash()} seed={cfg['seed']}\n"
                      + text)
    atomic_write_text(out / "comparison.csv",
                      f"# config_hash={cfg.config_hash()} seed={cfg['seed']}\n"
                      + csv)
    erwp = reports.get("erwp")
    if erwp is not None and erwp.per_epoch:
        plot_history(erwp.per_epoch, out / "comparison.curves.png",
                     cfg.config_hash(), cfg["seed"])
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="classforget",
        description="Remove restricted classes from a trained classifier "
                    "using limited data.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra_flags):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed-override", type=int, default=None)
        for flag, kwargs in extra_flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("train-original", cmd_train_original)
    add("identify", cmd_identify,
        **{"--checkpoint": dict(default=None, help="original checkpoint")})
    add("unlearn", cmd_unlearn,
        **{"--checkpoint": dict(default=None), "--mask": dict(default=None)})
    add("evaluate", cmd_evaluate,
        **{"--checkpoint": dict(default=None),
           "--original": dict(default=None, help="original checkpoint")})
    add("baselines", cmd_baselines,
        **{"--checkpoint": dict(default=None), "--mask": dict(default=None),
           "--baselines": dict(default=None,
                               help="comma-separated baseline ids")})
    add("report", cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.manual_seed(0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BaselineSpecError as exc:
        print(f"baseline spec error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientDataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointFormatError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except MaskError as exc:
        print(f"mask error: {exc}", file=sys.stderr)
        return EXIT_MASK
    except ComparisonError as exc:
        print(f"comparison error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ClassForgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
