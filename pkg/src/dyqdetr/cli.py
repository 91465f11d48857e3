"""Experiment runner and command-line entry point.

Every artifact of a run lives under ``out_dir``::

    config.json                 resolved configuration
    data/train.jsonl            training scene manifest
    data/test.jsonl             held-out scene manifest
    data/splits.json            class sets and per-phase image ids
    checkpoints/<key>.zip       one model per completed training stage
    checkpoints/<key>.risk.json risk records behind an exemplar selection
    checkpoints/<key>.exemplars.json
    logs/<key>.jsonl            per-epoch losses
    predictions/<method>-step<t>.jsonl
    metrics.json, metrics.csv   evaluation tables (no timings, byte-stable)

Checkpoint keys spell out a model's lineage (``p1.dyq2.cal2`` is the phase-1
model, trained on phase 2, then calibrated), so stages shared between methods
are trained once and an interrupted run resumes from whatever exists.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import data as D
from . import diffcore as dc
from .evaluation import (EvalReport, evaluate, forgetting_report, predictions_to_detections, read_detections,
                         write_detections, write_table_csv)
from .increngine import (NumericalError, PhaseLogger, PhasePlan, run_finetune_step, run_incremental_step,
                         train_joint)
from .matchloss import LossCoefs
from .model import DyQDETR, ModelConfig
from .replay import ExemplarStore, RiskRecord, partial_calibration, risk_score, select_exemplars

log = logging.getLogger("dyqdetr")

METHODS = ("joint", "naive", "dyq", "dyq+er")
METHOD_LABELS = {"joint": "joint", "naive": "fine-tune", "dyq": "DyQ-DETR w/o ER", "dyq+er": "DyQ-DETR"}

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# ---------------------------------------------------------------- configuration

@dataclass
class TrainSettings:
    epochs: int = 30
    first_epochs: int | None = 140
    calibration_epochs: int = 10
    score_threshold: float = 0.4
    iou_threshold: float = 0.7
    exemplar_fraction: float = 0.1
    batch_size: int = 8
    lr: float = 1e-3
    calibration_lr_scale: float = 0.1
    weight_decay: float = 1e-4
    strict_freeze: bool = False
    augment: bool = True
    joint_epochs: int | None = 30
    coefs: LossCoefs = field(default_factory=LossCoefs)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    n_images: int = 1000
    n_test_images: int = 200
    n_classes: int = 8
    splits: list[int] = field(default_factory=lambda: [4, 4])
    protocol: str = "revised"
    max_objects: int = 5
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    eval_batch: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)

    def validate(self) -> None:
        if sum(self.splits) != self.n_classes or any(s < 1 for s in self.splits):
            raise ConfigError(f"splits {self.splits} do not add up to n_classes={self.n_classes}")
        if not 2 <= self.n_classes <= D.max_classes():
            raise ConfigError(f"n_classes must lie in [2, {D.max_classes()}]")
        if self.protocol not in ("revised", "traditional"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if self.n_images < 1 or self.n_test_images < 1 or self.max_objects < 1 or self.eval_batch < 1:
            raise ConfigError("image counts, max_objects and eval_batch must be positive")
        t = self.train
        if not 0 < t.exemplar_fraction <= 1:
            raise ConfigError("exemplar_fraction must lie in (0, 1]")
        if min(t.epochs, t.calibration_epochs, t.first_epochs or 0, t.joint_epochs or 0) < 0 or t.batch_size < 1:
            raise ConfigError("epoch counts must be non-negative and batch_size positive")
        if not (0 < t.score_threshold < 1 and 0 < t.iou_threshold < 1):
            raise ConfigError("thresholds must lie in (0, 1)")
        c = t.coefs
        if not all(math.isfinite(x) and x >= 0 for x in (c.cls, c.l1, c.giou, c.no_object, t.lr, t.weight_decay)):
            raise ConfigError("loss coefficients, lr and weight_decay must be finite and non-negative")

    @property
    def n_phases(self) -> int:
        return len(self.splits)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        doc = dict(doc)
        try:
            model = ModelConfig(**doc.pop("model", {}))
            train_doc = dict(doc.pop("train", {}))
            coefs = LossCoefs(**train_doc.pop("coefs", {}))
            train = TrainSettings(coefs=coefs, **train_doc)
            cfg = cls(model=model, train=train, **doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def _flatten(cfg: ExperimentConfig) -> dict[str, tuple[str, object]]:
    """CLI flag name -> (dotted config path, current value) for every scalar field."""
    out = {}

    def walk(obj, prefix, flag_prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                walk(v, f"{prefix}{f.name}.", f"{flag_prefix}{f.name}-" if f.name != "train" else flag_prefix)
            elif prefix + f.name != "model.seed":     # the run seed drives model init
                out[(flag_prefix + f.name).replace("_", "-")] = (prefix + f.name, v)
    walk(cfg, "", "")
    return out


def _set_path(doc: dict, dotted: str, value) -> None:
    *head, last = dotted.split(".")
    for k in head:
        doc = doc.setdefault(k, {})
    doc[last] = value


def _parse_value(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(like, list):
        items = [s for s in text.split(",") if s]
        return [int(s) for s in items] if all(isinstance(x, int) for x in like) else items
    if like is None:
        return None if text.lower() == "none" else int(text)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


# ---------------------------------------------------------------- pipeline

def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


class Pipeline:
    """Lazily builds and caches every stage of an experiment under ``cfg.out_dir``."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        for sub in ("data", "checkpoints", "logs", "predictions"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self.train_scenes, self.test_scenes = self._load_or_generate()
        if cfg.protocol == "revised":
            self.class_sets, self.phases = D.split_revised(self.train_scenes, cfg.splits, cfg.seed)
        else:
            self.class_sets, self.phases = D.split_traditional(self.train_scenes, cfg.splits)
        self._write_splits()
        self.cache = D.ImageCache(self.train_scenes)
        self.test_cache = D.ImageCache(self.test_scenes)
        t = cfg.train
        self.plan = PhasePlan(self.class_sets, protocol=cfg.protocol, epochs=t.epochs,
                              first_epochs=t.first_epochs,
                              calibration_epochs=t.calibration_epochs, score_threshold=t.score_threshold,
                              iou_threshold=t.iou_threshold, exemplar_fraction=t.exemplar_fraction, seed=cfg.seed,
                              batch_size=t.batch_size, lr=t.lr, calibration_lr_scale=t.calibration_lr_scale,
                              weight_decay=t.weight_decay, strict_freeze=t.strict_freeze, augment=t.augment,
                              coefs=t.coefs)
        self.model_config = dataclasses.replace(cfg.model, seed=cfg.seed)
        self._models: dict[str, DyQDETR] = {}
        self._stores: dict[str, ExemplarStore] = {}

    # -- data
    def data_seed(self, name: str) -> int:
        return int(dc.spawn_rng(self.cfg.seed, "data", name).integers(2 ** 31))

    def _load_or_generate(self):
        cfg = self.cfg
        out = []
        for name, n in (("train", cfg.n_images), ("test", cfg.n_test_images)):
            path = self.root / "data" / f"{name}.jsonl"
            header = {"split": name, "n_images": n, "n_classes": cfg.n_classes, "seed": self.data_seed(name),
                      "canvas": cfg.model.image_size, "max_objects": cfg.max_objects}
            if path.exists():
                head, scenes = D.read_manifest(path)
                if any(head.get(k) != v for k, v in header.items()):
                    raise ConfigError(f"{path} was generated with different settings; use a fresh out_dir")
            else:
                scenes = D.generate_corpus(n, cfg.n_classes, header["seed"], canvas=cfg.model.image_size,
                                           max_objects=cfg.max_objects)
                _atomic_write(path, lambda p: D.write_manifest(p, scenes, **header))
            out.append(scenes)
        return out

    def _write_splits(self) -> None:
        doc = {"protocol": self.cfg.protocol, "class_sets": [list(c) for c in self.class_sets],
               "phases": [{"phase": p.phase, "image_ids": p.image_ids} for p in self.phases]}
        text = json.dumps(doc, sort_keys=True) + "\n"
        path = self.root / "data" / "splits.json"
        if not path.exists() or path.read_text() != text:
            _atomic_write(path, lambda p: p.write_text(text))

    def seen_classes(self, t: int) -> tuple[int, ...]:
        return tuple(c for cs in self.class_sets[:t] for c in cs)

    # -- checkpoints
    def ckpt(self, key: str) -> Path:
        return self.root / "checkpoints" / f"{key}.zip"

    def _stage(self, key: str, build) -> DyQDETR:
        """Return a private copy of stage ``key``, training it with ``build(logger)`` when missing."""
        if key not in self._models:
            path = self.ckpt(key)
            if path.exists():
                model = DyQDETR.load(path)
            else:
                log_path = self.root / "logs" / f"{key}.jsonl"
                log_path.unlink(missing_ok=True)
                log.info("training stage %s", key)
                model = build(PhaseLogger(log_path))
                _atomic_write(path, model.save)
            self._models[key] = model
        return self._models[key].copy()

    def trained(self, method: str, t: int) -> tuple[str, DyQDETR]:
        """Model after phase-``t`` training (before any calibration)."""
        if method == "joint":
            raise ValueError("joint training has no phases")
        if t == 1:
            # every incremental method starts from the same phase-1 detector
            return "p1", self._stage("p1", lambda lg: run_incremental_step(
                DyQDETR(self.model_config), self.phases[0], self.plan, 1, self.cache, lg))
        parent_key, _ = self.final(method, t - 1)
        tag = "ft" if method == "naive" else "dyq"
        key = f"{parent_key}.{tag}{t}"

        def build(lg):
            _, model = self.final(method, t - 1)
            step = run_finetune_step if method == "naive" else run_incremental_step
            return step(model, self.phases[t - 1], self.plan, t, self.cache, lg)
        return key, self._stage(key, build)

    def final(self, method: str, t: int) -> tuple[str, DyQDETR]:
        """Model evaluated after phase ``t``: calibrated for ``dyq+er`` from phase 2 on."""
        if method == "joint":
            return "joint", self._stage("joint", self._train_joint)
        key, model = self.trained(method, t)
        if method != "dyq+er" or t == 1 or not self.cfg.train.calibration_epochs:
            return key, model
        cal_key = f"{key}.cal{t}"
        return cal_key, self._stage(cal_key, lambda lg: partial_calibration(
            model, self.exemplars(t), self.plan, self.cache, lg, tag=f"calibration-{cal_key}"))

    def _train_joint(self, lg) -> DyQDETR:
        full = D.full_annotations(self.train_scenes, self.seen_classes(self.cfg.n_phases))
        epochs = self.cfg.train.joint_epochs if self.cfg.train.joint_epochs is not None else self.plan.epochs
        return train_joint(DyQDETR(self.model_config), full, self.plan, self.cache, epochs, lg)

    # -- replay
    def risk(self, t: int) -> list[RiskRecord]:
        key, model = self.trained("dyq+er", t)
        path = self.root / "checkpoints" / f"{key}.risk.json"
        if path.exists():
            doc = json.loads(path.read_text())
            return [RiskRecord(r["image_id"], r["phase"], r["risk"]) for r in doc]
        records = risk_score(model, self.phases[t - 1], t, self.cache, self.plan.coefs)
        text = json.dumps([asdict(r) for r in records], sort_keys=True) + "\n"
        _atomic_write(path, lambda p: p.write_text(text))
        return records

    def exemplars(self, t: int) -> ExemplarStore:
        """Exemplar store after phase ``t``'s selection (phases 1..t)."""
        key, _ = self.trained("dyq+er", t)
        if key in self._stores:
            return self._stores[key]
        path = self.root / "checkpoints" / f"{key}.exemplars.json"
        if path.exists():
            store = ExemplarStore.load(path)
        else:
            prev = self.exemplars(t - 1) if t > 1 else ExemplarStore()
            store = ExemplarStore(list(prev.entries))
            store.add_phase(select_exemplars(self.risk(t), self.plan.exemplar_fraction), self.phases[t - 1])
            manifest = str(Path("data") / "train.jsonl")
            _atomic_write(path, lambda p: store.save(p, manifest))
        self._stores[key] = store
        return store

    # -- evaluation
    def test_ground_truth(self, t: int) -> dict:
        seen = self.seen_classes(t)
        return {s.image_id: D.restrict(s, seen) for s in self.test_scenes}

    def predict(self, model: DyQDETR) -> list:
        dets = []
        ids = [s.image_id for s in self.test_scenes]
        with dc.no_grad():
            for i in range(0, len(ids), self.cfg.eval_batch):
                chunk = ids[i:i + self.cfg.eval_batch]
                dets += predictions_to_detections(chunk, model.forward_all(self.test_cache.batch(chunk)),
                                                  self.cfg.model.image_size)
        return dets

    def evaluate_dump(self, path, t: int) -> EvalReport:
        old = self.seen_classes(t - 1) if t > 1 else None
        return evaluate(read_detections(path), self.test_ground_truth(t), self.seen_classes(t),
                        old, self.class_sets[t - 1] if t > 1 else None)

    def evaluate_method(self, method: str, t: int) -> EvalReport:
        _, model = self.final(method, t)
        path = self.root / "predictions" / f"{method}-step{t}.jsonl"
        dets = self.predict(model)
        _atomic_write(path, lambda p: write_detections(p, dets))
        return self.evaluate_dump(path, t)

    def run(self) -> dict:
        cfg = self.cfg
        T = cfg.n_phases
        rows, reports = [], {}
        for method in cfg.methods:
            steps = [T] if method == "joint" else range(1, T + 1)
            if method == "dyq+er":
                for t in range(1, T + 1):
                    self.exemplars(t)
            for t in steps:
                rep = self.evaluate_method(method, t)
                rows.append({"method": METHOD_LABELS[method], "step": t, "classes_seen": len(self.seen_classes(t)),
                             "report": rep, "class_sets": self.class_sets[:t]})
                reports[f"{method}/step{t}"] = rep.to_dict()
        table = forgetting_report(rows)
        doc = {"class_sets": [list(c) for c in self.class_sets], "methods": list(cfg.methods),
               "table": table, "reports": reports}
        _atomic_write(self.root / "metrics.json",
                      lambda p: p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n"))
        _atomic_write(self.root / "metrics.csv", lambda p: write_table_csv(p, table))
        return doc


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Full pipeline; returns the metrics document written to ``metrics.json``."""
    pipe = Pipeline(cfg)
    text = json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n"
    _atomic_write(pipe.root / "config.json", lambda p: p.write_text(text))
    return pipe.run()


# ---------------------------------------------------------------- plot data

def plot_data(metrics_path, out_dir) -> list[Path]:
    """Per-step AP curves and per-epoch loss curves as CSV files."""
    metrics_path = Path(metrics_path)
    doc = json.loads(metrics_path.read_text())
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = out_dir / "ap_curves.csv"
    write_table_csv(curves, doc["table"])
    written = [curves]
    logs = sorted((metrics_path.parent / "logs").glob("*.jsonl"))
    if logs:
        losses = out_dir / "loss_curves.csv"
        with open(losses, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "mode", "phase", "epoch", "total_loss"])
            for path in logs:
                for line in path.read_text().splitlines():
                    r = json.loads(line)
                    w.writerow([path.stem, r["mode"], r["phase"], r["epoch"], f"{r['total_loss']:.6f}"])
        written.append(losses)
    return written


# ---------------------------------------------------------------- argparse

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (defaults are used for missing fields)")
    group = p.add_argument_group("config overrides")
    for flag, (path, value) in _flatten(ExperimentConfig()).items():
        group.add_argument(f"--{flag}", dest=f"cfg:{path}", metavar=type(value).__name__.upper()
                           if value is not None else "INT", help=f"default: {value}")


def config_from_args(args) -> ExperimentConfig:
    doc = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: {exc}") from exc
    defaults = _flatten(ExperimentConfig())
    by_path = {path: value for path, value in defaults.values()}
    for k, v in vars(args).items():
        if k.startswith("cfg:") and v is not None:
            path = k[4:]
            try:
                _set_path(doc, path, _parse_value(v, by_path[path]))
            except ValueError as exc:
                raise ConfigError(f"--{path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyqdetr", description="Dynamic-query incremental detection experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/test scene manifests and the phase split")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one method up to a phase (cached per stage)")
    _add_config_flags(p)
    p.add_argument("--method", choices=METHODS, default="dyq")
    p.add_argument("--phase", type=int, help="last phase to train (default: all)")

    p = sub.add_parser("risk", help="risk scores of a phase's training images")
    _add_config_flags(p)
    p.add_argument("--phase", type=int, required=True)
    p.add_argument("--checkpoint", help="score with this model instead of the run's DyQ checkpoint")
    p.add_argument("--out", help="write records here (default: stdout)")

    p = sub.add_parser("replay", help="select exemplars and run partial calibration for a phase")
    _add_config_flags(p)
    p.add_argument("--phase", type=int, required=True)

    p = sub.add_parser("eval", help="evaluate a prediction dump or a checkpoint on the test set")
    _add_config_flags(p)
    p.add_argument("--step", type=int, required=True, help="classes of phases 1..STEP are evaluated")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--predictions")
    src.add_argument("--checkpoint")

    p = sub.add_parser("run", help="full pipeline: every method, phase, replay and evaluation")
    _add_config_flags(p)

    p = sub.add_parser("plot-data", help="CSV curves from a finished run")
    p.add_argument("--metrics", required=True, help="metrics.json of a run")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("print-config", help="print the resolved config as JSON")
    _add_config_flags(p)
    return parser


def _check_phase(pipe: Pipeline, t: int) -> None:
    if not 1 <= t <= pipe.cfg.n_phases:
        raise ConfigError(f"phase must lie in 1..{pipe.cfg.n_phases}, got {t}")


def _dispatch(args) -> int:
    if args.command == "plot-data":
        for path in plot_data(args.metrics, args.out):
            print(path)
        return EXIT_OK
    cfg = config_from_args(args)
    if args.command == "print-config":
        print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        return EXIT_OK
    if args.command == "run":
        doc = run_experiment(cfg)
        print(Path(cfg.out_dir) / "metrics.csv")
        for row in doc["table"]:
            print(f"{row['method']:>16} step {row['step']}: AP {row['AP']:.4f}  AP50 {row['AP50']:.4f}")
        return EXIT_OK
    pipe = Pipeline(cfg)
    if args.command == "gen-data":
        print(pipe.root / "data")
    elif args.command == "train":
        if args.method == "joint":
            key, _ = pipe.final("joint", cfg.n_phases)
        else:
            t = args.phase or cfg.n_phases
            _check_phase(pipe, t)
            key, _ = pipe.trained(args.method, t)
        print(pipe.ckpt(key))
    elif args.command == "risk":
        _check_phase(pipe, args.phase)
        if args.checkpoint:
            model = DyQDETR.load(args.checkpoint)
            records = risk_score(model, pipe.phases[args.phase - 1], args.phase, pipe.cache, pipe.plan.coefs)
        else:
            records = pipe.risk(args.phase)
        text = json.dumps([asdict(r) for r in records], sort_keys=True) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
    elif args.command == "replay":
        _check_phase(pipe, args.phase)
        store = pipe.exemplars(args.phase)
        key, _ = pipe.final("dyq+er", args.phase)
        print(f"{len(store)} exemplars; model {pipe.ckpt(key)}")
    elif args.command == "eval":
        _check_phase(pipe, args.step)
        if args.predictions:
            rep = pipe.evaluate_dump(args.predictions, args.step)
        else:
            path = pipe.root / "predictions" / f"{Path(args.checkpoint).stem}-step{args.step}.jsonl"
            dets = pipe.predict(DyQDETR.load(args.checkpoint))
            write_detections(path, dets)
            rep = pipe.evaluate_dump(path, args.step)
        print(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
