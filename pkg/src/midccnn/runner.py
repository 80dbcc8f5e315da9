"""Run configuration and the train / evaluate / protocol workflows."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .checkpoint import checkpoint_save
from .data import EvalReport, LabeledDataset, evaluate_oa, protocol
from .dccnn import ConfigError, DccnnConfig
from .network import HeadConfig, Network
from .training import AdamState, TrainConfig, train


@dataclass
class DataConfig:
    path: Optional[str] = None
    train_ratio: float = 0.8
    split_seed: int = 0
    repetitions: int = 10

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.train_ratio < 1:
            out.append(f"data.train_ratio must lie in (0, 1), got {self.train_ratio}")
        if self.repetitions < 1:
            out.append(f"data.repetitions must be >= 1, got {self.repetitions}")
        return out


@dataclass
class RunConfig:
    model: DccnnConfig = field(default_factory=DccnnConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def problems(self) -> list[str]:
        out = [f"model: {p}" for p in self.model.problems()]
        out += [f"head: {p}" for p in self.head.problems()]
        out += [f"train: {p}" for p in self.train.problems()]
        out += self.data.problems()
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {"model": DccnnConfig, "head": HeadConfig, "train": TrainConfig, "data": DataConfig}


def _type_ok(value: Any, default: Any, name: str) -> bool:
    if name in ("refine_channels", "path"):
        return value is None or isinstance(value, (int, str)) and not isinstance(value, bool)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def parse_run_config(doc: dict) -> RunConfig:
    """Build a RunConfig from a JSON document; every problem is reported at once."""
    problems = []
    if not isinstance(doc, dict):
        raise ConfigError(["configuration must be a JSON object"])
    for key in doc:
        if key not in _SECTIONS:
            problems.append(f"unknown section {key!r}")
    sections = {}
    for sname, cls in _SECTIONS.items():
        body = doc.get(sname, {})
        if not isinstance(body, dict):
            problems.append(f"section {sname!r} must be an object")
            body = {}
        defaults = cls()
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for k, v in body.items():
            if k not in names:
                problems.append(f"{sname}: unknown key {k!r}")
            elif not _type_ok(v, getattr(defaults, k), k):
                problems.append(f"{sname}.{k}: wrong type {type(v).__name__}")
            else:
                kwargs[k] = float(v) if isinstance(getattr(defaults, k), float) else v
        sections[sname] = cls(**kwargs)
    cfg = RunConfig(**sections)
    if not problems:
        problems = cfg.problems()
    if problems:
        raise ConfigError(problems)
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
    return parse_run_config(doc)


def desk_profile(num_classes: int = 3, method: str = "attention") -> RunConfig:
    """Small, fast settings for CPU-scale experiments and tests."""
    return RunConfig(
        model=DccnnConfig(input_size=96, init_channels=16, growth_rate=8, num_classes=num_classes),
        head=HeadConfig(method=method, hidden_dim=16),
        train=TrainConfig(batch_size=8, stage_epochs=10, lr_min=1e-5),
        data=DataConfig(train_ratio=0.8, repetitions=5),
    )


def gradcheck_profile() -> RunConfig:
    return RunConfig(
        model=DccnnConfig(input_size=64, init_channels=8, growth_rate=4, num_classes=3),
        head=HeadConfig(hidden_dim=8),
        train=TrainConfig(dropout=0.0),
    )


def check_dataset(cfg: RunConfig, ds: LabeledDataset) -> None:
    problems = []
    if ds.num_classes != cfg.model.num_classes:
        problems.append(
            f"model.num_classes is {cfg.model.num_classes} but the dataset has {ds.num_classes} classes"
        )
    if ds.images.shape[2:] != (cfg.model.input_size, cfg.model.input_size):
        problems.append(f"images are {ds.images.shape[2:]} but model.input_size is {cfg.model.input_size}")
    if problems:
        raise ConfigError(problems)


def build_network(cfg: RunConfig, rep: int = 0) -> Network:
    model_cfg = dataclasses.replace(cfg.model, seed=cfg.model.seed + rep)
    return Network(model_cfg, cfg.head, dropout=cfg.train.dropout)


def network_from_config(doc: dict) -> Network:
    """Rebuild the architecture recorded in a checkpoint's embedded config."""
    cfg = parse_run_config(doc["run"])
    return build_network(cfg, int(doc.get("rep", 0)))


def fit(cfg: RunConfig, train_ds: LabeledDataset, rep: int = 0, on_epoch=None):
    net = build_network(cfg, rep)
    train_cfg = dataclasses.replace(cfg.train, seed=cfg.train.seed + rep)
    state, history = train(net, train_ds.images, train_ds.labels, train_cfg, on_epoch=on_epoch)
    return net, state, history


@dataclass
class ProtocolResult:
    report: EvalReport
    net: Network
    adam: AdamState
    history: list[dict]
    rep: int


def run_protocol(cfg: RunConfig, dataset: LabeledDataset, repetitions: Optional[int] = None) -> ProtocolResult:
    check_dataset(cfg, dataset)
    reps = repetitions or cfg.data.repetitions
    last: dict[str, Any] = {}

    def run(train_ds, test_ds, r):
        net, state, history = fit(cfg, train_ds, r)
        last.update(net=net, adam=state, history=history, rep=r)
        return evaluate_oa(net, test_ds)

    report = protocol(dataset, cfg.data.train_ratio, reps, run, cfg.data.split_seed)
    return ProtocolResult(report, last["net"], last["adam"], last["history"], last["rep"])


def save_run(path, cfg: RunConfig, net: Network, adam: Optional[AdamState] = None, rep: int = 0) -> None:
    checkpoint_save(path, net, {"run": cfg.to_dict(), "rep": rep}, adam)

