"""Experiment configuration: one JSON document with data, model, loss, train, ablation and theorem sections."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import SyntheticSpec, generate, load_jsonl
from .errors import ConfigurationError
from .graph import TheoremSweep
from .losses import LossConfig
from .model import ModalFeatureBatch, ModelSpec
from .trainer import TrainConfig

SECTIONS = ("seed", "data", "model", "loss", "train", "ablation", "theorem")
MODEL_KEYS = ("task", "num_classes", "k", "fusion_hidden", "refiner_hidden", "refiner_dims", "feature_map",
              "head_hidden", "activation", "refiner_activation")
SPLITS = ("train", "val", "test")


def _reject_unknown(doc: Mapping, allowed, where: str):
    if not isinstance(doc, Mapping):
        raise ConfigurationError(f"{where} must be a JSON object")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown {where} keys: {sorted(unknown)}")


def _no_seed(doc: Mapping, where: str):
    if "seed" in doc:
        raise ConfigurationError(f"{where}.seed is not allowed; set the top-level seed (or --seed)")


@dataclass
class DataConfig:
    source: str = "synthetic"
    synthetic: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    label_fraction: float = 1.0

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DataConfig":
        _reject_unknown(doc, ("source", "synthetic", "paths", "label_fraction"), "data")
        cfg = cls(**doc)
        if cfg.source not in ("synthetic", "jsonl"):
            raise ConfigurationError(f"data.source must be 'synthetic' or 'jsonl', got {cfg.source!r}")
        if cfg.source == "jsonl":
            missing = [s for s in SPLITS if s not in cfg.paths]
            if missing or set(cfg.paths) - set(SPLITS):
                raise ConfigurationError(f"data.paths needs exactly the keys {SPLITS}")
        if not 0 < cfg.label_fraction <= 1:
            raise ConfigurationError("data.label_fraction must lie in (0, 1]")
        _no_seed(cfg.synthetic, "data.synthetic")
        SyntheticSpec.from_dict(cfg.synthetic)  # validate early
        return cfg

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec.from_dict({**self.synthetic, "seed": seed})

    def to_dict(self, seed: int) -> dict:
        d = {"source": self.source, "label_fraction": self.label_fraction}
        if self.source == "synthetic":
            spec = self.synthetic_spec(seed).to_dict()
            spec.pop("seed")
            d["synthetic"] = spec
        else:
            d["paths"] = {s: str(self.paths[s]) for s in SPLITS}
        return d


@dataclass
class AblationConfig:
    label_fractions: tuple[float, ...] = (0.05, 0.10, 0.20)
    seeds: tuple[int, ...] = (0, 1, 2)
    gamma: float = 0.1
    zeta: float = 0.1
    metric: str = "micro_f1"
    workers: int = 1

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AblationConfig":
        _reject_unknown(doc, cls.__dataclass_fields__, "ablation")
        doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        cfg = cls(**doc)
        if not cfg.label_fractions or any(not 0 < f <= 1 for f in cfg.label_fractions):
            raise ConfigurationError("ablation.label_fractions must be a non-empty subset of (0, 1]")
        if not cfg.seeds:
            raise ConfigurationError("ablation.seeds needs at least one seed")
        if cfg.gamma <= 0 or cfg.zeta <= 0:
            raise ConfigurationError("ablation.gamma and ablation.zeta must be positive")
        if cfg.workers < 1:
            raise ConfigurationError("ablation.workers must be >= 1")
        return cfg

    def to_dict(self) -> dict:
        return {"label_fractions": list(self.label_fractions), "seeds": list(self.seeds), "gamma": self.gamma,
                "zeta": self.zeta, "metric": self.metric, "workers": self.workers}


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    theorem: TheoremSweep = field(default_factory=TheoremSweep)

    @classmethod
    def from_dict(cls, doc: Mapping, seed: int | None = None) -> "ExperimentConfig":
        _reject_unknown(doc, SECTIONS, "top-level")
        model = dict(doc.get("model", {}))
        _reject_unknown(model, MODEL_KEYS, "model")
        for name in ("train", "loss"):
            _no_seed(doc.get(name, {}), name)
        seed = int(doc.get("seed", 0) if seed is None else seed)
        train = TrainConfig.from_dict({**doc.get("train", {}), "seed": seed})
        return cls(
            seed=seed,
            data=DataConfig.from_dict(doc.get("data", {})),
            model=model,
            loss=LossConfig.from_dict(doc.get("loss", {})),
            train=train,
            ablation=AblationConfig.from_dict(doc.get("ablation", {})),
            theorem=TheoremSweep.from_dict(doc.get("theorem", {})),
        )

    @classmethod
    def load(cls, path=None, seed: int | None = None) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({}, seed)
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_dict(doc, seed)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(self.to_dict(), seed)

    def splits(self, seed: int | None = None) -> dict[str, ModalFeatureBatch]:
        if self.data.source == "synthetic":
            return generate(self.data.synthetic_spec(self.seed if seed is None else seed))
        return {s: load_jsonl(self.data.paths[s]) for s in SPLITS}

    def model_spec(self, splits: Mapping[str, ModalFeatureBatch]) -> ModelSpec:
        opts = dict(self.model)
        task = opts.pop("task", "single-label")
        num_classes = opts.pop("num_classes", None)
        train = splits["train"]
        if num_classes is None:
            num_classes = infer_num_classes(train, task)
        return ModelSpec(input_dims=train.dims, num_classes=num_classes, task=task, **opts)

    def to_dict(self) -> dict:
        loss = self.loss.to_dict()
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "seed": self.seed,
            "data": self.data.to_dict(self.seed),
            "model": dict(self.model),
            "loss": loss,
            "train": train,
            "ablation": self.ablation.to_dict(),
            "theorem": self.theorem.to_dict(),
        }


def infer_num_classes(batch: ModalFeatureBatch, task: str) -> int:
    if task == "binary":
        return 1
    if batch.labels is None or batch.num_labeled == 0:
        raise ConfigurationError("model.num_classes is required when the training split has no labels")
    if task == "multi-label":
        if batch.labels.ndim != 2:
            raise ConfigurationError("multi-label task needs 0/1 label lists")
        return int(batch.labels.shape[1])
    return int(np.max(batch.labels[batch.label_mask])) + 1
