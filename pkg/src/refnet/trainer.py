"""Optional refiner-only pretraining followed by joint training, with resumable state."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DivergenceError
from .losses import LossConfig, pretrain_loss, train_loss
from .metrics import SELECTION_DEFAULTS, evaluate
from .model import ModalFeatureBatch, ReFNetModel
from .optim import SCHEDULES, adamw_step, init_moments, learning_rate, sgd_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_total", "L_downstream", "L_refiner", "L_MS", "learning_rate")
_TRAIN_STREAM, _PRETRAIN_STREAM = 0, 1


@dataclass
class TrainConfig:
    max_epochs: int = 10
    max_updates: int | None = None
    batch_size: int = 32
    optimizer: str = "adamw"
    base_lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: str = "cosine-warmup-cosine-decay"
    warmup_fraction: float = 0.1
    eval_every: int = 50
    patience: int = 10
    selection_metric: str | None = None
    seed: int = 0
    pretrain_epochs: int = 0
    pretrain_lr: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigurationError("warmup_fraction must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigurationError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}")
        if self.eval_every < 1 or self.patience < 1:
            raise ConfigurationError("eval_every and patience must be >= 1")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def total_updates(self, n: int) -> int:
        if self.max_updates is not None:
            return int(self.max_updates)
        return self.max_epochs * math.ceil(n / self.batch_size)


@dataclass
class TrainState:
    params: dict
    moments: dict
    step: int = 0
    epoch: int = 0
    cursor: int = 0
    best_metric: float | None = None
    best_step: int | None = None
    best_params: dict | None = None
    evals_since_best: int = 0
    stopped: bool = False
    history: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    @classmethod
    def initial(cls, model: ReFNetModel) -> "TrainState":
        params = {k: v.copy() for k, v in model.params().items()}
        return cls(params=params, moments=init_moments(params))

    def to_json(self) -> str:
        def arrays(d):
            return None if d is None else {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in d.items()}
        doc = {
            "params": arrays(self.params),
            "moments": {"m": arrays(self.moments["m"]), "v": arrays(self.moments["v"])},
            "step": self.step, "epoch": self.epoch, "cursor": self.cursor,
            "best_metric": self.best_metric, "best_step": self.best_step,
            "best_params": arrays(self.best_params),
            "evals_since_best": self.evals_since_best, "stopped": self.stopped,
            "history": self.history, "evals": self.evals,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "TrainState":
        doc = json.loads(text)

        def arrays(d):
            if d is None:
                return None
            return {k: np.asarray(e["values"], dtype=np.float64).reshape(e["shape"]) for k, e in d.items()}
        return cls(
            params=arrays(doc["params"]),
            moments={"m": arrays(doc["moments"]["m"]), "v": arrays(doc["moments"]["v"])},
            step=doc["step"], epoch=doc["epoch"], cursor=doc["cursor"],
            best_metric=doc["best_metric"], best_step=doc["best_step"],
            best_params=arrays(doc["best_params"]), evals_since_best=doc["evals_since_best"],
            stopped=doc["stopped"], history=doc["history"], evals=doc["evals"],
        )

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls.from_json(Path(path).read_text())


def epoch_order(n: int, seed: int, epoch: int, stream: int = _TRAIN_STREAM) -> np.ndarray:
    return np.random.default_rng((seed, stream, epoch)).permutation(n)


def _batch_index(n: int, batch_size: int, seed: int, epoch: int, cursor: int, stream: int):
    order = epoch_order(n, seed, epoch, stream)
    idx = order[cursor:cursor + batch_size]
    cursor += batch_size
    if cursor >= n:
        return idx, epoch + 1, 0
    return idx, epoch, cursor


def _apply_update(config: TrainConfig, params, grads, moments, t, lr):
    if config.optimizer == "sgd":
        return sgd_step(params, grads, lr), moments
    return adamw_step(params, grads, moments, t, lr, config.beta1, config.beta2, config.eps, config.weight_decay)


def _step(model: ReFNetModel, batch, loss_fn: Callable, loss_config, sections, step: int):
    try:
        leaves = model.leaves(sections)
        loss, parts = loss_fn(batch, model, loss_config, leaves)
    except FloatingPointError as exc:
        raise DivergenceError(f"non-finite value at step {step}: {exc}") from exc
    if not all(math.isfinite(v) for v in parts.values()):
        raise DivergenceError(f"non-finite loss at step {step}: {parts}")
    grads = {leaf.name: g for leaf, g in ad.backward(loss).items()}
    for name, leaf in leaves.items():
        if leaf.requires_grad and name not in grads:
            grads[name] = np.zeros(leaf.shape)
    return grads, parts


def pretrain(model: ReFNetModel, data: ModalFeatureBatch, config: TrainConfig, loss_config: LossConfig,
             history: list | None = None) -> ReFNetModel:
    """Minimise the refiner cost on every sample (labels ignored); the head is left untouched.

    Fusion, decoder and (if affine) feature-map weights are updated.  Returns ``model``
    after updating it in place; per-step losses are appended to ``history``.
    """
    if config.pretrain_epochs <= 0:
        return model
    if not loss_config.uses_refiner:
        raise ConfigurationError("pretraining needs at least one positive refiner weight")
    unlabeled = data.with_mask(np.zeros(data.n, dtype=bool))
    total = config.pretrain_epochs * math.ceil(data.n / config.batch_size)
    lr_base = config.pretrain_lr if config.pretrain_lr is not None else config.base_lr
    params = model.params()
    moments = init_moments(params)
    epoch = cursor = 0
    for t in range(1, total + 1):
        idx, epoch, cursor = _batch_index(data.n, config.batch_size, config.seed, epoch, cursor, _PRETRAIN_STREAM)
        grads, parts = _step(model, unlabeled.subset(idx), pretrain_loss, loss_config, ("fusion", "refiner"), t)
        lr = learning_rate(t, total, lr_base, config.schedule, config.warmup_fraction)
        params, moments = _apply_update(config, params, grads, moments, t, lr)
        model.load_params(params)
        if history is not None:
            history.append({"step": t, **parts, "learning_rate": lr})
    return model


def selection_value(model: ReFNetModel, val: ModalFeatureBatch, metric: str) -> float:
    report = evaluate_model(model, val)
    if metric not in report.metrics:
        raise ConfigurationError(f"selection metric {metric!r} unavailable; have {sorted(report.metrics)}")
    return report.metrics[metric]


def evaluate_model(model: ReFNetModel, batch: ModalFeatureBatch, with_embeddings: bool = False):
    if batch.n == 0 or batch.labels is None:
        raise ConfigurationError("evaluation needs a non-empty labelled split")
    res = model.forward(batch, with_refiner=False)
    emb = res.embedding.data if with_embeddings else None
    return evaluate(res.logits.data, batch.labels, model.spec.task, model.spec.num_classes, embeddings=emb)


def train(model: ReFNetModel, data: ModalFeatureBatch, val: ModalFeatureBatch, config: TrainConfig,
          loss_config: LossConfig, *, state: TrainState | None = None, stop_at: int | None = None,
          loss_fn: Callable = train_loss) -> TrainState:
    """Joint training loop; returns the state holding the best validation checkpoint.

    ``state`` resumes an earlier run; ``stop_at`` interrupts after that many updates
    (the returned state can be saved and resumed bit-exactly).
    """
    if data.num_labeled < 1:
        raise ConfigurationError("training needs at least one labelled sample")
    if val.n == 0:
        raise ConfigurationError("validation split is empty")
    metric = config.selection_metric or SELECTION_DEFAULTS[model.spec.task]
    total = config.total_updates(data.n)
    state = state if state is not None else TrainState.initial(model)
    model.load_params(state.params)
    while state.step < total and not state.stopped:
        if stop_at is not None and state.step >= stop_at:
            break
        t = state.step + 1
        idx, state.epoch, state.cursor = _batch_index(
            data.n, config.batch_size, config.seed, state.epoch, state.cursor, _TRAIN_STREAM)
        grads, parts = _step(model, data.subset(idx), loss_fn, loss_config, None, t)
        lr = learning_rate(t, total, config.base_lr, config.schedule, config.warmup_fraction)
        state.params, state.moments = _apply_update(config, state.params, grads, state.moments, t, lr)
        model.load_params(state.params)
        state.step = t
        state.history.append({"step": t, **parts, "learning_rate": lr})
        if t % config.eval_every == 0 or t == total:
            value = selection_value(model, val, metric)
            state.evals.append({"step": t, metric: value})
            if state.best_metric is None or value > state.best_metric:
                state.best_metric, state.best_step = value, t
                state.best_params = {k: v.copy() for k, v in state.params.items()}
                state.evals_since_best = 0
            else:
                state.evals_since_best += 1
                if state.evals_since_best >= config.patience:
                    log.info("early stop at step %d (best %s=%.4f at step %d)", t, metric,
                             state.best_metric, state.best_step)
                    state.stopped = True
    return state


def mask_labels(dataset: ModalFeatureBatch, fraction: float, seed: int) -> ModalFeatureBatch:
    """Keep ``round(fraction * n)`` labels, drawn per class (largest-remainder quotas, >= 1 per class when possible)."""
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"label fraction must lie in (0, 1], got {fraction}")
    if dataset.labels is None:
        raise ConfigurationError("cannot mask labels of an unlabelled dataset")
    n = dataset.n
    keep = int(math.floor(fraction * n + 0.5))
    y = dataset.labels
    if y.ndim > 1:
        _, strata = np.unique(y, axis=0, return_inverse=True)
        strata = strata.ravel()
    else:
        strata = y
    groups, counts = np.unique(strata, return_counts=True)
    quota = counts * keep / n
    alloc = np.floor(quota).astype(int)
    if keep >= groups.size:
        alloc = np.maximum(alloc, 1)
    alloc = np.minimum(alloc, counts)
    remainder = quota - np.floor(quota)
    order = np.lexsort((np.arange(groups.size), -remainder))
    while alloc.sum() < keep:
        for g in order:
            if alloc.sum() >= keep:
                break
            if alloc[g] < counts[g]:
                alloc[g] += 1
    while alloc.sum() > keep:
        g = int(np.argmax(np.where(alloc > 1, alloc, -1)))
        alloc[g] -= 1
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=bool)
    for g, a in zip(groups, alloc):
        members = np.flatnonzero(strata == g)
        mask[rng.choice(members, size=int(a), replace=False)] = True
    cols = y.reshape(n, -1) if y.ndim > 1 else None
    if cols is not None:
        empty = np.flatnonzero((cols[mask].sum(axis=0) == 0) & (cols.sum(axis=0) > 0))
    else:
        empty = np.setdiff1d(groups, np.unique(y[mask]))
    if empty.size:
        warnings.warn(f"label fraction {fraction} leaves classes {empty.tolist()} without labelled samples")
    return dataset.with_mask(mask)


def write_log_csv(path, history: list):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in history:
            writer.writerow([row[c] for c in LOG_COLUMNS])
