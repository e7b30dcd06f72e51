"""Training objectives: cosine refiner loss, Multi-Similarity loss, downstream losses and their sum."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DegenerateVectorError, DomainError

log = logging.getLogger(__name__)

SIMILARITIES = ("cosine", "dot")
POSITIVE_RULES = ("exact", "jaccard")


@dataclass
class LossConfig:
    gamma: tuple[float, ...] = (0.1, 0.1)
    zeta: float = 0.0
    alpha: float = 50.0
    beta: float = 2.0
    lam: float = 0.5
    similarity: str = "cosine"
    multilabel_positive: str = "exact"
    jaccard_threshold: float = 0.5

    def __post_init__(self):
        self.gamma = tuple(float(g) for g in self.gamma)
        if any(g < 0 for g in self.gamma):
            raise ConfigurationError(f"refiner weights must be non-negative, got {self.gamma}")
        if self.zeta < 0:
            raise ConfigurationError(f"zeta must be non-negative, got {self.zeta}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigurationError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")
        if self.similarity not in SIMILARITIES:
            raise ConfigurationError(f"similarity must be one of {SIMILARITIES}")
        if self.multilabel_positive not in POSITIVE_RULES:
            raise ConfigurationError(f"multilabel_positive must be one of {POSITIVE_RULES}")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LossConfig":
        doc = dict(doc)
        if "eta" in doc:
            warnings.warn("loss.eta is a deprecated alias for loss.gamma", DeprecationWarning, stacklevel=2)
            if "gamma" in doc:
                raise ConfigurationError("give either loss.gamma or loss.eta, not both")
            doc["gamma"] = doc.pop("eta")
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "gamma": list(self.gamma), "zeta": self.zeta, "alpha": self.alpha, "beta": self.beta,
            "lambda": self.lam, "similarity": self.similarity,
            "multilabel_positive": self.multilabel_positive, "jaccard_threshold": self.jaccard_threshold,
        }

    @property
    def uses_refiner(self) -> bool:
        return any(g > 0 for g in self.gamma)


def refiner_loss(refined: Sequence, targets: Sequence, gamma: Sequence[float]) -> ad.Tensor:
    """``sum_i gamma_i * mean_n (1 - cos(R_i[n], H_i(F_i)[n]))``; modalities with zero weight are skipped."""
    if not (len(refined) == len(targets) == len(gamma)):
        raise ConfigurationError(
            f"refiner_loss: {len(refined)} outputs, {len(targets)} targets, {len(gamma)} weights",
        )
    total = None
    for i, (r, t, g) in enumerate(zip(refined, targets, gamma)):
        if g == 0:
            continue
        r, t = ad.as_tensor(r), ad.as_tensor(t)
        if r.shape != t.shape:
            raise ConfigurationError(f"modality {i}: refiner output {r.shape} vs target {t.shape}")
        try:
            cos = ad.rowwise_cosine(r, t)
        except DegenerateVectorError as exc:
            raise DegenerateVectorError(f"modality {i}: {exc}") from exc
        term = ad.scale(ad.reduce_mean(1.0 - cos), g)
        total = term if total is None else total + term
    return total if total is not None else ad.Tensor(0.0)


def positive_pairs(labels: np.ndarray, rule: str = "exact", threshold: float = 0.5) -> np.ndarray:
    """Boolean matrix of same-class pairs (diagonal included; callers drop it)."""
    y = np.asarray(labels)
    if y.ndim == 1:
        return y[:, None] == y[None, :]
    y = y.astype(bool)
    if rule == "exact":
        return np.all(y[:, None, :] == y[None, :, :], axis=2)
    inter = (y[:, None, :] & y[None, :, :]).sum(axis=2)
    union = (y[:, None, :] | y[None, :, :]).sum(axis=2)
    jac = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return jac >= threshold


def ms_loss(emb, labels, mask=None, alpha: float = 50.0, beta: float = 2.0, lam: float = 0.5,
            similarity: str = "cosine", positive_rule: str = "exact", jaccard_threshold: float = 0.5) -> ad.Tensor:
    """Multi-Similarity loss averaged over the masked-in anchors, all pairs, no mining."""
    emb = ad.as_tensor(emb)
    labels = np.asarray(labels)
    mask = np.ones(emb.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ConfigurationError("ms_loss needs at least one labelled sample")
    e = ad.take_rows(emb, idx)
    if similarity == "cosine":
        e = ad.normalize_rows(e)
    try:
        sim = ad.matmul(e, ad.transpose(e))
    except FloatingPointError as exc:
        raise DomainError(f"non-finite similarity: {exc}") from exc
    same = positive_pairs(labels[idx], positive_rule, jaccard_threshold)
    off_diag = ~np.eye(idx.size, dtype=bool)
    centred = sim - lam
    pos = ad.log1p_sum_exp(ad.scale(centred, -alpha), mask=same & off_diag, axis=1)
    neg = ad.log1p_sum_exp(ad.scale(centred, beta), mask=~same & off_diag, axis=1)
    per_anchor = ad.scale(pos, 1.0 / alpha) + ad.scale(neg, 1.0 / beta)
    return ad.reduce_mean(per_anchor)


def downstream_loss(logits, labels, mask=None, task: str = "single-label") -> ad.Tensor:
    """Mean supervised loss over the masked-in samples, computed from logits."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    mask = np.ones(logits.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ConfigurationError("downstream_loss: every sample is masked out")
    z = ad.take_rows(logits, idx)
    y = labels[idx]
    if task == "single-label":
        return ad.reduce_mean(ad.softmax_cross_entropy(z, y))
    if task == "binary":
        y = y.reshape(-1, 1)
    _check_binary_targets(y)
    return ad.reduce_mean(ad.bce_with_logits(z, y))


def _check_binary_targets(y):
    if y.size and not np.all((y == 0) | (y == 1)):
        raise DomainError("binary/multi-label targets must be 0 or 1")


def fusion_only_loss(batch, model, config: LossConfig | None = None, leaves: Mapping | None = None):
    """Downstream loss of fuse -> predict alone; the refiner is never evaluated and ``config`` is ignored."""
    res = model.forward(batch, leaves, with_refiner=False)
    if batch.num_labeled == 0:
        return ad.Tensor(0.0), _breakdown(0.0, 0.0, 0.0, 0.0)
    loss = downstream_loss(res.logits, batch.labels, batch.label_mask, model.spec.task)
    return loss, _breakdown(loss.item(), loss.item(), 0.0, 0.0)


def train_loss(batch, model, config: LossConfig, leaves: Mapping | None = None):
    """Downstream + weighted refiner cost + zeta * MS; returns ``(total, breakdown)``.

    The refiner term uses every sample; the downstream and MS terms only the labelled ones.
    Terms whose weight is zero are not evaluated at all.
    """
    if len(config.gamma) != model.spec.num_modalities:
        raise ConfigurationError(f"{len(config.gamma)} refiner weights for {model.spec.num_modalities} modalities")
    res = model.forward(batch, leaves, with_refiner=config.uses_refiner)
    terms = []
    l_down = l_ref = l_ms = 0.0
    if batch.num_labeled > 0:
        down = downstream_loss(res.logits, batch.labels, batch.label_mask, model.spec.task)
        terms.append(down)
        l_down = down.item()
    else:
        log.warning("batch has no labelled samples; downstream and MS terms set to 0")
    if config.uses_refiner:
        ref = refiner_loss(res.refined, res.targets, config.gamma)
        terms.append(ref)
        l_ref = ref.item()
    if config.zeta > 0 and batch.num_labeled > 0:
        ms = ms_loss(res.embedding, batch.labels, batch.label_mask, config.alpha, config.beta, config.lam,
                     config.similarity, config.multilabel_positive, config.jaccard_threshold)
        terms.append(ad.scale(ms, config.zeta))
        l_ms = ms.item()
    total = terms[0] if terms else ad.Tensor(0.0)
    for t in terms[1:]:
        total = total + t
    return total, _breakdown(total.item(), l_down, l_ref, l_ms)


def pretrain_loss(batch, model, config: LossConfig, leaves: Mapping | None = None):
    """Refiner cost alone; labels are ignored."""
    res = model.forward(batch, leaves, with_refiner=True)
    ref = refiner_loss(res.refined, res.targets, config.gamma)
    return ref, _breakdown(ref.item(), 0.0, ref.item(), 0.0)


def _breakdown(total, down, ref, ms) -> dict:
    return {"L_total": total, "L_downstream": down, "L_refiner": ref, "L_MS": ms}
