"""Central finite-difference checks for every gradient rule and for the composite training loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .losses import LossConfig, train_loss
from .model import ModalFeatureBatch, ModelSpec, ReFNetModel

H = 1e-5
TOL = 1e-5
KINK_GAP = 1e-3


def _away_from_zero(x):
    return np.where(np.abs(x) < KINK_GAP, x + np.sign(x + 1e-300) * 2 * KINK_GAP, x)


def _distinct_rows(rng, shape):
    # row maxima separated from the runner-up by >= KINK_GAP
    x = rng.normal(size=shape)
    x[np.arange(shape[0]), np.argmax(x, axis=1)] += 0.1
    return x


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list]]:
    n = rng.normal
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    mask = rng.random((4, 5)) < 0.6
    labels = rng.integers(0, 3, size=4)
    targets = (rng.random((4, 3)) < 0.5).astype(float)
    idx = [2, 0, 2, 1]
    return {
        "add": (ad.add, [n(size=(3, 4)), n(size=(3, 4))]),
        "sub": (ad.sub, [n(size=(3, 4)), n(size=(3, 4))]),
        "mul": (ad.mul, [n(size=(3, 4)), n(size=(3, 4))]),
        "scale": (lambda x: ad.scale(x, -2.5), [n(size=(3, 4))]),
        "shift": (lambda x: ad.shift(x, 0.7), [n(size=(3,))]),
        "relu": (ad.relu, [_away_from_zero(n(size=(3, 4)))]),
        "tanh": (ad.tanh, [n(size=(3, 4))]),
        "exp": (ad.exp, [n(size=(3, 4))]),
        "log": (ad.log, [pos(3, 4)]),
        "sigmoid": (ad.sigmoid, [n(size=(3, 4))]),
        "matmul": (ad.matmul, [n(size=(3, 4)), n(size=(4, 2))]),
        "transpose": (ad.transpose, [n(size=(3, 4))]),
        "reshape": (lambda x: ad.reshape(x, (2, 6)), [n(size=(3, 4))]),
        "sum": (lambda x: ad.reduce_sum(x, axis=0), [n(size=(3, 4))]),
        "mean": (lambda x: ad.reduce_mean(x, axis=1), [n(size=(3, 4))]),
        "max": (lambda x: ad.reduce_max(x, axis=1), [_distinct_rows(rng, (3, 4))]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [n(size=(3, 2)), n(size=(3, 4))]),
        "take_rows": (lambda x: ad.take_rows(x, idx), [n(size=(3, 4))]),
        "affine": (ad.affine, [n(size=(3, 4)), n(size=(4, 2)), n(size=(2,))]),
        "cosine": (ad.cosine_similarity, [n(size=5), n(size=5)]),
        "rowwise_cosine": (ad.rowwise_cosine, [n(size=(3, 5)), n(size=(3, 5))]),
        "normalize_rows": (ad.normalize_rows, [n(size=(3, 5))]),
        "log1p_sum_exp": (lambda x: ad.log1p_sum_exp(x, mask=mask, axis=1), [n(size=(4, 5))]),
        "softmax_xent": (lambda z: ad.softmax_cross_entropy(z, labels), [n(size=(4, 3))]),
        "bce_logits": (lambda z: ad.bce_with_logits(z, targets), [n(size=(4, 3))]),
    }


@dataclass
class CheckResult:
    name: str
    kind: str
    rel_error: float
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "rel_error": self.rel_error, "pass": self.passed}


def relative_error(analytic, numeric) -> float:
    a, b = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the entries of ``x`` (mutated in place, then restored)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f()
        x[i] = orig - h
        down = f()
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def check_function(fn: Callable, inputs: list[np.ndarray], seed: int = 0, h: float = H) -> float:
    """Worst relative error over the inputs of ``fn`` for the random projection ``sum(fn(x) * r)``."""
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    out_shape = fn(*[ad.Tensor(a) for a in arrays]).shape
    r = np.random.default_rng(seed).normal(size=out_shape)

    def value() -> float:
        return float(np.sum(fn(*[ad.Tensor(a) for a in arrays]).data * r))

    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    root = ad.reduce_sum(ad.mul(out, ad.Tensor(r))) if out.ndim else ad.scale(out, float(r))
    grads = ad.backward(root)
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        worst = max(worst, relative_error(grads.get(leaf, np.zeros(arr.shape)), numeric_gradient(value, arr, h)))
    return worst


def check_ops(names=None, seed: int = 0, tol: float = TOL) -> list[CheckResult]:
    cases = _cases(np.random.default_rng(seed))
    names = sorted(ad.GRAD_RULES) if names is None else names
    results = []
    for name in names:
        fn, inputs = cases[name]
        err = check_function(fn, inputs, seed)
        results.append(CheckResult(name, "op", err, err < tol))
    return results


def composite_fixture(task: str = "single-label", seed: int = 0, feature_map: str = "identity",
                      fusion_hidden: int | None = 5):
    """Small model, batch and loss settings exercising every term of the training loss."""
    rng = np.random.default_rng(seed)
    num_classes = {"single-label": 3, "multi-label": 3, "binary": 1}[task]
    refiner_dims = (2, 3) if feature_map == "affine" else None
    spec = ModelSpec(input_dims=(3, 4), num_classes=num_classes, task=task, k=6, fusion_hidden=fusion_hidden,
                     refiner_dims=refiner_dims, feature_map=feature_map)
    model = ReFNetModel(spec, seed=seed)
    # non-zero biases so every parameter has a generic gradient
    model.load_params({k: v + 0.1 * rng.normal(size=v.shape) for k, v in model.params().items()})
    n = 8
    feats = [rng.normal(size=(n, 3)), rng.normal(size=(n, 4))]
    if task == "single-label":
        labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    elif task == "multi-label":
        labels = np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1], [1, 1, 0], [0, 1, 0], [1, 0, 0], [0, 0, 1], [1, 1, 0]])
    else:
        labels = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    mask = np.array([True, True, True, True, True, False, True, False])
    batch = ModalFeatureBatch(features=feats, labels=labels, label_mask=mask)
    config = LossConfig(gamma=(0.1, 0.1), zeta=0.1, alpha=50.0, beta=2.0, lam=0.5)
    return model, batch, config


def check_composite(model: ReFNetModel, batch: ModalFeatureBatch, config: LossConfig,
                    loss_fn: Callable = train_loss, h: float = H) -> float:
    """Worst per-parameter relative error of ``loss_fn`` gradients against central differences."""
    leaves = model.leaves()
    loss, _ = loss_fn(batch, model, config, leaves)
    grads = {leaf.name: g for leaf, g in ad.backward(loss).items()}
    params = {k: v.copy() for k, v in model.params().items()}
    logger = logging.getLogger("refnet.losses")
    level = logger.level
    logger.setLevel(logging.ERROR)
    try:
        worst = 0.0
        for name, arr in params.items():
            def value() -> float:
                model.load_params(params)
                return loss_fn(batch, model, config)[0].item()
            num = numeric_gradient(value, arr, h)
            worst = max(worst, relative_error(grads.get(name, np.zeros(arr.shape)), num))
    finally:
        logger.setLevel(level)
        model.load_params(params)
    return worst


COMPOSITES = {
    "train_loss[single-label]": dict(task="single-label"),
    "train_loss[multi-label]": dict(task="multi-label"),
    "train_loss[binary]": dict(task="binary"),
    "train_loss[affine-map,no-hidden]": dict(task="single-label", feature_map="affine", fusion_hidden=None),
}


def run_all(seed: int = 0, tol: float = TOL) -> dict:
    results = check_ops(seed=seed, tol=tol)
    for name, kw in COMPOSITES.items():
        err = check_composite(*composite_fixture(seed=seed, **kw))
        results.append(CheckResult(name, "composite", err, err < tol))
    return {"tolerance": tol, "h": H, "seed": seed,
            "checks": [r.to_dict() for r in results], "pass": all(r.passed for r in results)}
