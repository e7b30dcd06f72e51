"""Fusion network with per-modality refiner decoders and a classification head.

Parameters live in plain ``dict[str, np.ndarray]`` objects keyed by dotted
names (``fusion.W0``, ``refiner.dec1.b1``, ``head.W1`` ...).  Forward passes
accept an optional mapping of those names to :class:`~refnet.autodiff.Tensor`
leaves so the trainer can differentiate through them; without it the stored
arrays are used as constants.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError

TASKS = ("single-label", "multi-label", "binary")
ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "identity": lambda x: x}


@dataclass
class ModalFeatureBatch:
    """Per-sample features of ``M`` modalities plus optional labels and a label-visibility mask."""

    features: list[np.ndarray]
    labels: np.ndarray | None = None
    label_mask: np.ndarray | None = None
    sample_ids: list[str] | None = None

    def __post_init__(self):
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        if not self.features:
            raise ConfigurationError("a batch needs at least one modality")
        n = self.features[0].shape[0]
        for i, f in enumerate(self.features):
            if f.ndim != 2:
                raise ConfigurationError(f"modality {i} features must be a matrix, got shape {f.shape}")
            if f.shape[0] != n:
                raise ConfigurationError(f"modality {i} has {f.shape[0]} samples, modality 0 has {n}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape[0] != n:
                raise ConfigurationError(f"{self.labels.shape[0]} labels for {n} samples")
        if self.label_mask is None:
            self.label_mask = np.full(n, self.labels is not None)
        self.label_mask = np.asarray(self.label_mask, dtype=bool)
        if self.label_mask.shape != (n,):
            raise ConfigurationError(f"label_mask has shape {self.label_mask.shape}, expected ({n},)")
        if self.label_mask.any() and self.labels is None:
            raise ConfigurationError("label_mask marks samples as labelled but no labels were given")
        if self.sample_ids is None:
            self.sample_ids = [str(i) for i in range(n)]
        if len(self.sample_ids) != n:
            raise ConfigurationError(f"{len(self.sample_ids)} sample ids for {n} samples")

    @property
    def n(self) -> int:
        return self.features[0].shape[0]

    @property
    def num_modalities(self) -> int:
        return len(self.features)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.features)

    @property
    def num_labeled(self) -> int:
        return int(self.label_mask.sum())

    def subset(self, index) -> "ModalFeatureBatch":
        idx = np.asarray(index, dtype=np.intp)
        return ModalFeatureBatch(
            features=[f[idx] for f in self.features],
            labels=None if self.labels is None else self.labels[idx],
            label_mask=self.label_mask[idx],
            sample_ids=[self.sample_ids[i] for i in idx],
        )

    def with_mask(self, mask) -> "ModalFeatureBatch":
        return replace(self, label_mask=np.asarray(mask, dtype=bool))

    def labeled(self) -> "ModalFeatureBatch":
        return self.subset(np.flatnonzero(self.label_mask))


@dataclass(frozen=True)
class ModelSpec:
    input_dims: tuple[int, ...]
    num_classes: int
    task: str = "single-label"
    k: int = 16
    fusion_hidden: int | None = None
    refiner_hidden: int | None = None
    refiner_dims: tuple[int, ...] | None = None
    feature_map: str = "identity"
    head_hidden: int | None = None
    activation: str = "tanh"
    refiner_activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if self.refiner_dims is not None:
            object.__setattr__(self, "refiner_dims", tuple(int(d) for d in self.refiner_dims))
        dims = [*self.input_dims, self.k, self.num_classes]
        for extra in (self.fusion_hidden, self.refiner_hidden, self.head_hidden):
            if extra is not None:
                dims.append(extra)
        if not self.input_dims or any(d < 1 for d in dims):
            raise ConfigurationError(f"all model dimensions must be positive: {self}")
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "binary" and self.num_classes != 1:
            raise ConfigurationError("binary task uses a single logit (num_classes=1)")
        for act in (self.activation, self.refiner_activation):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
        if self.feature_map not in ("identity", "affine"):
            raise ConfigurationError(f"feature_map must be 'identity' or 'affine', got {self.feature_map!r}")
        if len(self.target_dims) != len(self.input_dims):
            raise ConfigurationError("refiner_dims needs one entry per modality")
        if self.feature_map == "identity" and self.target_dims != self.input_dims:
            raise ConfigurationError("identity feature maps need refiner_dims == input_dims")

    @property
    def num_modalities(self) -> int:
        return len(self.input_dims)

    @property
    def target_dims(self) -> tuple[int, ...]:
        return self.refiner_dims if self.refiner_dims is not None else self.input_dims

    @property
    def decoder_hidden(self) -> int:
        return self.refiner_hidden if self.refiner_hidden is not None else self.k

    @property
    def head_width(self) -> int:
        return self.head_hidden if self.head_hidden is not None else max(1, self.k // 2)

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["input_dims"] = list(self.input_dims)
        if self.refiner_dims is not None:
            d["refiner_dims"] = list(self.refiner_dims)
        return d


def _weights(params: Mapping, names) -> dict:
    return {n: (params[n] if isinstance(params[n], ad.Tensor) else ad.Tensor(params[n])) for n in names}


class FusionModule:
    """Concatenate modality features, then affine (optionally affine + activation + affine) to R^k."""

    def __init__(self, input_dims: Sequence[int], k: int, hidden: int | None = None, activation: str = "tanh"):
        self.input_dims = tuple(input_dims)
        self.k = k
        self.hidden = hidden
        self.activation = activation
        self.params: dict[str, np.ndarray] = {}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        total = sum(self.input_dims)
        if self.hidden is None:
            return {"W0": (total, self.k), "b0": (self.k,)}
        return {
            "W0": (total, self.hidden), "b0": (self.hidden,),
            "W1": (self.hidden, self.k), "b1": (self.k,),
        }

    def __call__(self, features: Sequence, weights: Mapping | None = None) -> ad.Tensor:
        feats = [ad.as_tensor(f) for f in features]
        dims = tuple(f.shape[1] if f.ndim == 2 else -1 for f in feats)
        if dims != self.input_dims:
            raise ConfigurationError(f"fusion expects modality dims {self.input_dims}, got {dims}")
        w = _weights(weights if weights is not None else self.params, self.param_shapes())
        x = feats[0] if len(feats) == 1 else ad.concat(feats, axis=1)
        x = ad.affine(x, w["W0"], w["b0"])
        if self.hidden is not None:
            x = ad.affine(ACTIVATIONS[self.activation](x), w["W1"], w["b1"])
        return x


class RefinerModule:
    """One decoder per modality (affine, activation, affine) and an optional affine feature map."""

    def __init__(self, k: int, hidden: int, target_dims: Sequence[int], input_dims: Sequence[int],
                 feature_map: str = "identity", activation: str = "tanh"):
        self.k = k
        self.hidden = hidden
        self.target_dims = tuple(target_dims)
        self.input_dims = tuple(input_dims)
        self.feature_map = feature_map
        self.activation = activation
        self.params: dict[str, np.ndarray] = {}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, r in enumerate(self.target_dims):
            shapes[f"dec{i}.W0"] = (self.k, self.hidden)
            shapes[f"dec{i}.b0"] = (self.hidden,)
            shapes[f"dec{i}.W1"] = (self.hidden, r)
            shapes[f"dec{i}.b1"] = (r,)
        if self.feature_map == "affine":
            for i, (d, r) in enumerate(zip(self.input_dims, self.target_dims)):
                shapes[f"map{i}.W"] = (d, r)
                shapes[f"map{i}.b"] = (r,)
        return shapes

    def __call__(self, emb, weights: Mapping | None = None) -> list[ad.Tensor]:
        emb = ad.as_tensor(emb)
        if emb.ndim != 2 or emb.shape[1] != self.k:
            raise ConfigurationError(f"refiner expects embeddings of width {self.k}, got shape {emb.shape}")
        w = _weights(weights if weights is not None else self.params, self.param_shapes())
        act = ACTIVATIONS[self.activation]
        out = []
        for i in range(len(self.target_dims)):
            h = act(ad.affine(emb, w[f"dec{i}.W0"], w[f"dec{i}.b0"]))
            out.append(ad.affine(h, w[f"dec{i}.W1"], w[f"dec{i}.b1"]))
        return out

    def targets(self, features: Sequence, weights: Mapping | None = None) -> list[ad.Tensor]:
        """Feature maps H_i(F_i): the features themselves, or an affine projection of them."""
        feats = [ad.as_tensor(f) for f in features]
        if self.feature_map == "identity":
            return feats
        w = _weights(weights if weights is not None else self.params, self.param_shapes())
        return [ad.affine(f, w[f"map{i}.W"], w[f"map{i}.b"]) for i, f in enumerate(feats)]


class DownstreamHead:
    """Two affine layers k -> k/2 -> C with an activation in between."""

    def __init__(self, k: int, hidden: int, num_outputs: int, task: str, activation: str = "tanh"):
        self.k = k
        self.hidden = hidden
        self.num_outputs = num_outputs
        self.task = task
        self.activation = activation
        self.params: dict[str, np.ndarray] = {}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "W0": (self.k, self.hidden), "b0": (self.hidden,),
            "W1": (self.hidden, self.num_outputs), "b1": (self.num_outputs,),
        }

    def __call__(self, emb, weights: Mapping | None = None) -> ad.Tensor:
        emb = ad.as_tensor(emb)
        if emb.ndim != 2 or emb.shape[1] != self.k:
            raise ConfigurationError(f"head expects embeddings of width {self.k}, got shape {emb.shape}")
        w = _weights(weights if weights is not None else self.params, self.param_shapes())
        h = ACTIVATIONS[self.activation](ad.affine(emb, w["W0"], w["b0"]))
        return ad.affine(h, w["W1"], w["b1"])


def fuse(module: FusionModule, batch: ModalFeatureBatch | Sequence, weights: Mapping | None = None) -> ad.Tensor:
    feats = batch.features if isinstance(batch, ModalFeatureBatch) else batch
    return module(feats, weights)


def refine(module: RefinerModule, emb, weights: Mapping | None = None) -> list[ad.Tensor]:
    return module(emb, weights)


def predict(head: DownstreamHead, emb, weights: Mapping | None = None) -> ad.Tensor:
    return head(emb, weights)


@dataclass
class ForwardResult:
    embedding: ad.Tensor
    logits: ad.Tensor
    refined: list[ad.Tensor] = field(default_factory=list)
    targets: list[ad.Tensor] = field(default_factory=list)


class ReFNetModel:
    """Fusion + refiner + head bundle sharing one flat parameter namespace."""

    SECTIONS = ("fusion", "refiner", "head")

    def __init__(self, spec: ModelSpec, params: Mapping[str, np.ndarray] | None = None, seed: int = 0):
        self.spec = spec
        self.fusion, self.refiner, self.head = _build_modules(spec)
        self.load_params(params if params is not None else init_weights(spec, seed))

    def module(self, section: str):
        return getattr(self, section)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {f"{s}.{n}": shape for s in self.SECTIONS for n, shape in self.module(s).param_shapes().items()}

    def params(self) -> dict[str, np.ndarray]:
        return {f"{s}.{n}": v for s in self.SECTIONS for n, v in self.module(s).params.items()}

    def load_params(self, params: Mapping[str, np.ndarray]):
        shapes = self.param_shapes()
        if set(params) != set(shapes):
            missing, extra = set(shapes) - set(params), set(params) - set(shapes)
            raise ConfigurationError(f"parameter names mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})")
        for name, shape in shapes.items():
            value = np.array(params[name], dtype=np.float64)
            if value.shape != tuple(shape):
                raise ConfigurationError(f"parameter {name} has shape {value.shape}, expected {shape}")
            section, local = name.split(".", 1)
            self.module(section).params[local] = value

    def copy(self) -> "ReFNetModel":
        return ReFNetModel(self.spec, copy.deepcopy(self.params()))

    def leaves(self, sections: Sequence[str] | None = None) -> dict[str, ad.Tensor]:
        """Fresh differentiable leaves for the parameters of ``sections`` (all by default)."""
        chosen = self.SECTIONS if sections is None else tuple(sections)
        return {name: ad.Tensor(v, requires_grad=name.split(".", 1)[0] in chosen, name=name)
                for name, v in self.params().items()}

    @staticmethod
    def _split(leaves: Mapping | None, section: str):
        if leaves is None:
            return None
        prefix = section + "."
        return {k[len(prefix):]: v for k, v in leaves.items() if k.startswith(prefix)}

    def embed(self, batch, leaves: Mapping | None = None) -> ad.Tensor:
        self._check_batch(batch)
        return fuse(self.fusion, batch, self._split(leaves, "fusion"))

    def forward(self, batch: ModalFeatureBatch, leaves: Mapping | None = None,
                with_refiner: bool = True) -> ForwardResult:
        emb = self.embed(batch, leaves)
        logits = predict(self.head, emb, self._split(leaves, "head"))
        result = ForwardResult(embedding=emb, logits=logits)
        if with_refiner:
            rw = self._split(leaves, "refiner")
            result.refined = refine(self.refiner, emb, rw)
            result.targets = self.refiner.targets(batch.features, rw)
        return result

    def _check_batch(self, batch):
        dims = batch.dims if isinstance(batch, ModalFeatureBatch) else tuple(np.shape(f)[1] for f in batch)
        if dims != self.spec.input_dims:
            raise ConfigurationError(f"model expects modality dims {self.spec.input_dims}, batch has {dims}")


def _build_modules(spec: ModelSpec):
    return (
        FusionModule(spec.input_dims, spec.k, spec.fusion_hidden, spec.activation),
        RefinerModule(spec.k, spec.decoder_hidden, spec.target_dims, spec.input_dims,
                      spec.feature_map, spec.refiner_activation),
        DownstreamHead(spec.k, spec.head_width, spec.num_classes, spec.task, spec.activation),
    )


def init_weights(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases; one RNG stream consumed in parameter order."""
    rng = np.random.default_rng(seed)
    shapes = {f"{section}.{n}": shape
              for section, mod in zip(ReFNetModel.SECTIONS, _build_modules(spec))
              for n, shape in mod.param_shapes().items()}
    params = {}
    for name, shape in shapes.items():
        if len(shape) == 2:
            s = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-s, s, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def save_checkpoint(path, params: Mapping[str, np.ndarray]):
    Path(path).write_text(checkpoint_json(params))


def checkpoint_json(params: Mapping[str, np.ndarray]) -> str:
    doc = {name: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
           for name, v in params.items()}
    return json.dumps(doc, indent=1)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    return params_from_json(doc)


def params_from_json(doc: Mapping) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in doc.items():
        values = np.asarray(entry["values"], dtype=np.float64)
        out[name] = values.reshape(tuple(entry["shape"]))
    return out
