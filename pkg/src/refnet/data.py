"""Synthetic multimodal datasets with a known cross-modality graph, and JSONL feature files."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, SchemaError
from .model import ModalFeatureBatch

MODES = ("additive", "complementary")


@dataclass
class SyntheticSpec:
    M: int = 2
    dims: tuple[int, ...] = (8, 8)
    C: int = 2
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 1000
    latent_dim: int = 4
    adjacency: tuple[tuple[int, ...], ...] | None = None
    noise: float = 0.5
    signal: float = 2.0
    mode: str = "additive"
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != self.M:
            raise ConfigurationError(f"{len(self.dims)} dims given for {self.M} modalities")
        if min(self.M, self.C, self.latent_dim, *self.dims) < 1:
            raise ConfigurationError("all synthetic dimensions must be positive")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigurationError("split sizes must be non-negative")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.mode == "complementary" and (self.C != 2 or self.M < 2):
            raise ConfigurationError("complementary mode needs C == 2 and at least two modalities")
        a = self.adjacency_matrix()
        if a.shape != (self.M, self.M) or not np.all(np.diag(a) == 1):
            raise ConfigurationError("adjacency must be M x M with a unit diagonal")
        if self.adjacency is not None:
            self.adjacency = tuple(tuple(int(v) for v in row) for row in self.adjacency)

    def adjacency_matrix(self) -> np.ndarray:
        if self.adjacency is None:
            return np.eye(self.M)
        return np.asarray(self.adjacency, dtype=np.float64)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SyntheticSpec":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown synthetic data keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["dims"] = list(self.dims)
        d["adjacency"] = None if self.adjacency is None else [list(r) for r in self.adjacency]
        return d


def _latents(spec: SyntheticSpec, n: int, rng: np.random.Generator):
    """Per-modality latent vectors ``(M, n, L)`` and labels."""
    L = spec.latent_dim
    if spec.mode == "additive":
        centers = rng.standard_normal((spec.C, L))
        labels = rng.integers(0, spec.C, size=n)
        s = centers[labels][None, :, :] + spec.noise * rng.standard_normal((spec.M, n, L))
        return s, labels
    # one sign bit per modality 0 and 1; the label is their parity
    directions = rng.standard_normal((2, L))
    directions *= spec.signal / np.linalg.norm(directions, axis=1, keepdims=True)
    bits = rng.integers(0, 2, size=(2, n))
    labels = bits[0] ^ bits[1]
    s = spec.noise * rng.standard_normal((spec.M, n, L))
    for i in range(2):
        s[i] += (2 * bits[i] - 1)[:, None] * directions[i][None, :]
    return s, labels


def generate(spec: SyntheticSpec) -> dict[str, ModalFeatureBatch]:
    """Deterministic train/val/test splits.

    Modality ``i`` sees ``P_i (sum_j A_ij s_j) + eps_i`` with fixed random projections
    ``P_i``.  Additive mode: ``s_j = z_c + u_j`` around a Gaussian class centre.
    Complementary mode: ``s_0``, ``s_1`` each carry one random sign bit and the label is
    their XOR, so neither modality alone predicts it.
    """
    rng = np.random.default_rng(spec.seed)
    L = spec.latent_dim
    proj = [rng.standard_normal((d, L)) / math.sqrt(L) for d in spec.dims]
    A = spec.adjacency_matrix()
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    total = sum(sizes.values())
    s, labels = _latents(spec, total, rng)
    mixed = np.einsum("ij,jnl->inl", A, s)
    feats = [mixed[i] @ proj[i].T + spec.noise * rng.standard_normal((total, d))
             for i, d in enumerate(spec.dims)]
    out, start = {}, 0
    for name, n in sizes.items():
        sl = slice(start, start + n)
        out[name] = ModalFeatureBatch(
            features=[f[sl] for f in feats],
            labels=labels[sl].astype(np.int64),
            sample_ids=[f"{name}-{i}" for i in range(n)],
        )
        start += n
    return out


def _parse_line(text: str, lineno: int):
    try:
        row = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(row, dict) or set(row) - {"id", "label", "modalities"} or "modalities" not in row:
        raise SchemaError(f"line {lineno}: expected an object with keys id, label, modalities")
    sid = row.get("id", str(lineno))
    if not isinstance(sid, str):
        raise SchemaError(f"line {lineno}: id must be a string")
    mods = row["modalities"]
    if not isinstance(mods, list) or not mods or not all(isinstance(m, list) and m for m in mods):
        raise SchemaError(f"line {lineno}: modalities must be a non-empty list of non-empty lists")
    for m in mods:
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in m):
            raise SchemaError(f"line {lineno}: modality values must be numbers")
    label = row.get("label")
    if label is not None:
        ok = isinstance(label, int) and not isinstance(label, bool)
        ok = ok or (isinstance(label, list) and all(v in (0, 1) and not isinstance(v, bool) for v in label))
        if not ok:
            raise SchemaError(f"line {lineno}: label must be an int, a 0/1 list, or null")
    return sid, label, mods


def load_jsonl(path) -> ModalFeatureBatch:
    """Read ``{"id", "label", "modalities"}`` rows; a null label leaves the sample unlabelled."""
    ids, labels, rows, first = [], [], [], None
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            sid, label, mods = _parse_line(text, lineno)
            shape = tuple(len(m) for m in mods)
            if first is None:
                first = (lineno, shape, type(label) if label is not None else None)
            elif shape != first[1]:
                raise SchemaError(f"line {lineno}: modality dims {shape} differ from line {first[0]} dims {first[1]}")
            ids.append(sid)
            labels.append(label)
            rows.append(mods)
    if not rows:
        raise SchemaError(f"{path}: no samples")
    kinds = {type(l) for l in labels if l is not None}
    if len(kinds) > 1:
        raise SchemaError(f"{path}: mixes integer and list labels")
    mask = np.array([l is not None for l in labels])
    if kinds == {list}:
        width = {len(l) for l in labels if l is not None}
        if len(width) > 1:
            raise SchemaError(f"{path}: multi-label rows have different lengths {sorted(width)}")
        w = width.pop()
        y = np.array([l if l is not None else [0] * w for l in labels], dtype=np.int64)
    elif kinds == {int}:
        y = np.array([l if l is not None else 0 for l in labels], dtype=np.int64)
    else:
        y = None
    feats = [np.array([r[i] for r in rows], dtype=np.float64) for i in range(len(rows[0]))]
    return ModalFeatureBatch(features=feats, labels=y, label_mask=mask if y is not None else None, sample_ids=ids)


def save_jsonl(path, batch: ModalFeatureBatch):
    """Write one row per sample; floats use Python's shortest round-trip repr."""
    with open(path, "w") as fh:
        for j in range(batch.n):
            label = None
            if batch.labels is not None and batch.label_mask[j]:
                y = batch.labels[j]
                label = y.tolist() if np.ndim(y) else int(y)
            row = {"id": batch.sample_ids[j], "label": label,
                   "modalities": [f[j].tolist() for f in batch.features]}
            fh.write(json.dumps(row) + "\n")


def write_splits(out_dir, splits: Mapping[str, ModalFeatureBatch]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, batch in splits.items():
        p = out / f"{name}.jsonl"
        save_jsonl(p, batch)
        paths.append(p)
    return paths
