"""Linear fusion systems ``E = W A F`` and recovery of the weighted adjacency from a linear refiner.

With a linear fusion map ``W`` applied to adjacency-mixed features ``A F`` and a
linear refiner ``Gamma`` trained to reproduce ``F`` from ``E``, ``Gamma W A`` is the
identity; when ``k == m`` the inverse of ``Gamma`` therefore equals ``W A``.  The
cosine objective only pins each row of ``Gamma`` up to a positive factor, so the
cosine fit is checked after rescaling ``Gamma W A`` to unit diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import linalg
from .errors import ConfigurationError, DivergenceError, RankDeficiencyError


@dataclass
class LinearInstance:
    A: np.ndarray
    W: np.ndarray
    F: np.ndarray  # (N, m, d)
    E: np.ndarray  # (N, k, d)
    noise_sigma: float = 0.0
    rank_WA: int | None = None
    seed: int | None = None

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.F.shape[2]

    @property
    def num_samples(self) -> int:
        return self.F.shape[0]

    @property
    def WA(self) -> np.ndarray:
        return self.W @ self.A

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Embeddings ``(k, N*d)`` and features ``(m, N*d)`` with samples laid side by side."""
        return np.concatenate(list(self.E), axis=1), np.concatenate(list(self.F), axis=1)


def random_adjacency(m: int, density: float, seed: int, max_draws: int = 100) -> np.ndarray:
    """Unit-diagonal 0/1 matrix with Bernoulli(density) off-diagonal edges, redrawn until invertible."""
    rng = np.random.default_rng(seed)
    for _ in range(max_draws):
        a = (rng.random((m, m)) < density).astype(np.float64)
        np.fill_diagonal(a, 1.0)
        if abs(linalg.det(a)) > 0.5:
            return a
    raise RankDeficiencyError(f"no invertible adjacency after {max_draws} draws")


def _check_adjacency(A, m):
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (m, m):
        raise ConfigurationError(f"adjacency must be {m}x{m}, got {A.shape}")
    if not np.all((A == 0) | (A == 1)) or not np.all(np.diag(A) == 1):
        raise ConfigurationError("adjacency must be 0/1 with ones on the diagonal")
    return A


def make_instance(m: int, d: int, k: int, A=None, seed: int = 0, noise_sigma: float = 0.0,
                  W=None, num_samples: int | None = None, max_resamples: int = 100) -> LinearInstance:
    """Draw ``W ~ U[-1, 1]`` (resampled until ``|det(W A)| > 1e-6`` when ``k == m``) and ``N = max(4, 3m)`` samples."""
    if min(m, d, k) < 1:
        raise ConfigurationError("m, d and k must be positive")
    A = np.eye(m) if A is None else _check_adjacency(A, m)
    rng = np.random.default_rng(seed)
    if W is None:
        for _ in range(max_resamples):
            W = rng.uniform(-1.0, 1.0, size=(k, m))
            if k != m or abs(linalg.det(W @ A)) > 1e-6:
                break
        else:
            raise RankDeficiencyError(f"no invertible W A after {max_resamples} resamples")
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (k, m):
        raise ConfigurationError(f"W must be {k}x{m}, got {W.shape}")
    n = num_samples if num_samples is not None else max(4, 3 * m)
    F = rng.standard_normal((n, m, d))
    E = np.einsum("km,nmd->nkd", W @ A, F)
    if noise_sigma > 0:
        E = E + noise_sigma * rng.standard_normal(E.shape)
    return LinearInstance(A=A, W=W, F=F, E=E, noise_sigma=noise_sigma,
                          rank_WA=linalg.rank(W @ A), seed=seed)


@dataclass
class RefinerFit:
    gamma: np.ndarray
    residual: float
    history: list = field(default_factory=list)
    rank: int | None = None


def fit_refiner_least_squares(instance: LinearInstance) -> RefinerFit:
    """Closed-form ``argmin sum ||Gamma E - F||^2`` through the normal equations.

    When ``k > m`` and the data are noise-free the normal matrix has rank ``m``;
    the consistent system is then solved with its basic solution.  A rank below
    ``m`` (or below ``k`` when ``k == m``) is an error.
    """
    e, f = instance.stacked()
    normal = e @ e.T
    rhs = e @ f.T
    r = linalg.rank(normal)
    if r < instance.m or (instance.k == instance.m and r < instance.k):
        raise RankDeficiencyError(f"normal matrix has rank {r}, need {instance.m}", rank=r)
    gamma = linalg.solve(normal, rhs, allow_rank_deficient=r < instance.k).T
    residual = float(np.linalg.norm(gamma @ e - f))
    return RefinerFit(gamma=gamma, residual=residual, rank=r)


def _mse_objective(gamma, e, f):
    diff = ad.matmul(gamma, ad.Tensor(e)) - ad.Tensor(f)
    return ad.reduce_mean(diff * diff)


def _cosine_objective(gamma, e, f, m, n):
    # (m, N*d) -> (m*N, d): one row per (modality, sample) pair
    d = f.shape[1] // n
    r = ad.reshape(ad.matmul(gamma, ad.Tensor(e)), (m * n, d))
    cos = ad.rowwise_cosine(r, ad.Tensor(f.reshape(m * n, d)))
    return ad.scale(ad.reduce_sum(1.0 - cos), 1.0 / n)


def _whitener(e: np.ndarray) -> np.ndarray | None:
    """Cholesky factor L of the embedding second-moment matrix, or None if it is singular."""
    try:
        return np.linalg.cholesky(e @ e.T / e.shape[1])
    except np.linalg.LinAlgError:
        return None


def fit_refiner_gradient(instance: LinearInstance, loss: str = "mse", steps: int = 1000, lr: float = 0.1,
                         seed: int = 0, init=None, whiten: bool = True, tol: float = 0.0,
                         divergence_bound: float = 1e6) -> RefinerFit:
    """Gradient descent on the squared-error or cosine refiner objective.

    With ``whiten`` the descent runs on ``Gamma' = Gamma L`` against whitened embeddings
    ``L^-1 E`` (same objective, better conditioned), skipped when the embedding
    covariance is singular.  Under the cosine loss every row of ``Gamma'`` is
    projected back to unit norm after each step; the loss is invariant to that
    scale, and without it the row norms grow and stall progress.  Descent stops
    early once the objective drops below ``tol``.
    """
    if loss not in ("mse", "cosine"):
        raise ConfigurationError(f"loss must be 'mse' or 'cosine', got {loss!r}")
    e, f = instance.stacked()
    m, n = instance.m, instance.num_samples
    if init is None:
        init = np.random.default_rng(seed).normal(0.0, 1.0 / np.sqrt(instance.k), size=(m, instance.k))
    init = np.array(init, dtype=np.float64)
    if steps == 0:
        return RefinerFit(gamma=init, residual=float(np.linalg.norm(init @ e - f)))
    chol = _whitener(e) if whiten else None
    if chol is not None:
        e = np.linalg.solve(chol, e)
        gamma = init @ chol
    else:
        gamma = init.copy()
    history = []
    for step in range(steps):
        leaf = ad.Tensor(gamma, requires_grad=True)
        try:
            obj = _mse_objective(leaf, e, f) if loss == "mse" else _cosine_objective(leaf, e, f, m, n)
        except FloatingPointError as exc:
            raise DivergenceError(f"non-finite refiner objective at step {step}; try a smaller lr") from exc
        value = obj.item()
        if value > divergence_bound:
            raise DivergenceError(f"refiner objective {value:.3g} exceeded {divergence_bound:g} at step {step}; "
                                  f"try a smaller lr")
        history.append(value)
        if value < tol:
            break
        gamma = gamma - lr * ad.backward(obj)[leaf]
        if loss == "cosine":
            gamma = gamma / np.linalg.norm(gamma, axis=1, keepdims=True)
    if chol is not None:
        gamma = np.linalg.solve(chol.T, gamma.T).T
    e_raw, _ = instance.stacked()
    return RefinerFit(gamma=gamma, residual=float(np.linalg.norm(gamma @ e_raw - f)), history=history)


def verify_theorem(gamma, W, A, tol: float = 1e-8) -> dict:
    prod = np.asarray(gamma) @ np.asarray(W) @ np.asarray(A)
    if prod.shape[0] != prod.shape[1]:
        raise ConfigurationError(f"Gamma W A must be square, got {prod.shape}")
    residual = float(np.linalg.norm(prod - np.eye(prod.shape[0])))
    return {"residual": residual, "pass": residual < tol}


def rescale_rows(gamma, W, A) -> np.ndarray:
    """Scale each row of ``gamma`` so that ``gamma W A`` has a unit diagonal."""
    diag = np.diag(np.asarray(gamma) @ W @ A)
    if np.any(np.abs(diag) < 1e-12):
        raise ConfigurationError("Gamma W A has a vanishing diagonal entry; cannot rescale")
    return np.asarray(gamma) / diag[:, None]


def off_diagonal_ratio(matrix) -> float:
    """Frobenius norm of the off-diagonal part over that of the diagonal."""
    mat = np.asarray(matrix)
    diag = np.diag(np.diag(mat))
    return float(np.linalg.norm(mat - diag) / np.linalg.norm(diag))


def recover_adjacency(gamma, W_known, threshold: float = 0.5, unit_diagonal: bool = False) -> dict:
    """``WA_hat = Gamma^-1`` and ``A_hat = [|W^-1 Gamma^-1| > threshold]``.

    ``unit_diagonal`` divides each column of ``W^-1 Gamma^-1`` by its diagonal entry
    first, which undoes the per-modality scale left by a cosine fit (A has a unit diagonal).
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape[0] != gamma.shape[1]:
        raise ConfigurationError(f"adjacency recovery needs k == m, Gamma is {gamma.shape}")
    if abs(linalg.det(gamma)) <= 1e-10:
        raise RankDeficiencyError("Gamma is singular; cannot recover the adjacency", rank=linalg.rank(gamma))
    wa_hat = linalg.inverse(gamma)
    raw = linalg.solve(np.asarray(W_known, dtype=np.float64), wa_hat)
    if unit_diagonal:
        raw = raw / np.diag(raw)[None, :]
    return {"WA_hat": wa_hat, "A_raw": raw, "A_hat": (np.abs(raw) > threshold).astype(np.float64)}


def support_recovery_rate(A_hat, A) -> float:
    return float(np.mean(np.asarray(A_hat) == np.asarray(A)))


@dataclass
class TheoremSweep:
    sizes: tuple[int, ...] = (2, 3, 5)
    instances: int = 20
    d: int = 4
    extra_k: tuple[int, ...] = (0,)
    noise_levels: tuple[float, ...] = (0.0, 0.01)
    fit_modes: tuple[str, ...] = ("lstsq", "mse", "cosine")
    density: float = 0.4
    steps: int = 4000
    fit_tol: float = 1e-13
    lr_mse: float = 1.0
    lr_cosine: float = 0.03
    tol: float = 1e-8
    cosine_tol: float = 1e-2
    threshold: float = 0.5

    @classmethod
    def from_dict(cls, doc) -> "TheoremSweep":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown theorem keys: {sorted(unknown)}")
        doc = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        return cls(**doc)

    def to_dict(self) -> dict:
        return {f: list(v) if isinstance(v, tuple) else v
                for f, v in ((f, getattr(self, f)) for f in self.__dataclass_fields__)}


def run_instance(m: int, k: int, d: int, noise: float, mode: str, seed: int, sweep: TheoremSweep) -> dict:
    """Build, fit, verify and (for k == m) recover one instance; returns a flat report row."""
    A = random_adjacency(m, sweep.density, seed)
    inst = make_instance(m, d, k, A=A, seed=seed, noise_sigma=noise)
    if mode == "lstsq":
        fit = fit_refiner_least_squares(inst)
    else:
        lr = sweep.lr_mse if mode == "mse" else sweep.lr_cosine
        fit = fit_refiner_gradient(inst, mode, sweep.steps, lr, seed=seed, tol=sweep.fit_tol)
    gamma = fit.gamma
    tol = sweep.tol
    if mode == "cosine":
        gamma = rescale_rows(gamma, inst.W, inst.A)
        tol = sweep.cosine_tol
    elif mode == "mse":
        tol = sweep.cosine_tol
    check = verify_theorem(gamma, inst.W, inst.A, tol)
    report = {
        "m": m, "d": d, "k": k, "noise": noise, "fit_mode": mode, "seed": seed,
        "residual": check["residual"],
        "off_diagonal_ratio": off_diagonal_ratio(gamma @ inst.WA),
        "fit_residual": fit.residual,
        "pass": bool(check["pass"]),
        "support_recovery_rate": None,
        "inverse_max_error": None,
    }
    if k == m:
        rec = recover_adjacency(gamma, inst.W, sweep.threshold)
        report["support_recovery_rate"] = support_recovery_rate(rec["A_hat"], inst.A)
        report["inverse_max_error"] = float(np.max(np.abs(rec["WA_hat"] - inst.WA)))
    return report


def theorem_sweep(sweep: TheoremSweep, seed: int = 0) -> list[dict]:
    rows = []
    for m in sweep.sizes:
        for extra in sweep.extra_k:
            for noise in sweep.noise_levels:
                for mode in sweep.fit_modes:
                    for i in range(sweep.instances):
                        rows.append(run_instance(m, m + extra, sweep.d, noise, mode, seed * 100003 + i, sweep))
    return rows
