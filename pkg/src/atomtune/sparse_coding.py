"""Dictionary learning: ISTA coefficient updates alternated with ridge dictionary updates.

Solves ``min_{alpha, D} 1/2 ||T - alpha D||_F^2 + lam ||alpha||_1`` with atoms as the
rows of ``D``. All internals run in float64.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

_INCREASE_RTOL = 1e-12


class SparseCodingError(RuntimeError):
    pass


@dataclass
class SparseCodingConfig:
    """Solver settings. ``lam=None`` means ``0.01 * mean|target|``."""

    lam: Optional[float] = None
    max_outer: int = 50
    max_ista: int = 100
    tol: float = 1e-6
    ridge: float = 1e-6
    power_iters: int = 50
    power_tol: float = 1e-6
    check_monotone: bool = False

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.tol <= 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_outer < 1 or self.max_ista < 1:
            raise ValueError("max_outer and max_ista must be positive")
        if self.ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")

    def resolve_lam(self, target: np.ndarray) -> float:
        if self.lam is None:
            return 0.01 * float(np.mean(np.abs(target)))
        return float(self.lam)


@dataclass
class DecompositionReport:
    objectives: list[float]
    final_error: float
    lam: float
    m: int
    outer_iterations: int
    ista_iterations: int
    converged: bool
    seed: int
    ista_objectives: list[float] = field(default_factory=list, repr=False)

    def to_dict(self, include_trace: bool = False) -> dict:
        d = asdict(self)
        if not include_trace:
            d.pop("ista_objectives")
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def soft_threshold(x, tau):
    """Proximal map of ``tau * |.|``: ``sign(x) * max(|x| - tau, 0)`` (elementwise)."""
    if np.any(np.asarray(tau) < 0):
        raise ValueError("soft_threshold: tau must be non-negative")
    r = np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)
    return float(r) if np.ndim(r) == 0 else r


def objective(target: np.ndarray, coeffs: np.ndarray, atoms: np.ndarray, lam: float) -> float:
    resid = target - coeffs @ atoms
    return 0.5 * float(np.sum(resid * resid)) + lam * float(np.sum(np.abs(coeffs)))


def lipschitz(atoms: np.ndarray, iters: int = 50, tol: float = 1e-6) -> float:
    """Largest eigenvalue of ``D D^T`` by power iteration."""
    gram = atoms @ atoms.T
    v = np.ones(gram.shape[0]) / math.sqrt(gram.shape[0])
    est = 0.0
    for _ in range(iters):
        w = gram @ v
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        new = float(v @ gram @ v)
        if abs(new - est) <= tol * max(abs(new), 1e-300):
            est = new
            break
        est = new
    return est


def ista_coefficients(target: np.ndarray, atoms: np.ndarray, cfg: SparseCodingConfig,
                      init: Optional[np.ndarray] = None, lam: Optional[float] = None,
                      trace: Optional[list] = None) -> np.ndarray:
    """Plain (non-accelerated) ISTA for the coefficients with the dictionary fixed.

    Returns the coefficient matrix [n, m]. The objective never increases: if a step
    would raise it (power iteration underestimating the Lipschitz constant), the step
    size is halved and the step retried.
    """
    target = np.asarray(target, dtype=np.float64)
    atoms = np.asarray(atoms, dtype=np.float64)
    if atoms.ndim != 2 or target.ndim != 2 or atoms.shape[1] != target.shape[1]:
        raise SparseCodingError(
            f"dictionary {atoms.shape} incompatible with target {target.shape}"
        )
    lam = cfg.resolve_lam(target) if lam is None else lam
    L = lipschitz(atoms, cfg.power_iters, cfg.power_tol)
    if L <= 0.0:
        raise SparseCodingError("zero dictionary: Lipschitz constant is 0")
    alpha = np.zeros((target.shape[0], atoms.shape[0])) if init is None else np.array(init, dtype=np.float64)
    f = objective(target, alpha, atoms, lam)
    if trace is not None:
        trace.append(f)
    for it in range(cfg.max_ista):
        while True:
            t = 1.0 / L
            grad = (alpha @ atoms - target) @ atoms.T
            cand = soft_threshold(alpha - t * grad, t * lam)
            if not np.all(np.isfinite(cand)):
                raise SparseCodingError(f"non-finite coefficients at ISTA iteration {it}")
            f_new = objective(target, cand, atoms, lam)
            if f_new <= f + _INCREASE_RTOL * abs(f):
                break
            L *= 2.0
        if cfg.check_monotone:
            assert f_new <= f + _INCREASE_RTOL * abs(f), f"objective increased at ISTA step {it}"
        alpha = cand
        change = abs(f - f_new) / max(abs(f), 1e-300)
        f = f_new
        if trace is not None:
            trace.append(f)
        if change < cfg.tol:
            break
    return alpha


def dictionary_update(target: np.ndarray, coeffs: np.ndarray, ridge: float
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Ridge least-squares dictionary for fixed coefficients, then unit-norm atoms.

    Returns ``(atoms, coeffs)``: each atom row is rescaled to unit Frobenius norm and
    its scale moved into the matching coefficient column, so ``coeffs @ atoms`` is
    unchanged. An atom whose norm falls below 1e-8 is re-seeded with the normalized
    residual row of largest norm and its coefficient column zeroed.
    """
    target = np.asarray(target, dtype=np.float64)
    coeffs = np.array(coeffs, dtype=np.float64)
    if coeffs.shape[0] != target.shape[0]:
        raise SparseCodingError(
            f"coefficients have {coeffs.shape[0]} rows, target has {target.shape[0]}"
        )
    m = coeffs.shape[1]
    normal = coeffs.T @ coeffs + ridge * np.eye(m)
    if ridge == 0.0 and np.linalg.matrix_rank(normal) < m:
        raise SparseCodingError("singular normal matrix; use ridge > 0")
    try:
        atoms = np.linalg.solve(normal, coeffs.T @ target)
    except np.linalg.LinAlgError as exc:
        raise SparseCodingError("singular normal matrix; use ridge > 0") from exc
    norms = np.linalg.norm(atoms, axis=1)
    dead = norms < 1e-8
    live = ~dead
    atoms[live] /= norms[live, None]
    coeffs[:, live] *= norms[live]
    if np.any(dead):
        coeffs[:, dead] = 0.0
        resid = target - coeffs @ atoms
        order = np.argsort(-np.linalg.norm(resid, axis=1), kind="stable")
        for slot, row in zip(np.flatnonzero(dead), order):
            r = resid[row]
            nrm = np.linalg.norm(r)
            if nrm < 1e-12:
                r = np.zeros(atoms.shape[1])
                r[slot % atoms.shape[1]] = 1.0
                nrm = 1.0
            atoms[slot] = r / nrm
    return atoms, coeffs


def init_dictionary(target: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """m target rows sampled without replacement, unit-normalized; random rows fill any shortfall."""
    n, d = target.shape
    picks = rng.choice(n, size=min(m, n), replace=False)
    atoms = np.array(target[picks], dtype=np.float64)
    if m > n:
        atoms = np.vstack([atoms, rng.standard_normal((m - n, d))])
    norms = np.linalg.norm(atoms, axis=1)
    for l in np.flatnonzero(norms < 1e-12):
        atoms[l] = rng.standard_normal(d)
        norms[l] = np.linalg.norm(atoms[l])
    return atoms / norms[:, None]


def decompose(weights: np.ndarray, m: int, cfg: Optional[SparseCodingConfig] = None,
              seed: int = 0) -> tuple[np.ndarray, np.ndarray, DecompositionReport]:
    """Factor ``weights`` [n, d] into coefficients [n, m] and unit-norm atoms [m, d].

    Alternates :func:`ista_coefficients` (warm-started) and :func:`dictionary_update`.
    A dictionary update that would raise the penalized objective is rejected, which
    keeps the per-round objective non-increasing. Non-convergence is reported, not raised.
    """
    cfg = cfg or SparseCodingConfig()
    target = np.asarray(weights, dtype=np.float64)
    if target.ndim != 2:
        raise SparseCodingError(f"weights must be a matrix [n, d], got {target.shape}")
    n, d = target.shape
    if m < 1 or m > n * d:
        raise SparseCodingError(f"m must be in [1, n*d={n * d}], got {m}")
    if not np.all(np.isfinite(target)):
        raise SparseCodingError("weights contain non-finite values")
    lam = cfg.resolve_lam(target)
    rng = np.random.default_rng(seed)
    atoms = init_dictionary(target, m, rng)
    alpha = None
    objectives: list[float] = []
    trace: list[float] = []
    ista_total = 0
    converged = False
    rounds = 0
    for rounds in range(1, cfg.max_outer + 1):
        start = len(trace)
        alpha = ista_coefficients(target, atoms, cfg, init=alpha, lam=lam, trace=trace)
        ista_total += len(trace) - start - 1
        f = objective(target, alpha, atoms, lam)
        if cfg.check_monotone and objectives:
            assert f <= objectives[-1] * (1 + _INCREASE_RTOL), f"objective increased in round {rounds}"
        objectives.append(f)
        if len(objectives) > 1:
            prev = objectives[-2]
            if abs(prev - f) / max(abs(prev), 1e-300) < cfg.tol:
                converged = True
                break
        if f == 0.0:
            converged = True
            break
        new_atoms, new_alpha = dictionary_update(target, alpha, cfg.ridge)
        if objective(target, new_alpha, new_atoms, lam) <= f:
            atoms, alpha = new_atoms, new_alpha
    resid = target - alpha @ atoms
    tnorm = float(np.linalg.norm(target))
    err = float(np.linalg.norm(resid)) / tnorm if tnorm > 0 else float(np.linalg.norm(resid))
    report = DecompositionReport(
        objectives=objectives, final_error=err, lam=lam, m=m,
        outer_iterations=rounds, ista_iterations=ista_total,
        converged=converged, seed=seed, ista_objectives=trace,
    )
    return alpha, atoms, report
