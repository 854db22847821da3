"""Group iterative soft thresholding (GIST).

Each iteration computes the gradient proxy ``g``, a neighbour-weighted energy
``d_l = g_l^2 + beta * sum_{k ~ l} g_k^2``, normalizes it by its maximum, and
thresholds ``g`` with the spatially varying level ``s * alpha / d_bar`` before
projecting onto the box.  Elements inside clusters of large proxy values are
therefore shrunk less than isolated spikes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import ConfigError, SolverError

DENOM_GUARD = 1e-12


def soft_threshold(t, lam):
    """``max(|t| - lam, 0) * sign(t)``, componentwise."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ConfigError("threshold must be nonnegative")
    t = np.asarray(t, dtype=float)
    return np.sign(t) * np.maximum(np.abs(t) - lam, 0.0)


def spectral_norm(M, iters: int = 50, seed: int = 0, exact_limit: int = 2000) -> float:
    """``||M||_2``.

    Exact from the smaller Gram matrix when one dimension is at most
    ``exact_limit``; otherwise a power-iteration estimate, which may fall short
    of the true norm.
    """
    M = np.asarray(M, dtype=float)
    if min(M.shape) <= exact_limit:
        G = M @ M.T if M.shape[0] <= M.shape[1] else M.T @ M
        return float(np.sqrt(max(np.linalg.eigvalsh(G)[-1], 0.0))) if G.size else 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(M.shape[1])
    x /= np.linalg.norm(x)
    val = 0.0
    for _ in range(iters):
        y = M.T @ (M @ x)
        val = np.linalg.norm(y)
        if val == 0:
            return 0.0
        x = y / val
    return float(np.sqrt(val))


@dataclass(frozen=True)
class GistConfig:
    alpha: float = 1e-2
    beta: float = 0.5
    step: float | str = "auto"
    box: tuple = (-0.9, 10.0)  # bounds may be scalars or per-element arrays
    max_iters: int = 2000
    rel_change_tol: float = 1e-6
    disjoint: bool = False
    epsilon_disjoint: float = 1e-8
    relative_alpha: bool = False
    column_scaling: bool = False

    def __post_init__(self):
        lo, hi = self.box
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.beta < 0:
            raise ConfigError("beta must be nonnegative")
        if not (np.all(np.asarray(lo) <= 0) and np.all(np.asarray(hi) >= 0)):
            raise ConfigError(f"box {self.box} must contain zero")
        if self.rel_change_tol <= 0:
            raise ConfigError("rel_change_tol must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if self.step != "auto" and not float(self.step) > 0:
            raise ConfigError("step must be positive or 'auto'")
        if self.epsilon_disjoint <= 0:
            raise ConfigError("epsilon_disjoint must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "GistConfig":
        d = dict(d)
        if "box" in d:
            lo, hi = d["box"]
            d["box"] = (-np.inf if lo is None else float(lo), np.inf if hi is None else float(hi))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown GIST options: {sorted(unknown)}")
        return cls(**d)

    def resolve_alpha(self, M, Y):
        """Absolute regularization level(s) for the system ``(M, Y)``.

        With ``relative_alpha`` the level is ``alpha * ||M^T Y||_inf`` (per column
        of a 2-D ``Y``): the smallest level at which the zero vector is already a
        fixed point is ``||M^T Y||_inf``, so ``alpha`` becomes scale free.
        """
        if not self.relative_alpha:
            return self.alpha
        amax = np.abs(M.T @ Y).max(axis=0)
        return self.alpha * amax

    def resolve_step(self, M) -> float:
        if self.step == "auto":
            nrm = spectral_norm(M)
            if nrm == 0:
                raise SolverError("sensitivity matrix is zero")
            return 1.0 / nrm**2
        return float(self.step)


@dataclass
class GistState:
    A: np.ndarray
    g: np.ndarray | None = None
    d: np.ndarray | None = None
    d_bar: np.ndarray | None = None
    alpha_bar: np.ndarray | None = None
    iter: int = 0


def _weights(W, L: int, beta: float):
    if W is None or beta == 0:
        return None
    if W.shape != (L, L):
        raise ConfigError(f"adjacency must be {L}x{L}")
    return beta * sparse.csr_matrix(W)


def normalized_proxy(g, W) -> tuple[np.ndarray, np.ndarray]:
    """Generalized proxy ``d`` and its max-normalization ``d_bar``.

    ``W`` is the (already beta-scaled) neighbour weight matrix or ``None``.
    An all-zero proxy yields ``d_bar = 1`` everywhere.
    """
    g2 = g * g
    d = g2 if W is None else g2 + W @ g2
    dmax = d.max(axis=0) if d.size else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        d_bar = np.where(dmax > 0, d / np.where(dmax > 0, dmax, 1.0), 1.0)
    return d, d_bar


def disjoint_update(d_bar_list, epsilon: float = 1e-8):
    """Keep, per element, only the abundance with the largest normalized proxy.

    Ties go to the smallest abundance index.  Returns a list of new arrays.
    """
    D = np.array([np.asarray(d, dtype=float) for d in d_bar_list])
    if D.ndim != 2:
        raise ConfigError("all proxies must have the same length")
    winner = np.argmax(D, axis=0)
    out = np.full_like(D, float(epsilon))
    cols = np.arange(D.shape[1])
    out[winner, cols] = D[winner, cols]
    return list(out)


def gist_step(M, Y, state: GistState, config: GistConfig, W=None, step=None, alpha=None) -> GistState:
    """One GIST update; ``W`` is the unweighted element adjacency (or ``None``).

    With ``beta=0`` or no adjacency the threshold is the uniform ``s * alpha``
    (plain IST), except in disjoint mode where ``|g|^2`` still ranks abundances.

    ``Y`` and ``state.A`` may be 1-D, or 2-D with one column per abundance (used
    by the disjoint variant).  ``alpha`` overrides the resolved regularization.
    """
    s = config.resolve_step(M) if step is None else step
    alpha = config.resolve_alpha(M, Y) if alpha is None else alpha
    A = state.A
    L = A.shape[0]
    Wb = _weights(W, L, config.beta)
    g = A - s * (M.T @ (M @ A - Y))
    d, d_bar = normalized_proxy(g, Wb)
    if config.disjoint and g.ndim == 2:
        d_bar = np.array(disjoint_update(d_bar.T, config.epsilon_disjoint)).T
    elif Wb is None:
        # no grouping: uniform threshold, i.e. plain IST
        d_bar = np.ones_like(d_bar)
    alpha_bar = alpha / d_bar
    lo, hi = config.box
    A_new = np.clip(soft_threshold(g, s * alpha_bar), lo, hi)
    return GistState(A=A_new, g=g, d=d, d_bar=d_bar, alpha_bar=alpha_bar, iter=state.iter + 1)


@dataclass
class GistResult:
    A: np.ndarray
    log: list = field(default_factory=list)
    converged: bool = False
    step: float = 0.0

    def write_log(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "residual", "nnz", "rel_change"])
            for it, res, nnz, rc in self.log:
                w.writerow([it, f"{res:.17g}", nnz, f"{rc:.17g}"])


def gist_solve(M, Y, config: GistConfig, W=None, A0=None) -> GistResult:
    """Run GIST from ``A0`` (zero by default) until the relative change drops
    below ``config.rel_change_tol`` or ``config.max_iters`` is reached.

    The log holds ``(iter, ||M A - Y||, nnz(A), relative change)`` per iteration.
    With ``config.column_scaling`` the solve is delegated to
    :func:`gist_solve_scaled`.
    """
    M = np.asarray(M, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.shape[0] != M.shape[0]:
        raise ConfigError(f"Y has {Y.shape[0]} rows, M has {M.shape[0]}")
    if config.column_scaling:
        return gist_solve_scaled(M, Y, config, W=W, A0=A0)
    shape = (M.shape[1],) + Y.shape[1:]
    A = np.zeros(shape) if A0 is None else np.array(A0, dtype=float)
    if A.shape != shape:
        raise ConfigError(f"initial guess must have shape {shape}")
    lo, hi = config.box
    if np.any(A < lo) or np.any(A > hi):
        raise ConfigError("initial guess violates the box constraint")
    s = config.resolve_step(M)
    alpha = config.resolve_alpha(M, Y)
    state = GistState(A=A)
    log = []
    converged = False
    for it in range(1, config.max_iters + 1):
        prev = state.A
        state = gist_step(M, Y, state, config, W=W, step=s, alpha=alpha)
        if not np.all(np.isfinite(state.A)):
            raise SolverError(f"non-finite iterate at iteration {it}")
        change = np.linalg.norm(state.A - prev) / max(np.linalg.norm(prev), DENOM_GUARD)
        res = float(np.linalg.norm(M @ state.A - Y))
        log.append((it, res, int(np.count_nonzero(state.A)), float(change)))
        if change < config.rel_change_tol:
            converged = True
            break
    return GistResult(A=state.A, log=log, converged=converged, step=s)


def with_options(config: GistConfig, **kw) -> GistConfig:
    return replace(config, **kw)


def column_scales(M) -> np.ndarray:
    """Euclidean norms of the columns of ``M`` (zero columns get scale 1)."""
    D = np.linalg.norm(np.asarray(M, dtype=float), axis=0)
    return np.where(D > 0, D, 1.0)


def gist_solve_scaled(M, Y, config: GistConfig, W=None, A0=None) -> GistResult:
    """GIST on the column-normalized system ``(M D^-1) B = Y`` with ``A = D^-1 B``.

    ``D`` holds the column norms of ``M``.  Normalizing keeps the few elements
    next to electrode edges, whose sensitivities dominate the raw matrix, from
    setting the threshold scale for the whole domain.  The box in ``config``
    applies to ``A`` and is mapped element-wise onto ``B``.  The returned
    result holds ``A``; its log refers to the normalized system.
    """
    M = np.asarray(M, dtype=float)
    D = column_scales(M)
    Dc = D if np.ndim(Y) == 1 else D[:, None]
    lo, hi = config.box
    box = (np.broadcast_to(lo, np.shape(Dc)) * Dc, np.broadcast_to(hi, np.shape(Dc)) * Dc)
    # infinite bounds stay infinite; 0 * inf cannot occur because D > 0
    B0 = None if A0 is None else np.asarray(A0, dtype=float) * Dc
    res = gist_solve(M / D, Y, replace(config, box=box, column_scaling=False), W=W, A0=B0)
    res.A = res.A / Dc
    return res
